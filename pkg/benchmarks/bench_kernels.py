"""Compare the numba kernels against the pure-numpy fallback.

The backend is fixed at import time, so each one runs in its own
subprocess (``DOCSCORE_NO_NUMBA=1`` for the fallback). Workloads are kept
small because the fallback runs the kernel loops in the interpreter.

    python3 benchmarks/bench_kernels.py --docs 200 --repeat 3
"""
import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
from docscore import BACKEND
from docscore.corpus import TokenizedDocument
from docscore.embedding import Hyperparameters, encode_corpus, infer_vector, train_paragraph_vectors
from docscore.regression import RegressionParams, fit_regressor
from docscore.synth import generate_documents
from docscore.tsdb import rolling_bands

n_docs, repeat = int(sys.argv[1]), int(sys.argv[2])
docs = [TokenizedDocument(i, rec["reviewText"].split(), rec["overall"])
        for i, (rec, _) in enumerate(generate_documents(n_docs, 1))]
vocab, enc = encode_corpus(docs, 1)
hp = Hyperparameters(dim=32, epochs=1, min_count=1, seed=1)
rng = np.random.default_rng(0)
x = rng.normal(size=(n_docs * 5, 32))
y = x @ rng.normal(size=32) + 3.0
series = rng.normal(3, 1, 50_000)


def best(fn):
    fn()  # first call pays for compilation or caching
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


model = train_paragraph_vectors((vocab, enc), hp)
out = {
    "backend": BACKEND,
    "train_epoch": best(lambda: train_paragraph_vectors((vocab, enc), hp)),
    "infer_20": best(lambda: [infer_vector(model, d.tokens, steps=20) for d in docs[:20]]),
    "fit_squared": best(lambda: fit_regressor(x, y, "squared", RegressionParams(epochs=5))),
    "fit_svr": best(lambda: fit_regressor(x, y, "epsilon_insensitive", RegressionParams(epochs=5))),
    "bands_50k": best(lambda: rolling_bands(series, 20, 2.0)),
}
print(json.dumps(out))
"""


def run_backend(no_numba: bool, n_docs: int, repeat: int) -> dict:
    env = dict(os.environ)
    if no_numba:
        env["DOCSCORE_NO_NUMBA"] = "1"
    else:
        env.pop("DOCSCORE_NO_NUMBA", None)
    proc = subprocess.run(
        [sys.executable, "-c", WORKER, str(n_docs), str(repeat)],
        env=env, capture_output=True, text=True, check=True,
    )
    return json.loads(proc.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--docs", type=int, default=200, help="synthetic documents in the training workload")
    ap.add_argument("--repeat", type=int, default=3, help="timed repetitions; the best is kept")
    ap.add_argument("--json", action="store_true", help="print raw results as JSON")
    args = ap.parse_args(argv)

    fast = run_backend(False, args.docs, args.repeat)
    slow = run_backend(True, args.docs, args.repeat)
    if args.json:
        print(json.dumps({"numba": fast, "numpy": slow}, indent=2))
        return
    if fast["backend"] != "numba":
        print("numba is not importable; both columns are the numpy fallback")
    print(f"{'kernel':<14}{'numba s':>12}{'numpy s':>12}{'speedup':>10}")
    for key in ("train_epoch", "infer_20", "fit_squared", "fit_svr", "bands_50k"):
        a, b = fast[key], slow[key]
        print(f"{key:<14}{a:>12.4f}{b:>12.4f}{b / a:>9.1f}x")


if __name__ == "__main__":
    main()
