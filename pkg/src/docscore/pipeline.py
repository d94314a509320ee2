"""Offline train-and-persist flow and the online serving entry point.

Artifacts (under ``artifacts_dir``)::

    docvec.rrpv               paragraph vector model
    regressor.<kind>.rrml     one per regression kind (linear, svr)
    MANIFEST                  JSON: sha256 per artifact, config digest, timestamp

All files are staged and moved into place with ``os.replace``; MANIFEST
goes last. Readers verify every checksum against MANIFEST, so a reader
racing a retrain either sees a consistent set or retries.
"""
from __future__ import annotations

import hashlib
import json
import logging
import signal
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import _kernels
from ._accel import BACKEND
from ._io import atomic_write_bytes
from .alerts import AlertEvaluator, FileSink, WebhookSink
from .broker import Broker
from .corpus import CorpusIterator
from .embedding import _pack_model, encode_corpus, infer_vector, model_from_bytes, train_paragraph_vectors
from .errors import ConfigError, IntegrityError
from .regression import (
    _pack as _pack_regressor,
    evaluate_r_squared,
    fit_regressor,
    regressor_from_bytes,
    train_test_split,
)
from .stream import StreamEngine
from .tsdb import TSDB, serve_http

log = logging.getLogger(__name__)

MIN_DOCUMENTS = 10
DOCVEC_FILE = "docvec.rrpv"
MANIFEST_FILE = "MANIFEST"


def regressor_file(kind: str) -> str:
    return f"regressor.{kind}.rrml"


@dataclass
class OfflineRunReport:
    corpus: dict
    embedding: dict
    evaluations: dict
    artifacts: dict
    phase_seconds: dict
    config_digest: str
    backend: str = ""
    report_path: Optional[str] = None

    def as_dict(self) -> dict:
        return asdict(self)

    @property
    def embedding_seconds(self) -> float:
        return self.phase_seconds["train_embedding"]

    @property
    def regression_seconds(self) -> float:
        return self.phase_seconds["fit_regressors"]


class _Phases:
    def __init__(self):
        self.seconds = {}

    def __call__(self, name):
        phases = self

        class _Timer:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                phases.seconds[name] = phases.seconds.get(name, 0.0) + time.perf_counter() - self.t0

        return _Timer()


def warmup_kernels() -> None:
    """Trigger (or load cached) compilation so phase timings measure work, not JIT."""
    from .embedding import Hyperparameters, Vocabulary, EncodedCorpus

    vocab = Vocabulary(["a", "b"], [2, 1])
    enc = EncodedCorpus(np.array([0, 1, 0], dtype=np.int32), np.array([0, 3], dtype=np.int64))
    model = train_paragraph_vectors((vocab, enc), Hyperparameters(dim=2, epochs=1, min_count=1))
    infer_vector(model, ["a", "b"], steps=1)
    fit_regressor(np.array([[0.0], [1.0], [2.0]]), np.array([1.0, 2.0, 3.0]), "squared")
    fit_regressor(np.array([[0.0], [1.0], [2.0]]), np.array([1.0, 2.0, 3.0]), "epsilon_insensitive")
    _kernels.rolling_mean_std(np.arange(3.0), 2)


def run_offline(cfg, on_epoch: Optional[Callable[[dict], None]] = None) -> OfflineRunReport:
    """Two corpus passes, embedding training, regression fit + held-out R^2, persisted artifacts."""
    phases = _Phases()
    mapping = cfg.field_mapping()
    hp = cfg.embedding_hp()
    hp.validate()
    with phases("jit_warmup"):
        warmup_kernels()

    corpus = CorpusIterator(cfg.corpus.train_path, mapping)
    with phases("pass1_build_corpus"):
        vocab, enc = encode_corpus(corpus, hp.min_count)
    pass1_counts = corpus.counts.as_dict()
    if enc.n_docs < MIN_DOCUMENTS:
        raise ConfigError(f"{cfg.corpus.train_path}: {enc.n_docs} admissible documents, need >= {MIN_DOCUMENTS}")

    with phases("train_embedding"):
        docvec = train_paragraph_vectors((vocab, enc), hp, on_epoch)

    with phases("pass2_collect_scores"):
        scores = np.array([np.nan if d.score is None else d.score for d in corpus], dtype=np.float64)
    if len(scores) != enc.n_docs:
        raise ConfigError(f"{cfg.corpus.train_path} changed between passes ({enc.n_docs} vs {len(scores)} documents)")

    labeled = np.flatnonzero(~np.isnan(scores))
    if len(labeled) < MIN_DOCUMENTS:
        raise ConfigError(f"{len(labeled)} labeled documents, need >= {MIN_DOCUMENTS}")
    x_docvecs = docvec.doc_vecs[labeled].astype(np.float64)
    y_scores = scores[labeled]
    train_idx, test_idx = train_test_split(len(labeled), cfg.seed, cfg.regression.test_fraction)

    params = cfg.regression_params()
    regressors = {}
    with phases("fit_regressors"):
        for kind in cfg.regression.kinds:
            regressors[kind] = fit_regressor(x_docvecs[train_idx], y_scores[train_idx], kind, params)
    evaluations = {}
    with phases("evaluate"):
        for kind, model in regressors.items():
            pred = model.predict(x_docvecs[test_idx])
            evaluations[kind] = evaluate_r_squared(y_scores[test_idx], pred, kind, cfg.seed).as_dict()

    with phases("persist"):
        artifacts = write_artifacts(cfg.artifacts_dir, docvec, regressors, cfg.digest())

    report = OfflineRunReport(
        corpus={**pass1_counts, "documents": enc.n_docs, "labeled": int(len(labeled)),
                "tokens": int(len(enc.tokens)), "vocabulary": len(vocab),
                "n_train": int(len(train_idx)), "n_test": int(len(test_idx))},
        embedding={"epoch_losses": docvec.epoch_losses, "hyperparameters": asdict(hp)},
        evaluations=evaluations,
        artifacts=artifacts,
        phase_seconds={k: round(v, 6) for k, v in phases.seconds.items()},
        config_digest=cfg.digest(),
        backend=BACKEND,
    )
    report_path = Path(cfg.report_path or Path(cfg.artifacts_dir) / "report.json")
    report.report_path = str(report_path)
    atomic_write_bytes(report_path, json.dumps(report.as_dict(), indent=2, sort_keys=True).encode(), fsync=False)
    return report


def write_artifacts(artifacts_dir, docvec, regressors: dict, config_digest: str) -> dict:
    """Persist all models then MANIFEST; returns {file name: sha256}."""
    out = Path(artifacts_dir)
    out.mkdir(parents=True, exist_ok=True)
    blobs = {DOCVEC_FILE: _pack_model(docvec)}
    for kind, model in regressors.items():
        blobs[regressor_file(kind)] = _pack_regressor(model)
    sums = {name: hashlib.sha256(data).hexdigest() for name, data in blobs.items()}
    for name, data in blobs.items():
        atomic_write_bytes(out / name, data)
    manifest = {"artifacts": sums, "config_digest": config_digest, "created_at": int(time.time() * 1000)}
    atomic_write_bytes(out / MANIFEST_FILE, json.dumps(manifest, indent=2, sort_keys=True).encode())
    return {name: {"path": str(out / name), "sha256": s} for name, s in sums.items()}


def load_artifacts(artifacts_dir, kind: str = "linear", attempts: int = 5):
    """Load (docvec, regressor, combined checksum) after verifying MANIFEST checksums.

    A mismatch can mean a retrain is mid-swap, so it is retried briefly
    before being reported as an integrity error.
    """
    root = Path(artifacts_dir)
    names = [DOCVEC_FILE, regressor_file(kind)]
    last_error = None
    for attempt in range(attempts):
        try:
            manifest = json.loads((root / MANIFEST_FILE).read_text())
            sums = manifest["artifacts"]
        except FileNotFoundError:
            raise IntegrityError(f"missing artifact manifest {root / MANIFEST_FILE}") from None
        except (ValueError, KeyError) as exc:
            last_error = IntegrityError(f"unreadable manifest {root / MANIFEST_FILE}: {exc}")
            time.sleep(0.05 * (attempt + 1))
            continue
        blobs = {}
        for name in names:
            path = root / name
            if name not in sums:
                raise IntegrityError(f"{path}: not listed in manifest (was '{kind}' trained?)")
            try:
                blobs[name] = path.read_bytes()
            except FileNotFoundError:
                raise IntegrityError(f"missing artifact {path}") from None
        bad = [n for n in names if hashlib.sha256(blobs[n]).hexdigest() != sums[n]]
        if bad:
            last_error = IntegrityError(f"checksum mismatch for {', '.join(str(root / n) for n in bad)}")
            time.sleep(0.05 * (attempt + 1))
            continue
        docvec = model_from_bytes(blobs[DOCVEC_FILE], root / DOCVEC_FILE)
        ml = regressor_from_bytes(blobs[names[1]], root / names[1])
        checksum = hashlib.sha256((sums[DOCVEC_FILE] + sums[names[1]]).encode()).hexdigest()
        return docvec, ml, checksum
    raise last_error


def evaluate_corpus(cfg, path, kinds=None) -> dict:
    """Score a labeled corpus against saved models via inferred vectors; {kind: report dict}."""
    kinds = kinds or cfg.regression.kinds
    corpus = CorpusIterator(path, cfg.field_mapping())
    out = {}
    docvec = None
    vectors, scores = None, None
    for kind in kinds:
        dv, ml, _ = load_artifacts(cfg.artifacts_dir, kind)
        if docvec is None:
            docvec = dv
            vectors, scores = [], []
            for doc in corpus:
                if doc.score is None:
                    continue
                vectors.append(infer_vector(docvec, doc.tokens).vector)
                scores.append(doc.score)
            if len(scores) < 2:
                raise ConfigError(f"{path}: need at least 2 labeled documents to evaluate")
        pred = ml.predict(np.array(vectors, dtype=np.float64))
        out[kind] = evaluate_r_squared(scores, pred, kind).as_dict()
    return out


def build_alerts(cfg) -> Optional[AlertEvaluator]:
    rules = cfg.alert_rules()
    if not rules:
        return None
    sinks = []
    if cfg.alerts.log_path is not None:
        sinks.append(FileSink(cfg.alerts.log_path))
    if cfg.alerts.webhook:
        sinks.append(WebhookSink(cfg.alerts.webhook, retries=cfg.alerts.webhook_retries))
    return AlertEvaluator(rules, sinks)


def build_engine(cfg, broker=None, tsdb=None, **engine_kwargs) -> StreamEngine:
    """Load artifacts (refusing to start on any integrity problem) and wire up an engine."""
    kind = cfg.regression.serve_kind
    docvec, ml, checksum = load_artifacts(cfg.artifacts_dir, kind)
    broker = broker or Broker(cfg.broker.data_dir, fsync=cfg.broker.fsync)
    tsdb = tsdb or TSDB(cfg.tsdb.data_dir, fsync=cfg.tsdb.fsync)
    return StreamEngine(
        docvec, ml, broker, tsdb, cfg.stream_settings(),
        alerts=build_alerts(cfg),
        loader=lambda: load_artifacts(cfg.artifacts_dir, kind),
        model_checksum=checksum,
        **engine_kwargs,
    )


def run_online(cfg, stop_event: Optional[threading.Event] = None, max_batches: Optional[int] = None) -> dict:
    """Serve until SIGINT/SIGTERM, the stop file, or ``stop_event``; SIGHUP requests a model reload."""
    engine = build_engine(cfg)
    server = None
    if cfg.tsdb.http_port is not None:
        server = serve_http(engine.tsdb, port=cfg.tsdb.http_port)
        log.info("tsdb endpoint on %s:%d", *server.server_address)
    previous = {}
    if threading.current_thread() is threading.main_thread():
        for sig in (signal.SIGINT, signal.SIGTERM):
            previous[sig] = signal.signal(sig, lambda *_: engine.request_stop())
        previous[signal.SIGHUP] = signal.signal(signal.SIGHUP, lambda *_: engine.request_reload())
    watcher = None
    if stop_event is not None:
        watcher = threading.Thread(target=lambda: (stop_event.wait(), engine.request_stop()), daemon=True)
        watcher.start()
    try:
        summary = engine.run(max_batches=max_batches)
    finally:
        for sig, handler in previous.items():
            signal.signal(sig, handler)
        if server is not None:
            server.shutdown()
        engine.tsdb.close()
        engine.broker.close()
    summary["model_checksum"] = engine.model_checksum
    return summary
