"""Seeded synthetic review corpus with a known score-generating rule.

Each document mixes words from a positive and a negative pool; the
fraction p of positive draws is uniform on [0, 1] and the score is
``1 + 4p`` plus bounded uniform noise, clipped to [1, 5].
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ._io import atomic_write_bytes
from .errors import ConfigError

POSITIVE = (
    "good great excellent amazing love loved wonderful perfect best happy "
    "awesome fantastic superb pleased recommend sturdy reliable beautiful "
    "comfortable fast easy brilliant delighted favorite solid quality nice "
    "impressive flawless smooth works"
).split()
NEGATIVE = (
    "bad poor terrible awful hate hated broken worst useless disappointed "
    "cheap flimsy slow return refund waste junk defective horrible annoying "
    "faulty fails failed mediocre noisy leaking cracked unreliable wrong"
).split()

NOISE_BOUND = 0.2
MIN_TOKENS = 10
MAX_TOKENS = 50


def generate_documents(n_docs: int, seed: int, text_field: str = "reviewText", score_field: str = "overall"):
    """Yield (record dict, positive fraction p) pairs."""
    rng = np.random.default_rng(seed)
    pos = np.array(POSITIVE)
    neg = np.array(NEGATIVE)
    for i in range(n_docs):
        p = float(rng.random())
        n_tok = int(rng.integers(MIN_TOKENS, MAX_TOKENS + 1))
        is_pos = rng.random(n_tok) < p
        words = np.where(is_pos, pos[rng.integers(0, len(pos), n_tok)], neg[rng.integers(0, len(neg), n_tok)])
        noise = float(rng.uniform(-NOISE_BOUND, NOISE_BOUND))
        score = min(5.0, max(1.0, 1.0 + 4.0 * p + noise))
        yield {"id": f"synth-{i}", text_field: " ".join(words), score_field: round(score, 6)}, p


def generate_synthetic_corpus(n_docs: int, seed: int, out_path, text_field="reviewText", score_field="overall") -> dict:
    """Write ``n_docs`` JSON lines to ``out_path``; returns the ground-truth summary."""
    if n_docs < 10:
        raise ConfigError(f"synthetic corpus needs n_docs >= 10, got {n_docs}")
    out_path = Path(out_path)
    lines = []
    fractions = []
    for rec, p in generate_documents(n_docs, seed, text_field, score_field):
        lines.append(json.dumps(rec, sort_keys=True))
        fractions.append(p)
    atomic_write_bytes(out_path, ("\n".join(lines) + "\n").encode("utf-8"), fsync=False)
    return {
        "path": str(out_path),
        "n_docs": n_docs,
        "seed": seed,
        "positive_pool": len(POSITIVE),
        "negative_pool": len(NEGATIVE),
        "mixing": "uniform(0,1)",
        "score_rule": "clip(1 + 4*p + uniform(-%g, %g), 1, 5)" % (NOISE_BOUND, NOISE_BOUND),
        "tokens_per_doc": [MIN_TOKENS, MAX_TOKENS],
        "mean_mixing_fraction": float(np.mean(fractions)),
    }
