import json
from pathlib import Path

import numpy as np
import pytest

from docscore.config import config_from_dict
from docscore.synth import generate_synthetic_corpus


def write_jsonl(path: Path, records) -> Path:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write((rec if isinstance(rec, str) else json.dumps(rec)) + "\n")
    return path


def small_config(tmp_path: Path, corpus: Path, **overrides) -> "PipelineConfig":  # noqa: F821
    raw = {
        "corpus": {"train_path": str(corpus)},
        "seed": 3,
        "embedding": {"dim": 16, "epochs": 5, "min_count": 1, "infer_steps": 10},
        "regression": {"epochs": 20},
        "broker": {"fsync": False},
        "tsdb": {"fsync": False},
        "stream": {"batch_wait_ms": 50},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(raw.get(key), dict):
            raw[key] = {**raw[key], **value}
        else:
            raw[key] = value
    return config_from_dict(raw, tmp_path)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def synth_corpus(tmp_path_factory):
    path = tmp_path_factory.mktemp("corpus") / "train.jsonl"
    generate_synthetic_corpus(300, 5, path)
    return path


@pytest.fixture(scope="session")
def trained_dir(tmp_path_factory, synth_corpus):
    """A trained artifact set shared by the serving tests (read-only)."""
    from docscore.pipeline import run_offline

    root = tmp_path_factory.mktemp("trained")
    cfg = small_config(root, synth_corpus)
    report = run_offline(cfg)
    return root, cfg, report
