"""Linear regression and linear SVR on document vectors, fit by SGD.

Both minimise ``mean(loss(beta . z + c - y)) + l2_lambda/2 * |beta|^2`` over
standardized features ``z``; squared loss is ``r^2 / 2``, the SVR loss is
``max(0, |r| - epsilon)``.
"""
from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import _kernels
from ._io import atomic_write_bytes, check_container
from .errors import ConfigError, CorruptionError, DivergenceError, IntegrityError

MAGIC = b"RRML"
FORMAT_VERSION = 1

LOSS_KINDS = {"squared": _kernels.SQUARED, "epsilon_insensitive": _kernels.EPSILON_INSENSITIVE}
# short names used in artifact file names and reports
KIND_NAMES = {"linear": "squared", "svr": "epsilon_insensitive"}


@dataclass(frozen=True)
class RegressionParams:
    epsilon: float = 0.1
    l2_lambda: float = 1e-4
    epochs: int = 50
    lr: float = 0.01
    seed: int = 0
    # scale each input vector to unit L2 norm before standardizing; makes the
    # fit insensitive to how long a document vector was trained or inferred
    unit_norm: bool = False


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray
    zero_variance: np.ndarray

    def transform(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return (x - self.mean) / self.std


def unit_rows(x) -> np.ndarray:
    """Rows scaled to unit L2 norm; all-zero rows stay zero."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(norms == 0.0, 1.0, norms)


def standardize(features) -> tuple:
    """Fit per-dimension (mean, population std); constant columns keep std=1."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ConfigError(f"standardize needs a K x D matrix with K >= 2, got shape {x.shape}")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    flat = std == 0.0
    std = np.where(flat, 1.0, std)
    st = Standardizer(mean, std, flat)
    return st, st.transform(x)


@dataclass
class RegressionModel:
    beta: np.ndarray
    bias: float
    loss_kind: str
    standardizer: Standardizer
    params: RegressionParams = field(default_factory=RegressionParams)
    epoch_losses: list = field(default_factory=list)

    @property
    def dim(self) -> int:
        return len(self.beta)

    @property
    def name(self) -> str:
        return {v: k for k, v in KIND_NAMES.items()}[self.loss_kind]

    def predict(self, vectors, clip: Optional[tuple] = None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
        if x.shape[1] != self.dim:
            raise ValueError(f"vector dimension {x.shape[1]} does not match model dimension {self.dim}")
        if self.params.unit_norm:
            x = unit_rows(x)
        out = self.standardizer.transform(x) @ self.beta + self.bias
        if clip is not None:
            out = np.clip(out, clip[0], clip[1])
        return out

    def __eq__(self, other):
        if not isinstance(other, RegressionModel):
            return NotImplemented
        return (
            self.loss_kind == other.loss_kind
            and self.params == other.params
            and self.bias == other.bias
            and self.epoch_losses == other.epoch_losses
            and np.array_equal(self.beta, other.beta)
            and np.array_equal(self.standardizer.mean, other.standardizer.mean)
            and np.array_equal(self.standardizer.std, other.standardizer.std)
            and np.array_equal(self.standardizer.zero_variance, other.standardizer.zero_variance)
        )


def fit_regressor(x, y, loss_kind: str = "squared", params: RegressionParams = RegressionParams()) -> RegressionModel:
    """Fit on raw features ``x`` (standardized internally) and targets ``y``.

    The bias starts at mean(y) and beta at zero; samples are visited in a
    fresh seeded permutation each epoch.
    """
    loss_kind = KIND_NAMES.get(loss_kind, loss_kind)
    if loss_kind not in LOSS_KINDS:
        raise ConfigError(f"unknown loss kind {loss_kind!r}; expected one of {sorted(LOSS_KINDS)}")
    y = np.asarray(y, dtype=np.float64)
    st, z = standardize(unit_rows(x) if params.unit_norm else x)
    if len(y) != z.shape[0]:
        raise ConfigError(f"{z.shape[0]} feature rows but {len(y)} targets")
    if params.epochs < 1:
        raise ConfigError("regression epochs must be >= 1")
    rng = np.random.default_rng(params.seed)
    order = np.stack([rng.permutation(len(y)) for _ in range(params.epochs)])
    beta = np.zeros(z.shape[1])
    bias, losses = _kernels.sgd_regression(
        z, y, beta, float(y.mean()), order, LOSS_KINDS[loss_kind],
        float(params.epsilon), float(params.l2_lambda), float(params.lr),
    )
    losses = [float(v) for v in losses]
    if len(losses) < params.epochs or not math.isfinite(losses[-1]):
        raise DivergenceError(
            f"{loss_kind} regression diverged in epoch {len(losses) - 1}",
            last_good_epoch=len(losses) - 2 if len(losses) > 1 else None,
        )
    return RegressionModel(beta, float(bias), loss_kind, st, params, losses)


def predict_score(model: RegressionModel, vector, clip: Optional[tuple] = None) -> float:
    vector = np.asarray(vector, dtype=np.float64)
    if vector.ndim != 1:
        raise ValueError("predict_score takes a single vector")
    return float(model.predict(vector, clip)[0])


def objective_and_grad(model_beta, bias, z, y, loss_kind, epsilon=0.1, l2_lambda=0.0):
    """Regularized empirical risk on standardized ``z`` and its gradient (d/dbeta, d/dbias)."""
    kind = LOSS_KINDS[KIND_NAMES.get(loss_kind, loss_kind)]
    grad = np.empty_like(np.asarray(model_beta, dtype=np.float64))
    obj, g_bias = _kernels.regression_objective(
        np.asarray(z, dtype=np.float64), np.asarray(y, dtype=np.float64),
        np.asarray(model_beta, dtype=np.float64), float(bias), kind, float(epsilon), float(l2_lambda), grad,
    )
    return float(obj), grad, float(g_bias)


@dataclass
class EvaluationReport:
    ss_tot: float
    ss_res: float
    r_squared: float
    n_test: int
    model: str = ""
    degenerate: bool = False
    split_seed: Optional[int] = None

    def as_dict(self) -> dict:
        return {
            "model": self.model,
            "r2": self.r_squared,
            "ss_tot": self.ss_tot,
            "ss_res": self.ss_res,
            "n_test": self.n_test,
            "split_seed": self.split_seed,
            "degenerate": self.degenerate,
        }


def evaluate_r_squared(y_true, y_pred, model: str = "", split_seed: Optional[int] = None) -> EvaluationReport:
    """Coefficient of determination with residual sum of squares.

    A constant ``y_true`` has no variance to explain: R^2 is reported as 0
    with ``degenerate`` set.
    """
    yt = np.asarray(y_true, dtype=np.float64)
    yp = np.asarray(y_pred, dtype=np.float64)
    if yt.shape != yp.shape or yt.ndim != 1 or len(yt) < 2:
        raise ValueError(f"need two equal-length 1-d sequences of length >= 2, got {yt.shape} and {yp.shape}")
    centre = yt.mean()
    ss_tot = float(np.sum((yt - centre) ** 2))
    ss_res = float(np.sum((yt - yp) ** 2))
    if ss_tot == 0.0:
        return EvaluationReport(ss_tot, ss_res, 0.0, len(yt), model, True, split_seed)
    return EvaluationReport(ss_tot, ss_res, 1.0 - ss_res / ss_tot, len(yt), model, False, split_seed)


def train_test_split(n: int, seed: int, test_fraction: float = 0.2) -> tuple:
    """Seeded shuffle; returns (train indices, test indices)."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must be in (0, 1), got {test_fraction}")
    perm = np.random.default_rng(seed).permutation(n)
    n_test = max(2, int(round(n * test_fraction)))
    if n - n_test < 2:
        raise ConfigError(f"{n} documents are too few to split")
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


# ---- persistence -----------------------------------------------------------


def _pack(model: RegressionModel) -> bytes:
    p = model.params
    header = json.dumps(
        {
            "loss_kind": model.loss_kind,
            "dim": model.dim,
            "params": {"epsilon": p.epsilon, "l2_lambda": p.l2_lambda, "epochs": p.epochs, "lr": p.lr, "seed": p.seed, "unit_norm": p.unit_norm},
            "epoch_losses": model.epoch_losses,
        },
        sort_keys=True,
    ).encode("utf-8")
    st = model.standardizer
    body = b"".join(
        [
            MAGIC,
            struct.pack("<II", FORMAT_VERSION, len(header)),
            header,
            np.ascontiguousarray(st.mean, dtype="<f8").tobytes(),
            np.ascontiguousarray(st.std, dtype="<f8").tobytes(),
            np.ascontiguousarray(st.zero_variance, dtype="u1").tobytes(),
            np.ascontiguousarray(model.beta, dtype="<f8").tobytes(),
            struct.pack("<d", model.bias),
        ]
    )
    return body + struct.pack("<I", zlib.crc32(body))


def persist_regressor(model: RegressionModel, path) -> Path:
    path = Path(path)
    atomic_write_bytes(path, _pack(model))
    return path


def load_regressor(path) -> RegressionModel:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise IntegrityError(f"cannot read model file {path}: {exc}") from exc
    return regressor_from_bytes(data, path)


def regressor_from_bytes(data: bytes, path="<bytes>") -> RegressionModel:
    check_container(data, MAGIC, FORMAT_VERSION, path)
    try:
        (hlen,) = struct.unpack_from("<I", data, 8)
        pos = 12
        meta = json.loads(data[pos : pos + hlen].decode("utf-8"))
        pos += hlen
        D = meta["dim"]
        expected = pos + D * 8 * 3 + D + 8 + 4
        if expected != len(data):
            raise CorruptionError(f"{path}: size {len(data)} does not match header (expected {expected})")
        mean = np.frombuffer(data, "<f8", D, pos).astype(np.float64)
        pos += 8 * D
        std = np.frombuffer(data, "<f8", D, pos).astype(np.float64)
        pos += 8 * D
        flat = np.frombuffer(data, "u1", D, pos).astype(bool)
        pos += D
        beta = np.frombuffer(data, "<f8", D, pos).astype(np.float64)
        pos += 8 * D
        (bias,) = struct.unpack_from("<d", data, pos)
        params = RegressionParams(**meta["params"])
    except (struct.error, KeyError, TypeError, ValueError, UnicodeDecodeError) as exc:
        raise CorruptionError(f"{path}: malformed regressor file: {exc}") from exc
    return RegressionModel(
        beta, bias, meta["loss_kind"], Standardizer(mean, std, flat), params, [float(v) for v in meta["epoch_losses"]]
    )
