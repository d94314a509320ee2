"""Paragraph vectors (PV-DM, mean combination, negative sampling).

Training and inference both run through :func:`docscore._kernels.pvdm_epoch`.
Matrices are float32 throughout so a saved model reloads bit-for-bit.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
import zlib
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np

from . import _kernels
from ._io import atomic_write_bytes, check_container
from .errors import ConfigError, CorruptionError, DivergenceError, IntegrityError

log = logging.getLogger(__name__)

MAGIC = b"RRPV"
FORMAT_VERSION = 1
# tokens per kernel call; bounds the size of the per-epoch noise draw buffers
CHUNK_TOKENS = 1 << 20


@dataclass(frozen=True)
class Hyperparameters:
    dim: int = 100
    window: int = 5
    negatives: int = 5
    epochs: int = 10
    alpha_start: float = 0.025
    alpha_end: float = 0.0001
    min_count: int = 2
    seed: int = 1
    subsample_t: float = 0.0
    infer_steps: int = 50
    workers: int = 1

    def validate(self) -> None:
        if self.dim < 1:
            raise ConfigError(f"embedding dim must be >= 1, got {self.dim}")
        if self.epochs < 1:
            raise ConfigError(f"embedding epochs must be >= 1, got {self.epochs}")
        if self.window < 0 or self.negatives < 1 or self.min_count < 1:
            raise ConfigError("window >= 0, negatives >= 1, min_count >= 1 required")
        if self.infer_steps < 1 or self.workers < 1:
            raise ConfigError("infer_steps and workers must be >= 1")
        if not (self.alpha_start > 0 and self.alpha_end >= 0):
            raise ConfigError("learning rates must be positive")


@dataclass
class Vocabulary:
    """Token table ordered by count descending, ties broken lexicographically."""

    tokens: list
    counts: np.ndarray
    index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def from_counts(cls, counts, min_count: int = 1) -> "Vocabulary":
        kept = [(t, c) for t, c in counts.items() if c >= min_count]
        if not kept:
            raise ConfigError(
                f"empty vocabulary: no token occurs at least min_count={min_count} times "
                f"({len(counts)} distinct tokens seen)"
            )
        kept.sort(key=lambda tc: (-tc[1], tc[0]))
        return cls([t for t, _ in kept], [c for _, c in kept])

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def lookup(self, tokens) -> np.ndarray:
        """Vocabulary ids of in-vocabulary tokens, OOV dropped."""
        idx = self.index
        return np.array([idx[t] for t in tokens if t in idx], dtype=np.int32)

    def __eq__(self, other):
        return (
            isinstance(other, Vocabulary)
            and self.tokens == other.tokens
            and np.array_equal(self.counts, other.counts)
        )


def build_vocabulary(corpus: Iterable, min_count: int = 2) -> Vocabulary:
    counts = Counter()
    n = 0
    for doc in corpus:
        counts.update(doc.tokens)
        n += 1
    if n == 0:
        raise ConfigError("cannot build a vocabulary from an empty corpus")
    return Vocabulary.from_counts(counts, min_count)


def build_noise_table(vocab: Vocabulary) -> np.ndarray:
    """Noise distribution p(w) proportional to count(w)**0.75."""
    weights = vocab.counts.astype(np.float64) ** 0.75
    return weights / weights.sum()


@dataclass
class EncodedCorpus:
    """Documents as one flat id array; document d spans tokens[starts[d]:starts[d+1]]."""

    tokens: np.ndarray
    starts: np.ndarray

    @property
    def n_docs(self) -> int:
        return len(self.starts) - 1


def encode_corpus(corpus: Iterable, min_count: int) -> tuple:
    """Single pass: count tokens and store each document compactly.

    Tokens get provisional ids in first-seen order, remapped to vocabulary
    ids once counts are final. Returns (Vocabulary, EncodedCorpus).
    """
    provisional = {}
    counts = []
    chunks = []
    starts = [0]
    for doc in corpus:
        ids = np.empty(len(doc.tokens), dtype=np.int32)
        for j, tok in enumerate(doc.tokens):
            pid = provisional.get(tok)
            if pid is None:
                pid = provisional[tok] = len(counts)
                counts.append(0)
            counts[pid] += 1
            ids[j] = pid
        chunks.append(ids)
        starts.append(starts[-1] + len(ids))
    if not chunks:
        raise ConfigError("cannot build a vocabulary from an empty corpus")
    vocab = Vocabulary.from_counts(dict(zip(provisional, counts)), min_count)
    remap = np.full(len(counts), -1, dtype=np.int32)
    for tok, pid in provisional.items():
        remap[pid] = vocab.index.get(tok, -1)
    flat = remap[np.concatenate(chunks)]
    keep = flat >= 0
    owner = np.repeat(np.arange(len(chunks)), np.diff(starts))
    per_doc = np.bincount(owner[keep], minlength=len(chunks))
    new_starts = np.zeros(len(chunks) + 1, dtype=np.int64)
    np.cumsum(per_doc, out=new_starts[1:])
    return vocab, EncodedCorpus(flat[keep], new_starts)


@dataclass
class InferredVector:
    vector: np.ndarray
    degenerate: bool = False


@dataclass
class ParagraphVectorModel:
    vocab: Vocabulary
    word_in: np.ndarray
    word_out: np.ndarray
    doc_vecs: np.ndarray
    hp: Hyperparameters
    epoch_losses: list = field(default_factory=list)

    def __post_init__(self):
        self._noise_cum = None

    @property
    def dim(self) -> int:
        return self.hp.dim

    @property
    def noise(self) -> np.ndarray:
        return build_noise_table(self.vocab)

    def _cumulative_noise(self) -> np.ndarray:
        if self._noise_cum is None:
            cum = np.cumsum(self.noise)
            cum[-1] = 1.0
            self._noise_cum = cum
        return self._noise_cum

    def draw_negatives(self, rng: np.random.Generator, n: int) -> np.ndarray:
        u = rng.random((n, self.hp.negatives))
        return np.searchsorted(self._cumulative_noise(), u, side="right").astype(np.int32)

    def get_vector(self, i: int) -> np.ndarray:
        return self.doc_vecs[i]

    def infer_vector(self, tokens, steps: Optional[int] = None) -> InferredVector:
        return infer_vector(self, tokens, steps)

    def __eq__(self, other):
        if not isinstance(other, ParagraphVectorModel):
            return NotImplemented
        return (
            self.hp == other.hp
            and self.vocab == other.vocab
            and self.epoch_losses == other.epoch_losses
            and all(
                a.dtype == b.dtype and np.array_equal(a, b)
                for a, b in (
                    (self.word_in, other.word_in),
                    (self.word_out, other.word_out),
                    (self.doc_vecs, other.doc_vecs),
                )
            )
        )

    def weights_digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.word_in.tobytes())
        h.update(self.word_out.tobytes())
        return h.hexdigest()


def _init_uniform(rng, shape, dim):
    return ((rng.random(shape) - 0.5) / dim).astype(np.float32)


def _keep_probability(vocab: Vocabulary, t: float) -> np.ndarray:
    freq = vocab.counts / vocab.total
    p = (np.sqrt(freq / t) + 1.0) * t / freq
    return np.minimum(p, 1.0)


def _chunks(starts: np.ndarray, limit: int):
    """Split documents into runs of roughly ``limit`` tokens: yields (doc_lo, doc_hi)."""
    n = len(starts) - 1
    lo = 0
    while lo < n:
        target = starts[lo] + limit
        hi = int(np.searchsorted(starts, target, side="right")) - 1
        hi = min(max(hi, lo + 1), n)
        yield lo, hi
        lo = hi


def train_paragraph_vectors(
    corpus,
    hp: Hyperparameters = Hyperparameters(),
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> ParagraphVectorModel:
    """Train PV-DM on ``corpus``.

    ``corpus`` is either an iterable of TokenizedDocument or a
    (Vocabulary, EncodedCorpus) pair from :func:`encode_corpus`.
    With ``hp.workers == 1`` the result is fully determined by
    (seed, corpus, hyperparameters).
    """
    hp.validate()
    if isinstance(corpus, tuple):
        vocab, enc = corpus
    else:
        vocab, enc = encode_corpus(corpus, hp.min_count)
    rng = np.random.default_rng(hp.seed)
    V, D, K = len(vocab), hp.dim, enc.n_docs
    model = ParagraphVectorModel(
        vocab=vocab,
        word_in=_init_uniform(rng, (V, D), D),
        word_out=np.zeros((V, D), dtype=np.float32),
        doc_vecs=_init_uniform(rng, (K, D), D),
        hp=hp,
    )
    n_tokens = len(enc.tokens)
    total = max(hp.epochs * n_tokens, 1)
    keep_p = _keep_probability(vocab, hp.subsample_t) if hp.subsample_t > 0 else None
    doc_rows = np.arange(K, dtype=np.int64)
    pool = ThreadPoolExecutor(hp.workers) if hp.workers > 1 else None
    try:
        for epoch in range(hp.epochs):
            loss, n_pred = 0.0, 0
            jobs = []
            for lo, hi in _chunks(enc.starts, CHUNK_TOKENS):
                a, b = int(enc.starts[lo]), int(enc.starts[hi])
                toks = enc.tokens[a:b]
                negs = model.draw_negatives(rng, b - a)
                if keep_p is not None:
                    keep = (rng.random(b - a) < keep_p[toks]).astype(np.uint8)
                else:
                    keep = np.ones(b - a, dtype=np.uint8)
                args = (
                    toks, enc.starts[lo : hi + 1] - a, doc_rows[lo:hi], model.doc_vecs,
                    model.word_in, model.word_out, negs, keep, hp.window,
                    hp.alpha_start, hp.alpha_end, epoch * n_tokens + a, total, True,
                )
                jobs.append(args)
            if pool is None:
                results = [_kernels.pvdm_epoch(*args) for args in jobs]
            else:
                results = list(pool.map(lambda args: _kernels.pvdm_epoch(*args), _split_jobs(jobs, hp.workers)))
            for l, n in results:
                loss += l
                n_pred += n
            mean_loss = loss / n_pred if n_pred else 0.0
            if not math.isfinite(mean_loss):
                raise DivergenceError(
                    f"paragraph vector training diverged in epoch {epoch}",
                    last_good_epoch=epoch - 1 if epoch else None,
                )
            model.epoch_losses.append(mean_loss)
            alpha = hp.alpha_start - (hp.alpha_start - hp.alpha_end) * ((epoch + 1) * n_tokens / total)
            if on_epoch is not None:
                on_epoch({"epoch": epoch, "mean_loss": mean_loss, "alpha": alpha})
    finally:
        if pool is not None:
            pool.shutdown()
    return model


def _split_jobs(jobs, workers):
    """Hogwild mode: split each chunk's documents across workers (non-deterministic)."""
    out = []
    for args in jobs:
        toks, starts, rows = args[0], args[1], args[2]
        n = len(rows)
        bounds = np.linspace(0, n, workers + 1).astype(int)
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            if hi <= lo:
                continue
            a, b = int(starts[lo]), int(starts[hi])
            out.append(
                (toks[a:b], starts[lo : hi + 1] - a, rows[lo:hi], args[3], args[4], args[5],
                 args[6][a:b], args[7][a:b]) + args[8:11] + (args[11] + a,) + args[12:]
            )
    return out


def _inference_seed(model: ParagraphVectorModel, tokens) -> int:
    h = hashlib.blake2b("\x1f".join(tokens).encode("utf-8"), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def infer_vector(model: ParagraphVectorModel, tokens, steps: Optional[int] = None) -> InferredVector:
    """Fit a fresh document vector against frozen word matrices.

    The starting point and noise draws are seeded from the model seed and
    the token sequence, so identical inputs give identical vectors.
    """
    steps = model.hp.infer_steps if steps is None else steps
    ids = model.vocab.lookup(tokens)
    D = model.hp.dim
    if len(ids) == 0:
        return InferredVector(np.zeros(D, dtype=np.float32), degenerate=True)
    rng = np.random.default_rng([model.hp.seed, _inference_seed(model, tokens)])
    vec = _init_uniform(rng, (1, D), D)
    n = len(ids)
    starts = np.array([0, n], dtype=np.int64)
    rows = np.zeros(1, dtype=np.int64)
    keep = np.ones(n, dtype=np.uint8)
    total = steps * n
    for step in range(steps):
        negs = model.draw_negatives(rng, n)
        _kernels.pvdm_epoch(
            ids, starts, rows, vec, model.word_in, model.word_out, negs, keep,
            model.hp.window, model.hp.alpha_start, model.hp.alpha_end, step * n, total, False,
        )
    return InferredVector(vec[0], degenerate=False)


def pvdm_loss_and_doc_grad(doc_vec, context_vecs, word_out, target, noise_ids):
    """Negative-sampling loss at one position and its gradient w.r.t. the document vector.

    Uses the same update routine as training (with unit step and frozen
    output rows); the gradient is recovered from the accumulated step.
    """
    doc_vec = np.asarray(doc_vec, dtype=np.float64)
    context_vecs = np.asarray(context_vecs, dtype=np.float64).reshape(-1, doc_vec.shape[0])
    count = 1 + context_vecs.shape[0]
    h = (doc_vec + context_vecs.sum(axis=0)) / count
    ids = np.concatenate([[target], np.asarray(noise_ids)]).astype(np.int32)
    neu1e = np.zeros_like(h)
    loss = _kernels.ns_step(h, np.asarray(word_out, dtype=np.float64), ids, 1.0, neu1e, False)
    return float(loss), -neu1e / count


def pvdm_loss(doc_vec, context_vecs, word_out, target, noise_ids) -> float:
    """Same loss as :func:`pvdm_loss_and_doc_grad`, written directly for finite differencing."""
    doc_vec = np.asarray(doc_vec, dtype=np.float64)
    context_vecs = np.asarray(context_vecs, dtype=np.float64).reshape(-1, doc_vec.shape[0])
    h = (doc_vec + context_vecs.sum(axis=0)) / (1 + context_vecs.shape[0])
    word_out = np.asarray(word_out, dtype=np.float64)
    loss = -_log_sigmoid(h @ word_out[target])
    for w in noise_ids:
        if w != target:
            loss -= _log_sigmoid(-(h @ word_out[w]))
    return float(loss)


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


# ---- persistence -----------------------------------------------------------


def _pack_model(model: ParagraphVectorModel) -> bytes:
    V, D = model.word_in.shape
    header = json.dumps(
        {
            "hyperparameters": asdict(model.hp),
            "vocab_size": V,
            "dim": D,
            "n_docs": int(model.doc_vecs.shape[0]),
            "epoch_losses": model.epoch_losses,
        },
        sort_keys=True,
    ).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(header)), header]
    for tok, cnt in zip(model.vocab.tokens, model.vocab.counts):
        raw = tok.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<Q", int(cnt)))
    for mat in (model.word_in, model.word_out, model.doc_vecs):
        parts.append(np.ascontiguousarray(mat, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def persist_model(model: ParagraphVectorModel, path) -> Path:
    path = Path(path)
    atomic_write_bytes(path, _pack_model(model))
    return path


def load_model(path) -> ParagraphVectorModel:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise IntegrityError(f"cannot read model file {path}: {exc}") from exc
    return model_from_bytes(data, path)


def model_from_bytes(data: bytes, path="<bytes>") -> ParagraphVectorModel:
    check_container(data, MAGIC, FORMAT_VERSION, path)
    try:
        (hlen,) = struct.unpack_from("<I", data, 8)
        pos = 12
        meta = json.loads(data[pos : pos + hlen].decode("utf-8"))
        pos += hlen
        V, D, K = meta["vocab_size"], meta["dim"], meta["n_docs"]
        tokens, counts = [], []
        for _ in range(V):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            tokens.append(data[pos : pos + n].decode("utf-8"))
            pos += n
            (c,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            counts.append(c)
        mats = []
        for rows in (V, V, K):
            size = rows * D * 4
            if pos + size > len(data) - 4:
                raise CorruptionError(f"{path}: matrix section truncated")
            mats.append(np.frombuffer(data, dtype="<f4", count=rows * D, offset=pos).reshape(rows, D).astype(np.float32))
            pos += size
        if pos != len(data) - 4:
            raise CorruptionError(f"{path}: {len(data) - 4 - pos} unexpected trailing bytes")
        hp = Hyperparameters(**meta["hyperparameters"])
    except (struct.error, KeyError, TypeError, ValueError, UnicodeDecodeError) as exc:
        raise CorruptionError(f"{path}: malformed model file: {exc}") from exc
    return ParagraphVectorModel(
        vocab=Vocabulary(tokens, counts),
        word_in=mats[0],
        word_out=mats[1],
        doc_vecs=mats[2],
        hp=hp,
        epoch_losses=[float(x) for x in meta["epoch_losses"]],
    )
