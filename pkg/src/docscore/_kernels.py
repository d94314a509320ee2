"""Inner loops: PV-DM negative sampling, SGD regression, rolling windows.

Every function here is compiled by numba unless ``DOCSCORE_NO_NUMBA`` is set.
The two vector primitives have backend specific bodies (explicit loops for
numba, numpy calls for the fallback); the kernels themselves are one source.
"""
import math

import numpy as np

from ._accel import HAVE_NUMBA, jit

SQUARED = 0
EPSILON_INSENSITIVE = 1

if HAVE_NUMBA:

    @jit
    def _dot(a, b):
        acc = 0.0
        for i in range(a.shape[0]):
            acc += a[i] * b[i]
        return acc

    @jit
    def _axpy(y, alpha, x):
        for i in range(y.shape[0]):
            y[i] += alpha * x[i]

    @jit
    def _scale(y, alpha):
        for i in range(y.shape[0]):
            y[i] *= alpha

else:

    def _dot(a, b):
        return float(np.dot(a.astype(np.float64), b.astype(np.float64)))

    def _axpy(y, alpha, x):
        y += (alpha * x).astype(y.dtype)

    def _scale(y, alpha):
        y *= y.dtype.type(alpha)


@jit
def log_sigmoid(x):
    if x >= 0.0:
        return -math.log1p(math.exp(-x))
    return x - math.log1p(math.exp(x))


@jit
def sigmoid(x):
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


@jit
def ns_step(h, word_out, ids, alpha, neu1e, learn_out):
    """One negative-sampling update for hidden vector ``h``.

    ``ids[0]`` is the observed word, the rest are noise draws; a noise draw
    equal to the observed word is skipped. Accumulates ``alpha * -dL/dh``
    into ``neu1e`` and, if ``learn_out``, applies the output-row updates.
    Returns the logistic loss before the update.
    """
    loss = 0.0
    target = ids[0]
    for j in range(ids.shape[0]):
        w = ids[j]
        if j > 0 and w == target:
            continue
        row = word_out[w]
        f = _dot(h, row)
        if j == 0:
            loss -= log_sigmoid(f)
            g = (1.0 - sigmoid(f)) * alpha
        else:
            loss -= log_sigmoid(-f)
            g = -sigmoid(f) * alpha
        _axpy(neu1e, g, row)
        if learn_out:
            _axpy(row, g, h)
    return loss


@jit
def pvdm_epoch(
    tokens,
    doc_starts,
    doc_rows,
    doc_vecs,
    word_in,
    word_out,
    negatives,
    keep,
    window,
    alpha_start,
    alpha_end,
    done_positions,
    total_positions,
    learn_words,
):
    """One pass of PV-DM (mean combination) over an encoded corpus.

    tokens       flat int32 vocabulary ids, documents concatenated
    doc_starts   int64 offsets, len = n_docs + 1
    doc_rows     row of ``doc_vecs`` to train for each document
    negatives    int32 (len(tokens), k) noise draws per position
    keep         uint8 per token (subsampling mask; all ones when disabled)

    The learning rate decays linearly with the raw token position
    ``done_positions + p`` out of ``total_positions``.

    Returns (summed loss, number of predicted positions).
    """
    dim = doc_vecs.shape[1]
    k = negatives.shape[1]
    h = np.empty(dim, dtype=doc_vecs.dtype)
    neu1e = np.zeros(dim, dtype=doc_vecs.dtype)
    ids = np.empty(k + 1, dtype=np.int32)
    kept = np.empty(tokens.shape[0], dtype=np.int64)
    total_loss = 0.0
    n_pred = 0
    for d in range(doc_starts.shape[0] - 1):
        start = doc_starts[d]
        stop = doc_starts[d + 1]
        n_kept = 0
        for p in range(start, stop):
            if keep[p]:
                kept[n_kept] = p
                n_kept += 1
        doc = doc_vecs[doc_rows[d]]
        for i in range(n_kept):
            pos = kept[i]
            frac = (done_positions + pos) / total_positions
            if frac > 1.0:
                frac = 1.0
            alpha = alpha_start - (alpha_start - alpha_end) * frac
            lo = i - window
            if lo < 0:
                lo = 0
            hi = i + window + 1
            if hi > n_kept:
                hi = n_kept
            count = hi - lo
            h[:] = doc
            for j in range(lo, hi):
                if j != i:
                    _axpy(h, 1.0, word_in[tokens[kept[j]]])
            scale = 1.0 / count
            _scale(h, scale)
            ids[0] = tokens[pos]
            for j in range(k):
                ids[j + 1] = negatives[pos, j]
            neu1e[:] = 0.0
            total_loss += ns_step(h, word_out, ids, alpha, neu1e, learn_words)
            n_pred += 1
            _axpy(doc, scale, neu1e)
            if learn_words:
                for j in range(lo, hi):
                    if j != i:
                        _axpy(word_in[tokens[kept[j]]], scale, neu1e)
    return total_loss, n_pred


@jit
def loss_value(r, kind, eps):
    if kind == SQUARED:
        return 0.5 * r * r
    a = abs(r) - eps
    return a if a > 0.0 else 0.0


@jit
def loss_deriv(r, kind, eps):
    """d loss / d prediction at residual r = prediction - target."""
    if kind == SQUARED:
        return r
    if r > eps:
        return 1.0
    if r < -eps:
        return -1.0
    return 0.0


@jit
def regression_objective(x, y, beta, bias, kind, eps, lam, grad_beta):
    """Mean loss + lam/2 * |beta|^2; writes d/dbeta into grad_beta, returns (obj, d/dbias)."""
    n = x.shape[0]
    grad_beta[:] = 0.0
    g_bias = 0.0
    total = 0.0
    for i in range(n):
        r = _dot(beta, x[i]) + bias - y[i]
        total += loss_value(r, kind, eps)
        dl = loss_deriv(r, kind, eps)
        _axpy(grad_beta, dl / n, x[i])
        g_bias += dl / n
    _axpy(grad_beta, lam, beta)
    return total / n + 0.5 * lam * _dot(beta, beta), g_bias


@jit
def sgd_regression(x, y, beta, bias, order, kind, eps, lam, lr):
    """Plain SGD over ``order`` (epochs x n sample indices); lr decays as 1/sqrt(epoch+1).

    Updates ``beta`` in place; returns (bias, per-epoch objective).
    """
    epochs = order.shape[0]
    losses = np.empty(epochs)
    grad = np.empty_like(beta)
    for e in range(epochs):
        step = lr / math.sqrt(e + 1.0)
        for j in range(order.shape[1]):
            i = order[e, j]
            r = _dot(beta, x[i]) + bias - y[i]
            dl = loss_deriv(r, kind, eps)
            _scale(beta, 1.0 - step * lam)
            _axpy(beta, -step * dl, x[i])
            bias -= step * dl
        obj, _ = regression_objective(x, y, beta, bias, kind, eps, lam, grad)
        losses[e] = obj
        if not math.isfinite(obj):
            return bias, losses[: e + 1]
    return bias, losses


@jit
def rolling_mean_std(values, n):
    """Population mean and std of every length-n window, summed in window order."""
    m = values.shape[0] - n + 1
    acc = np.zeros(m)
    for j in range(n):
        acc += values[j : j + m]
    mean = acc / n
    sq = np.zeros(m)
    for j in range(n):
        dev = values[j : j + m] - mean
        sq += dev * dev
    return mean, np.sqrt(sq / n)
