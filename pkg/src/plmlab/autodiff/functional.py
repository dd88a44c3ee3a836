"""Differentiable ops and losses used by the training stages."""

import numpy as np

from plmlab.autodiff.tensor import DTYPE, Tensor, as_tensor
from plmlab.errors import DimensionError, DomainError, NumericError

# single clamping floor shared by every log in the package
EPS_CLIP = 1e-12


def linear(x, W, b):
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.ndim != 2 or W.ndim != 2 or b.ndim != 1:
        raise DimensionError(f"linear expects x[batch,in], W[in,out], b[out]; got {x.shape}, {W.shape}, {b.shape}")
    if x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise DimensionError(f"linear shape mismatch: {x.shape}, {W.shape}, {b.shape}")
    return x @ W + b


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    # np.maximum keeps NaN so a diverged layer is not silently zeroed
    return Tensor._make(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))


def log(x):
    x = as_tensor(x)
    d = x.data
    return Tensor._make(np.log(d), (x,), lambda g: (g / d,))


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return Tensor._make(out, (x,), lambda g: (g * out,))


def clamp(x, lo, hi):
    """Clip into ``[lo, hi]``; the gradient is zero wherever clipping is active."""
    x = as_tensor(x)
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)
    return Tensor._make(out, (x,), lambda g: (g * inside,))


def softmax(logits):
    """Row-wise softmax over the last axis using max subtraction."""
    logits = as_tensor(logits)
    z = logits.data
    if np.isnan(z).any():
        raise NumericError("softmax received NaN input")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor._make(s, (logits,), back)


def sigmoid(z):
    z = as_tensor(z)
    d = z.data
    # split by sign so neither branch overflows
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    out[~pos] = ez / (1.0 + ez)
    return Tensor._make(out, (z,), lambda g: (g * out * (1.0 - out),))


def vecmat(p, M):
    """Batched row-vector times matrix: ``out[b, j] = sum_i p[b, i] * M[b, i, j]``.

    This is ``M(x)^T p(x)`` applied per instance, the shape every
    transition-matrix composition takes.
    """
    p, M = as_tensor(p), as_tensor(M)
    if p.ndim != 2 or M.ndim != 3 or M.shape[:2] != p.shape or M.shape[1] != M.shape[2]:
        raise DimensionError(f"vecmat expects p[b,c] and M[b,c,c]; got {p.shape}, {M.shape}")
    a, m = p.data, M.data
    out = np.einsum("bi,bij->bj", a, m)

    def back(g):
        return np.einsum("bj,bij->bi", g, m), np.einsum("bi,bj->bij", a, g)

    return Tensor._make(out, (p, M), back)


def _check_labels(labels, c):
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise DomainError("labels must be a 1-D array of integer class indices")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise DomainError(f"label out of range [0, {c})")
    return labels


def cross_entropy(probs, labels, weights=None):
    """Batch mean of ``-w * log(p[label])`` with p clamped to ``[EPS_CLIP, 1 - EPS_CLIP]``.

    ``weights`` is an optional per-row multiplier tensor (differentiable).
    """
    probs = as_tensor(probs)
    if probs.ndim != 2:
        raise DimensionError(f"cross_entropy expects probs[batch,c], got {probs.shape}")
    labels = _check_labels(labels, probs.shape[1])
    if labels.shape[0] != probs.shape[0]:
        raise DimensionError("labels and probs disagree on batch size")
    rows = np.arange(labels.shape[0])
    picked = clamp(probs[rows, labels], EPS_CLIP, 1.0 - EPS_CLIP)
    nll = -log(picked)
    if weights is not None:
        nll = nll * weights
    return nll.mean()


def binary_cross_entropy(probs, targets):
    """Mean over batch and classes of ``-[t log p + (1 - t) log(1 - p)]``."""
    probs = as_tensor(probs)
    t = np.asarray(targets, dtype=DTYPE)
    if t.shape != probs.shape:
        raise DimensionError(f"targets shape {t.shape} != probs shape {probs.shape}")
    if not np.isin(t, (0.0, 1.0)).all():
        raise DomainError("binary_cross_entropy targets must be 0 or 1")
    p = clamp(probs, EPS_CLIP, 1.0 - EPS_CLIP)
    loss = -(log(p) * t + log(1.0 - p) * (1.0 - t))
    return loss.mean()
