"""Noise transition matrices and single-to-multiple matrices.

Orientation: ``T[i, j] = P(noisy = j | clean = i)`` and
``U[i, j] = P(part bit j = 1 | noisy = i)``. Both act on posteriors by
their transpose: ``p_noisy = T^T p_clean`` and ``q = U^T p_noisy``.
"""

import numpy as np

from plmlab.autodiff import Tensor, predict_proba, sigmoid
from plmlab.errors import ConfigurationError, DomainError

STOCHASTIC_TOL = 1e-8


def check_row_stochastic(T, tol=STOCHASTIC_TOL):
    T = np.asarray(T, dtype=np.float64)
    if T.ndim != 2 or T.shape[0] != T.shape[1]:
        raise DomainError(f"transition matrix must be square, got {T.shape}")
    if (T < -tol).any() or np.abs(T.sum(axis=1) - 1.0).max() > tol:
        raise DomainError("transition matrix rows must be nonnegative and sum to 1")
    return T


def _check_simplex(p, tol=1e-8):
    p = np.asarray(p, dtype=np.float64)
    if (p < -tol).any() or np.abs(p.sum(axis=-1) - 1.0).max() > tol:
        raise DomainError("probability vector must be nonnegative and sum to 1")
    return p


def _check_unit_entries(U):
    U = np.asarray(U, dtype=np.float64)
    if U.shape[-1] != U.shape[-2]:
        raise DomainError(f"S2M matrix must be square, got {U.shape}")
    if (U < 0).any() or (U > 1).any():
        raise DomainError("S2M matrix entries must lie in [0, 1]")
    return U


def apply_T(T, p_clean):
    """``p_noisy[j] = sum_i T[i, j] p_clean[i]``; ``p_clean`` may be (c,) or (n, c)."""
    T = check_row_stochastic(T)
    p = _check_simplex(p_clean)
    return p @ T


def apply_U(U, p_noisy):
    """``q[j] = sum_i U[i, j] p_noisy[i]``; per-instance U of shape (n, c, c) is allowed."""
    U = _check_unit_entries(U)
    p = _check_simplex(p_noisy)
    if U.ndim == 3:
        return np.einsum("bi,bij->bj", p, U)
    return p @ U


def compose_UT(U, T, p_clean):
    return apply_U(U, apply_T(T, p_clean))


def estimate_T_from_posteriors(probs, n_anchors=10):
    """Anchor estimate: row i averages the posteriors of the ``n_anchors``
    instances most confidently predicted as i (ties by instance index)."""
    probs = np.asarray(probs, dtype=np.float64)
    n, c = probs.shape
    if n_anchors < 1 or n < n_anchors:
        raise ConfigurationError(f"need at least {n_anchors} candidates, have {n}")
    T = np.empty((c, c))
    idx = np.arange(n)
    for i in range(c):
        top = np.lexsort((idx, -probs[:, i]))[:n_anchors]
        T[i] = probs[top].mean(axis=0)
    return T / T.sum(axis=1, keepdims=True)


def estimate_T_anchor(g_e, X, n_anchors=10):
    return estimate_T_from_posteriors(predict_proba(g_e, X), n_anchors)


def u_forward(g_u, x):
    """S2M matrices from the raw g_u outputs: sigmoid, reshaped to (n, c, c).

    ``x`` may be a Tensor (tracked) or an array; a single instance returns (c, c).
    """
    c2 = g_u.out_features
    c = int(round(np.sqrt(c2)))
    if c * c != c2:
        raise DomainError(f"g_u output width {c2} is not a square")
    if isinstance(x, Tensor):
        return sigmoid(g_u(x)).reshape(x.shape[0], c, c)
    x = np.asarray(x, dtype=np.float64)
    single = x.size == g_u.in_features and x.shape != (1, x.size)
    flat = x.reshape(1 if single else len(x), -1)
    U = sigmoid(Tensor(g_u.logits(flat))).data.reshape(-1, c, c)
    return U[0] if single else U


def max_entry_error(A, B):
    A, B = np.asarray(A), np.asarray(B)
    if A.shape != B.shape:
        raise DomainError(f"shape mismatch {A.shape} vs {B.shape}")
    return float(np.abs(A - B).max())
