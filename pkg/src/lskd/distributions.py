"""Probability-vector algebra: temperature softmax, XE, KL, soft-label fusion.

Everything works on 1-D vectors or on batches (last axis = classes) in float64.
"""

from __future__ import annotations

import numpy as np

PROB_FLOOR = 1e-12


def _as_float(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        raise ValueError(f"{name} must be a vector, got a scalar")
    return arr


def _check_tau(tau: float) -> None:
    if not np.isfinite(tau) or tau <= 0:
        raise ValueError(f"temperature must be positive and finite, got {tau!r}")


def onehot(index: int, num_classes: int) -> np.ndarray:
    if not 0 <= index < num_classes:
        raise ValueError(f"class index {index} out of range for {num_classes} classes")
    out = np.zeros(num_classes)
    out[index] = 1.0
    return out


def onehot_batch(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError("label out of range")
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def is_probability_vector(p, atol: float = 1e-9) -> bool:
    p = np.asarray(p, dtype=np.float64)
    return bool(np.all(p >= 0) and np.all(np.abs(p.sum(axis=-1) - 1.0) <= atol))


def softmax_t(z, tau: float = 1.0) -> np.ndarray:
    """exp(z/tau) / sum(exp(z/tau)) along the last axis."""
    z = _as_float(z, "logits")
    _check_tau(tau)
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    u = z / tau
    u = u - u.max(axis=-1, keepdims=True)
    e = np.exp(u)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_t(z, tau: float = 1.0) -> np.ndarray:
    z = _as_float(z, "logits")
    _check_tau(tau)
    u = z / tau
    u = u - u.max(axis=-1, keepdims=True)
    return u - np.log(np.exp(u).sum(axis=-1, keepdims=True))


def cross_entropy(label: int, y_hat) -> float:
    """-log y_hat[label], with y_hat clamped to [1e-12, 1]."""
    y_hat = _as_float(y_hat, "y_hat")
    if y_hat.ndim != 1:
        raise ValueError("cross_entropy expects a single distribution")
    if not 0 <= label < y_hat.shape[0]:
        raise ValueError(f"label {label} does not fit a {y_hat.shape[0]}-class distribution")
    return float(-np.log(np.clip(y_hat[label], PROB_FLOOR, 1.0)))


def kl_divergence(p, q) -> np.ndarray | float:
    """sum_c p_c log(p_c / q_c) with 0 log 0 = 0 and q clamped at 1e-12.

    Batched inputs return one value per row.
    """
    p = _as_float(p, "p")
    q = _as_float(q, "q")
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    q = np.clip(q, PROB_FLOOR, 1.0)
    pos = p > 0
    terms = np.zeros_like(p)
    terms[pos] = p[pos] * (np.log(p[pos]) - np.log(q[pos]))
    out = terms.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def entropy(p) -> np.ndarray | float:
    p = _as_float(p, "p")
    pos = p > 0
    terms = np.zeros_like(p)
    terms[pos] = -p[pos] * np.log(p[pos])
    out = terms.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def fuse_sld(y_r, y_t, alpha: float, tau: float = 1.0) -> np.ndarray:
    """Soft target = softmax(alpha * onehot + teacher_probs, tau).

    ``y_r`` is the one-hot vector (or a batch of them) and ``y_t`` the
    teacher's probability vector, added as-is (not converted to logits).
    """
    y_r = _as_float(y_r, "y_r")
    y_t = _as_float(y_t, "y_t")
    if y_r.shape != y_t.shape:
        raise ValueError(f"shape mismatch: {y_r.shape} vs {y_t.shape}")
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha!r}")
    return softmax_t(alpha * y_r + y_t, tau)


def ls_target(label: int, alpha: float, tau: float, num_classes: int) -> np.ndarray:
    """Label-smoothing target: fusion with a uniform distribution."""
    if num_classes < 2:
        raise ValueError("label smoothing needs at least two classes")
    uniform = np.full(num_classes, 1.0 / num_classes)
    return fuse_sld(onehot(label, num_classes), uniform, alpha, tau)


def grad_kl_wrt_logits(y_s, z, tau: float = 1.0) -> np.ndarray:
    """d/dz KL(y_s || softmax_t(z, tau)) for fixed y_s."""
    y_s = _as_float(y_s, "y_s")
    z = _as_float(z, "z")
    if y_s.shape != z.shape:
        raise ValueError(f"shape mismatch: {y_s.shape} vs {z.shape}")
    return (softmax_t(z, tau) - y_s) / tau


def softmax_backward(p: np.ndarray, grad_p: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Pull a gradient w.r.t. p = softmax_t(u, tau) back to u."""
    inner = (p * grad_p).sum(axis=-1, keepdims=True)
    return p * (grad_p - inner) / tau
