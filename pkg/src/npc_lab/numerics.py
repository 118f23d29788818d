"""Stable scalar/vector primitives: log-sum-exp, tempered softmax, KL, similarity."""

import numpy as np

from npc_lab.errors import ConfigurationError, ContractViolation

SIMILARITY_KINDS = ("cosine", "inner_product")


def _as_scores(scores):
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ContractViolation("score vector must be 1-D and non-empty")
    if not np.all(np.isfinite(s)):
        raise ContractViolation("score vector contains NaN or Inf")
    return s


def log_sum_exp(scores):
    s = _as_scores(scores)
    top = s.max()
    return float(top + np.log(np.exp(s - top).sum()))


def softmax(scores, temperature=1.0):
    """Return ``exp(t*s) / sum(exp(t*s))``.

    The temperature multiplies the scores; it is not a divisor.
    """
    if not temperature > 0:
        raise ConfigurationError(f"temperature must be > 0, got {temperature}")
    s = _as_scores(scores) * temperature
    z = np.exp(s - s.max())
    return z / z.sum()


def log_softmax_rows(scores):
    """Row-wise log-softmax of a 2-D array (no validation, hot path)."""
    shifted = scores - scores.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def kl_divergence(p, q):
    """KL(p || q) in nats, with 0 * log 0 taken as 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ContractViolation(f"length mismatch: {p.shape} vs {q.shape}")
    support = p > 0
    if np.any(q[support] <= 0):
        raise ContractViolation("q has zero mass where p is positive")
    ps, qs = p[support], q[support]
    return float(max(np.sum(ps * (np.log(ps) - np.log(qs))), 0.0))


def similarity(u, v, kind="cosine"):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ContractViolation(f"dimension mismatch: {u.shape} vs {v.shape}")
    if kind == "inner_product":
        return float(u @ v)
    if kind != "cosine":
        raise ConfigurationError(f"unknown similarity kind {kind!r}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ContractViolation("cosine similarity of a zero vector")
    return float(np.clip((u @ v) / (nu * nv), -1.0, 1.0))
