"""Per-epoch noise detection.

Each pair is scored by the perplexity of its annotated positive against
easy (in-batch) negatives, a two-component 1-D Gaussian mixture is fitted
to the scores by EM, and pairs whose posterior under the lower-mean
component exceeds a threshold are flagged clean.

This module never sees mined hard negatives; the perplexity routine only
receives the training pairs and the current encoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from npc_lab.data import batches
from npc_lab.encoder import encode_batch, tokenize
from npc_lab.errors import ContractViolation, DegenerateInputError
from npc_lab.numerics import log_sum_exp

VARIANCE_FLOOR = 1e-6
MAX_ITERS = 200
TOL = 1e-9
# collapse rule: means closer than this many sample stds, or a near-empty component
DEGENERATE_MEAN_GAP = 0.05
DEGENERATE_MIN_WEIGHT = 1e-3

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PerplexityRecord:
    pair_id: int
    ppl: float


def pair_perplexity(query_emb, positive_emb, negative_embs, temperature, similarity="cosine"):
    """``-log softmax`` of the positive among itself and ``m`` negatives."""
    negs = np.atleast_2d(np.asarray(negative_embs, dtype=np.float64))
    if negs.size == 0:
        raise ContractViolation("pair perplexity needs at least one negative")
    q = np.asarray(query_emb, dtype=np.float64)
    docs = np.vstack([np.asarray(positive_emb, dtype=np.float64)[None, :], negs])
    if similarity == "cosine":
        q = q / np.linalg.norm(q)
        docs = docs / np.linalg.norm(docs, axis=1, keepdims=True)
    scores = temperature * (docs @ q)
    return max(log_sum_exp(scores) - scores[0], 0.0)


def batch_perplexities(query_embs, doc_embs, temperature):
    """Row i: perplexity of doc i for query i against the other docs of the batch."""
    logits = temperature * (query_embs @ doc_embs.T)
    top = logits.max(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(np.exp(logits - top).sum(axis=1))
    return np.maximum(lse - np.diag(logits), 0.0)


# shuffle stream reserved for detection batches, distinct from training order
DETECTION_STREAM = 1


def compute_perplexities(params, vocab, pairs, batch_size, temperature, similarity="cosine", seed=0, epoch=0):
    """One record per pair, each scored against the other documents of its shuffled batch."""
    normalize = similarity == "cosine"
    records = []
    for chunk in batches(pairs, batch_size, seed, epoch, DETECTION_STREAM):
        if len(chunk) < 2:
            raise ContractViolation("perplexity batch of size 1 has no negatives")
        q = encode_batch([tokenize(p.query_text, vocab) for p in chunk], params.query_side(), normalize)
        d = encode_batch([tokenize(p.doc_text, vocab) for p in chunk], params.doc_side(), normalize)
        for pair, ppl in zip(chunk, batch_perplexities(q, d, temperature)):
            records.append(PerplexityRecord(pair.pair_id, float(ppl)))
    records.sort(key=lambda r: r.pair_id)
    return records


# -- Gaussian mixture --------------------------------------------------------


@dataclass
class GmmFit:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    log_likelihood: list[float] = field(default_factory=list)
    degenerate: bool = False
    iterations: int = 0

    @property
    def clean_component(self):
        # ties resolve to component 0
        return 0 if self.means[0] <= self.means[1] else 1

    def to_dict(self):
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
            "clean_component": self.clean_component,
            "degenerate": self.degenerate,
            "iterations": self.iterations,
            "final_mean_log_likelihood": self.log_likelihood[-1] if self.log_likelihood else None,
        }


def _log_joint(x, weights, means, variances):
    """``log(pi_k) + log N(x; mu_k, var_k)`` as an (n, 2) array."""
    with np.errstate(divide="ignore"):
        log_w = np.log(weights)
    return log_w - 0.5 * (_LOG_2PI + np.log(variances) + (x[:, None] - means) ** 2 / variances)


def _logsumexp_rows(a):
    top = a.max(axis=1, keepdims=True)
    return top[:, 0] + np.log(np.exp(a - top).sum(axis=1))


def fit_gmm(records, max_iters=MAX_ITERS, tol=TOL, variance_floor=VARIANCE_FLOOR, init_means=None):
    """Fit a two-component 1-D Gaussian mixture to the perplexities by EM.

    Initialisation: means at the 10th/90th percentiles (or ``init_means``),
    equal weights, both variances equal to the sample variance.  Iterates
    until the mean log-likelihood gains less than ``tol``.

    Raises DegenerateInputError when every value is identical; a fit whose
    components collapse is returned with ``degenerate=True``.
    """
    x = np.asarray([r.ppl if isinstance(r, PerplexityRecord) else r for r in records], dtype=np.float64)
    if x.size < 2:
        raise ContractViolation("need at least two perplexities to fit a mixture")
    if np.all(x == x[0]):
        raise DegenerateInputError("all perplexities identical")

    if init_means is None:
        init_means = np.percentile(x, [10, 90])
    means = np.asarray(init_means, dtype=np.float64).copy()
    weights = np.array([0.5, 0.5])
    variances = np.full(2, max(x.var(), variance_floor))

    log_joint = _log_joint(x, weights, means, variances)
    log_norm = _logsumexp_rows(log_joint)
    trace = [float(log_norm.mean())]
    it = 0
    for it in range(1, max_iters + 1):
        resp = np.exp(log_joint - log_norm[:, None])
        nk = resp.sum(axis=0)
        weights = nk / x.size
        safe = np.maximum(nk, np.finfo(float).tiny)
        means = np.where(nk > 0, (resp * x[:, None]).sum(axis=0) / safe, means)
        variances = np.where(nk > 0, (resp * (x[:, None] - means) ** 2).sum(axis=0) / safe, variances)
        variances = np.maximum(variances, variance_floor)

        log_joint = _log_joint(x, weights, means, variances)
        log_norm = _logsumexp_rows(log_joint)
        trace.append(float(log_norm.mean()))
        if trace[-1] - trace[-2] < tol:
            break

    weights = weights / weights.sum()
    fit = GmmFit(weights, means, variances, trace, iterations=it)
    gap = abs(means[0] - means[1])
    fit.degenerate = bool(gap < DEGENERATE_MEAN_GAP * x.std() or weights.min() < DEGENERATE_MIN_WEIGHT)
    return fit


def posterior_clean(fit, ppl):
    """Posterior responsibility of the lower-mean component at ``ppl``."""
    x = np.atleast_1d(np.asarray(ppl, dtype=np.float64))
    log_joint = _log_joint(x, fit.weights, fit.means, fit.variances)
    k = fit.clean_component
    # logistic of the log-odds: exactly 0.5 when both joints tie
    with np.errstate(over="ignore"):
        post = 1.0 / (1.0 + np.exp(log_joint[:, 1 - k] - log_joint[:, k]))
    return float(post[0]) if np.ndim(ppl) == 0 else post


@dataclass
class FlagSet:
    flags: dict[int, int]
    posteriors: dict[int, float]
    epoch: int = 0

    def as_array(self, pair_ids):
        return np.fromiter((self.flags[i] for i in pair_ids), dtype=np.float64, count=len(pair_ids))

    @property
    def num_clean(self):
        return sum(self.flags.values())

    @property
    def num_noisy(self):
        return len(self.flags) - self.num_clean

    @classmethod
    def all_clean(cls, pair_ids, epoch=0):
        ids = list(pair_ids)
        return cls({i: 1 for i in ids}, {i: 1.0 for i in ids}, epoch)


def estimate_flags(fit, records, threshold=0.5, epoch=0):
    """Clean flag is 1 iff the clean-component posterior strictly exceeds ``threshold``.

    ``fit=None`` or a degenerate fit marks every pair clean.
    """
    ids = [r.pair_id for r in records]
    if len(set(ids)) != len(ids):
        raise ContractViolation("duplicate pair ids among perplexity records")
    if fit is None or fit.degenerate:
        return FlagSet.all_clean(ids, epoch)
    post = posterior_clean(fit, np.array([r.ppl for r in records]))
    flags = {i: int(p > threshold) for i, p in zip(ids, post)}
    return FlagSet(flags, dict(zip(ids, post.tolist())), epoch)


def detect(records, threshold=0.5, epoch=0, **fit_kwargs):
    """Fit, then flag; identical perplexities degrade to all-clean."""
    try:
        fit = fit_gmm(records, **fit_kwargs)
    except DegenerateInputError:
        fit = None
    return fit, estimate_flags(fit, records, threshold, epoch)


def detection_report(flags, pairs):
    """Confusion-matrix metrics with noisy pairs as the positive class."""
    tp = fp = fn = tn = 0
    for pair in pairs:
        if pair.truth_clean is None:
            raise ContractViolation(f"pair {pair.pair_id} has no truth label")
        pred_noisy = flags.flags[pair.pair_id] == 0
        true_noisy = not pair.truth_clean
        if pred_noisy and true_noisy:
            tp += 1
        elif pred_noisy:
            fp += 1
        elif true_noisy:
            fn += 1
        else:
            tn += 1
    # empty denominators: claiming nothing is exact only when nothing was there
    precision = tp / (tp + fp) if tp + fp else float(fn == 0)
    recall = tp / (tp + fn) if tp + fn else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    tnr = tn / (tn + fp) if tn + fp else 0.0
    # with one class absent, balanced accuracy is the rate on the class present
    if tp + fn and tn + fp:
        balanced = 0.5 * (recall + tnr)
    else:
        balanced = recall if tp + fn else tnr
    return {
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "balanced_accuracy": balanced,
        "tp": tp,
        "fp": fp,
        "fn": fn,
        "tn": tn,
    }
