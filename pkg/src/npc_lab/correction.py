"""EMA teacher and the per-pair corrected loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from npc_lab.encoder import encode_batch, tokenize
from npc_lab.errors import ContractViolation
from npc_lab.numerics import kl_divergence, log_sum_exp, softmax


@dataclass
class TeacherState:
    params: object  # EncoderParams
    alpha: float
    step: int = 0


@dataclass(frozen=True)
class CandidateSet:
    """Candidate documents for one query: positive, hard negatives, in-batch negatives."""

    doc_texts: tuple[str, ...]
    positive_index: int = 0

    def __post_init__(self):
        if len(self.doc_texts) < 2:
            raise ContractViolation("candidate set needs at least 2 documents")
        if not 0 <= self.positive_index < len(self.doc_texts):
            raise ContractViolation("positive index out of range")

    @classmethod
    def assemble(cls, positive, hard_negatives=(), in_batch=()):
        return cls((positive, *hard_negatives, *in_batch), 0)


def init_teacher(student_params, alpha=0.999):
    if not 0.0 <= alpha <= 1.0:
        raise ContractViolation(f"alpha must lie in [0, 1], got {alpha}")
    return TeacherState(student_params.copy(), alpha, 0)


def ema_update(teacher, student_params):
    """``teacher <- alpha * teacher + (1 - alpha) * student``, entrywise."""
    t_arrays = teacher.params.arrays()
    s_arrays = student_params.arrays()
    if t_arrays.keys() != s_arrays.keys() or any(t_arrays[k].shape != s_arrays[k].shape for k in t_arrays):
        raise ContractViolation("teacher and student parameter shapes differ")
    a = teacher.alpha
    updated = {k: a * t_arrays[k] + (1.0 - a) * s_arrays[k] for k in t_arrays}
    return TeacherState(type(teacher.params).from_arrays(updated), a, teacher.step + 1)


def candidate_distribution(params, vocab, query, candidates, temperature, similarity="cosine"):
    normalize = similarity == "cosine"
    q = encode_batch([tokenize(query, vocab)], params.query_side(), normalize)[0]
    d = encode_batch([tokenize(t, vocab) for t in candidates.doc_texts], params.doc_side(), normalize)
    return softmax(d @ q, temperature)


def teacher_distribution(teacher, vocab, query, candidates, temperature, similarity="cosine"):
    """Teacher's candidate distribution; a constant target for the student."""
    return candidate_distribution(teacher.params, vocab, query, candidates, temperature, similarity)


def pair_loss(student_dist, teacher_dist, positive_index, flag, reverse_kl=False):
    """``flag * (-log p_student[positive]) + KL(student || teacher)``."""
    p = np.asarray(student_dist, dtype=np.float64)
    t = np.asarray(teacher_dist, dtype=np.float64)
    if p.shape != t.shape:
        raise ContractViolation("student and teacher distributions differ in length")
    if not 0 <= positive_index < p.size:
        raise ContractViolation("positive index out of range")
    cons = kl_divergence(t, p) if reverse_kl else kl_divergence(p, t)
    if not flag:
        return cons
    # log-space: log p_pos = log p_pos - log sum p, with zeros mapped to -inf
    with np.errstate(divide="ignore"):
        logs = np.log(p)
    cont = log_sum_exp(logs[np.isfinite(logs)]) - logs[positive_index]
    return float(flag) * float(cont) + cons
