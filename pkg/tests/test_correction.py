import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from npc_lab.correction import (
    CandidateSet,
    candidate_distribution,
    ema_update,
    init_teacher,
    pair_loss,
    teacher_distribution,
)
from npc_lab.encoder import EncoderParams, Vocabulary, encode, init_params, tokenize
from npc_lab.errors import ContractViolation
from npc_lab.numerics import kl_divergence, softmax


@pytest.fixture
def vocab():
    return Vocabulary.build(["alpha beta gamma delta epsilon"])


def scalar_params(value):
    return EncoderParams(np.full((1, 1), value), np.zeros((1, 1)), np.zeros(1))


class TestTeacher:
    def test_init_copies_student(self):
        student = init_params(5, 3, seed=1)
        a, b = init_teacher(student), init_teacher(student)
        for name, arr in student.arrays().items():
            assert np.array_equal(a.params.arrays()[name], arr)
            assert np.array_equal(a.params.arrays()[name], b.params.arrays()[name])
        student.embedding[0, 0] += 1.0
        assert a.params.embedding[0, 0] != student.embedding[0, 0]

    def test_init_gives_zero_consistency(self, vocab):
        student = init_params(len(vocab), 4, seed=3)
        teacher = init_teacher(student)
        cands = CandidateSet.assemble("alpha beta", ["gamma"], ["delta epsilon"])
        p = candidate_distribution(student, vocab, "beta delta", cands, 20.0)
        t = teacher_distribution(teacher, vocab, "beta delta", cands, 20.0)
        assert kl_divergence(p, t) == 0.0

    @pytest.mark.parametrize("alpha, expected", [(1.0, 1.0), (0.0, 0.0), (0.9, 0.9)])
    def test_endpoints_and_arithmetic(self, alpha, expected):
        teacher = init_teacher(scalar_params(1.0), alpha)
        updated = ema_update(teacher, scalar_params(0.0))
        assert updated.params.embedding[0, 0] == pytest.approx(expected, abs=1e-15)
        assert updated.step == 1

    def test_geometric_approach(self):
        teacher = init_teacher(scalar_params(1.0), 0.9)
        student = scalar_params(0.25)
        for _ in range(30):
            teacher = ema_update(teacher, student)
        gap = teacher.params.embedding[0, 0] - 0.25
        assert gap == pytest.approx(0.9**30 * 0.75, rel=1e-12)

    def test_shape_mismatch(self):
        teacher = init_teacher(init_params(5, 3))
        with pytest.raises(ContractViolation):
            ema_update(teacher, init_params(6, 3))

    def test_alpha_bounds(self):
        with pytest.raises(ContractViolation):
            init_teacher(init_params(3, 2), 1.5)


class TestTeacherDistribution:
    def test_identical_candidates_uniform(self, vocab):
        teacher = init_teacher(init_params(len(vocab), 4, seed=2))
        cands = CandidateSet(("gamma delta",) * 4)
        np.testing.assert_allclose(teacher_distribution(teacher, vocab, "alpha", cands, 20.0), 0.25, atol=1e-15)

    def test_matches_encode_softmax(self, vocab):
        params = init_params(len(vocab), 3, seed=8, scale=0.6)
        teacher = init_teacher(params)
        cands = CandidateSet.assemble("alpha", ["beta gamma"], ["epsilon", "delta alpha"])
        q = encode(tokenize("gamma", vocab), params, True).values
        scores = [float(q @ encode(tokenize(t, vocab), params, True).values) for t in cands.doc_texts]
        np.testing.assert_allclose(
            teacher_distribution(teacher, vocab, "gamma", cands, 7.0), softmax(scores, 7.0), atol=1e-15
        )

    def test_candidate_set_needs_two(self):
        with pytest.raises(ContractViolation):
            CandidateSet(("only",))


probs = st.lists(st.floats(0.01, 1.0), min_size=2, max_size=6)


class TestPairLoss:
    def test_flag_zero_is_consistency(self):
        p, t = [0.3, 0.7], [0.6, 0.4]
        assert pair_loss(p, t, 0, 0) == kl_divergence(p, t)

    def test_teacher_equal_student(self):
        p = [0.2, 0.5, 0.3]
        assert pair_loss(p, p, 1, 1) == pytest.approx(-math.log(0.5), abs=1e-15)

    def test_perfect_student(self):
        assert abs(pair_loss([1.0, 0.0, 0.0], [1.0, 0.0, 0.0], 0, 1)) < 1e-9

    def test_worked_example(self):
        expected = -math.log(0.5) + 0.5 * math.log(25 / 9)
        assert pair_loss([0.5, 0.5], [0.9, 0.1], 0, 1) == pytest.approx(expected, abs=1e-15)

    def test_reverse_direction(self):
        assert pair_loss([0.5, 0.5], [0.9, 0.1], 0, 0, reverse_kl=True) == pytest.approx(
            kl_divergence([0.9, 0.1], [0.5, 0.5]), abs=1e-15
        )

    @given(probs, probs, st.integers(0, 5), st.sampled_from([0, 1]))
    def test_non_negative(self, a, b, pos, flag):
        n = min(len(a), len(b))
        p = np.array(a[:n]) / sum(a[:n])
        t = np.array(b[:n]) / sum(b[:n])
        assert pair_loss(p, t, pos % n, flag) >= 0.0

    def test_length_mismatch(self):
        with pytest.raises(ContractViolation):
            pair_loss([0.5, 0.5], [1 / 3] * 3, 0, 1)
