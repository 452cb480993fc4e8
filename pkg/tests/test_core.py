import math

import numpy as np
import pytest

from pidkit import JointPmf, Pmf, co_information, conditional_mi, entropy, mutual_information
from pidkit.core import AXIS_X1, AXIS_X2, AXIS_Y
from pidkit.errors import DomainError

from conftest import random_joint

# Independent evaluations of -sum p log2 p, frozen as oracles.
H_3_1 = -(0.75 * math.log2(0.75) + 0.25 * math.log2(0.25))  # = 0.8112781244591328


def xor_joint():
    t = np.zeros((2, 2, 2))
    for a in (0, 1):
        for b in (0, 1):
            t[a, b, a ^ b] = 0.25
    return JointPmf(t)


def and_joint():
    t = np.zeros((2, 2, 2))
    for a in (0, 1):
        for b in (0, 1):
            t[a, b, a & b] = 0.25
    return JointPmf(t)


class TestPmfValidation:
    def test_rejects_negative(self):
        with pytest.raises(DomainError):
            Pmf(np.array([1.2, -0.2]))

    def test_rejects_bad_mass(self):
        with pytest.raises(DomainError):
            Pmf(np.array([0.5, 0.4]))

    def test_rejects_non_finite(self):
        with pytest.raises(DomainError):
            JointPmf(np.full((2, 2, 2), np.nan))

    def test_joint_marginals_are_valid(self, rng):
        j = random_joint(rng, (3, 4, 2))
        for axis in (0, 1, 2):
            Pmf(j.marginal((axis,)))  # must not raise


class TestEntropy:
    def test_uniform_binary_is_one_bit(self):
        assert entropy(Pmf.uniform(2)) == pytest.approx(1.0, abs=1e-12)

    def test_point_mass_is_zero(self):
        assert entropy(Pmf(np.array([1.0, 0.0, 0.0]))) == 0.0

    def test_three_quarters(self):
        assert entropy(Pmf(np.array([0.75, 0.25]))) == pytest.approx(H_3_1, abs=1e-12)


class TestMutualInformation:
    def test_independent_product_is_zero(self, rng):
        px = rng.dirichlet(np.ones(3))
        py = rng.dirichlet(np.ones(4))
        pz = rng.dirichlet(np.ones(2))
        j = JointPmf(px[:, None, None] * py[None, :, None] * pz[None, None, :])
        assert mutual_information(j, (AXIS_X1,), (AXIS_Y,)) == pytest.approx(0.0, abs=1e-12)
        assert mutual_information(j, (AXIS_X1, AXIS_X2), (AXIS_Y,)) == pytest.approx(0.0, abs=1e-12)

    def test_copy_channel_is_one_bit(self):
        t = np.zeros((2, 2, 2))
        t[0, 0, 0] = 0.5
        t[1, 1, 1] = 0.5
        j = JointPmf(t)
        assert mutual_information(j, (AXIS_X1,), (AXIS_X2,)) == pytest.approx(1.0, abs=1e-12)

    def test_and_gate_joint_mi(self):
        got = mutual_information(and_joint(), (AXIS_X1, AXIS_X2), (AXIS_Y,))
        assert got == pytest.approx(H_3_1, abs=1e-12)

    def test_overlapping_groups_rejected(self):
        with pytest.raises(DomainError):
            mutual_information(xor_joint(), (0, 1), (1, 2))

    def test_bounded_by_marginal_entropies(self, rng):
        for _ in range(50):
            j = random_joint(rng, (3, 3, 3))
            i = mutual_information(j, (AXIS_X1,), (AXIS_Y,))
            h_a = entropy(Pmf(j.marginal((AXIS_X1,))))
            h_b = entropy(Pmf(j.marginal((AXIS_Y,))))
            assert i <= min(h_a, h_b) + 1e-9


class TestConditionalMi:
    def test_xor_reveals_one_bit_given_other_input(self):
        assert conditional_mi(xor_joint(), AXIS_X1, AXIS_Y, AXIS_X2) == pytest.approx(1.0, abs=1e-12)

    def test_independent_triple_is_zero(self, rng):
        px = rng.dirichlet(np.ones(2))
        py = rng.dirichlet(np.ones(3))
        pz = rng.dirichlet(np.ones(2))
        j = JointPmf(px[:, None, None] * py[None, :, None] * pz[None, None, :])
        assert conditional_mi(j, AXIS_X1, AXIS_X2, AXIS_Y) == pytest.approx(0.0, abs=1e-12)

    def test_uninformative_source_given_the_other(self, rng):
        # Y = X1 with X2 independent: X2 carries nothing once X1 is known.
        px2 = rng.dirichlet(np.ones(3))
        t = np.zeros((2, 3, 2))
        for a in (0, 1):
            t[a, :, a] = 0.5 * px2
        j = JointPmf(t)
        assert conditional_mi(j, AXIS_X2, AXIS_Y, AXIS_X1) == pytest.approx(0.0, abs=1e-12)

    def test_repeated_axes_rejected(self):
        with pytest.raises(DomainError):
            conditional_mi(xor_joint(), 0, 0, 2)

    def test_chain_rule_on_random_joints(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            dims = tuple(rng.integers(2, 5, size=3))
            j = random_joint(rng, dims)
            lhs = mutual_information(j, (AXIS_X1, AXIS_X2), (AXIS_Y,))
            rhs = (mutual_information(j, (AXIS_X1,), (AXIS_Y,))
                   + conditional_mi(j, AXIS_X2, AXIS_Y, AXIS_X1))
            assert lhs == pytest.approx(rhs, abs=1e-9)


class TestCoInformation:
    def test_xor_is_minus_one(self):
        assert co_information(xor_joint()) == pytest.approx(-1.0, abs=1e-12)

    def test_copy_is_plus_one(self):
        t = np.zeros((2, 2, 2))
        t[0, 0, 0] = 0.5
        t[1, 1, 1] = 0.5
        assert co_information(JointPmf(t)) == pytest.approx(1.0, abs=1e-12)

    def test_independent_triple_is_zero(self, rng):
        px = rng.dirichlet(np.ones(2))
        py = rng.dirichlet(np.ones(2))
        pz = rng.dirichlet(np.ones(3))
        j = JointPmf(px[:, None, None] * py[None, :, None] * pz[None, None, :])
        assert co_information(j) == pytest.approx(0.0, abs=1e-12)


def test_merging_labels_never_increases_joint_mi(rng):
    # Data-processing sanity: collapsing two Y labels into one.
    for _ in range(50):
        j = random_joint(rng, (3, 3, 4))
        merged = j.table[:, :, [0, 1, 2]].copy()
        merged[:, :, 2] += j.table[:, :, 3]
        before = mutual_information(j, (AXIS_X1, AXIS_X2), (AXIS_Y,))
        after = mutual_information(JointPmf(merged), (AXIS_X1, AXIS_X2), (AXIS_Y,))
        assert after <= before + 1e-9
