import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rsjd.errors import DomainError
from rsjd.jumps import AdmissibleSet, JumpMeasure, big_g, contains, contains_strict, jump_integral_g, jump_terms


def scalar_marks():
    return AdmissibleSet.from_measure(JumpMeasure.from_atoms(
        [{"gamma": [-0.5], "weight": 1.0}, {"gamma": [1.0], "weight": 1.0}]))


def single_atom(in_z0):
    return JumpMeasure.from_atoms([{"gamma": [0.5], "weight": 2.0, "in_z0": in_z0}])


class TestBigG:
    def test_zero_allocation(self):
        assert big_g([0.0, 0.0], [0.3, -0.2], 1.7) == 0.0

    def test_hand_values(self):
        assert big_g([1.0], [1.0], 1.0) == pytest.approx(0.5)
        assert big_g([1.0], [-0.5], 2.0) == pytest.approx(-3.0)

    def test_outside_half_space(self):
        with pytest.raises(DomainError):
            big_g([2.5], [-0.5], 1.0)


class TestAdmissible:
    def test_scalar_interval(self):
        aset = scalar_marks()
        assert contains(aset, [0.0])
        assert not contains(aset, [2.5])
        assert not contains(aset, [-1.5])
        # the set is (-1, 2)
        assert contains(aset, [1.999]) and contains(aset, [-0.999])
        assert not contains(aset, [2.0]) and not contains(aset, [-1.0])

    def test_strict_margin(self):
        aset = scalar_marks()
        assert contains(aset, [2.0 - 1e-9])
        assert not contains_strict(aset, [2.0 - 1e-9])
        assert contains_strict(aset, [1.9], delta=0.01)

    def test_no_atoms_is_everything(self):
        aset = AdmissibleSet.from_measure(JumpMeasure.empty(2))
        assert not aset.bounded
        assert contains(aset, [1e6, -1e6])

    def test_max_step_stays_inside(self):
        aset = scalar_marks()
        a = aset.max_step([1.5], [10.0])
        assert contains_strict(aset, [1.5 + a * 10.0])


class TestJumpIntegral:
    def test_zero_allocation(self, jmodel):
        assert jump_integral_g(np.zeros(2), jmodel.jumps, 1.3) == 0.0

    def test_compensated_atom(self):
        assert jump_integral_g([1.0], single_atom(True), 1.0) == pytest.approx(1.0 / 3.0)

    def test_uncompensated_atom(self):
        assert jump_integral_g([1.0], single_atom(False), 1.0) == pytest.approx(-2.0 / 3.0)

    def test_blows_up_at_boundary(self):
        jm = JumpMeasure.from_atoms([{"gamma": [-0.5], "weight": 1.0, "in_z0": True}])
        near = jump_integral_g([2.0 - 2e-6], jm, 1.0)
        far = jump_integral_g([2.0 - 2e-2], jm, 1.0)
        assert near > 10 * far

    def test_derivatives_match_finite_differences(self, jmodel, rng):
        theta = 1.4
        H = rng.uniform(-0.5, 0.5, size=(5, 2))
        v, g, h = jump_terms(H, jmodel.jumps, theta)
        eps = 1e-6
        for i in range(2):
            e = np.zeros(2)
            e[i] = eps
            vp, gp, _ = jump_terms(H + e, jmodel.jumps, theta)
            vm, gm, _ = jump_terms(H - e, jmodel.jumps, theta)
            np.testing.assert_allclose((vp - vm) / (2 * eps), g[:, i], rtol=1e-6, atol=1e-9)
            np.testing.assert_allclose((gp - gm) / (2 * eps), h[:, :, i], rtol=1e-5, atol=1e-8)


class TestMeasure:
    def test_round_trip(self, jmodel):
        jm = JumpMeasure.from_atoms(jmodel.jumps.to_atoms())
        np.testing.assert_array_equal(jm.gammas, jmodel.jumps.gammas)
        np.testing.assert_array_equal(jm.in_z0, jmodel.jumps.in_z0)

    def test_moments(self, jmodel):
        jm = jmodel.jumps
        assert jm.total_intensity == pytest.approx(1.2)
        assert jm.finite_activity_weight == pytest.approx(0.5)
        assert jm.z0_square_moment == pytest.approx(0.7 * (0.08 ** 2 + 0.1 ** 2))

    def test_empty_requires_m(self):
        with pytest.raises(ValueError):
            JumpMeasure.from_atoms([])


@settings(max_examples=100, deadline=None)
@given(st.floats(-0.99, 0.99), st.floats(0.1, 5.0))
def test_g_below_one_and_sign(hg, theta):
    # G < 1 inside the half-space, and G has the sign of h.gamma
    G = big_g([hg], [1.0], theta)
    assert G < 1.0
    assert G * hg >= 0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-0.9, 0.9), min_size=2, max_size=2), st.floats(0.2, 4.0))
def test_jump_part_convex(h, theta):
    jm = JumpMeasure.from_atoms([{"gamma": [-0.3, 0.2], "weight": 1.0, "in_z0": False},
                                 {"gamma": [0.4, 0.5], "weight": 0.5, "in_z0": True}])
    a = np.array(h)
    b = -0.5 * a
    mid = jump_integral_g(0.5 * (a + b), jm, theta)
    assert mid <= 0.5 * jump_integral_g(a, jm, theta) + 0.5 * jump_integral_g(b, jm, theta) + 1e-12
