import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from impedance_irl import impedance as I
from impedance_irl.impedance import ForceSpace, GainAction, GainSpace, TipStiffnessSpec

finite = st.floats(-50, 50, allow_nan=False)


def test_feedback_force_examples():
    np.testing.assert_array_equal(I.feedback_force([5.0, 5.0], [1.0, 1.0], [0.0, 0.0], [0.0, 0.0]), 0.0)
    f = I.feedback_force([100.0], [20.0], [0.01], [0.1])
    assert f[0] == pytest.approx(-3.0, abs=1e-15)


def test_feedback_force_rejects_mismatch():
    with pytest.raises(ValueError):
        I.feedback_force([1.0, 2.0], [1.0], [0.0, 0.0], [0.0, 0.0])


def test_feedback_force_clamp():
    f = I.feedback_force([1000.0, 1000.0], [0.0, 0.0], [1.0, -0.01], [0.0, 0.0], f_max=[150.0, 150.0])
    np.testing.assert_array_equal(f, [-150.0, 10.0])


@settings(max_examples=100, deadline=None)
@given(arrays(float, 3, elements=st.floats(1, 2000)), arrays(float, 3, elements=st.floats(0, 100)),
       arrays(float, 3, elements=finite), arrays(float, 3, elements=finite))
def test_feedback_force_sign_flip(k, b, e, v):
    np.testing.assert_array_equal(I.feedback_force(k, b, -e, -v), -I.feedback_force(k, b, e, v))


@settings(max_examples=100, deadline=None)
@given(arrays(float, 3, elements=st.floats(1, 2000)), arrays(float, 3, elements=st.floats(0, 100)),
       arrays(float, 3, elements=st.floats(-0.01, 0.01)), arrays(float, 3, elements=st.floats(-0.01, 0.01)),
       st.floats(-1, 1))
def test_feedback_force_linear_below_clamp(k, b, e, v, alpha):
    fmax = np.full(3, 1e9)
    np.testing.assert_allclose(I.feedback_force(k, b, alpha * e, alpha * v, fmax),
                               alpha * I.feedback_force(k, b, e, v, fmax), rtol=1e-12, atol=1e-12)


def test_damping_from_factor():
    np.testing.assert_allclose(I.damping_from_factor([100.0, 400.0], 2.0), [20.0, 40.0])
    np.testing.assert_allclose(I.damping_from_factor([1.0], 1.0), [1.0])
    with pytest.raises(ValueError):
        I.damping_from_factor([100.0], 0.0)
    with pytest.raises(ValueError):
        I.damping_from_factor([-1.0], 1.0)


def test_to_positive_gains_examples():
    g = I.to_positive_gains(np.zeros(2), ([10.0, 1.0], [1010.0, 3.0]))
    np.testing.assert_array_equal(g.k_diag, [510.0, 2.0])
    g = I.to_positive_gains([1.0], ([10.0], [1010.0]))
    assert g.k_diag[0] == pytest.approx(10.0 + 1000.0 / (1.0 + math.exp(-1.0)), rel=1e-14)
    assert g.k_diag[0] == pytest.approx(741.1, abs=0.06)
    g = I.to_positive_gains([30.0], ([10.0], [1010.0]))
    assert 1009.0 < g.k_diag[0] <= 1010.0
    with pytest.raises(ValueError):
        I.to_positive_gains([0.0], ([0.0], [1.0]))


@settings(max_examples=200, deadline=None)
@given(arrays(float, 4, elements=st.floats(-30, 30)))
def test_to_positive_gains_in_bounds_and_monotone(raw):
    lo, hi = np.array([10.0, 10.0, 1.0, 0.5]), np.array([2000.0, 2000.0, 200.0, 4.0])
    g = I.to_positive_gains(raw, (lo, hi))
    assert np.all(g.k_diag >= lo) and np.all(g.k_diag <= hi) and np.all(g.k_diag > 0)
    g2 = I.to_positive_gains(raw + 0.5, (lo, hi))
    assert np.all(g2.k_diag >= g.k_diag)


def test_gain_action_invariants():
    with pytest.raises(ValueError):
        GainAction(np.array([1.0, 0.0]))
    with pytest.raises(ValueError):
        GainAction(np.array([1.0]), d=0.0)


def test_tip_to_com_examples():
    K = np.diag([3.0, 2.0, 1.0])
    np.testing.assert_allclose(I.tip_to_com(TipStiffnessSpec(K, np.eye(3))), K)
    c, s = math.cos(0.3), math.sin(0.3)
    R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    np.testing.assert_allclose(I.tip_to_com(TipStiffnessSpec(np.eye(3), R)), np.eye(3), atol=1e-15)
    with pytest.raises(ValueError):
        I.tip_to_com(TipStiffnessSpec(np.eye(3), np.eye(2)))


def test_tip_to_com_planar_peg_by_hand():
    # J = [[1, 0, L c], [0, 1, L s], [0, 0, 1]], K_tip = diag(a, b, r)
    a, b, r, L, th = 1800.0, 60.0, 30.0, 0.05, 0.1
    c, s = math.cos(th), math.sin(th)
    expected = np.array([[a, 0.0, a * L * c],
                         [0.0, b, b * L * s],
                         [a * L * c, b * L * s, a * L * L * c * c + b * L * L * s * s + r]])
    got = I.tip_to_com(TipStiffnessSpec(np.diag([a, b, r]), I.peg_tip_jacobian(th, L)))
    np.testing.assert_allclose(got, expected, rtol=1e-14)


@settings(max_examples=100, deadline=None)
@given(arrays(float, (3, 3), elements=st.floats(-3, 3)), arrays(float, (3, 3), elements=st.floats(-3, 3)))
def test_tip_to_com_symmetric_psd(A, J):
    K = A @ A.T
    out = I.tip_to_com(TipStiffnessSpec(K, J))
    np.testing.assert_allclose(out, out.T, atol=1e-10)
    assert np.min(np.linalg.eigvalsh(out)) >= -1e-9 * max(1.0, np.abs(out).max())


def test_diagonalize_examples():
    np.testing.assert_array_equal(I.diagonalize_stiffness(np.diag([4.0, 5.0]), [0.3, -2.0]), [4.0, 5.0])
    np.testing.assert_allclose(I.diagonalize_stiffness(np.array([[2.0, 1.0], [1.0, 2.0]]), [1.0, 1.0]), [3.0, 3.0])
    k = I.diagonalize_stiffness(np.array([[2.0, 1.0], [1.0, 7.0]]), [1.0, 0.0])
    np.testing.assert_allclose(k, [2.0, 7.0])


def test_diagonalize_clamps():
    k = I.diagonalize_stiffness(np.array([[2.0, 10.0], [1.0, 2.0]]), [1.0, -1.0], [0.5, 0.5], [5.0, 5.0])
    np.testing.assert_allclose(k, [0.5, 1.0])


@settings(max_examples=100, deadline=None)
@given(arrays(float, (3, 3), elements=st.floats(-3, 3)), arrays(float, 3, elements=st.floats(-1, 1)))
def test_diagonalize_reproduces_force(A, e):
    K = A @ A.T + np.eye(3)
    k = I.diagonalize_stiffness(K, e)
    ok = np.abs(e) > I.EPS_E
    np.testing.assert_allclose((k * e)[ok], (K @ e)[ok], rtol=1e-9, atol=1e-12)


# ---------------------------------------------------------------- action spaces

def test_gain_space_critical(peg):
    sp = GainSpace.from_env(peg)
    assert sp.dim == 3
    k, b = sp.split(np.array([100.0, 400.0, 4.0]))
    np.testing.assert_allclose(b, 2 * np.sqrt(k * np.array(peg.dynamics.masses)))


def test_gain_space_factor(cup):
    sp = GainSpace.from_env(cup)
    assert sp.dim == 4
    k, b = sp.split(np.array([100.0, 400.0, 900.0, 2.0]))
    np.testing.assert_allclose(b, [20.0, 40.0, 60.0])
    f = sp.force(np.array([100.0, 400.0, 900.0, 2.0]), np.array([0.01, 0.0, 0.0]), np.zeros(3))
    np.testing.assert_allclose(f, [-1.0, 0.0, 0.0])


@settings(max_examples=100, deadline=None)
@given(arrays(float, 4, elements=st.floats(-6, 6)))
def test_squash_round_trip(raw):
    for sp in (GainSpace([10.0] * 3, [2000.0] * 3, [1.0] * 3, damping="factor"), ForceSpace([150.0] * 4)):
        r = raw[:sp.dim]
        np.testing.assert_allclose(sp.unsquash(sp.squash(r)), r, atol=1e-6)


def test_unsquash_bounds_finite():
    sp = GainSpace([10.0], [2000.0], [1.0])
    assert np.all(np.isfinite(sp.unsquash(np.array([[10.0], [2000.0]]))))
    fs = ForceSpace([150.0])
    assert np.all(np.isfinite(fs.unsquash(np.array([[-150.0], [150.0]]))))


def test_make_action_space(peg):
    assert I.make_action_space("force", peg).dim == 3
    with pytest.raises(ValueError):
        I.make_action_space("torque", peg)
