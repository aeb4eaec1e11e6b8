"""Operator evaluators, the quadratic-form bridge, and the barrier check."""

import math

import numpy as np
import pytest

from lscontrol import (
    ControlSet,
    JetPoint,
    ScalingFns,
    SdeCoefficients,
    barrier_increments,
    g_matrix_check,
    strict_supersolution_gap,
    sup_hamiltonian,
    sup_over_sphere_exact,
    unit_scaling,
)
from conftest import make_gbm_spec
from lscontrol.hamiltonian import (
    SpherePoint,
    eval_F,
    eval_H,
    eval_L,
    g_matrix,
    scaling_matrix,
    sphere_sample,
)

UNIT = unit_scaling()


def const_sde(mu=0.1, sigma=0.2):
    return SdeCoefficients(
        drift=lambda t, z, u: np.full(1, mu),
        diffusion=lambda t, z, u: np.full((1, 1), sigma),
        state_dim=1,
        lipschitz_z=0.0,
        growth_z=abs(mu) + abs(sigma),
    )


def jet(q=(0.0, 0.0, 0.0), A=None, c=0.0, p=(1.0,), m=1.0, z=1.0, t=0.0):
    n = 1 + len(p) + 1
    A = np.zeros((n, n)) if A is None else np.asarray(A, dtype=float)
    return JetPoint(t, (z,), p, m, np.asarray(q, dtype=float), A, c)


def rand_jet(rng, n_p=1):
    n = 2 + n_p
    A = rng.standard_normal((n, n))
    return JetPoint(
        t=rng.uniform(0.0, 1.0),
        z=rng.uniform(0.3, 2.5, 1),
        p=rng.uniform(0.0, 3.0, n_p),
        m=rng.uniform(0.0, 3.0),
        q=rng.standard_normal(n),
        A=A + A.T,
        c=rng.standard_normal(),
    )


# -- first-order part -----------------------------------------------------


def test_first_order_hand_value():
    """q_z = 1, A_zm = 0.5, e = 1: value is -mu - e * sigma * A_zm = -0.2."""
    A = np.zeros((3, 3))
    A[0, 2] = A[2, 0] = 0.5
    theta = jet(q=(1.0, 0.0, 0.0), A=A)
    got = eval_L(theta, (0.0,), np.zeros((1, 1)), (1.0,), UNIT, const_sde())
    assert got == pytest.approx(-0.2, abs=1e-14)


def test_drift_term_alone():
    theta = jet(q=(2.0, -1.0, 0.5))
    got = eval_L(theta, (0.0,), np.zeros((1, 1)), (0.0,), UNIT, const_sde(mu=0.3))
    assert got == pytest.approx(-0.3 * 2.0, abs=1e-14)


def test_terminal_scaling_acts_linearly_on_the_e_term():
    A = np.zeros((3, 3))
    A[0, 2] = A[2, 0] = 0.7
    theta = jet(q=(1.0, 0.0, 0.0), A=A)
    args = ((0.0,), np.zeros((1, 1)), (1.0,))
    lam1 = eval_L(theta, *args, UNIT, const_sde())
    lam2 = eval_L(theta, *args, ScalingFns(kappa=lambda p: 1.0, lam=lambda m: 2.0, name="double"),
                  const_sde())
    # doubling lam adds exactly one extra copy of -e sigma A_zm
    assert lam2 - lam1 == pytest.approx(-0.2 * 0.7, abs=1e-14)


# -- budget-curvature part ------------------------------------------------


def test_budget_part_vanishes_without_integrands():
    rng = np.random.default_rng(3)
    theta = rand_jet(rng)
    assert eval_F(theta, np.zeros((1, 1)), (0.0,), UNIT) == 0.0


def test_budget_part_hand_value():
    A = np.zeros((3, 3))
    A[2, 2] = 1.0
    theta = jet(A=A)
    two = ScalingFns(kappa=lambda p: 1.0, lam=lambda m: 2.0, name="double")
    got = eval_F(theta, np.zeros((1, 1)), (1.0,), two)
    assert got == pytest.approx(-2.0, abs=1e-14)


def test_budget_part_sign_under_concavity():
    """With no cross term and concave budget directions the part is >= 0."""
    A = np.zeros((3, 3))
    A[1, 1] = -0.7
    A[2, 2] = -0.3
    theta = jet(A=A)
    rng = np.random.default_rng(4)
    for _ in range(25):
        a = rng.uniform(-2, 2, (1, 1))
        e = rng.uniform(-2, 2, 1)
        assert eval_F(theta, a, e, UNIT) >= 0.0


# -- compactified Hamiltonian ---------------------------------------------


def test_pole_keeps_only_the_time_and_drift_terms():
    theta = jet(q=(2.0, 0.0, 0.0), c=0.25)
    got = eval_H(theta, (0.0,), np.array([1.0, 0.0, 0.0]), UNIT, const_sde())
    assert got == pytest.approx(-0.25 - 0.1 * 2.0, abs=1e-14)


def test_tangent_direction_reads_budget_curvature():
    A = np.zeros((3, 3))
    A[2, 2] = 0.9
    theta = jet(A=A, m=2.0)
    two = ScalingFns(kappa=lambda p: 1.0, lam=lambda m: float(m), name="m")
    got = eval_H(theta, (0.0,), np.array([0.0, 0.0, 1.0]), two, const_sde())
    assert got == pytest.approx(-0.5 * 4.0 * 0.9, abs=1e-14)


def test_hamiltonian_is_continuous_into_the_tangent_set():
    rng = np.random.default_rng(5)
    theta = rand_jet(rng)
    sde = const_sde()
    target = eval_H(theta, (0.0,), np.array([0.0, 0.0, 1.0]), UNIT, sde)
    errs = []
    for b1 in (1e-2, 1e-4, 1e-6):
        b = np.array([b1, 0.0, math.sqrt(1.0 - b1 * b1)])
        errs.append(abs(eval_H(theta, (0.0,), b, UNIT, sde) - target))
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] <= 1e-4


def hand_h(theta, u, b, scaling, sde):
    """The compactified operator written out term by term, independently."""
    b1 = float(b[0])
    a = np.asarray(b[1:-1], dtype=float) / b1
    e = float(b[-1]) / b1
    mu = float(sde.drift_vec(theta.t, theta.z, np.atleast_1d(u))[0])
    sig = float(sde.diffusion_mat(theta.t, theta.z, np.atleast_1d(u))[0, 0])
    lam = scaling.lam(theta.m)
    kaps = [scaling.kappa(float(pk)) for pk in theta.p]
    val = -theta.c
    val -= mu * theta.q[0]
    val -= 0.5 * sig * sig * theta.A[0, 0]
    val -= lam * e * sig * theta.A[0, -1]
    for k, kap in enumerate(kaps):
        val -= kap * float(a[k]) * sig * theta.A[0, 1 + k]
    val -= 0.5 * lam * lam * e * e * theta.A[-1, -1]
    for k, kap in enumerate(kaps):
        val -= 0.5 * kap * kap * float(a[k]) ** 2 * theta.A[1 + k, 1 + k]
        val -= lam * kap * e * float(a[k]) * theta.A[1 + k, -1]
    return b1 * b1 * val


@pytest.mark.parametrize("n_p", [1, 2])
def test_rescaling_bridge_against_written_out_formula(n_p):
    rng = np.random.default_rng(6)
    sde = const_sde()
    scaling = ScalingFns(kappa=lambda p: 1.0 + 0.5 * p, lam=lambda m: 1.0 + m,
                         name="affine")
    for _ in range(50):
        theta = rand_jet(rng, n_p=n_p)
        b = rng.standard_normal(2 + n_p)
        b /= np.linalg.norm(b)
        if abs(b[0]) < 1e-3:
            continue
        got = eval_H(theta, (0.0,), b, scaling, sde)
        want = hand_h(theta, (0.0,), b, scaling, sde)
        assert got == pytest.approx(want, rel=1e-12, abs=1e-12)


# -- supremum over controls and directions --------------------------------


def test_positive_head_attained_at_the_pole():
    theta = jet(c=-0.3)
    controls = ControlSet.finite([(0.0,)])
    val, (u, b) = sup_hamiltonian(theta, controls, UNIT, const_sde())
    assert val == pytest.approx(0.3, abs=1e-12)
    assert abs(b[0]) == pytest.approx(1.0, abs=1e-12)


def test_negative_head_pushes_the_argmax_to_the_tangent_set():
    theta = jet(c=0.3)
    controls = ControlSet.finite([(0.0,)])
    val, (u, b) = sup_hamiltonian(theta, controls, UNIT, const_sde())
    assert val == 0.0
    assert abs(b[0]) <= 1e-12


def test_refining_the_sphere_never_lowers_the_supremum():
    rng = np.random.default_rng(7)
    controls = ControlSet.finite([(0.0,)])
    sde = const_sde()
    for _ in range(10):
        theta = rand_jet(rng)
        lo, _ = sup_hamiltonian(theta, controls, UNIT, sde, sphere_resolution=12)
        hi, _ = sup_hamiltonian(theta, controls, UNIT, sde, sphere_resolution=24)
        assert hi >= lo
        exact = sup_over_sphere_exact(theta, (0.0,), UNIT, sde)
        assert hi <= exact + 1e-10
        assert exact - hi <= 0.05 * (1.0 + abs(exact))


# -- quadratic-form bridge ------------------------------------------------


def test_unit_scaling_makes_both_identities_exact():
    rng = np.random.default_rng(8)
    sde = const_sde()
    for n_p in (1, 2):
        for k in range(20):
            rep = g_matrix_check(rand_jet(rng, n_p), (0.0,), UNIT, sde,
                                 n_directions=16, seed=k)
            assert rep.max_form_error <= 1e-12
            assert rep.max_det_error <= 1e-12


def test_budget_scaling_determinant_identity():
    rng = np.random.default_rng(9)
    sde = const_sde()
    scaling = ScalingFns(kappa=lambda p: max(1.0, p), lam=lambda m: max(1.0, m),
                         name="one_vee")
    worst = 0.0
    for n_p in (1, 2):
        for k in range(50):
            rep = g_matrix_check(rand_jet(rng, n_p), (0.0,), scaling, sde,
                                 n_directions=8, seed=k)
            worst = max(worst, rep.max_det_error)
            assert rep.ok
    assert worst <= 1e-8


def test_leading_entry_is_never_rescaled():
    """The first leading minor of Q G Q equals that of G exactly."""
    rng = np.random.default_rng(10)
    theta = rand_jet(rng)
    G = g_matrix(theta, (0.0,), const_sde())
    Q = scaling_matrix(theta, ScalingFns(kappa=lambda p: 3.0, lam=lambda m: 7.0, name="const"))
    assert (Q @ G @ Q)[0, 0] == G[0, 0]


# -- barrier diagnostic ---------------------------------------------------


def test_barrier_increments_match_hand_derivatives():
    theta = jet(q=(0.3, 0.1, -0.2), p=(0.5,), m=1.5, t=0.25)
    s, xi = 1.0, 0.8
    dc, dq, dA = barrier_increments(theta, s, xi)
    gr = math.exp(s - theta.t)
    phi = gr * (1.0 + math.log(1.5) + math.log(2.5))
    assert dc == pytest.approx(-xi * phi, rel=1e-14)
    assert dq[0] == 0.0
    assert dq[1] == pytest.approx(xi * gr / 1.5, rel=1e-14)
    assert dq[2] == pytest.approx(xi * gr / 2.5, rel=1e-14)
    assert dA[1, 1] == pytest.approx(-xi * gr / 1.5 ** 2, rel=1e-14)
    assert dA[2, 2] == pytest.approx(-xi * gr / 2.5 ** 2, rel=1e-14)
    assert dA[0, 0] == 0.0 and dA[1, 2] == 0.0


def test_flat_solution_clears_the_barrier_bound():
    """Zero jets: the barrier alone must push the sup above xi/8."""
    spec = make_gbm_spec()
    jets = [jet(p=(pv,), m=mv, t=tv)
            for pv in (0.0, 1.0) for mv in (0.0, 2.0) for tv in (0.0, 0.5)]
    rep = strict_supersolution_gap(jets, 0.8, 0, spec, UNIT)
    assert rep.bound == pytest.approx(0.1)
    assert rep.min_sup >= 0.8 - 1e-12
    assert rep.min_gap > 0


def test_barrier_rejects_nonpositive_strength():
    spec = make_gbm_spec()
    with pytest.raises(ValueError):
        strict_supersolution_gap([jet()], 0.0, 0, spec, UNIT)


# -- input validation -----------------------------------------------------


def test_jet_rejects_asymmetric_hessian():
    A = np.zeros((3, 3))
    A[0, 1] = 1.0
    with pytest.raises(ValueError, match="symmetric"):
        JetPoint(0.0, (1.0,), (1.0,), 1.0, np.zeros(3), A, 0.0)


def test_jet_rejects_wrong_gradient_length():
    with pytest.raises(ValueError, match="gradient"):
        JetPoint(0.0, (1.0,), (1.0,), 1.0, np.zeros(2), np.zeros((3, 3)), 0.0)


def test_direction_must_be_unit_length():
    with pytest.raises(ValueError, match="unit"):
        SpherePoint(np.array([0.5, 0.5, 0.5]), 1)


def test_near_zero_leading_component_counts_as_tangent():
    b = np.array([1e-13, 1.0, 0.0])
    b /= np.linalg.norm(b)
    assert SpherePoint(b, 1).is_tangent


def test_sphere_sample_contains_pole_and_tangent_frame():
    B = sphere_sample(3, 8)
    assert any(np.allclose(row, [1, 0, 0]) for row in B)
    assert any(np.allclose(row, [0, 1, 0]) for row in B)
    assert any(np.allclose(row, [0, 0, 1]) for row in B)
    assert np.allclose(np.linalg.norm(B, axis=1), 1.0, atol=1e-9)
