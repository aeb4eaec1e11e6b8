"""Backward stepping, boundary wiring, diagnostics, and serialization."""

import math

import numpy as np
import pytest

from conftest import make_gbm_spec, coarse_grid, relu
from lscontrol import (
    ControlSet,
    GridSpec,
    LossSpec,
    ProblemSpec,
    SdeCoefficients,
    SolveResult,
    TimeGrid,
    ValueSlice,
    build_variant_lattice,
    check_slice_invariants,
    hjb_residual,
    jump_slice,
    read_slice_csv,
    residual_sample_nodes,
    solve_problem,
    terminal_slice,
    terminal_gap_report,
    unit_scaling,
    write_slice_csv,
)
from lscontrol.solver import sl_step


def flat_sde(mu=0.0, sigma=0.0):
    return SdeCoefficients(
        drift=lambda t, z, u: mu * np.ones_like(np.asarray(z, dtype=float)),
        diffusion=lambda t, z, u: sigma
        * np.ones_like(np.asarray(z, dtype=float))[..., None],
        state_dim=1,
        lipschitz_z=0.0,
        growth_z=abs(mu) + abs(sigma) + 1e-9,
    )


def zero_loss(z):
    return np.zeros_like(np.asarray(z, dtype=float)[..., 0])


# -- terminal data --------------------------------------------------------


def test_terminal_values_for_each_variant_kind():
    spec = make_gbm_spec()
    grid = coarse_grid(spec, nz=15, z_box=(0.2, 3.0))
    zg, pg, mg = grid.z_grid(0), grid.p_grid(1), grid.m_grid()
    z = zg[:, None, None]
    p = pg[None, :, None]
    m = mg[None, None, :]
    keys = {k.label(): k for k in build_variant_lattice(spec, 0)}

    root = terminal_slice(keys["root"], grid, spec.loss, spec)
    want = np.maximum(z - m, 0.0) + np.maximum(z - p, 0.0)
    assert np.array_equal(np.asarray(root.values, np.float64), want)

    w0 = terminal_slice(keys["i0_p1_nom"], grid, spec.loss, spec)
    want0 = z[:, :, 0] + np.maximum(z[:, :, 0] - p[:, :, 0], 0.0)
    assert np.array_equal(np.asarray(w0.values, np.float64), want0)

    plain_m = terminal_slice(keys["i0_pnone_m"], grid, spec.loss, spec)
    wantpm = np.maximum(z[:, 0, :] - m[:, 0, :], 0.0) + z[:, 0, :]
    assert np.array_equal(np.asarray(plain_m.values, np.float64), wantpm)

    bare = terminal_slice(keys["i0_pnone_nom"], grid, spec.loss, spec)
    assert np.array_equal(np.asarray(bare.values, np.float64), 2.0 * zg)


# -- single backward steps ------------------------------------------------


def perfect_hedge_setup():
    """Constant-diffusion spec whose one-cell noise shifts land on nodes.

    Every number in play (0.25, 0.5, quarter-cell grids) is an exact binary
    fraction, so node hits are bit-exact and equality checks are legitimate.
    """
    sde = flat_sde(mu=0.0, sigma=0.5)
    loss = LossSpec(terminal_cost=relu, loss=zero_loss,
                    lipschitz_f=1.0, lipschitz_psi=0.0)
    spec = ProblemSpec(sde=sde, loss=loss, grid=TimeGrid((0.0, 0.25)),
                       controls=ControlSet.finite([(0.0,)]),
                       sample_box=((0.0, 2.0),))
    grid = GridSpec(z_axis=((0.0, 2.0, 9),), p_axis=((2.0, 9),),
                    m_axis=(2.0, 9), dt=0.25, a_bound=1.0,
                    hedge_grid=("box", 5))
    return spec, grid


def test_perfect_hedge_reproduces_the_hinge():
    """sigma * sqrt(dt) equals one z cell, so the e = sigma hedge cancels the
    noise exactly and the step leaves (z - m)+ untouched off the z edges."""
    spec, grid = perfect_hedge_setup()
    root = build_variant_lattice(spec, 0)[-1]
    nxt = terminal_slice(root, grid, spec.loss, spec)
    zg, mg = grid.z_grid(0), grid.m_grid()
    want = np.maximum(zg[:, None, None] - mg[None, None, :], 0.0)
    assert np.array_equal(np.asarray(nxt.values, np.float64),
                          np.broadcast_to(want, (9, 9, 9)))
    out = sl_step(nxt, grid, spec)
    assert out.t == 0.0
    got = np.asarray(out.values, np.float64)
    assert np.array_equal(got[1:-1], np.broadcast_to(want, (9, 9, 9))[1:-1])
    # the point z = m = 1 sits at indices (4, :, 4)
    assert got[4, 3, 4] == 0.0


def test_identity_step_with_frozen_dynamics():
    spec, grid = perfect_hedge_setup()
    spec = ProblemSpec(sde=flat_sde(0.0, 0.0), loss=spec.loss, grid=spec.grid,
                       controls=spec.controls, sample_box=spec.sample_box)
    root = build_variant_lattice(spec, 0)[-1]
    nxt = terminal_slice(root, grid, spec.loss, spec)
    out = sl_step(nxt, grid, spec)
    assert np.array_equal(np.asarray(out.values), np.asarray(nxt.values))


def test_step_against_hand_two_point_average():
    """Variant with no budget axes: the step is a plain interpolated average."""
    sde = flat_sde(mu=0.3, sigma=0.2)
    loss = LossSpec(terminal_cost=relu, loss=relu, lipschitz_f=1.0,
                    lipschitz_psi=1.0)
    spec = ProblemSpec(sde=sde, loss=loss, grid=TimeGrid((0.0, 1.0)),
                       controls=ControlSet.finite([(0.0,)]),
                       sample_box=((0.0, 2.0),))
    grid = GridSpec(z_axis=((0.0, 2.0, 5),), p_axis=((2.0, 3),),
                    m_axis=(2.0, 3), dt=0.05, a_bound=1.0)
    bare = [k for k in build_variant_lattice(spec, 0)
            if not k.has_m and not k.active_p][0]
    vals = np.array([0.0, 0.3, 1.1, 2.4, 4.0])
    nxt = ValueSlice(bare, 1.0, vals)
    out = sl_step(nxt, grid, spec)

    # rows 1..3 query strictly inside the grid, away from edge extension
    zg = grid.z_grid(0)
    for i in (1, 2, 3):
        acc = 0.0
        for dw in (-math.sqrt(0.05), math.sqrt(0.05)):
            zq = zg[i] + 0.3 * 0.05 + 0.2 * dw
            x = (zq - zg[0]) / 0.5
            j = min(int(x), 3)
            f = x - j
            acc += 0.5 * (vals[j] + f * (vals[j + 1] - vals[j]))
        assert float(np.asarray(out.values)[i]) == pytest.approx(acc, abs=1e-13)


def test_step_is_monotone_in_its_input():
    spec, grid = perfect_hedge_setup()
    root = build_variant_lattice(spec, 0)[-1]
    rng = np.random.default_rng(12)
    base = rng.uniform(0.0, 1.5, (9, 9, 9))
    lo = sl_step(ValueSlice(root, 0.25, base), grid, spec)
    hi = sl_step(ValueSlice(root, 0.25, base + 0.1), grid, spec)
    assert (np.asarray(hi.values) >= np.asarray(lo.values) - 1e-12).all()


# -- full solves ----------------------------------------------------------


def closed_form_one_date(spec, grid, t):
    G = math.exp(0.1 * (1.0 - t))
    z = grid.z_grid(0)[:, None, None]
    p = grid.p_grid(1)[None, :, None]
    m = grid.m_grid()[None, None, :]
    return np.maximum(z * G - m, 0.0) + np.maximum(z * G - p, 0.0)


def small_gbm_solve(**kw):
    spec = make_gbm_spec()
    grid = coarse_grid(spec, nz=41, np_=17, nm=17, dt=0.02)
    return spec, grid, solve_problem(spec, grid, **kw)


def test_small_solve_tracks_the_closed_form():
    spec, grid, res = small_gbm_solve()
    got = np.asarray(res.get("root", 0.0).values, np.float64)
    want = closed_form_one_date(spec, grid, 0.0)
    # probe well inside the smooth region: both hinges clearly active
    zi = np.searchsorted(grid.z_grid(0), 2.0)
    for (pi, mi) in ((2, 2), (3, 5), (5, 3)):
        assert got[zi, pi, mi] == pytest.approx(want[zi, pi, mi], abs=0.02)
    # and the pinch at slack budgets: value near zero where zG < min(p, m)
    zi0 = np.searchsorted(grid.z_grid(0), 0.4)
    assert got[zi0, -1, -1] <= 0.02


def test_boundary_faces_carry_the_lower_variants():
    _, _, res = small_gbm_solve()
    root = np.asarray(res.get("root", 0.0).values)
    w0 = np.asarray(res.get("i0_p1_nom", 0.0).values)
    w1m = np.asarray(res.get("i0_pnone_m", 0.0).values)
    assert np.array_equal(root[:, :, 0], w0)
    assert np.array_equal(root[:, 0, :], w1m)


def test_slices_pass_the_invariant_suite():
    spec, grid, res = small_gbm_solve()
    for (label, t), sl in res.slices.items():
        w0 = None
        if sl.variant.has_m:
            w0 = res.slices.get((sl.variant.drop_m().label(), t))
        assert check_slice_invariants(sl, spec, grid, w0=w0) == []


def test_two_date_solve_jump_and_closed_form():
    spec = make_gbm_spec(dates=(0.0, 0.5, 1.0))
    grid = coarse_grid(spec, nz=41, np_=9, nm=9, dt=0.025)
    res = solve_problem(spec, grid, keep_times=(0.5,))

    # the stored date slice must be the lower continuation plus the penalty
    root_half = np.asarray(res.get("root", 0.5).values, np.float64)
    cont = res.get("root_i1", 0.5)
    keys = {k.label(): k for k in build_variant_lattice(spec, 0)}
    rebuilt = jump_slice(cont, keys["root"], grid, spec.loss, spec)
    assert np.array_equal(root_half, np.asarray(rebuilt.values, np.float64))
    pen = np.maximum(grid.z_grid(0)[:, None, None, None]
                     - grid.p_grid(1)[None, :, None, None], 0.0)
    direct = np.asarray(cont.values, np.float64)[:, None] + pen
    assert root_half == pytest.approx(direct, abs=1e-6)

    # interval-0 value against the two-date closed form, smooth nodes only
    got = np.asarray(res.get("root", 0.0).values, np.float64)
    z = grid.z_grid(0)[:, None, None, None]
    p1 = grid.p_grid(1)[None, :, None, None]
    p2 = grid.p_grid(2)[None, None, :, None]
    m = grid.m_grid()[None, None, None, :]
    want = (np.maximum(z * math.exp(0.05) - p1, 0.0)
            + np.maximum(z * math.exp(0.1) - p2, 0.0)
            + np.maximum(z * math.exp(0.1) - m, 0.0))
    zi = np.searchsorted(grid.z_grid(0), 2.0)
    assert got[zi, 2, 2, 2] == pytest.approx(want[zi, 2, 2, 2], abs=0.04)


def test_kept_times_cover_requests_and_endpoints():
    spec = make_gbm_spec()
    grid = coarse_grid(spec, dt=0.05)
    res = solve_problem(spec, grid, keep_times=(0.3,), keep_triplet_times=(0.5,))
    times = res.times("root")
    for t in (0.0, 0.3, 0.45, 0.5, 0.55, 1.0):
        assert any(abs(x - t) < 1e-9 for x in times)


def test_engines_agree_bit_for_bit():
    spec = make_gbm_spec()
    grid = coarse_grid(spec, nz=25, np_=7, nm=7, dt=0.05)
    a = solve_problem(spec, grid, engine="numpy", residual_samples=0)
    b = solve_problem(spec, grid, engine="numba", residual_samples=0)
    assert set(a.slices) == set(b.slices)
    for key in a.slices:
        assert np.array_equal(np.asarray(a.slices[key].values),
                              np.asarray(b.slices[key].values)), key


def test_repeat_solves_are_identical():
    _, _, r1 = small_gbm_solve()
    _, _, r2 = small_gbm_solve()
    for key in r1.slices:
        assert np.array_equal(np.asarray(r1.slices[key].values),
                              np.asarray(r2.slices[key].values))
    assert r1.diagnostics.get("median_residual") == r2.diagnostics.get(
        "median_residual")


def test_invalid_grids_are_rejected():
    spec = make_gbm_spec(dates=(0.0, 0.5, 1.0))
    bad_dt = coarse_grid(spec, dt=0.7)
    with pytest.raises(ValueError, match="invalid grid"):
        solve_problem(spec, bad_dt)
    bad_p = GridSpec(z_axis=((0.2, 3.0, 9),), p_axis=((2.0, 5),),
                     m_axis=(2.0, 5), dt=0.1)
    with pytest.raises(ValueError, match="constraint date"):
        solve_problem(spec, bad_p)


# -- diagnostics ----------------------------------------------------------


def test_residual_nodes_stay_interior_and_reproduce():
    spec, grid, res = small_gbm_solve(keep_triplet_times=(0.5,))
    nodes = residual_sample_nodes(res, "root", 0.5, 25, seed=3)
    assert len(nodes) == 25
    shape = np.asarray(res.get("root", 0.5).values).shape
    for _lab, t, idx in nodes:
        assert t == 0.5
        for ax, j in enumerate(idx):
            assert 2 <= j <= shape[ax] - 3
    assert nodes == residual_sample_nodes(res, "root", 0.5, 25, seed=3)


def closed_form_triplet(spec, grid, t_mid, dt):
    """Slices of the known uncontrolled value bracketing one time level."""
    root = [k for k in build_variant_lattice(spec, 0) if k.is_root][-1]
    zg = grid.z_grid(0)[:, None, None]
    pg = grid.p_grid(1)[None, :, None]
    mg = grid.m_grid()[None, None, :]
    slices = {}
    for t in (t_mid - dt, t_mid, t_mid + dt):
        G = math.exp(0.1 * (1.0 - t))
        vals = np.maximum(zg * G - mg, 0.0) + np.maximum(zg * G - pg, 0.0)
        key = round(float(t), 10) + 0.0
        slices[(root.label(), key)] = ValueSlice(root, key, vals)
    return SolveResult(slices, grid, {})


def test_residual_is_small_on_the_exact_solution():
    spec = make_gbm_spec()
    grid = coarse_grid(spec, nz=51, np_=21, nm=21, dt=0.02)
    res = closed_form_triplet(spec, grid, 0.5, grid.dt)
    nodes = residual_sample_nodes(res, "root", 0.5, 100, seed=0)
    stats = hjb_residual(res, nodes, unit_scaling(), spec)
    assert stats.median <= 1e-5


def test_terminal_gap_fit_recovers_a_planted_exponent():
    spec = make_gbm_spec()
    grid = coarse_grid(spec, nz=21, np_=9, nm=9, dt=0.01)
    root = [k for k in build_variant_lattice(spec, 0) if k.is_root][-1]
    zg = grid.z_grid(0)[:, None, None]
    pg = grid.p_grid(1)[None, :, None]
    mg = grid.m_grid()[None, None, :]
    limit = np.maximum(zg - mg, 0.0) + np.maximum(zg - pg, 0.0)
    slices = {}
    offsets = (0.01, 0.04, 0.16)
    for h in offsets:
        key = round(1.0 - h, 10) + 0.0
        slices[(root.label(), key)] = ValueSlice(root, key,
                                                 limit + 0.7 * math.sqrt(h))
    rep = terminal_gap_report(SolveResult(slices, grid, {}), spec, offsets)
    assert rep["gaps"] == pytest.approx([0.7 * math.sqrt(h) for h in offsets],
                                        rel=1e-9)
    assert rep["beta"] == pytest.approx(0.5, abs=1e-9)


# -- serialization --------------------------------------------------------


def test_slice_csv_round_trip_is_exact():
    spec, grid, res = small_gbm_solve(policy_times=(0.0,))
    sl = res.get("root", 0.0)
    assert sl.policy is not None
    path = "/tmp/lsc_slice_roundtrip.csv"
    write_slice_csv(path, sl, spec, grid)
    back = read_slice_csv(path, spec, grid, sl.variant)
    assert back.t == sl.t
    assert back.variant == sl.variant
    assert np.array_equal(np.asarray(back.values, np.float64),
                          np.asarray(sl.values, np.float64))
