"""Problem validation, running-cost augmentation, and the variant lattice."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_gbm_spec, relu
from lscontrol import (
    ControlSet,
    LossSpec,
    ProblemSpec,
    SdeCoefficients,
    TimeGrid,
    VariantKey,
    build_variant_lattice,
    check_convexity_preconditions,
    estimate_J,
    simulate_paths,
    zero_policy,
)
from lscontrol.model import augment_running_cost, boundary_sources, validate_spec


def test_gbm_spec_is_valid():
    assert validate_spec(make_gbm_spec()) == []


def test_signed_terminal_cost_is_flagged():
    spec = make_gbm_spec(z_box=(-1.0, 1.0))
    spec = ProblemSpec(
        sde=spec.sde,
        loss=LossSpec(terminal_cost=lambda z: float(np.sum(z)), loss=relu,
                      lipschitz_f=1.0, lipschitz_psi=1.0),
        grid=spec.grid,
        controls=spec.controls,
        sample_box=spec.sample_box,
    )
    msgs = validate_spec(spec)
    assert any("negative" in m for m in msgs)


def test_unsorted_dates_are_flagged():
    spec = make_gbm_spec(dates=(0.0, 1.0, 0.5))
    msgs = validate_spec(spec)
    assert any("increasing" in m for m in msgs)


def test_understated_lipschitz_constant_is_flagged():
    spec = make_gbm_spec()
    sde = SdeCoefficients(
        drift=spec.sde.drift,
        diffusion=spec.sde.diffusion,
        state_dim=1,
        lipschitz_z=1e-4,
        growth_z=spec.sde.growth_z,
    )
    msgs = validate_spec(ProblemSpec(sde=sde, loss=spec.loss, grid=spec.grid,
                                     controls=spec.controls,
                                     sample_box=spec.sample_box))
    assert any("lipschitz" in m.lower() or "quotient" in m.lower() for m in msgs)


# -- running-cost augmentation -------------------------------------------


def test_augmented_dimensions_and_zero_diffusion_row():
    spec = make_gbm_spec()
    aug = augment_running_cost(spec, lambda t, z, u: float(abs(z[0])))
    assert aug.sde.state_dim == 2
    sig = aug.sde.diffusion_mat(0.3, np.array([1.1, 0.4]), np.array([0.0, 0.0]))
    assert sig.shape == (2, 2)
    assert sig[1, 0] == 0.0 and sig[1, 1] == 0.0 and sig[0, 1] == 0.0
    # terminal cost reads the integrator, date loss ignores it
    z = np.array([0.7, 0.25])
    assert aug.loss.terminal_cost(z) == pytest.approx(0.7 + 0.25)
    assert aug.loss.loss(z) == pytest.approx(0.7)
    assert validate_spec(aug) == []


def test_constant_rate_accumulates_over_unit_horizon():
    """With frozen dynamics the integrator reaches exactly T * rate."""
    spec = make_gbm_spec(mu=0.0, sigma=0.0)
    aug = augment_running_cost(spec, lambda t, z, u: 1.0)
    paths = simulate_paths(aug, zero_policy(aug), (0.0, (1.0, 0.0), (5.0,), 5.0),
                           n_paths=3, n_steps_per_interval=40, seed=0)
    zT = paths.state_at_dates[-1]
    assert np.allclose(zT[:, 0], 1.0)
    assert np.allclose(zT[:, 1], 1.0)
    # terminal cost along every path is f(z) + 1
    assert aug.loss.terminal_cost(zT[0]) == pytest.approx(2.0)


def test_negative_running_cost_rejected():
    spec = make_gbm_spec(z_box=(-1.0, 1.0))
    with pytest.raises(ValueError, match="negative"):
        augment_running_cost(spec, lambda t, z, u: float(z[0]))


def test_zero_rate_augmentation_preserves_the_estimate():
    """A zero running cost must not change J (on zeta = 0 starts)."""
    spec = make_gbm_spec()
    aug = augment_running_cost(spec, lambda t, z, u: 0.0)
    start = (0.0, (1.0,), (1.2,), 1.0)
    start_aug = (0.0, (1.0, 0.0), (1.2,), 1.0)
    kw = dict(n_paths=4000, n_steps_per_interval=25)
    e0 = estimate_J(simulate_paths(spec, zero_policy(spec), start, seed=7, **kw),
                    spec.loss)
    e1 = estimate_J(simulate_paths(aug, zero_policy(aug), start_aug, seed=7, **kw),
                    aug.loss)
    gap = abs(e0.mean - e1.mean)
    assert gap <= 3.0 * math.hypot(e0.stderr, e1.stderr) + 1e-12


# -- variant lattice ------------------------------------------------------


def test_lattice_counts_one_and_two_dates():
    spec1 = make_gbm_spec(dates=(0.0, 1.0))
    spec2 = make_gbm_spec(dates=(0.0, 0.5, 1.0))
    assert len(build_variant_lattice(spec1, 0)) == 4
    assert len(build_variant_lattice(spec2, 0)) == 8
    assert len(build_variant_lattice(spec2, 1)) == 4


def test_lattice_root_and_ordering():
    spec = make_gbm_spec(dates=(0.0, 0.5, 1.0))
    keys = build_variant_lattice(spec, 0)
    root = keys[-1]
    assert root.is_root and root.has_m
    assert root.active_p == (1, 2) and root.plain_psi == ()
    pos = {k: i for i, k in enumerate(keys)}
    # every boundary variant appears before the variant that consumes it
    for key in keys:
        for sub in boundary_sources(key).values():
            assert pos[sub] < pos[key]
    assert pos[root.drop_m()] < pos[root]


@settings(max_examples=30, deadline=None)
@given(n_dates=st.integers(1, 3), bits=st.integers(0, 127))
def test_lattice_closed_under_single_boundary_moves(n_dates, bits):
    spec = make_gbm_spec(dates=tuple([0.0] + [k / n_dates for k in range(1, n_dates + 1)]))
    keys = set(build_variant_lattice(spec, 0))
    assert len(keys) == 2 ** n_dates * 2
    # pick a pseudo-random member and check all its single-step reductions
    key = sorted(keys)[bits % len(keys)]
    if key.has_m:
        assert key.drop_m() in keys
    for k in key.active_p:
        assert key.deactivate(k) in keys


def test_variant_key_labels_are_unique_and_stable():
    spec = make_gbm_spec(dates=(0.0, 0.5, 1.0))
    keys = build_variant_lattice(spec, 0)
    labels = [k.label() for k in keys]
    assert len(set(labels)) == len(labels)
    assert keys[-1].label() == "root"
    assert VariantKey(1, (2,), (), True).label() == "root_i1"


# -- convexity preconditions ----------------------------------------------


def test_affine_controlled_model_passes_checks():
    sde = SdeCoefficients(
        drift=lambda t, z, u: 0.1 * np.asarray(z, float) + np.asarray(u, float),
        diffusion=lambda t, z, u: (0.2 * np.asarray(z, float)).reshape(1, 1),
        state_dim=1, lipschitz_z=0.3, growth_z=1.2,
    )
    spec = ProblemSpec(
        sde=sde,
        loss=LossSpec(relu, relu, 1.0, 1.0),
        grid=TimeGrid((0.0, 1.0)),
        controls=ControlSet.box([(-1.0, 1.0)]),
        sample_box=((0.2, 3.0),),
    )
    cert = check_convexity_preconditions(spec)
    assert cert.verdict == "holds"
    assert cert.affine_drift and cert.affine_diffusion
    assert cert.costs_convex and cert.controls_convex


def test_two_point_control_set_is_not_convex():
    spec = make_gbm_spec()
    spec = ProblemSpec(sde=spec.sde, loss=spec.loss, grid=spec.grid,
                       controls=ControlSet.finite([(-1.0,), (1.0,)]),
                       sample_box=spec.sample_box)
    cert = check_convexity_preconditions(spec)
    assert cert.verdict == "unknown"
    assert not cert.controls_convex


def test_sine_diffusion_breaks_affinity():
    spec = make_gbm_spec()
    sde = SdeCoefficients(
        drift=spec.sde.drift,
        diffusion=lambda t, z, u: np.sin(np.asarray(z, float)).reshape(1, 1),
        state_dim=1, lipschitz_z=1.0, growth_z=1.0,
    )
    cert = check_convexity_preconditions(
        ProblemSpec(sde=sde, loss=spec.loss, grid=spec.grid,
                    controls=spec.controls, sample_box=((0.0, math.pi),)))
    assert cert.verdict == "unknown"
    assert not cert.affine_diffusion
