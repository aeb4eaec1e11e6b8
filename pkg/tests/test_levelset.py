"""Zero-level extraction and feasibility reporting."""

import math

import numpy as np
import pytest

from conftest import make_gbm_spec, coarse_grid
from lscontrol import (
    INFEASIBLE,
    CorruptedSliceError,
    LevelSetQuery,
    SolveResult,
    ValueSlice,
    build_variant_lattice,
    extract_value,
    feasibility_report,
    solve_problem,
    write_feasibility_csv,
)

E01 = math.exp(0.1)


def hinge_result(level=1.3, profile=None):
    """Hand-built root slice whose budget profile is known in closed form."""
    spec = make_gbm_spec()
    grid = coarse_grid(spec, nz=11, np_=5, nm=17, dt=0.05)
    root = [k for k in build_variant_lattice(spec, 0) if k.is_root][-1]
    mg = grid.m_grid()
    if profile is None:
        profile = np.maximum(level - mg, 0.0)
    vals = np.broadcast_to(profile, (11, 5, 17)).copy()
    slices = {(root.label(), 0.0): ValueSlice(root, 0.0, vals)}
    return SolveResult(slices, grid, {}), grid


@pytest.fixture(scope="module")
def solved():
    spec = make_gbm_spec()
    grid = coarse_grid(spec, nz=41, np_=17, nm=17, dt=0.02)
    return spec, grid, solve_problem(spec, grid)


def test_recovers_a_planted_hinge_root():
    res, grid = hinge_result(level=1.3)
    dm = grid.m_grid()[1] - grid.m_grid()[0]
    ext = extract_value(res, LevelSetQuery(t=0.0, z=1.0, p=(0.7,),
                                           tolerance=1e-9))
    assert ext.feasible
    assert abs(ext.value - 1.3) <= dm / 4.0 + 1e-9
    assert ext.bracket[1] == ext.value
    assert ext.bracket[1] - ext.bracket[0] <= dm / 4.0 + 1e-12
    assert ext.achieved_w <= 1e-9


def test_zero_slice_gives_zero_budget():
    res, _ = hinge_result(profile=np.zeros(17))
    ext = extract_value(res, LevelSetQuery(t=0.0, z=1.0, p=(0.7,),
                                           tolerance=0.0))
    assert ext.value == 0.0
    assert ext.bracket == (0.0, 0.0)


def test_unreachable_level_reports_infeasible():
    res, _ = hinge_result(profile=np.full(17, 0.5))
    ext = extract_value(res, LevelSetQuery(t=0.0, z=1.0, p=(0.7,),
                                           tolerance=0.01))
    assert ext.value == INFEASIBLE
    assert not ext.feasible
    assert math.isinf(ext.bracket[1])


def test_search_ceiling_limits_feasibility():
    res, _ = hinge_result(level=1.3)
    ext = extract_value(res, LevelSetQuery(t=0.0, z=1.0, p=(0.7,),
                                           tolerance=1e-9, m_max=1.0))
    assert not ext.feasible


def test_rising_profile_is_rejected():
    res, grid = hinge_result(profile=grid_profile24())
    with pytest.raises(CorruptedSliceError, match="increases along m"):
        extract_value(res, LevelSetQuery(t=0.0, z=1.0, p=(0.7,),
                                         tolerance=0.01))


def grid_profile24():
    return np.linspace(0.0, 2.0, 17)


def test_query_validation():
    with pytest.raises(ValueError, match="nonnegative"):
        LevelSetQuery(t=0.0, z=1.0, p=(-0.1,))
    with pytest.raises(ValueError, match="nonnegative"):
        LevelSetQuery(t=0.0, z=1.0, p=(0.5,), tolerance=-1.0)
    res, _ = hinge_result()
    with pytest.raises(ValueError, match="outside axis"):
        extract_value(res, LevelSetQuery(t=0.0, z=5.0, p=(0.7,),
                                         tolerance=0.01))
    with pytest.raises(KeyError, match="no kept slice"):
        extract_value(res, LevelSetQuery(t=0.77, z=1.0, p=(0.7,),
                                         tolerance=0.01))


def test_default_tolerance_needs_a_residual_summary():
    res, _ = hinge_result()
    with pytest.raises(ValueError, match="explicit tolerance"):
        extract_value(res, LevelSetQuery(t=0.0, z=1.0, p=(0.7,)))


def test_default_tolerance_from_solve_diagnostics(solved):
    _, _, res = solved
    ext = extract_value(res, LevelSetQuery(t=0.0, z=1.0, p=(1.5,)))
    assert ext.tolerance > 0.0
    assert ext.feasible


def test_terminal_extraction_returns_the_terminal_cost(solved):
    _, grid, res = solved
    dm = grid.m_grid()[1] - grid.m_grid()[0]
    ext = extract_value(res, LevelSetQuery(t=1.0, z=0.9, p=(1.5,),
                                           tolerance=1e-9))
    assert abs(ext.value - 0.9) <= dm / 4.0 + 1e-6
    bad = extract_value(res, LevelSetQuery(t=1.0, z=0.9, p=(0.5,),
                                           tolerance=1e-9))
    assert not bad.feasible


def test_value_shrinks_as_the_tolerance_grows(solved):
    _, _, res = solved
    vals = [extract_value(res, LevelSetQuery(t=0.0, z=1.0, p=(1.5,),
                                             tolerance=e)).value
            for e in (0.005, 0.05, 0.2)]
    assert vals[0] >= vals[1] >= vals[2]
    assert vals[0] == pytest.approx(E01, abs=0.1)


def test_feasibility_report_matches_the_closed_form(solved, tmp_path):
    _, _, res = solved
    rows = feasibility_report(res, 0.0, [0.5, 1.0, 2.0], [0.5, 1.0, 1.5],
                              tolerance=0.02)
    table = {(r[0], r[1]): r[2] for r in rows}
    assert len(rows) == 9
    # uncontrolled growth: V = z * exp(0.1) where the date budget allows it
    assert table[(0.5, 1.0)] == pytest.approx(0.5 * E01, abs=0.06)
    assert table[(1.0, 1.5)] == pytest.approx(E01, abs=0.06)
    assert table[(0.5, 0.5)] == INFEASIBLE
    assert table[(2.0, 1.5)] == INFEASIBLE
    out = tmp_path / "feas.csv"
    write_feasibility_csv(out, rows, 1, 1)
    text = out.read_text().splitlines()
    assert text[0] == "z1,p_1,V"
    assert len(text) == 10
    assert any(line.endswith(",inf") for line in text[1:])
