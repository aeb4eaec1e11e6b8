"""Zero-level extraction of the constrained value from solved slices.

The constrained value at (t, z, p) is the smallest terminal budget m at which
the penalized auxiliary value vanishes.  Numerically the slices carry scheme
error, so "vanishes" means dropping below a small tolerance; the search is a
bisection along the budget axis, valid because slices are nonincreasing in m.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .solver import GridSpec, SolveResult, ValueSlice

__all__ = [
    "LevelSetQuery",
    "ValueExtraction",
    "extract_value",
    "feasibility_report",
    "write_feasibility_csv",
]

INFEASIBLE = math.inf


@dataclass(frozen=True)
class LevelSetQuery:
    """A point (t, z, p) to evaluate, with search controls.

    ``tolerance`` is the zero-level threshold; None requests an automatic
    choice combining the measured solve residual with an estimate of the
    hinge smearing introduced by interpolation along the budget axes.
    ``m_max`` caps the search and defaults to the top of the budget axis.
    """

    t: float
    z: tuple
    p: tuple = ()
    tolerance: float | None = None
    m_max: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "z", tuple(float(v) for v in np.atleast_1d(self.z)))
        object.__setattr__(self, "p", tuple(float(v) for v in np.atleast_1d(self.p))
                           if self.p is not None else ())
        if self.tolerance is not None and self.tolerance < 0:
            raise ValueError("tolerance must be nonnegative")
        if any(v < 0 for v in self.p):
            raise ValueError("budget entries must be nonnegative")


@dataclass(frozen=True)
class ValueExtraction:
    value: float
    achieved_w: float
    bracket: tuple
    tolerance: float

    @property
    def feasible(self) -> bool:
        return math.isfinite(self.value)


class CorruptedSliceError(ValueError):
    """A slice violates the monotonicity the extraction relies on."""


def _root_slice_for(result: SolveResult, t: float, n_p: int) -> ValueSlice:
    """The kept all-budgets slice at time t with n_p date budgets."""
    for (lab, tt), sl in result.slices.items():
        if not (lab == "root" or lab.startswith("root_i")):
            continue
        if abs(tt - t) > 1e-9:
            continue
        if sl.variant.has_m and len(sl.variant.active_p) == n_p:
            return sl
    raise KeyError(
        f"no kept slice with {n_p} date budgets at t={t}; "
        "solve with keep_times covering the query time")


def _profile_along_m(sl: ValueSlice, grid: GridSpec, z: tuple, p: tuple
                     ) -> np.ndarray:
    """Multilinear interpolation in (z, p) of the value, dense along m."""
    axes = [grid.z_grid(i) for i in range(len(grid.z_axis))]
    axes += [grid.p_grid(k) for k in sl.variant.active_p]
    coords = list(z) + list(p)
    cells = []
    for ax, x in zip(axes, coords):
        if x < ax[0] - 1e-12 or x > ax[-1] + 1e-12:
            raise ValueError(f"query coordinate {x} outside axis "
                             f"[{ax[0]}, {ax[-1]}]")
        j = int(np.clip(np.searchsorted(ax, x) - 1, 0, len(ax) - 2))
        fr = (x - ax[j]) / (ax[j + 1] - ax[j])
        cells.append((j, float(np.clip(fr, 0.0, 1.0))))
    w = np.asarray(sl.values, dtype=np.float64)
    profile = np.zeros(w.shape[-1])
    for corner in np.ndindex(*([2] * len(cells))):
        wt = 1.0
        idx = []
        for (j, fr), side in zip(cells, corner):
            wt *= fr if side else (1.0 - fr)
            idx.append(j + side)
        if wt:
            profile += wt * w[tuple(idx)]
    return profile


def _check_monotone(profile: np.ndarray) -> None:
    scale = 1.0 + float(np.abs(profile).max(initial=0.0))
    slack = 1e-6 * scale
    up = np.diff(profile)
    if (up > slack).any():
        j = int(np.argmax(up))
        raise CorruptedSliceError(
            f"slice increases along m near index {j} "
            f"({profile[j]:.6g} -> {profile[j + 1]:.6g})")


def extract_value(result: SolveResult, query: LevelSetQuery) -> ValueExtraction:
    """Smallest budget m with w(t, z, p, m) at or below the tolerance.

    Bisects the piecewise-linear budget profile down to a bracket no wider
    than a quarter cell.  Returns the infeasible marker (value = inf) when
    even the search ceiling cannot bring w below the tolerance.
    """
    grid: GridSpec = result.config
    sl = _root_slice_for(result, query.t, len(query.p))
    mg = grid.m_grid()
    dm = mg[1] - mg[0]
    profile = _profile_along_m(sl, grid, query.z, query.p)
    _check_monotone(profile)

    eps = query.tolerance
    if eps is None:
        med = result.diagnostics.get("median_residual")
        if med is None:
            raise ValueError(
                "no residual summary on the solve; pass an explicit tolerance")
        horizon = max(t for _lab, t in result.slices)
        span = max(horizon - query.t, 0.0)
        # Two error sources set the default.  The residual summary tracks the
        # consistency error in smooth regions, accumulated over the remaining
        # horizon.  Independently, every backward step re-reads the budget
        # axes through first-order interpolation; a fractional read on a cell
        # of width c perturbs a kinked profile by O(c) with variance ~ c^2/18
        # (uniform offset, one third of the quadrature mass off-node), so
        # after n steps the positive-part hinge smears to a ramp of width
        # ~ c sqrt(n/18) and sits near 0.4 of that height at the true root.
        # The default is the larger of the two so it stays meaningful when
        # the residual is machine-zero on piecewise-linear data.
        cells = [float(dm)]
        for k in range(len(query.p)):
            pg = grid.p_grid(k)
            if len(pg) > 1:
                cells.append(float(pg[1] - pg[0]))
        steps = max(span, grid.dt) / grid.dt
        smear = 0.4 * max(cells) * math.sqrt(steps / 18.0)
        eps = max(2.0 * med * span, smear)

    m_top = float(mg[-1]) if query.m_max is None else min(float(query.m_max),
                                                          float(mg[-1]))

    def w_at(m):
        x = (m - mg[0]) / dm
        j = int(np.clip(math.floor(x), 0, len(mg) - 2))
        fr = x - j
        return float(profile[j] + fr * (profile[j + 1] - profile[j]))

    if w_at(0.0) <= eps:
        return ValueExtraction(0.0, w_at(0.0), (0.0, 0.0), eps)
    if w_at(m_top) > eps:
        return ValueExtraction(INFEASIBLE, w_at(m_top), (m_top, math.inf), eps)
    lo, hi = 0.0, m_top
    while hi - lo > dm / 4.0:
        mid = 0.5 * (lo + hi)
        if w_at(mid) <= eps:
            hi = mid
        else:
            lo = mid
    return ValueExtraction(hi, w_at(hi), (lo, hi), eps)


def feasibility_report(result: SolveResult, t: float, z_probe_grid: Sequence,
                       p_probe_grid: Sequence, tolerance: float | None = None,
                       m_max: float | None = None) -> list:
    """Rows (z..., p..., value-or-inf) over the probe product grid.

    Also asserts that the extracted value never increases as any budget entry
    grows, which the level-set construction guarantees.
    """
    grid: GridSpec = result.config
    dm = grid.m_grid()[1] - grid.m_grid()[0]
    rows = []
    for z in z_probe_grid:
        z_t = tuple(float(v) for v in np.atleast_1d(z))
        per_z = []
        for p in p_probe_grid:
            p_t = tuple(float(v) for v in np.atleast_1d(p))
            q = LevelSetQuery(t=t, z=z_t, p=p_t, tolerance=tolerance,
                              m_max=m_max)
            ext = extract_value(result, q)
            per_z.append((p_t, ext.value))
            rows.append(z_t + p_t + (ext.value,))
        per_z.sort(key=lambda r: r[0])
        for (pa, va), (pb, vb) in zip(per_z, per_z[1:]):
            if all(x <= y for x, y in zip(pa, pb)) and vb > va + dm:
                raise AssertionError(
                    f"value increased with the budget at z={z_t}: "
                    f"V{pa}={va:.6g} -> V{pb}={vb:.6g}")
    return rows


def write_feasibility_csv(path, rows: Sequence, n_z: int, n_p: int) -> None:
    header = ",".join([f"z{i + 1}" for i in range(n_z)]
                      + [f"p_{k + 1}" for k in range(n_p)] + ["V"])
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in rows:
            cells = ["%.17g" % v if math.isfinite(v) else "inf" for v in row]
            fh.write(",".join(cells) + "\n")
