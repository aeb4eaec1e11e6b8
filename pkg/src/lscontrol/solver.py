"""Backward semi-Lagrangian solver for the penalized budget dynamics.

Solves, interval by interval, the family of auxiliary value functions indexed
by VariantKey: at each time step every grid node takes the minimum over a
sampled control set (drift control, one hedge block per active date, one hedge
block for the terminal budget) of the quadrature average of the next slice
evaluated at the shifted state.  Zero-budget faces are Dirichlet data injected
from the next-lower variants, which is why the lattice is marched in lockstep
from the bottom up.

The arithmetic of a step is deliberately rigid (shared lookup tables, fixed
blend nesting z -> p ascending -> m, strict-less minimum with first-wins ties)
so that the exhaustive oracle in `montecarlo.brute_force_dp` can reproduce
results bit-for-bit on matched discretizations.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .model import (
    ProblemSpec,
    LossSpec,
    VariantKey,
    build_variant_lattice,
    boundary_sources,
)
from .hamiltonian import JetPoint, ScalingFns, sup_over_sphere_exact, sup_hamiltonian

__all__ = [
    "GridSpec",
    "ValueSlice",
    "PolicyGrid",
    "SolveResult",
    "growth_constant",
    "default_a_bound",
    "variant_axes",
    "terminal_slice",
    "jump_slice",
    "aux_shift_tables",
    "z_shift_tables",
    "hedge_shift_tables",
    "step_tables",
    "sl_step",
    "boundary_inject",
    "solve_interval",
    "solve_problem",
    "hjb_residual",
    "ResidualStats",
    "residual_sample_nodes",
    "terminal_gap_report",
    "check_slice_invariants",
    "write_slice_csv",
    "read_slice_csv",
    "write_result_csvs",
]

_AUTO_F32_NODES = 2_000_000  # value arrays at least this large switch to float32


# ---------------------------------------------------------------------------
# grid specification


@dataclass(frozen=True)
class GridSpec:
    """Discretization: axes, time step, quadrature and control sampling.

    hedge_grid selects how the martingale-control boxes [-a_bound, a_bound]
    are sampled: ("box", n) takes n evenly spaced points; ("sigma_multipliers",
    (c0, c1, ...)) takes c_j * |sigma(z, u)| clipped to the box, which keeps
    the sampled hedges commensurate with the local diffusion scale.
    """

    z_axis: tuple
    p_axis: tuple
    m_axis: tuple
    dt: float
    quadrature: object = "two_point"
    a_bound: float | None = None
    control_resolution: int = 3
    hedge_grid: tuple = ("box", 5)
    dtype: str = "auto"

    def __post_init__(self):
        z = tuple((float(a), float(b), int(c)) for a, b, c in self.z_axis)
        p = tuple((float(a), int(b)) for a, b in self.p_axis)
        m = (float(self.m_axis[0]), int(self.m_axis[1]))
        object.__setattr__(self, "z_axis", z)
        object.__setattr__(self, "p_axis", p)
        object.__setattr__(self, "m_axis", m)
        if self.hedge_grid[0] == "sigma_multipliers":
            object.__setattr__(
                self,
                "hedge_grid",
                ("sigma_multipliers", tuple(float(c) for c in self.hedge_grid[1])),
            )

    # -- axes -------------------------------------------------------------

    def z_grid(self, dim: int = 0) -> np.ndarray:
        lo, hi, n = self.z_axis[dim]
        return np.linspace(lo, hi, n)

    def p_grid(self, date_k: int) -> np.ndarray:
        """Budget axis for constraint date ``date_k`` (1-based)."""
        hi, n = self.p_axis[date_k - 1]
        return np.linspace(0.0, hi, n)

    def m_grid(self) -> np.ndarray:
        hi, n = self.m_axis
        return np.linspace(0.0, hi, n)

    def steps_for_interval(self, dates: Sequence[float], i: int) -> tuple[int, float]:
        """Number of uniform steps and actual dt used on [t_i, t_{i+1}]."""
        gap = dates[i + 1] - dates[i]
        n = max(1, int(math.ceil(gap / self.dt - 1e-9)))
        return n, gap / n

    def quad(self, dt: float) -> tuple[np.ndarray, np.ndarray]:
        """Brownian increment nodes and weights for one step of size dt."""
        if self.quadrature == "two_point":
            r = math.sqrt(dt)
            return np.array([-r, r]), np.array([0.5, 0.5])
        kind, order = self.quadrature
        if kind != "gauss_hermite":
            raise ValueError(f"unknown quadrature {self.quadrature!r}")
        x, w = np.polynomial.hermite.hermgauss(int(order))
        return x * math.sqrt(2.0 * dt), w / math.sqrt(math.pi)

    # -- validation -------------------------------------------------------

    def validate(self, spec: ProblemSpec) -> list[str]:
        errs = []
        if len(self.z_axis) != spec.sde.state_dim:
            errs.append("z_axis does not cover every state dimension")
        for lo, hi, n in self.z_axis:
            if n < 2:
                errs.append("z axis needs at least 2 points")
            if not lo < hi:
                errs.append("z axis bounds not sorted")
        if len(self.p_axis) != spec.grid.n:
            errs.append("p_axis must list one (max, count) per constraint date")
        for hi, n in self.p_axis:
            if n < 2:
                errs.append("p axis needs at least 2 points")
            if hi <= 0:
                errs.append("p axis max must be positive")
        if self.m_axis[1] < 2:
            errs.append("m axis needs at least 2 points")
        if self.m_axis[0] <= 0:
            errs.append("m axis max must be positive")
        if not self.dt > 0:
            errs.append("dt must be positive")
        else:
            gaps = np.diff(spec.grid.dates)
            if gaps.size and self.dt > gaps.min() + 1e-12:
                errs.append("dt larger than the smallest inter-date gap")
        if self.a_bound is not None and not self.a_bound > 0:
            errs.append("a_bound must be positive")
        if self.quadrature != "two_point":
            try:
                kind, order = self.quadrature
                ok = kind == "gauss_hermite" and int(order) >= 2
            except Exception:
                ok = False
            if not ok:
                errs.append(f"unknown quadrature {self.quadrature!r}")
        if self.control_resolution < 1:
            errs.append("control_resolution must be at least 1")
        mode = self.hedge_grid[0]
        if mode == "box":
            if int(self.hedge_grid[1]) < 1:
                errs.append("box hedge grid needs at least 1 point")
        elif mode == "sigma_multipliers":
            if len(self.hedge_grid[1]) < 1:
                errs.append("sigma_multipliers hedge grid needs at least 1 value")
        else:
            errs.append(f"unknown hedge_grid mode {mode!r}")
        if self.dtype not in ("auto", "float32", "float64"):
            errs.append(f"unknown dtype {self.dtype!r}")
        return errs

    def value_dtype(self, n_nodes: int) -> np.dtype:
        if self.dtype == "float32":
            return np.dtype(np.float32)
        if self.dtype == "float64":
            return np.dtype(np.float64)
        return np.dtype(np.float32 if n_nodes >= _AUTO_F32_NODES else np.float64)


def default_a_bound(spec: ProblemSpec, n_samples: int = 60, seed: int = 0) -> float:
    """Truncation half-width for the hedge boxes.

    One-step optimal hedges are bounded by the slice Lipschitz constant in z
    times the diffusion magnitude; a factor 4 gives headroom.
    """
    loss = spec.loss
    slice_lip = loss.lipschitz_f + spec.grid.n * loss.lipschitz_psi
    slice_lip *= math.exp(spec.sde.lipschitz_z * spec.grid.horizon)
    rng = np.random.default_rng(seed)
    box = spec.state_box()
    horizon = spec.grid.horizon
    us = spec.controls.sample_values(2)
    sig_max = 0.0
    for _ in range(n_samples):
        z = np.array([rng.uniform(lo, hi) for lo, hi in box])
        t = rng.uniform(0.0, horizon)
        for u in us:
            sig = np.asarray(spec.sde.diffusion_mat(t, z, u), dtype=float)
            sig_max = max(sig_max, float(np.abs(sig).max()))
    return 4.0 * slice_lip * max(sig_max, 1e-12)


def growth_constant(spec: ProblemSpec) -> float:
    """C with 0 <= w <= C(1+|z|) at every node, with Gronwall headroom."""
    z0 = np.zeros(spec.sde.state_dim)
    loss = spec.loss
    base = float(loss.terminal_cost(z0)) + loss.lipschitz_f
    for k in range(1, spec.grid.n + 1):
        base += float(loss.loss_at(k)(z0)) + loss.lipschitz_psi
    g = spec.sde.growth_z
    return base * math.exp(3.0 * g * (1.0 + g) * spec.grid.horizon)


# ---------------------------------------------------------------------------
# slices


@dataclass(frozen=True)
class PolicyGrid:
    """Per-node argmin record: a flat tuple index plus decoding tables.

    tuple index = (u_index * prod(axis choices)) + mixed-radix aux choices,
    aux axes ordered active dates ascending then the terminal budget axis.
    """

    tuple_index: np.ndarray
    u_points: tuple
    axis_names: tuple
    axis_choices: tuple  # per axis: ("box", values) or ("sigma_multipliers", values)
    a_bound: float = math.inf

    def radices(self) -> tuple:
        return tuple(len(vals) for _, vals in self.axis_choices)

    def decode(self, flat: int) -> tuple[int, tuple[int, ...]]:
        rad = self.radices()
        picks = []
        for r in reversed(rad):
            picks.append(flat % r)
            flat //= r
        return flat, tuple(reversed(picks))

    def control_values(self, flat: int, sigma_abs: float) -> tuple:
        """(u, per-axis hedge values) at a node with local |sigma|."""
        u_idx, picks = self.decode(flat)
        out = []
        for (mode, vals), c in zip(self.axis_choices, picks):
            v = vals[c]
            if mode == "sigma_multipliers":
                v = v * sigma_abs
            v = min(max(v, -self.a_bound), self.a_bound)
            out.append(v)
        return self.u_points[u_idx], tuple(out)


@dataclass(frozen=True)
class ValueSlice:
    """Values of one variant at one time level, dense over its grid."""

    variant: VariantKey
    t: float
    values: np.ndarray
    policy: PolicyGrid | None = None


@dataclass
class SolveResult:
    slices: dict
    config: GridSpec
    diagnostics: dict = field(default_factory=dict)

    def get(self, label: str, t: float, atol: float = 1e-9) -> ValueSlice:
        key = (label, round(float(t), 10) + 0.0)
        if key in self.slices:
            return self.slices[key]
        for (lab, tt), sl in self.slices.items():
            if lab == label and abs(tt - t) <= atol:
                return sl
        raise KeyError(f"no kept slice for variant {label!r} at t={t}")

    def times(self, label: str) -> list[float]:
        return sorted(t for lab, t in self.slices if lab == label)


def variant_axes(spec: ProblemSpec, grid: GridSpec, key: VariantKey) -> tuple:
    """Grids of the variant's value array: z axes, active p axes, then m."""
    axes = [grid.z_grid(i) for i in range(spec.sde.state_dim)]
    for k in key.active_p:
        axes.append(grid.p_grid(k))
    if key.has_m:
        axes.append(grid.m_grid())
    return tuple(axes)


def _variant_shape(spec, grid, key):
    return tuple(len(ax) for ax in variant_axes(spec, grid, key))


# ---------------------------------------------------------------------------
# terminal and jump data


def _date_penalty(spec: ProblemSpec, grid: GridSpec, key: VariantKey, date_k: int,
                  psi: np.ndarray, shape: tuple) -> np.ndarray:
    """Date-k penalty broadcast over the variant grid: (psi - p_k)+ or psi."""
    d = spec.sde.state_dim
    zform = list(shape[:d]) + [1] * (len(shape) - d)
    if date_k in key.active_p:
        axis = d + key.active_p.index(date_k)
        pg = grid.p_grid(date_k)
        form = [1] * len(shape)
        form[axis] = len(pg)
        return np.maximum(psi.reshape(zform) - pg.reshape(form), 0.0)
    return psi.reshape(zform)


def terminal_slice(variant: VariantKey, grid: GridSpec, loss: LossSpec,
                   spec: ProblemSpec) -> ValueSlice:
    """Data at T: (f-m)+ (or f without the m axis) plus the date-n penalty."""
    n = spec.grid.n
    if variant.interval_index != n - 1:
        raise ValueError("terminal data only exists for last-interval variants")
    shape = _variant_shape(spec, grid, variant)
    d = spec.sde.state_dim
    zg = grid.z_grid(0)
    psi_n = loss.loss_at(n)
    fz = np.array([float(loss.terminal_cost(np.array([z]))) for z in zg])
    psin = np.array([float(psi_n(np.array([z]))) for z in zg])
    zform = list(shape[:d]) + [1] * (len(shape) - d)
    if variant.has_m:
        mg = grid.m_grid()
        mform = [1] * len(shape)
        mform[-1] = len(mg)
        vals = np.maximum(fz.reshape(zform) - mg.reshape(mform), 0.0)
    else:
        vals = np.broadcast_to(fz.reshape(zform), shape).copy()
    vals = vals + _date_penalty(spec, grid, variant, n, psin, shape)
    vals = np.broadcast_to(vals, shape)
    dtype = grid.value_dtype(int(np.prod(shape)))
    return ValueSlice(variant, spec.grid.dates[-1],
                      np.ascontiguousarray(vals, dtype=dtype))


def jump_slice(next_w: ValueSlice, this_variant: VariantKey, grid: GridSpec,
               loss: LossSpec, spec: ProblemSpec) -> ValueSlice:
    """Right-limit data at t_{i+1} for an interval-i variant.

    The continuation variant shares the assignment on dates i+2..n and the
    same m axis, so its values broadcast along the new date axis; the date
    i+1 term is added on top.
    """
    i = this_variant.interval_index
    date_k = i + 1
    cont = next_w.variant
    ok = (cont.interval_index == i + 1 and cont.has_m == this_variant.has_m
          and cont.active_p == tuple(k for k in this_variant.active_p if k != date_k)
          and cont.plain_psi == tuple(k for k in this_variant.plain_psi if k != date_k))
    if not ok:
        raise ValueError("continuation slice does not match the target variant")
    shape = _variant_shape(spec, grid, this_variant)
    d = spec.sde.state_dim
    zg = grid.z_grid(0)
    psi_k = loss.loss_at(date_k)
    psi = np.array([float(psi_k(np.array([z]))) for z in zg])
    cv = np.asarray(next_w.values, dtype=np.float64)
    if date_k in this_variant.active_p:
        axis = d + this_variant.active_p.index(date_k)
        cv = np.expand_dims(cv, axis)
    vals = cv + _date_penalty(spec, grid, this_variant, date_k, psi, shape)
    vals = np.broadcast_to(vals, shape)
    dtype = grid.value_dtype(int(np.prod(shape)))
    return ValueSlice(this_variant, spec.grid.dates[date_k],
                      np.ascontiguousarray(vals, dtype=dtype))


# ---------------------------------------------------------------------------
# lookup tables shared with the brute-force oracle


def _aux_tables_batch(n: int, ratios: np.ndarray, dtype, delta: float
                      ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized source-cell/fraction/extension tables, one row per ratio.

    Reads landing below the zero-budget face pick up an additive extension
    term: one budget unit reduces the payoff at most one-for-one, and at the
    face the reduction is exactly linear, so the value at a negative budget x
    is the face value plus |x|.  Clamping without the term was measured to
    undercut the marched values near the face and break the Lipschitz and
    value-sandwich invariants.
    """
    r = np.asarray(ratios, dtype=np.float64)
    x = r[..., None] + np.arange(n, dtype=np.float64)
    c = np.clip(np.floor(x), 0, n - 2)
    fr = x - c
    j0 = c.astype(np.int32)
    low = x <= 0.0
    high = x >= n - 1
    j0[low] = 0
    j0[high] = n - 2
    fr[low] = 0.0
    fr[high] = 1.0
    extra = np.where(low, -x * delta, 0.0)
    return (np.ascontiguousarray(j0), np.ascontiguousarray(fr, dtype=dtype),
            np.ascontiguousarray(extra, dtype=dtype))


def aux_shift_tables(n: int, ratio: float, delta: float = 1.0, dtype=np.float64
                     ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Source cell, fraction and below-face extension for a constant shift.

    Position j reads from x = j + ratio; x <= 0 clamps onto the zero-budget
    face (Dirichlet data) plus the linear extension -x*delta, x >= n-1 holds
    the top value (slices flatten).
    """
    j0, fr, extra = _aux_tables_batch(n, np.asarray([float(ratio)]), dtype,
                                      delta)
    return j0[0], fr[0], extra[0]


def z_shift_tables(zg: np.ndarray, spec: ProblemSpec, t: float, u, dt: float,
                   dw: np.ndarray, cap_c: float, dtype):
    """Per (quadrature node, z node): source cell, blend weight, cap, overshoots.

    Reads falling outside the axis are clamped to the nearest edge node, so
    every interpolation weight stays in [0, 1] and one step is a positive
    average followed by a min: order between input slices is preserved, which
    is what keeps the budget-monotonicity and Lipschitz invariants exact.
    The overshoot columns record how far (in state units) each read lands
    beyond the top or below the bottom of the axis; the step adds a linear
    edge extension ``slope * overshoot`` on top of the clamped read, with a
    slope that is constant across the budget axes (see ``edge_extension``),
    so the extension cannot disturb those invariants either.  The cap is the
    growth bound evaluated at the raw read position.
    """
    nz = len(zg)
    mu = np.empty(nz)
    sg = np.empty(nz)
    for jz in range(nz):
        z = np.array([zg[jz]])
        mu[jz] = float(np.asarray(spec.sde.drift_vec(t, z, u)).reshape(-1)[0])
        sg[jz] = float(np.asarray(spec.sde.diffusion_mat(t, z, u)).reshape(-1)[0])
    lo = zg[0]
    inv = (nz - 1) / (zg[-1] - zg[0])
    zp = zg[None, :] + mu[None, :] * dt + sg[None, :] * dw[:, None]
    x = np.clip((zp - lo) * inv, 0.0, nz - 1)
    c = np.clip(np.floor(x), 0, nz - 2)
    j0 = np.ascontiguousarray(c.astype(np.int32))
    fr = np.ascontiguousarray(x - c, dtype=dtype)
    cap = cap_c * (1.0 + np.abs(zp))
    ovt = np.maximum(zp - zg[-1], 0.0)
    ovb = np.maximum(zg[0] - zp, 0.0)
    return (j0, fr, np.ascontiguousarray(cap, dtype=dtype),
            np.ascontiguousarray(ovt, dtype=dtype),
            np.ascontiguousarray(ovb, dtype=dtype))


def _hedge_choice_values(grid: GridSpec, a_bound: float) -> np.ndarray:
    mode = grid.hedge_grid[0]
    if mode == "box":
        n = int(grid.hedge_grid[1])
        if n == 1:
            return np.array([0.0])
        return np.linspace(-a_bound, a_bound, n)
    return np.asarray(grid.hedge_grid[1], dtype=float)


def _sigma_abs_profile(zg: np.ndarray, spec: ProblemSpec, t: float, u) -> np.ndarray:
    out = np.empty(len(zg))
    for jz, z in enumerate(zg):
        sig = np.asarray(spec.sde.diffusion_mat(t, np.array([z]), u))
        out[jz] = abs(float(sig.reshape(-1)[0]))
    return out


def hedge_shift_tables(grid: GridSpec, spec: ProblemSpec, t: float, u,
                       zg: np.ndarray, axis_n: int, axis_max: float, dt: float,
                       dw: np.ndarray, a_bound: float, dtype):
    """Tables (choice, quad node, z node, axis index) for one budget axis."""
    choices = _hedge_choice_values(grid, a_bound)
    nc, nq, nz = len(choices), len(dw), len(zg)
    delta = axis_max / (axis_n - 1)
    if grid.hedge_grid[0] == "sigma_multipliers":
        scale = _sigma_abs_profile(zg, spec, t, u)
        vals = np.clip(choices[:, None] * scale[None, :], -a_bound, a_bound)
    else:
        vals = np.broadcast_to(np.clip(choices, -a_bound, a_bound)[:, None], (nc, nz))
    ratios = vals[:, None, :] * dw[None, :, None] / delta
    j0, fr, extra = _aux_tables_batch(axis_n, ratios, dtype, delta)
    return choices, j0, fr, extra


def step_tables(spec: ProblemSpec, grid: GridSpec, key: VariantKey, dt: float,
                dtype, t: float, shared: dict | None = None) -> dict:
    """All lookup tables for one backward step of one variant.

    Coefficients are evaluated at ``t``, the left endpoint of the step.  The
    optional ``shared`` dict caches the z tables and per-axis hedge tables
    across variants of the same interval (they only depend on the axis, not
    on which variant carries it).
    """
    zg = grid.z_grid(0)
    dw, qw = grid.quad(dt)
    a_bound = grid.a_bound if grid.a_bound is not None else default_a_bound(spec)
    cap_c = growth_constant(spec)
    u_points = spec.controls.sample_values(grid.control_resolution)
    dkey = str(np.dtype(dtype))

    def build_z():
        js, fs, cs, ts, bs = [], [], [], [], []
        for u in u_points:
            j0, fr, cap, ovt, ovb = z_shift_tables(zg, spec, t, u, dt, dw,
                                                   cap_c, dtype)
            js.append(j0)
            fs.append(fr)
            cs.append(cap)
            ts.append(ovt)
            bs.append(ovb)
        return (np.stack(js), np.stack(fs), np.stack(cs), np.stack(ts),
                np.stack(bs))

    if shared is None:
        zj0, zfr, zcap, zovt, zovb = build_z()
    else:
        ztup = shared.get(("z", dkey))
        if ztup is None:
            ztup = shared[("z", dkey)] = build_z()
        zj0, zfr, zcap, zovt, zovb = ztup

    axis_meta = []
    for k in key.active_p:
        hi, n = grid.p_axis[k - 1]
        axis_meta.append(("p_%d" % k, n, hi))
    if key.has_m:
        hi, n = grid.m_axis
        axis_meta.append(("m", n, hi))

    def build_axis(axis_n, axis_max):
        js, fs, es = [], [], []
        ch = None
        for u in u_points:
            ch, j0, fr, extra = hedge_shift_tables(grid, spec, t, u, zg,
                                                   axis_n, axis_max, dt, dw,
                                                   a_bound, dtype)
            js.append(j0)
            fs.append(fr)
            es.append(extra)
        return ch, np.stack(js), np.stack(fs), np.stack(es)

    axes = []
    for name, axis_n, axis_max in axis_meta:
        if shared is None:
            ch, j0, fr, extra = build_axis(axis_n, axis_max)
        else:
            tup = shared.get((name, dkey))
            if tup is None:
                tup = shared[(name, dkey)] = build_axis(axis_n, axis_max)
            ch, j0, fr, extra = tup
        axes.append({"name": name, "n": axis_n, "max": axis_max,
                     "choices": ch, "j0": j0, "fr": fr, "extra": extra})

    return {
        "t": t,
        "dt": dt,
        "zg": zg,
        "dw": dw,
        "qw": np.asarray(qw, dtype=dtype),
        "u_points": u_points,
        "zj0": zj0,
        "zfr": zfr,
        "zcap": zcap,
        "zovt": zovt,
        "zovb": zovb,
        "axes": axes,
        "a_bound": a_bound,
        "mode": grid.hedge_grid[0],
    }


def _policy_grid(arg: np.ndarray, tabs: dict) -> PolicyGrid:
    names = tuple(ax["name"] for ax in tabs["axes"])
    choices = tuple((tabs["mode"], tuple(float(v) for v in ax["choices"]))
                    for ax in tabs["axes"])
    upts = tuple(tuple(float(x) for x in np.atleast_1d(u))
                 for u in tabs["u_points"])
    return PolicyGrid(arg, upts, names, choices, float(tabs["a_bound"]))


# ---------------------------------------------------------------------------
# one backward step


def edge_slopes(value_arrays, dz: float, cap_c: float) -> tuple[float, float]:
    """Shared z-edge extension slopes from the data being stepped.

    Takes the steepest one-sided slope observed in the top (respectively
    bottom) z cell across all supplied arrays and budget nodes, clipped to
    [0, growth constant].  Using one slope pair for every variant of a time
    level keeps the extension an identical additive term across the lattice,
    which is what preserves the value sandwich between a variant and its
    budget-free companion.  Where the edge rows are saturated (every penalty
    hinge active, slope uniform across budgets) the shared slope reproduces
    the true linear growth exactly.
    """
    top = 0.0
    bot = 0.0
    for w in value_arrays:
        w = np.asarray(w)
        top = max(top, float((w[-1] - w[-2]).max()) / dz)
        bot = max(bot, float((w[1] - w[0]).max()) / dz)
    return min(max(top, 0.0), cap_c), min(max(bot, 0.0), cap_c)


def edge_extension(slopes: tuple[float, float], tabs: dict) -> np.ndarray:
    """Additive z-edge term per read, shape (nu, nq, nz), in table dtype."""
    ovt = tabs["zovt"]
    cast = ovt.dtype.type
    return cast(slopes[0]) * ovt - cast(slopes[1]) * tabs["zovb"]


def _blend_planes_z(wnext, j0, fr, cap, zex):
    """Blend all z planes at once: (nq, nz, *aux) from (nz, *aux) values."""
    lo = wnext[j0]
    hi = wnext[j0 + 1]
    shape = (j0.shape[0], j0.shape[1]) + (1,) * (wnext.ndim - 1)
    frb = fr.reshape(shape)
    out = (lo + frb * (hi - lo)) + zex.reshape(shape)
    capb = np.broadcast_to(cap.reshape(shape), out.shape)
    np.minimum(np.maximum(out, np.asarray(0.0, dtype=out.dtype), out), capb, out)
    return out


def _blend_axis(plane, j0, fr, extra, axis):
    """Blend one budget axis of a slab with per-index tables."""
    lo = np.take(plane, j0, axis=axis)
    hi = np.take(plane, j0 + 1, axis=axis)
    shape = [1] * plane.ndim
    shape[axis] = len(fr)
    frb = fr.reshape(shape)
    return lo + frb * (hi - lo) + extra.reshape(shape)


def _min_over_choices(slab, axes, jz, u_idx, qw, radix, best, arg):
    """Nested choice loops for one z node of the reference engine."""
    nq = qw.shape[0]
    naux = len(axes)

    def rec(depth, cur, flat):
        if depth == naux:
            acc = qw[0] * cur[0]
            for q in range(1, nq):
                acc = acc + qw[q] * cur[q]
            if arg is None:
                np.minimum(best, acc, out=best)
            else:
                m = acc < best
                best[m] = acc[m]
                arg[m] = flat
            return
        ax = axes[depth]
        for c in range(radix[depth]):
            nxt = np.stack([
                _blend_axis(cur[q], ax["j0"][u_idx, c, q, jz],
                            ax["fr"][u_idx, c, q, jz],
                            ax["extra"][u_idx, c, q, jz], depth)
                for q in range(nq)
            ])
            rec(depth + 1, nxt, flat * radix[depth] + c)

    rec(0, slab, u_idx)


def _step_numpy(wnext: np.ndarray, tabs: dict, want_policy: bool,
                zex: np.ndarray):
    """Reference engine: staged blends, identical arithmetic to the kernels."""
    dtype = wnext.dtype
    nz = wnext.shape[0]
    naux = wnext.ndim - 1
    qw = tabs["qw"]
    nq = qw.shape[0]
    nu = tabs["zj0"].shape[0]
    best = np.full(wnext.shape, np.inf, dtype=dtype)
    arg = np.zeros(wnext.shape, dtype=np.int32) if want_policy else None
    radix = [ax["j0"].shape[1] for ax in tabs["axes"]]
    for u in range(nu):
        planes = _blend_planes_z(wnext, tabs["zj0"][u], tabs["zfr"][u],
                                 tabs["zcap"][u], zex[u])
        if naux == 0:
            acc = qw[0] * planes[0]
            for q in range(1, nq):
                acc = acc + qw[q] * planes[q]
            if want_policy:
                m = acc < best
                best[m] = acc[m]
                arg[m] = u
            else:
                np.minimum(best, acc, out=best)
            continue
        for jz in range(nz):
            _min_over_choices(planes[:, jz], tabs["axes"], jz, u, qw, radix,
                              best[jz], arg[jz] if want_policy else None)
    return best, arg


def _step_via_kernel(wnext, tabs, want_policy, zex):
    from . import _kernels

    best = np.full(wnext.shape, np.inf, dtype=wnext.dtype)
    if want_policy:
        arg = np.zeros(wnext.shape, dtype=np.int32)
    else:
        arg = np.zeros((1,) * wnext.ndim, dtype=np.int32)
    flag = 1 if want_policy else 0
    naux = wnext.ndim - 1
    zj0, zfr, zcap = tabs["zj0"], tabs["zfr"], tabs["zcap"]
    qw = tabs["qw"]
    ax = tabs["axes"]
    if naux == 0:
        _kernels.step_a0(wnext, zj0, zfr, zcap, zex, qw, best, arg, flag)
    elif naux == 1:
        _kernels.step_a1(wnext, zj0, zfr, zcap, zex, ax[0]["j0"], ax[0]["fr"],
                         ax[0]["extra"], qw, best, arg, flag)
    elif naux == 2:
        _kernels.step_a2(wnext, zj0, zfr, zcap, zex, ax[0]["j0"], ax[0]["fr"],
                         ax[0]["extra"], ax[1]["j0"], ax[1]["fr"],
                         ax[1]["extra"], qw, best, arg, flag)
    else:
        _kernels.step_a3(wnext, zj0, zfr, zcap, zex, ax[0]["j0"], ax[0]["fr"],
                         ax[0]["extra"], ax[1]["j0"], ax[1]["fr"],
                         ax[1]["extra"], ax[2]["j0"], ax[2]["fr"],
                         ax[2]["extra"], qw, best, arg, flag)
    return best, (arg if want_policy else None)


def _dispatch_step(wnext, tabs, want_policy, engine, zex):
    naux = wnext.ndim - 1
    use_numba = engine in ("auto", "numba") and naux <= 3
    if use_numba:
        try:
            from . import _kernels  # noqa: F401
        except ImportError:
            use_numba = False
    if engine == "numba" and not use_numba:
        raise RuntimeError("numba engine requested but unavailable")
    if use_numba:
        return _step_via_kernel(wnext, tabs, want_policy, zex)
    return _step_numpy(wnext, tabs, want_policy, zex)


def sl_step(next_slice: ValueSlice, grid: GridSpec, spec: ProblemSpec,
            scaling: ScalingFns | None = None, dt: float | None = None,
            want_policy: bool = False, engine: str = "auto",
            tables: dict | None = None,
            slopes: tuple[float, float] | None = None) -> ValueSlice:
    """One backward step of length dt ending at ``next_slice.t``.

    The compactification rescaling plays no role in the dynamic-programming
    step itself (it reparameterizes the Hamiltonian, not the expectation), so
    ``scaling`` is accepted for signature uniformity and ignored.  ``tables``
    short-circuits the per-step table build; callers marching many steps with
    time-independent coefficients pass a cached dict from ``step_tables``.
    ``slopes`` overrides the z-edge extension slopes; ``solve_problem`` passes
    a pair shared across the whole variant lattice, a lone step derives them
    from its own slice.
    """
    if spec.sde.state_dim != 1:
        raise NotImplementedError("stepping engines cover one state dimension")
    if dt is None:
        dt = grid.dt
    i = next_slice.variant.interval_index
    t_new = next_slice.t - dt
    if t_new < spec.grid.dates[i] - 1e-9:
        raise ValueError("dt would straddle the date below this level")
    wnext = np.ascontiguousarray(next_slice.values)
    tabs = tables
    if tabs is None:
        tabs = step_tables(spec, grid, next_slice.variant, dt, wnext.dtype, t_new)
    if slopes is None:
        zg = tabs["zg"]
        slopes = edge_slopes([wnext], float(zg[1] - zg[0]), growth_constant(spec))
    zex = edge_extension(slopes, tabs)
    best, arg = _dispatch_step(wnext, tabs, want_policy, engine, zex)
    policy = _policy_grid(arg, tabs) if want_policy else None
    return ValueSlice(next_slice.variant, t_new, best, policy)


def _time_invariant_probe(spec: ProblemSpec, t0: float, t1: float) -> bool:
    """True when drift and diffusion agree exactly at both endpoint times."""
    box = spec.state_box()
    zs = np.linspace(box[0][0], box[0][1], 5)
    for u in spec.controls.sample_values(2):
        for zv in zs:
            z = np.array([zv])
            if not np.array_equal(np.asarray(spec.sde.drift_vec(t0, z, u)),
                                  np.asarray(spec.sde.drift_vec(t1, z, u))):
                return False
            if not np.array_equal(np.asarray(spec.sde.diffusion_mat(t0, z, u)),
                                  np.asarray(spec.sde.diffusion_mat(t1, z, u))):
                return False
    return True


# ---------------------------------------------------------------------------
# Dirichlet injection


def boundary_inject(slice_: ValueSlice, boundary_slices: Mapping[VariantKey, ValueSlice],
                    spec: ProblemSpec) -> ValueSlice:
    """Overwrite zero-budget faces with the lower-variant Dirichlet data.

    Faces are written active dates first (ascending) and the m face last;
    corners agree regardless of order because the sources are themselves
    injected bottom-up at the same time level.
    """
    key = slice_.variant
    vals = np.array(slice_.values, copy=True)
    d = spec.sde.state_dim
    srcs = boundary_sources(key)
    for pos, k in enumerate(key.active_p):
        sub = srcs["p_%d" % k]
        if sub not in boundary_slices:
            raise KeyError(f"missing boundary variant {sub.label()}")
        face = [slice(None)] * vals.ndim
        face[d + pos] = 0
        vals[tuple(face)] = boundary_slices[sub].values.astype(vals.dtype, copy=False)
    if key.has_m:
        sub = srcs["m"]
        if sub not in boundary_slices:
            raise KeyError(f"missing boundary variant {sub.label()}")
        face = [slice(None)] * vals.ndim
        face[-1] = 0
        vals[tuple(face)] = boundary_slices[sub].values.astype(vals.dtype, copy=False)
    return ValueSlice(key, slice_.t, vals, slice_.policy)


# ---------------------------------------------------------------------------
# interval and problem drivers


def solve_interval(variant: VariantKey, data_at_right: ValueSlice, grid: GridSpec,
                   spec: ProblemSpec, scaling: ScalingFns | None = None,
                   boundary_provider: Callable[[VariantKey, float], ValueSlice] | None = None,
                   keep: str = "all", want_policy: bool = False,
                   engine: str = "auto") -> list[ValueSlice]:
    """March one variant backward across its interval.

    Returns slices at time levels in [t_i, t_{i+1}), oldest (leftmost) first.
    ``boundary_provider(key, t)`` must return the already-updated lower-variant
    slice at the same level.
    """
    i = variant.interval_index
    dates = spec.grid.dates
    nsteps, dt = grid.steps_for_interval(dates, i)
    invariant = _time_invariant_probe(spec, dates[i], dates[i + 1])
    dtype = np.asarray(data_at_right.values).dtype
    tabs = step_tables(spec, grid, variant, dt, dtype, dates[i]) if invariant else None
    cur = data_at_right
    out = []
    for j in range(nsteps, 0, -1):
        t_new = dates[i] + (j - 1) * dt
        step_tabs = tabs
        if step_tabs is None:
            step_tabs = step_tables(spec, grid, variant, dt, dtype, t_new)
        cur = sl_step(cur, grid, spec, scaling, dt=dt, want_policy=want_policy,
                      engine=engine, tables=step_tabs)
        cur = ValueSlice(cur.variant, t_new, cur.values, cur.policy)
        if boundary_provider is not None and (variant.active_p or variant.has_m):
            lower = {}
            for sub in boundary_sources(variant).values():
                lower[sub] = boundary_provider(sub, t_new)
            cur = boundary_inject(cur, lower, spec)
        if keep == "all" or j == 1:
            out.append(cur)
    return sorted(out, key=lambda s: s.t)


def _keep_plan(spec, grid, interval_index, keep_times, keep_triplet_times):
    """Map interval -> set of time levels to retain (beyond endpoints)."""
    dates = spec.grid.dates
    plan = {}
    for i in range(interval_index, len(dates) - 1):
        nsteps, dt = grid.steps_for_interval(dates, i)
        levels = set()
        wanted = set(float(t) for t in keep_times)
        for t in keep_triplet_times:
            for tt in (t - dt, t, t + dt):
                wanted.add(float(tt))
        for t in wanted:
            if dates[i] - 1e-9 <= t <= dates[i + 1] + 1e-9:
                j = round((t - dates[i]) / dt)
                if abs(dates[i] + j * dt - t) <= 1e-9 and 0 <= j <= nsteps:
                    levels.add(int(j))
        levels.add(0)
        if i == len(dates) - 2:
            levels.add(nsteps)
        plan[i] = levels
    return plan


def solve_problem(spec: ProblemSpec, grid: GridSpec, interval_index: int = 0,
                  scaling: ScalingFns | None = None, keep_times: Iterable[float] = (),
                  keep_triplet_times: Iterable[float] = (),
                  policy_times: Iterable[float] = (), engine: str = "auto",
                  residual_samples: int = 200, residual_seed: int = 0) -> SolveResult:
    """Solve every lattice variant from the horizon down to ``interval_index``.

    Variants advance in lockstep, one time level at a time and bottom-up in
    the lattice order, so zero-budget faces always read Dirichlet data from
    the same level.  Level 0 of each interval and the terminal data are always
    kept; other levels are kept when listed in keep_times (or as +-dt triplets
    around keep_triplet_times, which is what the residual diagnostics need).
    """
    errs = grid.validate(spec)
    if errs:
        raise ValueError("invalid grid: " + "; ".join(errs))
    if spec.sde.state_dim != 1:
        raise NotImplementedError("solver covers one state dimension")
    dates = spec.grid.dates
    n = len(dates) - 1
    t0 = time.perf_counter()
    slices = {}
    diagnostics = {"intervals": {}, "growth_constant": growth_constant(spec)}
    policy_stamps = {round(float(t), 10) + 0.0 for t in policy_times}
    plan = _keep_plan(spec, grid, interval_index, keep_times, keep_triplet_times)

    def store(sl: ValueSlice):
        slices[(sl.variant.label(), round(float(sl.t), 10) + 0.0)] = sl

    right_values = {}  # variant -> ValueSlice at the current interval's right end
    for i in range(n - 1, interval_index - 1, -1):
        tic = time.perf_counter()
        lattice = build_variant_lattice(spec, i)
        nsteps, dt = grid.steps_for_interval(dates, i)
        invariant = _time_invariant_probe(spec, dates[i], dates[i + 1])
        shared = {}
        tabs_cache = {}
        data = {}
        for key in lattice:
            if i == n - 1:
                data[key] = terminal_slice(key, grid, spec.loss, spec)
            else:
                cont_key = VariantKey(
                    i + 1,
                    tuple(k for k in key.active_p if k != i + 1),
                    tuple(k for k in key.plain_psi if k != i + 1),
                    key.has_m,
                )
                data[key] = jump_slice(right_values[cont_key], key, grid,
                                       spec.loss, spec)
            if nsteps in plan[i]:
                store(data[key])
        cur = data
        zg_edge = grid.z_grid(0)
        dz_edge = float(zg_edge[1] - zg_edge[0])
        for j in range(nsteps, 0, -1):
            t_new = dates[i] + (j - 1) * dt
            keep_level = (j - 1) in plan[i]
            want_pol = keep_level and round(t_new, 10) + 0.0 in policy_stamps
            lattice_slopes = edge_slopes(
                [np.asarray(cur[key].values) for key in lattice], dz_edge,
                diagnostics["growth_constant"])
            nxt = {}
            for key in lattice:  # lattice order is bottom-up in aux dimension
                dtype = np.asarray(cur[key].values).dtype
                if invariant:
                    tabs = tabs_cache.get(key)
                    if tabs is None:
                        tabs = step_tables(spec, grid, key, dt, dtype,
                                           dates[i], shared)
                        tabs_cache[key] = tabs
                else:
                    shared_now = {}
                    tabs = step_tables(spec, grid, key, dt, dtype, t_new,
                                       shared_now)
                sl = sl_step(cur[key], grid, spec, scaling, dt=dt,
                             want_policy=want_pol, engine=engine, tables=tabs,
                             slopes=lattice_slopes)
                if key.active_p or key.has_m:
                    lower = {sub: nxt[sub] for sub in
                             boundary_sources(key).values()}
                    sl = boundary_inject(sl, lower, spec)
                if not np.isfinite(np.asarray(sl.values)).all():
                    raise FloatingPointError(
                        f"non-finite values in variant {key.label()} at t={t_new}")
                nxt[key] = sl
            cur = nxt
            if keep_level:
                for key in lattice:
                    store(cur[key])
        right_values = {key: cur[key] for key in lattice}
        diagnostics["intervals"][i] = {
            "steps": nsteps,
            "dt": dt,
            "seconds": time.perf_counter() - tic,
            "variants": len(lattice),
        }
    diagnostics["total_seconds"] = time.perf_counter() - t0
    result = SolveResult(slices, grid, diagnostics)
    _attach_residual_summary(result, spec, scaling, residual_samples, residual_seed)
    return result


def _attach_residual_summary(result: SolveResult, spec, scaling, n_samples, seed):
    """Median |sup H| over smooth samples, when a kept time triplet exists."""
    if n_samples <= 0:
        return
    labels = {lab for lab, _t in result.slices
              if lab == "root" or lab.startswith("root_")}
    if not labels:
        return
    label = "root" if "root" in labels else sorted(labels)[0]
    trip = _find_triplet(result.times(label))
    if trip is None:
        return
    try:
        nodes = residual_sample_nodes(result, label, trip[1], n_samples, seed)
        stats = hjb_residual(result, nodes, scaling, spec)
        result.diagnostics["median_residual"] = stats.median
        result.diagnostics["residual_time"] = trip[1]
        result.diagnostics["residual_n"] = len(stats.values)
    except (ValueError, KeyError):
        return


def _find_triplet(times):
    ts = sorted(times)
    for j in range(1, len(ts) - 1):
        dl = ts[j] - ts[j - 1]
        dr = ts[j + 1] - ts[j]
        if abs(dl - dr) <= 1e-9 and 0 < dl < 0.1:
            return ts[j - 1], ts[j], ts[j + 1]
    return None


# ---------------------------------------------------------------------------
# residual diagnostics


@dataclass(frozen=True)
class ResidualStats:
    values: np.ndarray
    median: float
    mean: float
    max: float
    nodes: tuple


def residual_sample_nodes(result: SolveResult, label: str, t: float, n: int,
                          seed: int = 0, boundary_cells: int = 2,
                          kink_cells: int = 1, kink_factor: float = 4.0) -> list:
    """Sample interior nodes away from faces and detected kinks.

    A node is kink-flagged when its centered second difference along any axis
    is an outlier (beyond kink_factor times the axis median); flagged nodes
    and their kink_cells-neighborhoods are excluded.
    """
    sl = result.get(label, t)
    w = np.asarray(sl.values, dtype=np.float64)
    nd = w.ndim
    interior = np.ones(w.shape, dtype=bool)
    for ax in range(nd):
        if w.shape[ax] <= 2 * boundary_cells:
            raise ValueError("axis too short for interior sampling")
        idx = [slice(None)] * nd
        idx[ax] = slice(0, boundary_cells)
        interior[tuple(idx)] = False
        idx[ax] = slice(w.shape[ax] - boundary_cells, None)
        interior[tuple(idx)] = False
    kink = np.zeros(w.shape, dtype=bool)
    for ax in range(nd):
        d2 = np.abs(np.diff(w, 2, axis=ax))
        pad = [(1, 1) if a == ax else (0, 0) for a in range(nd)]
        d2 = np.pad(d2, pad)
        med = np.median(d2[d2 > 0]) if (d2 > 0).any() else 0.0
        kink |= d2 > kink_factor * (med + 1e-12)
    if kink_cells > 0 and kink.any():
        grown = kink
        for _ in range(kink_cells):
            g = grown.copy()
            for ax in range(nd):
                g[tuple([slice(None)] * ax + [slice(1, None)])] |= np.take(
                    grown, range(0, grown.shape[ax] - 1), axis=ax)
                g[tuple([slice(None)] * ax + [slice(0, -1)])] |= np.take(
                    grown, range(1, grown.shape[ax]), axis=ax)
            grown = g
        kink = grown
    ok = interior & ~kink
    cand = np.argwhere(ok)
    if len(cand) == 0:
        raise ValueError("no interior nodes survive the kink filter")
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(cand), size=min(n, len(cand)), replace=False)
    return [(label, float(t), tuple(int(v) for v in cand[j])) for j in pick]


def _jet_at(result: SolveResult, spec: ProblemSpec, label: str, t: float,
            idx: tuple) -> tuple[JetPoint, tuple]:
    """Centered-difference jet from a kept (t-dt, t, t+dt) triplet."""
    ts = result.times(label)
    trip = None
    for j in range(1, len(ts) - 1):
        if abs(ts[j] - t) <= 1e-9:
            if abs((ts[j] - ts[j - 1]) - (ts[j + 1] - ts[j])) <= 1e-9:
                trip = (ts[j - 1], ts[j], ts[j + 1])
            break
    if trip is None:
        raise ValueError(f"no symmetric time triplet kept around t={t}")
    lo = np.asarray(result.get(label, trip[0]).values, dtype=np.float64)
    mid_sl = result.get(label, trip[1])
    mid = np.asarray(mid_sl.values, dtype=np.float64)
    hi = np.asarray(result.get(label, trip[2]).values, dtype=np.float64)
    dt = trip[1] - trip[0]
    key = mid_sl.variant
    axes = variant_axes(spec, result.config, key)
    steps = [float(ax[1] - ax[0]) for ax in axes]
    nd = mid.ndim

    def sh(base, ax, off):
        j = list(idx)
        j[ax] += off
        return base[tuple(j)]

    c = (sh(hi, 0, 0) - sh(lo, 0, 0)) / (2.0 * dt)
    q = np.empty(nd)
    A = np.empty((nd, nd))
    for a in range(nd):
        q[a] = (sh(mid, a, 1) - sh(mid, a, -1)) / (2.0 * steps[a])
        A[a, a] = (sh(mid, a, 1) - 2.0 * sh(mid, a, 0) + sh(mid, a, -1)) / steps[a] ** 2
    for a in range(nd):
        for b in range(a + 1, nd):
            jpp = list(idx); jpp[a] += 1; jpp[b] += 1
            jpm = list(idx); jpm[a] += 1; jpm[b] -= 1
            jmp = list(idx); jmp[a] -= 1; jmp[b] += 1
            jmm = list(idx); jmm[a] -= 1; jmm[b] -= 1
            A[a, b] = A[b, a] = (
                mid[tuple(jpp)] - mid[tuple(jpm)] - mid[tuple(jmp)] + mid[tuple(jmm)]
            ) / (4.0 * steps[a] * steps[b])
    point = tuple(float(axes[a][idx[a]]) for a in range(nd))
    d = spec.sde.state_dim
    n_p = len(key.active_p)
    if not key.has_m:
        # pad a flat m direction so the jet always carries an m slot
        q = np.concatenate([q, [0.0]])
        A2 = np.zeros((nd + 1, nd + 1))
        A2[:nd, :nd] = A
        A = A2
        point = point + (0.0,)
    jet = JetPoint(t=float(trip[1]), z=np.asarray(point[:d]),
                   p=np.asarray(point[d:d + n_p]), m=float(point[-1]),
                   q=q, A=A, c=float(c))
    return jet, point


def hjb_residual(result: SolveResult, sample_nodes: Sequence, scaling: ScalingFns,
                 spec: ProblemSpec, sphere_resolution: int | None = None,
                 u_resolution: int | None = None) -> ResidualStats:
    """|sup_b,u H| at centered-difference jets of the kept slices.

    With sphere_resolution None the supremum over hedge directions is exact
    (largest eigenvalue of the rescaled quadratic form per sampled u);
    otherwise the sampled-sphere evaluator is used.
    """
    from .hamiltonian import one_vee_scaling

    if scaling is None:
        scaling = one_vee_scaling()
    u_res = u_resolution if u_resolution is not None else result.config.control_resolution
    u_points = spec.controls.sample_values(u_res)
    vals = []
    for (label, t, idx) in sample_nodes:
        jet, _pt = _jet_at(result, spec, label, t, idx)
        if sphere_resolution is None:
            best = -np.inf
            for u in u_points:
                best = max(best, sup_over_sphere_exact(jet, u, scaling, spec.sde))
        else:
            best, _ = sup_hamiltonian(jet, spec.controls, scaling, spec.sde,
                                      sphere_resolution=sphere_resolution,
                                      u_resolution=u_res)
        vals.append(abs(best))
    arr = np.asarray(vals)
    return ResidualStats(arr, float(np.median(arr)), float(arr.mean()),
                         float(arr.max()), tuple(sample_nodes))


def terminal_gap_report(result: SolveResult, spec: ProblemSpec,
                        offsets: Sequence[float]) -> dict:
    """Max-norm gap between kept near-terminal slices and the terminal data.

    Returns raw and (1+|z|)-normalized gaps per offset h plus the fitted
    log-log slope of the raw gaps.
    """
    n = len(spec.grid.dates) - 1
    last_key = None
    for key in build_variant_lattice(spec, n - 1):
        if key.is_root:
            last_key = key
    term = terminal_slice(last_key, result.config, spec.loss, spec)
    base = np.asarray(term.values, dtype=np.float64)
    zg = result.config.z_grid(0)
    weight = 1.0 + np.abs(zg).reshape((-1,) + (1,) * (base.ndim - 1))
    T = spec.grid.dates[-1]
    gaps, norm_gaps = [], []
    for h in offsets:
        sl = result.get(last_key.label(), T - h)
        diff = np.abs(np.asarray(sl.values, dtype=np.float64) - base)
        gaps.append(float(diff.max()))
        norm_gaps.append(float((diff / weight).max()))
    hs = np.asarray(offsets, dtype=float)
    slope, intercept = np.polyfit(np.log(hs), np.log(np.asarray(gaps)), 1)
    return {
        "offsets": tuple(float(h) for h in offsets),
        "gaps": tuple(gaps),
        "normalized_gaps": tuple(norm_gaps),
        "beta": float(slope),
        "log_c": float(intercept),
    }


# ---------------------------------------------------------------------------
# invariant checks


def check_slice_invariants(sl: ValueSlice, spec: ProblemSpec, grid: GridSpec,
                           lipschitz_slack: float = 0.1,
                           w0: ValueSlice | None = None) -> list[str]:
    """Nonnegativity, growth, budget monotonicity/Lipschitz, sandwich."""
    errs = []
    w = np.asarray(sl.values, dtype=np.float64)
    if not np.isfinite(w).all():
        errs.append("non-finite values")
        return errs
    if w.min() < 0:
        errs.append(f"negative value {w.min():g}")
    C = growth_constant(spec)
    zg = grid.z_grid(0)
    cap = C * (1.0 + np.abs(zg)).reshape((-1,) + (1,) * (w.ndim - 1))
    over = w - cap
    if over.max() > 1e-9:
        errs.append(f"growth bound exceeded by {over.max():g}")
    d = spec.sde.state_dim
    key = sl.variant
    tol = 1e-6 * max(1.0, float(np.abs(w).max()))
    for pos, k in enumerate(key.active_p):
        ax = d + pos
        dp = float(grid.p_grid(k)[1] - grid.p_grid(k)[0])
        diff = np.diff(w, axis=ax)
        if diff.max() > tol:
            errs.append(f"values increase along p_{k} by {diff.max():g}")
        lip = (-diff).max() / dp if diff.size else 0.0
        if lip > 1.0 + lipschitz_slack:
            errs.append(f"p_{k} slope {lip:g} beyond 1+slack")
    if key.has_m:
        dm = float(grid.m_grid()[1] - grid.m_grid()[0])
        diff = np.diff(w, axis=-1)
        if diff.max() > tol:
            errs.append(f"values increase along m by {diff.max():g}")
        lip = (-diff).max() / dm if diff.size else 0.0
        if lip > 1.0 + lipschitz_slack:
            errs.append(f"m slope {lip:g} beyond 1+slack")
        if w0 is not None:
            base = np.asarray(w0.values, dtype=np.float64)[..., None]
            mg = grid.m_grid().reshape((1,) * (w.ndim - 1) + (-1,))
            if (w - base).max() > tol:
                errs.append("w exceeds its m-free companion")
            if (base - mg - w).max() > tol:
                errs.append("w drops below companion minus m")
    return errs


# ---------------------------------------------------------------------------
# CSV serialization


def _csv_header(spec: ProblemSpec, key: VariantKey, with_policy: bool) -> list[str]:
    cols = ["t"]
    cols += [f"z{i+1}" for i in range(spec.sde.state_dim)]
    cols += [f"p_{k}" for k in key.active_p]
    if key.has_m:
        cols.append("m")
    cols.append("w")
    if with_policy:
        cols.append("policy_u")
        cols += [f"policy_a_{k}" for k in key.active_p]
        if key.has_m:
            cols.append("policy_e")
    return cols


def write_slice_csv(path, sl: ValueSlice, spec: ProblemSpec, grid: GridSpec):
    """One slice as CSV: lexicographic node order, 17 significant digits."""
    axes = variant_axes(spec, grid, sl.variant)
    mesh = np.meshgrid(*axes, indexing="ij")
    cols = [np.full(mesh[0].size, sl.t)]
    cols += [m.reshape(-1) for m in mesh]
    cols.append(np.asarray(sl.values, dtype=np.float64).reshape(-1))
    with_policy = sl.policy is not None
    if with_policy:
        pol = sl.policy
        flat = pol.tuple_index.reshape(-1).astype(np.int64)
        zg = axes[0]
        aux_size = sl.values.size // len(zg)
        jz_of = np.arange(sl.values.size) // aux_size
        rad = pol.radices()
        tot = 1
        for r in rad:
            tot *= r
        u_idx = flat // tot
        rem = flat % tot
        picks = []
        for r in reversed(rad):
            picks.append(rem % r)
            rem = rem // r
        picks = list(reversed(picks))
        u_first = np.asarray([u[0] for u in pol.u_points])
        cols.append(u_first[u_idx])
        profiles = np.stack([
            _sigma_abs_profile(zg, spec, float(sl.t), np.asarray(u))
            for u in pol.u_points
        ])
        sig_here = profiles[u_idx, jz_of]
        for a, (mode, vals) in enumerate(pol.axis_choices):
            v = np.asarray(vals)[picks[a]]
            if mode == "sigma_multipliers":
                v = v * sig_here
            cols.append(np.clip(v, -pol.a_bound, pol.a_bound))
    header = ",".join(_csv_header(spec, sl.variant, with_policy))
    data = np.column_stack(cols)
    with open(path, "w") as fh:
        fh.write(header + "\n")
        np.savetxt(fh, data, fmt="%.17g", delimiter=",")


def read_slice_csv(path, spec: ProblemSpec, grid: GridSpec,
                   variant: VariantKey) -> ValueSlice:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    shape = _variant_shape(spec, grid, variant)
    w_col = header.index("w")
    t = float(data[0, 0])
    n_nodes = int(np.prod(shape))
    if data.shape[0] != n_nodes:
        raise ValueError(f"{path}: expected {n_nodes} rows, found {data.shape[0]}")
    vals = data[:, w_col].reshape(shape)
    dtype = grid.value_dtype(n_nodes)
    return ValueSlice(variant, t, vals.astype(dtype))


def write_result_csvs(outdir, result: SolveResult, spec: ProblemSpec,
                      node_limit: int | None = None) -> list[str]:
    import os

    os.makedirs(outdir, exist_ok=True)
    written = []
    for (label, t), sl in sorted(result.slices.items()):
        if node_limit is not None and sl.values.size > node_limit:
            continue
        name = f"{label}_t{t:.6f}.csv"
        path = os.path.join(outdir, name)
        write_slice_csv(path, sl, spec, result.config)
        written.append(path)
    return written
