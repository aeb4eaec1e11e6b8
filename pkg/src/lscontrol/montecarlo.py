"""Path simulation and certification for the penalized control problem.

Simulates the augmented system (state, date budgets, terminal budget) under a
feedback policy, estimates the penalized cost J, and hosts two oracles: the
closed form for uncontrolled dynamics with analytic conditional means, and an
exhaustive discrete dynamic program that reproduces the grid solver exactly on
small matched discretizations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .model import (
    LossSpec,
    ProblemSpec,
    VariantKey,
    boundary_sources,
    build_variant_lattice,
)
from .solver import (
    GridSpec,
    SolveResult,
    ValueSlice,
    boundary_inject,
    jump_slice,
    step_tables,
    terminal_slice,
    variant_axes,
)

__all__ = [
    "PolicyFn",
    "Estimate",
    "PathBatch",
    "ConditionalMeans",
    "simulate_paths",
    "estimate_J",
    "closed_form_uncontrolled",
    "brute_force_dp",
    "zero_policy",
    "delta_hedge_policy",
    "solver_argmin_policy",
]


@dataclass(frozen=True)
class PolicyFn:
    """Feedback maps for the drift control and the two martingale controls.

    Each callable receives (t, z, p, m) where z has shape (n_paths, d), p has
    shape (n_paths, n_active) and m has shape (n_paths,).  ``nu`` returns the
    control values fed to the coefficient functions, ``a_blocks`` an array of
    shape (n_paths, n_active, d) of budget integrands (one block per not yet
    reached date, ascending), and ``e`` an (n_paths, d) integrand for the
    terminal budget.
    """

    nu: Callable
    a_blocks: Callable
    e: Callable
    name: str = "custom"


@dataclass(frozen=True)
class Estimate:
    mean: float
    stderr: float
    n_paths: int
    seed: int

    def __post_init__(self):
        if self.stderr < 0:
            raise ValueError("stderr must be nonnegative")


@dataclass(frozen=True)
class PathBatch:
    """Recorded marks of simulated paths.

    ``dates`` lists the constraint dates not yet passed at the start time,
    ascending; ``state_at_dates`` and ``budget_at_dates`` align with it.  The
    final entry of ``state_at_dates`` is the terminal state.
    """

    start: tuple
    interval_index: int
    dates: tuple
    state_at_dates: tuple
    budget_at_dates: tuple
    m_final: np.ndarray
    n_paths: int
    seed: int
    antithetic: bool = False


@dataclass(frozen=True)
class ConditionalMeans:
    """Analytic conditional expectations of the cost functions.

    ``terminal(t, z, s)`` returns E[f(Z_s) | Z_t = z]; ``loss`` does the same
    for the date loss and defaults to ``terminal`` (identical cost functions).
    """

    terminal: Callable
    loss: Callable | None = None

    def loss_mean(self, t: float, z, s: float):
        fn = self.loss if self.loss is not None else self.terminal
        out = fn(t, z, s)
        return out if np.ndim(out) else float(out)


def _containing_interval(spec: ProblemSpec, t: float) -> int:
    dates = spec.grid.dates
    if t < dates[0] - 1e-12 or t > dates[-1] + 1e-12:
        raise ValueError(f"time {t} outside the date range {dates}")
    for i in range(len(dates) - 1):
        if t < dates[i + 1] - 1e-12:
            return i
    return len(dates) - 2


def _batch_eval(fn, rows: np.ndarray) -> np.ndarray:
    """Apply a cost function to (n, d) rows, using a vector fast path."""
    try:
        out = np.asarray(fn(rows), dtype=np.float64)
        if out.shape == rows.shape[:1]:
            return out
    except Exception:
        pass
    return np.array([float(fn(rows[j])) for j in range(rows.shape[0])])


def simulate_paths(spec: ProblemSpec, policy: PolicyFn, start: tuple,
                   n_paths: int, n_steps_per_interval: int, seed: int,
                   antithetic: bool = False) -> PathBatch:
    """Euler-Maruyama paths of (Z, P_k, M) under one Brownian stream.

    The same increments drive the state and every budget; each date budget is
    advanced only until its own date and then recorded together with the state
    there.  With ``antithetic`` set, the second half of the batch mirrors the
    increments of the first half.
    """
    if n_steps_per_interval <= 0:
        raise ValueError("n_steps_per_interval must be positive")
    t0, z0, p0, m0 = start
    t0 = float(t0)
    d = spec.sde.state_dim
    z0 = np.asarray(z0, dtype=np.float64).reshape(d)
    i0 = _containing_interval(spec, t0)
    dates = spec.grid.dates
    remaining = tuple(dates[i0 + 1:])
    p0 = tuple(float(v) for v in np.atleast_1d(p0))
    if len(p0) != len(remaining):
        raise ValueError(
            f"start carries {len(p0)} budgets but {len(remaining)} dates remain")
    m0 = float(m0)
    if antithetic and n_paths % 2:
        raise ValueError("antithetic batches need an even path count")

    rng = np.random.default_rng(seed)
    z = np.broadcast_to(z0, (n_paths, d)).copy()
    p = np.broadcast_to(np.asarray(p0), (n_paths, len(p0))).copy()
    m = np.full(n_paths, m0)
    state_marks, budget_marks = [], []
    t = t0
    for j, t_next in enumerate(remaining):
        dt = (t_next - t) / n_steps_per_interval
        sq = math.sqrt(dt)
        for _ in range(n_steps_per_interval):
            if antithetic:
                half = rng.standard_normal((n_paths // 2, d))
                dw = np.concatenate([half, -half]) * sq
            else:
                dw = rng.standard_normal((n_paths, d)) * sq
            u = policy.nu(t, z, p[:, j:], m)
            a = np.asarray(policy.a_blocks(t, z, p[:, j:], m), dtype=np.float64)
            e = np.asarray(policy.e(t, z, p[:, j:], m), dtype=np.float64)
            mu = np.asarray(spec.sde.drift(t, z, u), dtype=np.float64)
            sg = np.asarray(spec.sde.diffusion(t, z, u), dtype=np.float64)
            mu = np.broadcast_to(mu, (n_paths, d))
            sg = np.broadcast_to(sg, (n_paths, d, d))
            z = z + mu * dt + np.einsum("nij,nj->ni", sg, dw)
            a = np.broadcast_to(a, (n_paths, p.shape[1] - j, d))
            p[:, j:] = p[:, j:] + np.einsum("nkj,nj->nk", a, dw)
            e = np.broadcast_to(e, (n_paths, d))
            m = m + np.einsum("nj,nj->n", e, dw)
            t += dt
            if not np.isfinite(z).all():
                bad = int(np.argwhere(~np.isfinite(z).all(axis=1))[0, 0])
                raise FloatingPointError(
                    f"state overflow on path {bad} near t={t:.6f}")
        t = t_next
        state_marks.append(z.copy())
        budget_marks.append(p[:, j].copy())
    return PathBatch(start=(t0, tuple(z0), p0, m0), interval_index=i0,
                     dates=remaining, state_at_dates=tuple(state_marks),
                     budget_at_dates=tuple(budget_marks), m_final=m.copy(),
                     n_paths=n_paths, seed=seed, antithetic=antithetic)


def estimate_J(paths: PathBatch, loss: LossSpec, thresholds: tuple | None = None,
               interval_index: int | None = None) -> Estimate:
    """Empirical mean and standard error of the penalized cost.

    The cost of a path is the positive part of the terminal shortfall plus the
    positive parts of the date-loss shortfalls at the recorded dates.  The
    optional arguments cross-check the batch against the caller's intent.
    """
    if interval_index is not None and interval_index != paths.interval_index:
        raise ValueError("interval_index does not match the simulated batch")
    if thresholds is not None:
        p_want, m_want = thresholds
        p_have = paths.start[2]
        if len(np.atleast_1d(p_want)) != len(p_have) or not np.allclose(
                np.atleast_1d(p_want), p_have, atol=1e-12) or not math.isclose(
                float(m_want), paths.start[3], abs_tol=1e-12):
            raise ValueError("thresholds do not match the simulated start point")
    n_dates = len(paths.dates)
    if (len(paths.state_at_dates) != n_dates
            or len(paths.budget_at_dates) != n_dates or n_dates == 0):
        raise ValueError("path batch is missing date marks")
    i0 = paths.interval_index
    cost = np.maximum(
        _batch_eval(loss.terminal_cost, paths.state_at_dates[-1]) - paths.m_final,
        0.0)
    for j in range(n_dates):
        psi = loss.loss_at(i0 + 1 + j)
        cost += np.maximum(
            _batch_eval(psi, paths.state_at_dates[j]) - paths.budget_at_dates[j],
            0.0)
    n = paths.n_paths
    stderr = float(cost.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return Estimate(float(cost.mean()), stderr, n, paths.seed)


def closed_form_uncontrolled(spec: ProblemSpec, means: ConditionalMeans,
                             point: tuple) -> float:
    """Exact auxiliary value for uncontrolled dynamics.

    With a singleton control set the infimum over budget martingales is met by
    replication, and the value collapses to positive parts of the conditional
    means minus the budgets.
    """
    if not (spec.controls.kind == "finite" and len(spec.controls.points) == 1):
        raise ValueError("closed form requires a singleton control set")
    t, z, p, m = point
    t = float(t)
    z = np.asarray(z, dtype=np.float64).reshape(spec.sde.state_dim)
    i0 = _containing_interval(spec, t)
    remaining = spec.grid.dates[i0 + 1:]
    p = tuple(float(v) for v in np.atleast_1d(p))
    if len(p) != len(remaining):
        raise ValueError(
            f"point carries {len(p)} budgets but {len(remaining)} dates remain")
    total = max(float(means.terminal(t, z, remaining[-1])) - float(m), 0.0)
    for pk, tk in zip(p, remaining):
        total += max(means.loss_mean(t, z, tk) - pk, 0.0)
    return total


# ---------------------------------------------------------------------------
# policies


def zero_policy(spec: ProblemSpec) -> PolicyFn:
    """Hold the first control value and leave every budget flat."""
    u0 = spec.controls.sample_values(1)[0]
    d = spec.sde.state_dim

    def nu(t, z, p, m):
        return u0

    def a_blocks(t, z, p, m):
        return np.zeros((z.shape[0], p.shape[1], d))

    def e(t, z, p, m):
        return np.zeros((z.shape[0], d))

    return PolicyFn(nu, a_blocks, e, name="zero")


def delta_hedge_policy(spec: ProblemSpec, means: ConditionalMeans,
                       fd_step: float = 1e-5) -> PolicyFn:
    """Budget integrands from the conditional-mean sensitivity.

    Each budget tracks the martingale E[cost at its date | Z_t], so its
    integrand is the z-derivative of the conditional mean (by finite
    difference) times the diffusion row.  Only one state dimension is
    supported, matching the grid solver.
    """
    if spec.sde.state_dim != 1:
        raise NotImplementedError("delta hedge implemented for d = 1")
    u0 = spec.controls.sample_values(1)[0]
    dates = spec.grid.dates

    def _delta(fn, t, z, s):
        h = fd_step * np.maximum(1.0, np.abs(z))
        up = np.asarray(fn(t, z + h, s), dtype=np.float64).reshape(len(z), -1)
        dn = np.asarray(fn(t, z - h, s), dtype=np.float64).reshape(len(z), -1)
        return (up - dn) / (2.0 * h)

    def nu(t, z, p, m):
        return u0

    def a_blocks(t, z, p, m):
        sg = np.asarray(spec.sde.diffusion(t, z, u0), dtype=np.float64)
        sg = np.broadcast_to(sg, (z.shape[0], 1, 1))[:, :, 0]
        n_active = p.shape[1]
        active_dates = dates[-n_active:] if n_active else ()
        out = np.empty((z.shape[0], n_active, 1))
        loss_fn = means.loss if means.loss is not None else means.terminal
        for k, tk in enumerate(active_dates):
            out[:, k, :] = _delta(loss_fn, t, z, tk) * sg
        return out

    def e(t, z, p, m):
        sg = np.asarray(spec.sde.diffusion(t, z, u0), dtype=np.float64)
        sg = np.broadcast_to(sg, (z.shape[0], 1, 1))[:, :, 0]
        return _delta(means.terminal, t, z, dates[-1]) * sg

    return PolicyFn(nu, a_blocks, e, name="replicating")


def solver_argmin_policy(result: SolveResult, spec: ProblemSpec,
                         label: str = "root") -> PolicyFn:
    """Nearest-node lookup of the argmin tuples kept during a solve.

    The policy is piecewise constant in time: at time t it uses the latest
    kept policy slice at or before t (falling back to the earliest one).
    Requires the solve to have been run with policy_times.
    """
    grid: GridSpec = result.config
    stamps = []
    for (lab, tt), sl in result.slices.items():
        if lab == label and sl.policy is not None:
            stamps.append((tt, sl))
    if not stamps:
        raise ValueError(f"no kept policy slices for variant {label!r}")
    stamps.sort(key=lambda x: x[0])
    times = np.array([tt for tt, _ in stamps])
    first = stamps[0][1]
    axes = variant_axes(spec, grid, first.variant)
    n_p = len(first.variant.active_p)

    def _nearest(ax, vals):
        step = ax[1] - ax[0]
        idx = np.rint((vals - ax[0]) / step).astype(np.int64)
        return np.clip(idx, 0, len(ax) - 1)

    def _lookup(t, z, p, m):
        j = int(np.searchsorted(times, t + 1e-12, side="right")) - 1
        sl = stamps[max(j, 0)][1]
        pol = sl.policy
        iz = _nearest(axes[0], z[:, 0])
        loc = [iz]
        for k in range(n_p):
            loc.append(_nearest(axes[1 + k], p[:, k]))
        loc.append(_nearest(axes[-1], m))
        flat = pol.tuple_index[tuple(loc)].astype(np.int64)
        return sl, pol, flat

    def _axis_values(pol, flat, t, z):
        rad = pol.radices()
        picks = []
        rem = flat.copy()
        for r in reversed(rad):
            picks.append(rem % r)
            rem //= r
        picks = list(reversed(picks))
        u_idx = rem
        u_vals = np.asarray(pol.u_points)[u_idx]
        sigma_abs = None
        out = []
        for (mode, vals), pick in zip(pol.axis_choices, picks):
            v = np.asarray(vals)[pick]
            if mode == "sigma_multipliers":
                if sigma_abs is None:
                    sg = np.asarray(spec.sde.diffusion(t, z, u_vals),
                                    dtype=np.float64)
                    sigma_abs = np.abs(
                        np.broadcast_to(sg, (z.shape[0], 1, 1))[:, 0, 0])
                v = v * sigma_abs
            out.append(np.clip(v, -pol.a_bound, pol.a_bound))
        return u_idx, out

    def nu(t, z, p, m):
        sl, pol, flat = _lookup(t, z, p, m)
        u_idx, _ = _axis_values(pol, flat, t, z)
        return np.asarray(pol.u_points)[u_idx]

    def a_blocks(t, z, p, m):
        sl, pol, flat = _lookup(t, z, p, m)
        _, vals = _axis_values(pol, flat, t, z)
        n_active = p.shape[1]
        out = np.zeros((z.shape[0], n_active, 1))
        for k in range(n_active):
            src = len(vals) - 1 - n_active + k
            if 0 <= src < len(vals) - 1:
                out[:, k, 0] = vals[src]
        return out

    def e(t, z, p, m):
        sl, pol, flat = _lookup(t, z, p, m)
        _, vals = _axis_values(pol, flat, t, z)
        out = np.zeros((z.shape[0], 1))
        if vals:
            out[:, 0] = vals[-1]
        return out

    return PolicyFn(nu, a_blocks, e, name="argmin")


# ---------------------------------------------------------------------------
# exhaustive dynamic-programming oracle


def brute_force_dp(spec: ProblemSpec, grid: GridSpec, interval_index: int = 0,
                   max_evaluations: int = 10 ** 8) -> dict:
    """Plain-Python backward recursion with exhaustive joint control search.

    Uses the same quadrature, shift tables and interpolation arithmetic as the
    stepping engines, but evaluates every (control, hedge-choice) tuple with
    nested scalar loops.  Returns {variant label: value array} at the start of
    ``interval_index``.  Intended as an independent oracle for the vectorized
    and compiled engines on small matched discretizations.
    """
    errs = grid.validate(spec)
    if errs:
        raise ValueError("invalid grid: " + "; ".join(errs))
    dates = spec.grid.dates
    n = len(dates) - 1
    total = 0
    for i in range(interval_index, n):
        nsteps, _ = grid.steps_for_interval(dates, i)
        for key in build_variant_lattice(spec, i):
            shape = tuple(len(ax) for ax in variant_axes(spec, grid, key))
            nodes = int(np.prod(shape))
            tuples = _tuple_count(spec, grid, key)
            nq = len(grid.quad(grid.dt)[0])
            total += nodes * tuples * nq * nsteps
    if total > max_evaluations:
        raise ValueError(
            f"enumeration budget exceeded: {total} > {max_evaluations}")

    right_values: dict = {}
    for i in range(n - 1, interval_index - 1, -1):
        lattice = build_variant_lattice(spec, i)
        nsteps, dt = grid.steps_for_interval(dates, i)
        cur = {}
        for key in lattice:
            if i == n - 1:
                cur[key] = terminal_slice(key, grid, spec.loss, spec)
            else:
                cont = VariantKey(i + 1,
                                  tuple(k for k in key.active_p if k != i + 1),
                                  tuple(k for k in key.plain_psi if k != i + 1),
                                  key.has_m)
                cur[key] = jump_slice(right_values[cont], key, grid,
                                      spec.loss, spec)
        from .solver import _time_invariant_probe, edge_extension, edge_slopes, growth_constant
        invariant = _time_invariant_probe(spec, dates[i], dates[i + 1])
        zg = grid.z_grid(0)
        dz = float(zg[1] - zg[0])
        cap_c = growth_constant(spec)
        for j in range(nsteps, 0, -1):
            t_new = dates[i] + (j - 1) * dt
            slopes = edge_slopes(
                [np.asarray(cur[key].values) for key in lattice], dz, cap_c)
            nxt = {}
            for key in lattice:
                dtype = np.asarray(cur[key].values).dtype
                t_tab = dates[i] if invariant else t_new
                tabs = step_tables(spec, grid, key, dt, dtype, t_tab)
                vals = _scalar_step(np.asarray(cur[key].values), tabs,
                                    edge_extension(slopes, tabs))
                sl = ValueSlice(key, t_new, vals)
                if key.active_p or key.has_m:
                    lower = {sub: nxt[sub] for sub in
                             boundary_sources(key).values()}
                    sl = boundary_inject(sl, lower, spec)
                nxt[key] = sl
            cur = nxt
        right_values = cur
    return {key.label(): sl.values for key, sl in right_values.items()}


def _tuple_count(spec: ProblemSpec, grid: GridSpec, key: VariantKey) -> int:
    n_u = len(spec.controls.sample_values(grid.control_resolution))
    naux = key.aux_dim
    if grid.hedge_grid[0] == "box":
        per = int(grid.hedge_grid[1])
    else:
        per = len(grid.hedge_grid[1])
    return n_u * per ** naux


def _scalar_step(wnext: np.ndarray, tabs: dict, zex: np.ndarray) -> np.ndarray:
    """One backward step as nested scalar loops, matching the kernels.

    Operation order mirrors the compiled kernels exactly: z blend plus edge
    extension with floor and growth cap, then budget-axis blends
    innermost-last, quadrature accumulated ascending, strict-less-than
    minimization over the flat tuple index with first-wins ties.
    """
    naux = wnext.ndim - 1
    nz = wnext.shape[0]
    qw = tabs["qw"]
    nq = len(qw)
    nu = tabs["zj0"].shape[0]
    axes = tabs["axes"]
    radix = [ax["j0"].shape[1] for ax in axes]
    best = np.full(wnext.shape, np.inf, dtype=wnext.dtype)
    zero = wnext.dtype.type(0.0)

    def zread(u, q, jz, aux):
        j0 = tabs["zj0"][u, q, jz]
        fr = tabs["zfr"][u, q, jz]
        cap = tabs["zcap"][u, q, jz]
        lo = wnext[(j0,) + aux]
        hi = wnext[(j0 + 1,) + aux]
        v = lo + fr * (hi - lo) + zex[u, q, jz]
        if v < zero:
            v = zero
        if v > cap:
            v = cap
        return v

    def aux_read(u, q, jz, choice, depth, aux_target, aux_src_tail):
        # resolve source indices for axes >= depth recursively; axes < depth
        # already resolved into aux_src_tail
        if depth < 0:
            return zread(u, q, jz, aux_src_tail)
        ax = axes[depth]
        j0 = ax["j0"][u, choice[depth], q, jz, aux_target[depth]]
        fr = ax["fr"][u, choice[depth], q, jz, aux_target[depth]]
        ex = ax["extra"][u, choice[depth], q, jz, aux_target[depth]]
        lo = aux_read(u, q, jz, choice, depth - 1,
                      aux_target, (j0,) + aux_src_tail)
        hi = aux_read(u, q, jz, choice, depth - 1,
                      aux_target, (j0 + 1,) + aux_src_tail)
        return lo + fr * (hi - lo) + ex

    for jz in range(nz):
        for aux in np.ndindex(*wnext.shape[1:]):
            node = (jz,) + aux
            b = best[node]
            for u in range(nu):
                for choice in np.ndindex(*radix):
                    acc = qw[0] * aux_read(u, 0, jz, choice, naux - 1, aux, ())
                    for q in range(1, nq):
                        acc = acc + qw[q] * aux_read(u, q, jz, choice,
                                                     naux - 1, aux, ())
                    if acc < b:
                        b = acc
            best[node] = b
    return best
