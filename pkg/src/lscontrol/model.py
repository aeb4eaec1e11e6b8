"""Problem specification and structural checks.

This module holds the data model for a constrained control problem: controlled
SDE coefficients, loss functions with budget thresholds at a list of dates, the
control set, and the bookkeeping for the family of auxiliary problems solved on
each inter-date interval (the variant lattice).

Coefficients and costs are plain callables.  Declared Lipschitz and growth
constants are trusted after randomized spot checks on a sample box; validation
returns a list of violation messages instead of raising so callers can report
all problems at once.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "SdeCoefficients",
    "LossSpec",
    "TimeGrid",
    "ControlSet",
    "ProblemSpec",
    "VariantKey",
    "ConvexityCertificate",
    "validate_spec",
    "augment_running_cost",
    "build_variant_lattice",
    "check_convexity_preconditions",
]

DriftFn = Callable[[float, np.ndarray, np.ndarray], np.ndarray]
DiffusionFn = Callable[[float, np.ndarray, np.ndarray], np.ndarray]
CostFn = Callable[[np.ndarray], float]

#: relative slack allowed when spot-checking declared Lipschitz/growth constants
_CONST_CHECK_SLACK = 1e-7


@dataclass(frozen=True)
class SdeCoefficients:
    """Controlled SDE ``dZ = drift dt + diffusion dW`` on R^d.

    ``drift(t, z, u)`` returns a vector of length ``state_dim``;
    ``diffusion(t, z, u)`` returns a ``state_dim x state_dim`` matrix (the
    noise dimension always equals the state dimension here).  ``lipschitz_z``
    bounds the z-Lipschitz constant of both coefficients uniformly in (t, u);
    ``growth_z`` bounds ``|coef(t,z,u)| <= growth_z * (1 + |z|)``.
    """

    drift: DriftFn
    diffusion: DiffusionFn
    state_dim: int
    lipschitz_z: float
    growth_z: float

    def drift_vec(self, t: float, z: np.ndarray, u: np.ndarray) -> np.ndarray:
        return np.asarray(self.drift(t, z, u), dtype=float).reshape(self.state_dim)

    def diffusion_mat(self, t: float, z: np.ndarray, u: np.ndarray) -> np.ndarray:
        return np.asarray(self.diffusion(t, z, u), dtype=float).reshape(
            self.state_dim, self.state_dim
        )


@dataclass(frozen=True)
class LossSpec:
    """Terminal cost f and date loss psi, both nonnegative and Lipschitz.

    ``date_losses`` optionally overrides psi date by date (entry k-1 applies to
    date t_k); when absent the shared ``loss`` is used at every date.  The
    declared ``lipschitz_psi`` must cover every per-date loss as well.
    """

    terminal_cost: CostFn
    loss: CostFn
    lipschitz_f: float
    lipschitz_psi: float
    date_losses: tuple[CostFn, ...] | None = None

    def loss_at(self, k: int) -> CostFn:
        """Loss applied at date t_k (k = 1..n)."""
        if self.date_losses is not None:
            return self.date_losses[k - 1]
        return self.loss


@dataclass(frozen=True)
class TimeGrid:
    """Monitoring dates ``t_0 = 0 <= t_1 <= ... <= t_n = T``.

    Duplicate dates are removed on construction; afterwards the dates are
    strictly increasing.  Budget constraints apply at t_1 .. t_n (t_n = T).
    """

    dates: tuple[float, ...]

    def __init__(self, dates: Iterable[float]):
        seen: list[float] = []
        for t in dates:
            t = float(t)
            if not seen or t != seen[-1]:
                seen.append(t)
        object.__setattr__(self, "dates", tuple(seen))

    @property
    def n(self) -> int:
        """Number of constraint dates."""
        return len(self.dates) - 1

    @property
    def horizon(self) -> float:
        return self.dates[-1]

    def interval(self, i: int) -> tuple[float, float]:
        """Endpoints (t_i, t_{i+1}) of interval i (0-based, i < n)."""
        return self.dates[i], self.dates[i + 1]


@dataclass(frozen=True)
class ControlSet:
    """Admissible control values: finite list or a coordinate box.

    ``kind`` is "finite" or "box".  For "finite", ``points`` lists control
    vectors; for "box", ``bounds`` holds (lo, hi) per coordinate.  The control
    dimension must equal the state dimension of the accompanying SDE.
    """

    kind: str
    points: tuple[tuple[float, ...], ...] | None = None
    bounds: tuple[tuple[float, float], ...] | None = None

    @property
    def dimension(self) -> int:
        if self.kind == "finite":
            return len(self.points[0]) if self.points else 0
        return len(self.bounds) if self.bounds else 0

    def sample_values(self, resolution: int) -> np.ndarray:
        """Deterministic discretization: all points, or a regular box grid."""
        if self.kind == "finite":
            return np.asarray(self.points, dtype=float)
        axes = [np.linspace(lo, hi, resolution) for lo, hi in self.bounds]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    @staticmethod
    def finite(points: Sequence[Sequence[float]]) -> "ControlSet":
        return ControlSet(kind="finite", points=tuple(tuple(map(float, p)) for p in points))

    @staticmethod
    def box(bounds: Sequence[Sequence[float]]) -> "ControlSet":
        return ControlSet(kind="box", bounds=tuple((float(a), float(b)) for a, b in bounds))


@dataclass(frozen=True)
class ProblemSpec:
    """Full constrained problem: dynamics, losses, dates, controls, budgets.

    ``thresholds`` optionally records default budget levels p_k per date (used
    by command-line entry points as query defaults; the solver itself treats
    budgets as grid coordinates).  ``sample_box`` is the per-coordinate state
    box used for randomized validation and convexity sampling.
    """

    sde: SdeCoefficients
    loss: LossSpec
    grid: TimeGrid
    controls: ControlSet
    thresholds: tuple[float, ...] | None = None
    sample_box: tuple[tuple[float, float], ...] | None = None

    @property
    def dim(self) -> int:
        return self.sde.state_dim

    def state_box(self) -> tuple[tuple[float, float], ...]:
        if self.sample_box is not None:
            return self.sample_box
        return tuple((-5.0, 5.0) for _ in range(self.dim))


@dataclass(frozen=True, order=True)
class VariantKey:
    """One node of the auxiliary-problem lattice on interval ``interval_index``.

    Dates in ``active_p`` carry a budget coordinate p_k; dates in ``plain_psi``
    are penalized by their raw loss with no budget; ``has_m`` says whether the
    terminal budget coordinate m is present.  ``active_p`` and ``plain_psi``
    partition {interval_index+1, ..., n}.
    """

    interval_index: int
    active_p: tuple[int, ...]
    plain_psi: tuple[int, ...]
    has_m: bool

    def __init__(self, interval_index: int, active_p: Iterable[int],
                 plain_psi: Iterable[int], has_m: bool):
        object.__setattr__(self, "interval_index", int(interval_index))
        object.__setattr__(self, "active_p", tuple(sorted(int(k) for k in active_p)))
        object.__setattr__(self, "plain_psi", tuple(sorted(int(k) for k in plain_psi)))
        object.__setattr__(self, "has_m", bool(has_m))

    @property
    def aux_dim(self) -> int:
        """Number of auxiliary budget coordinates (p's plus m)."""
        return len(self.active_p) + (1 if self.has_m else 0)

    @property
    def is_root(self) -> bool:
        return bool(self.has_m and not self.plain_psi)

    def label(self) -> str:
        """Stable, filename-safe identifier."""
        if self.is_root:
            return "root" if self.interval_index == 0 else f"root_i{self.interval_index}"
        act = "".join(str(k) for k in self.active_p) or "none"
        tag = "m" if self.has_m else "nom"
        return f"i{self.interval_index}_p{act}_{tag}"

    def drop_m(self) -> "VariantKey":
        return VariantKey(self.interval_index, self.active_p, self.plain_psi, False)

    def deactivate(self, k: int) -> "VariantKey":
        """Move date k from budgeted to plain penalty."""
        if k not in self.active_p:
            raise ValueError(f"date {k} is not active in {self}")
        act = tuple(j for j in self.active_p if j != k)
        return VariantKey(self.interval_index, act, self.plain_psi + (k,), self.has_m)


@dataclass(frozen=True)
class ConvexityCertificate:
    """Outcome of sampled sufficient-condition checks for optimizer existence.

    ``verdict`` is "holds" when every sampled sufficient condition passed
    (affine coefficients, convex costs, convex control set) and "unknown"
    otherwise; a failed sampled check never proves nonexistence.
    """

    affine_drift: bool
    affine_diffusion: bool
    costs_convex: bool
    controls_convex: bool
    verdict: str
    n_samples: int
    notes: tuple[str, ...] = ()


# ---------------------------------------------------------------------------
# validation


def _sample_states(spec: ProblemSpec, rng: np.random.Generator, count: int) -> np.ndarray:
    box = np.asarray(spec.state_box(), dtype=float)
    return rng.uniform(box[:, 0], box[:, 1], size=(count, spec.dim))


def _sample_controls(spec: ProblemSpec, rng: np.random.Generator, count: int) -> np.ndarray:
    cs = spec.controls
    if cs.kind == "finite":
        pts = np.asarray(cs.points, dtype=float)
        return pts[rng.integers(0, len(pts), size=count)]
    box = np.asarray(cs.bounds, dtype=float)
    return rng.uniform(box[:, 0], box[:, 1], size=(count, cs.dimension))


def validate_spec(spec: ProblemSpec, n_samples: int = 120, seed: int = 0) -> list[str]:
    """Structural and sampled checks; returns violation messages (empty = ok).

    Checks cover: dimensional consistency (control dim equals state dim, and
    coefficient outputs square with it), date ordering, nonnegative losses,
    finiteness of every sampled evaluation, and declared Lipschitz/growth
    constants against sampled difference quotients.
    """
    out: list[str] = []
    sde, loss, grid, controls = spec.sde, spec.loss, spec.grid, spec.controls

    if sde.state_dim < 1:
        out.append(f"state_dim must be >= 1, got {sde.state_dim}")
        return out
    if controls.kind not in ("finite", "box"):
        out.append(f"unknown control-set kind {controls.kind!r}")
        return out
    if controls.kind == "finite" and not controls.points:
        out.append("finite control set is empty")
        return out
    if controls.kind == "box":
        for j, (lo, hi) in enumerate(controls.bounds):
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                out.append(f"control box coordinate {j} has bad bounds ({lo}, {hi})")
    if controls.dimension != sde.state_dim:
        out.append(
            f"control dimension {controls.dimension} != state dimension {sde.state_dim}"
        )

    dates = grid.dates
    if dates[0] != 0.0:
        out.append(f"first date must be 0, got {dates[0]}")
    if any(b <= a for a, b in zip(dates, dates[1:])):
        out.append(f"dates not strictly increasing: {dates}")
    if grid.horizon <= 0:
        out.append(f"horizon must be positive, got {grid.horizon}")
    if spec.thresholds is not None:
        if len(spec.thresholds) != grid.n:
            out.append(
                f"thresholds length {len(spec.thresholds)} != number of dates {grid.n}"
            )
        elif any(p < 0 for p in spec.thresholds):
            out.append(f"thresholds must be nonnegative: {spec.thresholds}")
    if sde.lipschitz_z < 0 or sde.growth_z < 0:
        out.append("lipschitz_z and growth_z must be nonnegative")
    if loss.lipschitz_f < 0 or loss.lipschitz_psi < 0:
        out.append("lipschitz_f and lipschitz_psi must be nonnegative")
    if loss.date_losses is not None and len(loss.date_losses) != grid.n:
        out.append(
            f"date_losses length {len(loss.date_losses)} != number of dates {grid.n}"
        )
    if out:
        return out

    rng = np.random.default_rng(seed)
    zs = _sample_states(spec, rng, n_samples)
    us = _sample_controls(spec, rng, n_samples)
    ts = rng.uniform(0.0, grid.horizon, size=n_samples)
    d = sde.state_dim
    slack = 1.0 + _CONST_CHECK_SLACK

    for t, z, u in zip(ts, zs, us):
        try:
            mu = np.asarray(sde.drift(t, z, u), dtype=float)
            sig = np.asarray(sde.diffusion(t, z, u), dtype=float)
        except Exception as exc:  # report, do not raise
            out.append(f"coefficient evaluation failed at t={t:.3g}: {exc!r}")
            return out
        if mu.shape != (d,):
            out.append(f"drift shape {mu.shape} != ({d},)")
            return out
        if sig.shape != (d, d):
            out.append(f"diffusion shape {sig.shape} != ({d}, {d})")
            return out
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sig))):
            out.append(f"non-finite coefficient at t={t:.3g}, z={z}, u={u}")
            return out
        nz = 1.0 + float(np.linalg.norm(z))
        if float(np.linalg.norm(mu)) > sde.growth_z * nz * slack:
            out.append(
                f"drift growth exceeds growth_z*(1+|z|) at z={z}: "
                f"{np.linalg.norm(mu):.6g} > {sde.growth_z * nz:.6g}"
            )
            break
        if float(np.linalg.norm(sig)) > sde.growth_z * nz * slack:
            out.append(
                f"diffusion growth exceeds growth_z*(1+|z|) at z={z}: "
                f"{np.linalg.norm(sig):.6g} > {sde.growth_z * nz:.6g}"
            )
            break

    # Lipschitz quotients in z at shared (t, u)
    zs2 = _sample_states(spec, rng, n_samples)
    for t, z1, z2, u in zip(ts, zs, zs2, us):
        dz = float(np.linalg.norm(z1 - z2))
        if dz < 1e-12:
            continue
        qm = float(np.linalg.norm(np.asarray(sde.drift(t, z1, u), dtype=float)
                                  - np.asarray(sde.drift(t, z2, u), dtype=float))) / dz
        qs = float(np.linalg.norm(np.asarray(sde.diffusion(t, z1, u), dtype=float)
                                  - np.asarray(sde.diffusion(t, z2, u), dtype=float))) / dz
        if qm > sde.lipschitz_z * slack or qs > sde.lipschitz_z * slack:
            out.append(
                f"coefficient Lipschitz quotient {max(qm, qs):.6g} exceeds "
                f"declared lipschitz_z={sde.lipschitz_z:.6g}"
            )
            break

    losses = [("terminal_cost", loss.terminal_cost, loss.lipschitz_f)]
    losses.append(("loss", loss.loss, loss.lipschitz_psi))
    if loss.date_losses is not None:
        for k, fn in enumerate(loss.date_losses, start=1):
            losses.append((f"date loss {k}", fn, loss.lipschitz_psi))
    for name, fn, lip in losses:
        bad = False
        for z1, z2 in zip(zs, zs2):
            v1, v2 = float(fn(z1)), float(fn(z2))
            if not (math.isfinite(v1) and math.isfinite(v2)):
                out.append(f"{name} non-finite at z={z1} or z={z2}")
                bad = True
                break
            if v1 < 0 or v2 < 0:
                zneg = z1 if v1 < 0 else z2
                out.append(f"{name} negative at z={zneg}: {min(v1, v2):.6g}")
                bad = True
                break
            dz = float(np.linalg.norm(z1 - z2))
            if dz > 1e-12 and abs(v1 - v2) / dz > lip * slack:
                out.append(
                    f"{name} Lipschitz quotient {abs(v1 - v2) / dz:.6g} exceeds "
                    f"declared {lip:.6g}"
                )
                bad = True
                break
        if bad:
            break
    return out


# ---------------------------------------------------------------------------
# running-cost augmentation


def augment_running_cost(
    spec: ProblemSpec,
    running_cost: Callable[[float, np.ndarray, np.ndarray], float],
    n_samples: int = 120,
    seed: int = 0,
) -> ProblemSpec:
    """Fold an integral running cost into the terminal cost via a state.

    Appends an integrator coordinate zeta with drift ``running_cost`` and a
    zero diffusion row/column, replaces the terminal cost by f(z) + zeta, and
    leaves the date losses reading only the original coordinates.  The control
    set is padded with a frozen zero coordinate so control and state
    dimensions stay equal.  Raises ValueError on a sampled negative running
    cost.
    """
    rng = np.random.default_rng(seed)
    zs = _sample_states(spec, rng, n_samples)
    zs2 = _sample_states(spec, rng, n_samples)
    us = _sample_controls(spec, rng, n_samples)
    ts = rng.uniform(0.0, spec.grid.horizon, size=n_samples)
    ell_max = 0.0
    ell_lip = 0.0
    for t, z1, z2, u in zip(ts, zs, zs2, us):
        v1 = float(running_cost(t, z1, u))
        v2 = float(running_cost(t, z2, u))
        if not (math.isfinite(v1) and math.isfinite(v2)):
            raise ValueError(f"running cost non-finite at t={t:.3g}")
        if v1 < 0 or v2 < 0:
            zneg = z1 if v1 < 0 else z2
            raise ValueError(f"running cost negative at z={zneg}: {min(v1, v2):.6g}")
        ell_max = max(ell_max, v1, v2)
        dz = float(np.linalg.norm(z1 - z2))
        if dz > 1e-12:
            ell_lip = max(ell_lip, abs(v1 - v2) / dz)

    d = spec.dim
    base_drift, base_diff = spec.sde.drift, spec.sde.diffusion
    base_f, base_psi = spec.loss.terminal_cost, spec.loss.loss

    def drift_aug(t: float, z: np.ndarray, u: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        u = np.asarray(u, dtype=float)
        if z.ndim == 2:
            ub = np.broadcast_to(u, z.shape) if u.ndim < 2 else u
            return np.stack([drift_aug(t, zr, ur) for zr, ur in zip(z, ub)])
        mu = np.asarray(base_drift(t, z[:d], u[:d]), dtype=float).reshape(d)
        return np.concatenate([mu, [float(running_cost(t, z[:d], u[:d]))]])

    def diffusion_aug(t: float, z: np.ndarray, u: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        u = np.asarray(u, dtype=float)
        if z.ndim == 2:
            ub = np.broadcast_to(u, z.shape) if u.ndim < 2 else u
            return np.stack([diffusion_aug(t, zr, ur) for zr, ur in zip(z, ub)])
        sig = np.asarray(base_diff(t, z[:d], u[:d]), dtype=float).reshape(d, d)
        out = np.zeros((d + 1, d + 1))
        out[:d, :d] = sig
        return out

    def f_aug(z: np.ndarray) -> float:
        z = np.asarray(z, dtype=float).reshape(d + 1)
        return float(base_f(z[:d])) + float(z[d])

    def psi_aug(z: np.ndarray) -> float:
        z = np.asarray(z, dtype=float).reshape(d + 1)
        return float(base_psi(z[:d]))

    date_losses_aug = None
    if spec.loss.date_losses is not None:
        def _wrap(fn: CostFn) -> CostFn:
            return lambda z, fn=fn: float(fn(np.asarray(z, dtype=float)[:d]))
        date_losses_aug = tuple(_wrap(fn) for fn in spec.loss.date_losses)

    if spec.controls.kind == "finite":
        controls_aug = ControlSet.finite([tuple(p) + (0.0,) for p in spec.controls.points])
    else:
        controls_aug = ControlSet.box(list(spec.controls.bounds) + [(0.0, 0.0)])

    zeta_hi = 1.0 + 1.5 * ell_max * spec.grid.horizon
    sample_box_aug = tuple(spec.state_box()) + ((0.0, zeta_hi),)

    sde_aug = SdeCoefficients(
        drift=drift_aug,
        diffusion=diffusion_aug,
        state_dim=d + 1,
        lipschitz_z=max(spec.sde.lipschitz_z, 1.25 * ell_lip + 1e-9),
        growth_z=max(spec.sde.growth_z, 1.25 * ell_max + 1e-9),
    )
    loss_aug = LossSpec(
        terminal_cost=f_aug,
        loss=psi_aug,
        lipschitz_f=spec.loss.lipschitz_f + 1.0,
        lipschitz_psi=spec.loss.lipschitz_psi,
        date_losses=date_losses_aug,
    )
    return replace(
        spec, sde=sde_aug, loss=loss_aug, controls=controls_aug, sample_box=sample_box_aug
    )


# ---------------------------------------------------------------------------
# variant lattice


def build_variant_lattice(spec: ProblemSpec, interval_index: int) -> list[VariantKey]:
    """Every auxiliary problem needed on one interval, boundary-first.

    For interval i the remaining dates are {i+1, ..., n}; each is either
    budgeted or plain, and the terminal budget is present or not, giving
    2^(n-i) * 2 variants.  The list is sorted by increasing auxiliary
    dimension (deterministic tie-break), so each variant appears before every
    variant that uses it as Dirichlet boundary data; the root (all dates
    budgeted, terminal budget present) comes last.
    """
    n = spec.grid.n
    if not (0 <= interval_index < n):
        raise ValueError(f"interval_index {interval_index} outside [0, {n})")
    dates = tuple(range(interval_index + 1, n + 1))
    keys: list[VariantKey] = []
    for r in range(len(dates) + 1):
        for act in itertools.combinations(dates, r):
            plain = tuple(k for k in dates if k not in act)
            for has_m in (False, True):
                keys.append(VariantKey(interval_index, act, plain, has_m))
    keys.sort(key=lambda v: (v.aux_dim, v.active_p, v.has_m))
    return keys


def boundary_sources(key: VariantKey) -> dict[str, VariantKey]:
    """Dirichlet data providers for each zero-budget face of ``key``.

    Maps face names ("m" and "p_<k>") to the lattice variant whose values are
    written onto that face: dropping m for the m = 0 face, deactivating date k
    for the p_k = 0 face.
    """
    out: dict[str, VariantKey] = {}
    if key.has_m:
        out["m"] = key.drop_m()
    for k in key.active_p:
        out[f"p_{k}"] = key.deactivate(k)
    return out


# ---------------------------------------------------------------------------
# convexity preconditions


def check_convexity_preconditions(
    spec: ProblemSpec, n_samples: int = 200, seed: int = 0
) -> ConvexityCertificate:
    """Sampled sufficient conditions for existence of an optimal control.

    Tests midpoint affinity of drift and diffusion in (z, u), midpoint
    convexity of the costs in z, and convexity of the control set.  All
    checks are sampled, never symbolic; a pass is reported as verdict
    "holds", anything else as "unknown".
    """
    rng = np.random.default_rng(seed)
    notes: list[str] = []
    cs = spec.controls
    controls_convex = cs.kind == "box" or (cs.points is not None and len(cs.points) == 1)
    if not controls_convex:
        notes.append(f"finite control set with {len(cs.points)} points is not convex")

    zs1 = _sample_states(spec, rng, n_samples)
    zs2 = _sample_states(spec, rng, n_samples)
    us1 = _sample_controls(spec, rng, n_samples)
    us2 = _sample_controls(spec, rng, n_samples)
    ts = rng.uniform(0.0, spec.grid.horizon, size=n_samples)

    affine_drift = True
    affine_diffusion = True
    for t, z1, z2, u1, u2 in zip(ts, zs1, zs2, us1, us2):
        zm, um = 0.5 * (z1 + z2), 0.5 * (u1 + u2)
        for name, fn in (("drift", spec.sde.drift), ("diffusion", spec.sde.diffusion)):
            va = np.asarray(fn(t, z1, u1), dtype=float)
            vb = np.asarray(fn(t, z2, u2), dtype=float)
            vm = np.asarray(fn(t, zm, um), dtype=float)
            scale = 1.0 + max(np.abs(va).max(), np.abs(vb).max())
            if np.abs(vm - 0.5 * (va + vb)).max() > 1e-8 * scale:
                if name == "drift" and affine_drift:
                    affine_drift = False
                    notes.append(f"drift fails midpoint affinity at t={t:.3g}")
                if name == "diffusion" and affine_diffusion:
                    affine_diffusion = False
                    notes.append(f"diffusion fails midpoint affinity at t={t:.3g}")
        if not (affine_drift or affine_diffusion):
            break

    costs_convex = True
    for z1, z2 in zip(zs1, zs2):
        zm = 0.5 * (z1 + z2)
        for name, fn in (("terminal_cost", spec.loss.terminal_cost), ("loss", spec.loss.loss)):
            va, vb, vm = float(fn(z1)), float(fn(z2)), float(fn(zm))
            if vm > 0.5 * (va + vb) + 1e-8 * (1.0 + abs(va) + abs(vb)):
                costs_convex = False
                notes.append(f"{name} fails midpoint convexity near z={zm}")
                break
        if not costs_convex:
            break

    ok = affine_drift and affine_diffusion and costs_convex and controls_convex
    return ConvexityCertificate(
        affine_drift=affine_drift,
        affine_diffusion=affine_diffusion,
        costs_convex=costs_convex,
        controls_convex=controls_convex,
        verdict="holds" if ok else "unknown",
        n_samples=n_samples,
        notes=tuple(notes),
    )
