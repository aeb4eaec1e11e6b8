"""Command-line entry points: solve, extract, verify, simulate.

Bundles the built-in example problems, flat key=value run configuration, CSV
and manifest output, and the exit-code contract {0 ok, 2 config, 3 every query
infeasible, 4 numeric failure, 5 verification failure}.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from dataclasses import dataclass, replace

import numpy as np

from .hamiltonian import (
    JetPoint,
    g_matrix_check,
    one_vee_scaling,
    strict_supersolution_gap,
    unit_scaling,
)
from .levelset import (
    _profile_along_m,
    _root_slice_for,
    feasibility_report,
    write_feasibility_csv,
)
from .model import (
    ControlSet,
    LossSpec,
    ProblemSpec,
    SdeCoefficients,
    TimeGrid,
    VariantKey,
)
from .montecarlo import (
    ConditionalMeans,
    delta_hedge_policy,
    estimate_J,
    simulate_paths,
    solver_argmin_policy,
    zero_policy,
)
from .solver import (
    GridSpec,
    SolveResult,
    _find_triplet,
    _jet_at,
    check_slice_invariants,
    hjb_residual,
    read_slice_csv,
    residual_sample_nodes,
    solve_problem,
    write_result_csvs,
)

__all__ = [
    "PresetBundle",
    "PRESET_NAMES",
    "build_preset",
    "RunConfig",
    "main",
    "cmd_solve",
    "cmd_extract",
    "cmd_verify",
    "cmd_simulate",
]


class ConfigError(ValueError):
    """Invalid run configuration; maps to exit code 2."""


class AllInfeasibleError(RuntimeError):
    """Every extraction query came back infeasible; maps to exit code 3."""


class VerificationFailure(RuntimeError):
    """A verification check failed; maps to exit code 5."""


# ---------------------------------------------------------------------------
# presets


@dataclass(frozen=True)
class PresetBundle:
    """A ready-to-run example problem with its default grid.

    ``means`` carries analytic conditional expectations when the dynamics are
    uncontrolled with known transition means (enables the closed-form oracle
    and the replicating simulation policy).  ``default_start`` is the
    canonical (t, z, p, m) query/simulation point.
    """

    name: str
    spec: ProblemSpec
    grid: GridSpec
    means: ConditionalMeans | None = None
    default_start: tuple | None = None
    description: str = ""


def _relu_terminal(z):
    return np.maximum(z[..., 0], 0.0)


def _gbm_sde(mu_bar: float, sigma_bar: float) -> SdeCoefficients:
    return SdeCoefficients(
        drift=lambda t, z, u: mu_bar * z,
        diffusion=lambda t, z, u: sigma_bar * z[..., None],
        state_dim=1,
        lipschitz_z=max(abs(mu_bar), abs(sigma_bar)),
        growth_z=max(abs(mu_bar), abs(sigma_bar)),
    )


def _gbm_means(mu_bar: float) -> ConditionalMeans:
    def mean(t, z, s):
        return np.asarray(z)[..., 0] * math.exp(mu_bar * (s - t))

    return ConditionalMeans(terminal=mean)


def _preset_gbm1() -> PresetBundle:
    spec = ProblemSpec(
        sde=_gbm_sde(0.1, 0.2),
        loss=LossSpec(terminal_cost=_relu_terminal, loss=_relu_terminal,
                      lipschitz_f=1.0, lipschitz_psi=1.0),
        grid=TimeGrid((0.0, 1.0)),
        controls=ControlSet.finite([[0.0]]),
        thresholds=(1.2,),
        sample_box=((0.2, 3.0),),
    )
    grid = GridSpec(
        z_axis=((0.2, 3.0, 201),),
        p_axis=((2.0, 81),),
        m_axis=(2.0, 81),
        dt=0.005,
        a_bound=2.0,
        quadrature=("gauss_hermite", 3),
        hedge_grid=("sigma_multipliers", (0.0, 1.0, 1.05, 1.1)),
    )
    return PresetBundle(
        name="gbm1", spec=spec, grid=grid, means=_gbm_means(0.1),
        default_start=(0.0, (1.0,), (1.2,), 1.0),
        description="uncontrolled geometric Brownian motion, one date at T",
    )


def _preset_gbm2() -> PresetBundle:
    spec = ProblemSpec(
        sde=_gbm_sde(0.1, 0.2),
        loss=LossSpec(terminal_cost=_relu_terminal, loss=_relu_terminal,
                      lipschitz_f=1.0, lipschitz_psi=1.0),
        grid=TimeGrid((0.0, 0.5, 1.0)),
        controls=ControlSet.finite([[0.0]]),
        thresholds=(1.0, 1.2),
        sample_box=((0.2, 3.0),),
    )
    grid = GridSpec(
        z_axis=((0.2, 3.0, 201),),
        p_axis=((2.0, 81), (2.0, 81)),
        m_axis=(2.0, 81),
        dt=0.005,
        a_bound=2.0,
        quadrature="two_point",
        hedge_grid=("sigma_multipliers", (0.0, 1.05)),
    )
    return PresetBundle(
        name="gbm2", spec=spec, grid=grid, means=_gbm_means(0.1),
        default_start=(0.0, (1.0,), (1.0, 1.2), 1.0),
        description="uncontrolled geometric Brownian motion, dates 0.5 and 1.0",
    )


def _preset_drift2() -> PresetBundle:
    spec = ProblemSpec(
        sde=SdeCoefficients(
            drift=lambda t, z, u: np.asarray(u)[..., 0:1] * z,
            diffusion=lambda t, z, u: 0.2 * z[..., None],
            state_dim=1,
            lipschitz_z=0.3,
            growth_z=0.3,
        ),
        loss=LossSpec(terminal_cost=_relu_terminal, loss=_relu_terminal,
                      lipschitz_f=1.0, lipschitz_psi=1.0),
        grid=TimeGrid((0.0, 1.0)),
        controls=ControlSet.finite([[-0.1], [0.1]]),
        thresholds=(1.0,),
        sample_box=((0.5, 1.5),),
    )
    grid = GridSpec(
        z_axis=((0.5, 1.5, 11),),
        p_axis=((1.0, 5),),
        m_axis=(1.0, 5),
        dt=0.25,
        a_bound=1.0,
        quadrature="two_point",
        hedge_grid=("box", 3),
    )
    return PresetBundle(
        name="drift2", spec=spec, grid=grid,
        default_start=(0.0, (1.0,), (1.0,), 1.0),
        description="drift picked from two values; coarse grid for the "
                    "exhaustive-search oracle",
    )


def _preset_affine1() -> PresetBundle:
    spec = ProblemSpec(
        sde=SdeCoefficients(
            drift=lambda t, z, u: 0.05 * z + np.asarray(u)[..., 0:1],
            diffusion=lambda t, z, u: (0.2 * z + 0.1 * np.asarray(u)[..., 0:1])[..., None],
            state_dim=1,
            lipschitz_z=0.25,
            growth_z=0.35,
        ),
        loss=LossSpec(terminal_cost=_relu_terminal, loss=_relu_terminal,
                      lipschitz_f=1.0, lipschitz_psi=1.0),
        grid=TimeGrid((0.0, 1.0)),
        controls=ControlSet.box(((-1.0, 1.0),)),
        thresholds=(1.0,),
        sample_box=((0.2, 3.0),),
    )
    grid = GridSpec(
        z_axis=((0.2, 3.0, 101),),
        p_axis=((2.0, 41),),
        m_axis=(2.0, 41),
        dt=0.01,
        a_bound=2.0,
        quadrature="two_point",
        control_resolution=3,
        hedge_grid=("sigma_multipliers", (0.0, 1.0, 1.1)),
    )
    return PresetBundle(
        name="affine1", spec=spec, grid=grid,
        default_start=(0.0, (1.0,), (1.0,), 1.0),
        description="affine controlled drift and diffusion on a box control set",
    )


_PRESETS = {
    "gbm1": _preset_gbm1,
    "gbm2": _preset_gbm2,
    "drift2": _preset_drift2,
    "affine1": _preset_affine1,
}
PRESET_NAMES = tuple(sorted(_PRESETS))


def build_preset(name: str, *, dt: float | None = None, nz: int | None = None,
                 np_pts: int | None = None, nm: int | None = None,
                 amax: float | None = None,
                 quadrature=None) -> PresetBundle:
    """Preset bundle with optional grid overrides."""
    if name not in _PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESET_NAMES}")
    bundle = _PRESETS[name]()
    g = bundle.grid
    z_axis = g.z_axis
    if nz is not None:
        z_axis = tuple((lo, hi, int(nz)) for lo, hi, _n in z_axis)
    p_axis = g.p_axis
    if np_pts is not None:
        p_axis = tuple((hi, int(np_pts)) for hi, _n in p_axis)
    m_axis = g.m_axis
    if nm is not None:
        m_axis = (m_axis[0], int(nm))
    g = replace(
        g,
        z_axis=z_axis,
        p_axis=p_axis,
        m_axis=m_axis,
        dt=g.dt if dt is None else float(dt),
        a_bound=g.a_bound if amax is None else float(amax),
        quadrature=g.quadrature if quadrature is None else quadrature,
    )
    return replace(bundle, grid=g)


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    preset: str | None = None
    out: str = "."
    dt: float | None = None
    nz: int | None = None
    np_pts: int | None = None
    nm: int | None = None
    amax: float | None = None
    scaling: str = "one_vee"
    seed: int = 0
    paths: int = 20000
    steps: int = 200
    policy: str = "zero"
    checks: tuple = ()
    eps: float | None = None
    quadrature: str | None = None
    keep_times: tuple = ()
    keep_triplet: tuple = ()
    policy_times: tuple = ()
    node_limit: int | None = 2_000_000
    query_t: float | None = None
    query_z: tuple = ()
    query_p: tuple = ()
    sim_start: tuple | None = None


_FIELD_BY_KEY = {
    "preset": ("preset", str),
    "out": ("out", str),
    "dt": ("dt", float),
    "nz": ("nz", int),
    "np": ("np_pts", int),
    "nm": ("nm", int),
    "amax": ("amax", float),
    "scaling": ("scaling", str),
    "seed": ("seed", int),
    "paths": ("paths", int),
    "steps": ("steps", int),
    "policy": ("policy", str),
    "checks": ("checks", "strlist"),
    "eps": ("eps", float),
    "quadrature": ("quadrature", str),
    "keep_times": ("keep_times", "floatlist"),
    "keep_triplet": ("keep_triplet", "floatlist"),
    "policy_times": ("policy_times", "floatlist"),
    "node_limit": ("node_limit", int),
    "query_t": ("query_t", float),
    "query_z": ("query_z", "floatlist"),
    "query_p": ("query_p", "tuplelist"),
    "sim_start": ("sim_start", "floatlist"),
}


def _coerce(kind, raw: str):
    raw = raw.strip()
    if kind is str:
        return raw
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind == "strlist":
        return tuple(s.strip() for s in raw.split(",") if s.strip())
    if kind == "floatlist":
        return tuple(float(s) for s in raw.split(",") if s.strip())
    if kind == "tuplelist":
        out = []
        for part in raw.split(","):
            part = part.strip()
            if part:
                out.append(tuple(float(s) for s in part.split(":")))
        return tuple(out)
    raise ConfigError(f"unhandled config kind {kind}")


def read_config_file(path: str) -> dict:
    """Flat ``key = value`` lines; '#' starts a comment; unknown keys error."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    out = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected key = value")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in _FIELD_BY_KEY:
                raise ConfigError(f"{path}:{ln}: unknown config key {key!r}")
            name, kind = _FIELD_BY_KEY[key]
            try:
                out[name] = _coerce(kind, raw)
            except ValueError as exc:
                raise ConfigError(f"{path}:{ln}: bad value for {key}: {exc}")
    return out


def _config_from_args(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        file_vals = read_config_file(args.config)
        for name, val in file_vals.items():
            setattr(cfg, name, val)
    for key, (name, kind) in _FIELD_BY_KEY.items():
        val = getattr(args, key, None)
        if val is None:
            continue
        setattr(cfg, name, _coerce(kind, val) if isinstance(val, str) and
                kind is not str else val)
    if cfg.scaling not in ("unit", "one_vee"):
        raise ConfigError(f"unknown scaling {cfg.scaling!r}")
    return cfg


def _bundle_for(cfg: RunConfig) -> PresetBundle:
    if cfg.preset is None:
        raise ConfigError("a --preset is required (no separate problem files)")
    quad = None
    if cfg.quadrature:
        if cfg.quadrature == "two_point":
            quad = "two_point"
        elif cfg.quadrature.startswith("gauss_hermite"):
            order = int(cfg.quadrature.split(":", 1)[1]) if ":" in cfg.quadrature else 3
            quad = ("gauss_hermite", order)
        else:
            raise ConfigError(f"unknown quadrature {cfg.quadrature!r}")
    return build_preset(cfg.preset, dt=cfg.dt, nz=cfg.nz, np_pts=cfg.np_pts,
                        nm=cfg.nm, amax=cfg.amax, quadrature=quad)


def _scaling_for(cfg: RunConfig):
    return unit_scaling() if cfg.scaling == "unit" else one_vee_scaling()


# ---------------------------------------------------------------------------
# manifest


def _grid_dict(grid: GridSpec) -> dict:
    hg_kind, hg_val = grid.hedge_grid
    hg_list = ([float(x) for x in hg_val] if hg_kind == "sigma_multipliers"
               else [int(hg_val)])
    return {
        "z_axis": [list(ax) for ax in grid.z_axis],
        "p_axis": [list(ax) for ax in grid.p_axis],
        "m_axis": list(grid.m_axis),
        "dt": grid.dt,
        "quadrature": list(grid.quadrature)
        if isinstance(grid.quadrature, tuple) else grid.quadrature,
        "a_bound": grid.a_bound,
        "control_resolution": grid.control_resolution,
        "hedge_grid": [hg_kind, hg_list],
        "dtype": grid.dtype,
    }


def _grid_from_dict(d: dict) -> GridSpec:
    quad = d["quadrature"]
    if isinstance(quad, list):
        quad = (quad[0], int(quad[1]))
    return GridSpec(
        z_axis=tuple((float(a), float(b), int(c)) for a, b, c in d["z_axis"]),
        p_axis=tuple((float(a), int(b)) for a, b in d["p_axis"]),
        m_axis=(float(d["m_axis"][0]), int(d["m_axis"][1])),
        dt=float(d["dt"]),
        quadrature=quad,
        a_bound=d["a_bound"],
        control_resolution=int(d["control_resolution"]),
        hedge_grid=(d["hedge_grid"][0], tuple(d["hedge_grid"][1])
                    if d["hedge_grid"][0] == "sigma_multipliers"
                    else int(d["hedge_grid"][1][0])),
        dtype=d["dtype"],
    )


def _write_manifest(outdir: str, cfg: RunConfig, bundle: PresetBundle,
                    result: SolveResult, files: list) -> str:
    payload = {
        "preset": bundle.name,
        "grid": _grid_dict(result.config),
        "scaling": cfg.scaling,
        "slices": [
            {
                "label": lab,
                "t": t,
                "file": os.path.basename(path) if path else None,
                "variant": {
                    "interval_index": sl.variant.interval_index,
                    "active_p": list(sl.variant.active_p),
                    "plain_psi": list(sl.variant.plain_psi),
                    "has_m": sl.variant.has_m,
                },
            }
            for (lab, t), sl, path in files
        ],
        "diagnostics": {
            k: v for k, v in result.diagnostics.items()
            if isinstance(v, (int, float, str))
        },
        "interval_timings": {
            str(i): d for i, d in result.diagnostics.get("intervals", {}).items()
        },
    }
    text = json.dumps(payload, indent=2, sort_keys=True)
    payload["config_sha256"] = hashlib.sha256(text.encode()).hexdigest()
    path = os.path.join(outdir, "manifest")
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    return path


def _load_run(outdir: str) -> tuple[PresetBundle, SolveResult]:
    man_path = os.path.join(outdir, "manifest")
    if not os.path.exists(man_path):
        raise ConfigError(f"no solve artifacts: missing {man_path}")
    with open(man_path) as fh:
        man = json.load(fh)
    bundle = build_preset(man["preset"])
    grid = _grid_from_dict(man["grid"])
    slices = {}
    for entry in man["slices"]:
        if not entry["file"]:
            continue
        v = entry["variant"]
        key = VariantKey(int(v["interval_index"]), tuple(v["active_p"]),
                         tuple(v["plain_psi"]), bool(v["has_m"]))
        path = os.path.join(outdir, entry["file"])
        if not os.path.exists(path):
            raise ConfigError(f"manifest names a missing slice file: {path}")
        sl = read_slice_csv(path, bundle.spec, grid, key)
        slices[(entry["label"], round(float(entry["t"]), 10) + 0.0)] = sl
    result = SolveResult(slices, grid, dict(man.get("diagnostics", {})))
    return replace(bundle, grid=grid), result


# ---------------------------------------------------------------------------
# commands


def cmd_solve(cfg: RunConfig) -> int:
    bundle = _bundle_for(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    keep_triplet = cfg.keep_triplet
    if not keep_triplet:
        # default: keep a symmetric time triplet mid-interval so that
        # residual and barrier checks can run on the written artifacts
        d0, d1 = bundle.spec.grid.dates[0], bundle.spec.grid.dates[1]
        keep_triplet = (0.5 * (d0 + d1),)
    try:
        result = solve_problem(
            bundle.spec, bundle.grid, scaling=_scaling_for(cfg),
            keep_times=cfg.keep_times, keep_triplet_times=keep_triplet,
            policy_times=cfg.policy_times)
    except (ValueError, NotImplementedError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 2
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    paths = write_result_csvs(cfg.out, result, bundle.spec,
                              node_limit=cfg.node_limit)
    by_name = {os.path.basename(p): p for p in paths}
    files = []
    for (lab, t), sl in sorted(result.slices.items()):
        name = f"{lab}_t{t:.6f}.csv"
        files.append(((lab, t), sl, by_name.get(name)))
    man = _write_manifest(cfg.out, cfg, bundle, result, files)
    print(f"wrote {len(paths)} slice files and {man}")
    return 0


def cmd_extract(cfg: RunConfig) -> int:
    bundle, result = _load_run(cfg.out)
    t = cfg.query_t if cfg.query_t is not None else (
        bundle.default_start[0] if bundle.default_start else 0.0)
    zs = cfg.query_z or (bundle.default_start[1] if bundle.default_start else ())
    ps = cfg.query_p or ((bundle.default_start[2],) if bundle.default_start else ())
    if not zs or not ps:
        raise ConfigError("extract needs query_z and query_p")
    zs = tuple(np.atleast_1d(zs))
    try:
        rows = feasibility_report(result, float(t), [(z,) for z in zs],
                                  list(ps), tolerance=cfg.eps)
    except KeyError as exc:
        raise ConfigError(str(exc))
    n_p = len(ps[0])
    out_path = os.path.join(cfg.out, "values.csv")
    write_feasibility_csv(out_path, rows, 1, n_p)
    for row in rows:
        pretty = ["%g" % v for v in row[:-1]]
        tail = "inf" if math.isinf(row[-1]) else "%.9g" % row[-1]
        print("V(" + ", ".join(pretty) + ") = " + tail)
    print(f"wrote {out_path}")
    if all(math.isinf(r[-1]) for r in rows):
        print("every query infeasible", file=sys.stderr)
        return 3
    return 0


def _verify_invariants(bundle, result) -> list[str]:
    errs = []
    for (lab, t), sl in sorted(result.slices.items()):
        w0 = None
        if sl.variant.has_m:
            base = VariantKey(sl.variant.interval_index, sl.variant.active_p,
                              sl.variant.plain_psi, False)
            w0 = next((s for (l2, t2), s in result.slices.items()
                       if abs(t2 - t) <= 1e-9 and s.variant == base), None)
        errs += [f"{lab}@t={t}: {e}"
                 for e in check_slice_invariants(sl, bundle.spec, bundle.grid,
                                                 w0=w0)]
    return errs


def _verify_gmatrix(bundle, scaling, seed: int) -> list[str]:
    rng = np.random.default_rng(seed)
    d = bundle.spec.sde.state_dim
    errs = []
    for trial in range(32):
        n_active = int(rng.integers(1, 3))
        z = rng.uniform(0.5, 2.0, size=d)
        A = rng.standard_normal((d + n_active + 1, d + n_active + 1))
        A = 0.5 * (A + A.T)
        theta = JetPoint(t=0.0, z=z, p=rng.uniform(0.1, 1.0, n_active),
                         m=float(rng.uniform(0.1, 1.0)),
                         q=rng.standard_normal(d + n_active + 1), A=A,
                         c=float(rng.standard_normal()))
        u = bundle.spec.controls.sample_values(2)[0]
        rep = g_matrix_check(theta, u, scaling, bundle.spec.sde)
        if not rep.ok:
            errs.append(f"algebra check failed on draw {trial}")
    return errs


def _verify_oracle(bundle, result) -> list[str]:
    if bundle.means is None:
        return []
    errs = []
    labels = {lab for lab, _ in result.slices}
    root = "root" if "root" in labels else None
    if root is None:
        return []
    for t in result.times(root):
        sl = result.get(root, t)
        if sl.variant.interval_index != 0 or t > result.config.dt / 2:
            continue
        axes_p = [result.config.p_grid(k) for k in sl.variant.active_p]
        zg = result.config.z_grid(0)
        mg = result.config.m_grid()
        w = np.asarray(sl.values, dtype=np.float64)
        mesh = np.meshgrid(zg, *axes_p, mg, indexing="ij")
        true = np.zeros_like(w)
        dates = bundle.spec.grid.dates
        ef = bundle.means.terminal(t, mesh[0][..., None], dates[-1])
        true += np.maximum(ef - mesh[-1], 0.0)
        for j, k in enumerate(sl.variant.active_p):
            epsi = bundle.means.loss_mean(t, mesh[0][..., None], dates[k])
            true += np.maximum(epsi - mesh[1 + j], 0.0)
        mask = _smooth_mask(w)
        rel = np.abs(w - true) / np.maximum(1.0, np.abs(true))
        worst = float(rel[mask].max()) if mask.any() else 0.0
        # backward-transport smoothing spreads each payoff kink over a band
        # of width about half a cell per sqrt(step); the masked comparison is
        # only strict once that band is thin
        horizon = dates[-1] - t
        deltas = [float(ax[1] - ax[0]) for ax in axes_p] + [float(mg[1] - mg[0])]
        smear = 0.5 * max(deltas) * math.sqrt(
            max(horizon, result.config.dt) / result.config.dt)
        if worst > 0.05 + 0.8 * smear:
            errs.append(f"oracle mismatch {worst:.2%} at t={t} "
                        f"(allowed {0.05 + 0.8 * smear:.2%})")
    return errs


def _smooth_mask(w: np.ndarray, boundary_cells: int = 2, dilate: int = 2,
                 factor: float = 4.0) -> np.ndarray:
    """Interior nodes away from curvature outliers (numeric kink footprint)."""
    nd = w.ndim
    mask = np.zeros(w.shape, dtype=bool)
    core = tuple(slice(boundary_cells, s - boundary_cells) for s in w.shape)
    mask[core] = True
    flag = np.zeros(w.shape, dtype=bool)
    for ax in range(nd):
        d2 = np.abs(np.diff(w, 2, axis=ax))
        pad = [(1, 1) if a == ax else (0, 0) for a in range(nd)]
        d2 = np.pad(d2, pad)
        med = np.median(d2[d2 > 0]) if (d2 > 0).any() else 0.0
        flag |= d2 > factor * (med + 1e-12)
    for _ in range(dilate):
        g = flag.copy()
        for ax in range(nd):
            sl_lo = [slice(None)] * nd
            sl_hi = [slice(None)] * nd
            sl_lo[ax] = slice(1, None)
            sl_hi[ax] = slice(0, -1)
            g[tuple(sl_lo)] |= flag[tuple(sl_hi)]
            g[tuple(sl_hi)] |= flag[tuple(sl_lo)]
        flag = g
    return mask & ~flag


def _residual_triplet(result) -> tuple[str, tuple] | None:
    labels = {lab for lab, _ in result.slices}
    if "root" not in labels:
        return None
    trip = _find_triplet(result.times("root"))
    return None if trip is None else ("root", trip)


def _verify_residual(bundle, result, scaling, seed: int) -> tuple[list[str], float | None]:
    found = _residual_triplet(result)
    if found is None:
        return ["no symmetric time triplet kept; solve with keep_triplet"], None
    label, trip = found
    nodes = residual_sample_nodes(result, label, trip[1], 100, seed)
    stats = hjb_residual(result, nodes, scaling, bundle.spec)
    if not math.isfinite(stats.median):
        return ["non-finite residuals"], None
    return [], stats.median


def _verify_supersolution(bundle, result, scaling, seed: int) -> list[str]:
    found = _residual_triplet(result)
    if found is None:
        return ["no symmetric time triplet kept; solve with keep_triplet"]
    label, trip = found
    nodes = residual_sample_nodes(result, label, trip[1], 60, seed)
    jets = [_jet_at(result, bundle.spec, label, t, idx)[0]
            for (_lab, t, idx) in nodes]
    rep = strict_supersolution_gap(jets, 0.8, 0, bundle.spec, scaling)
    med = result.diagnostics.get("median_residual")
    slack = (float(med) if isinstance(med, (int, float)) else 0.0) + 0.02
    if rep.min_sup < rep.bound - slack:
        return [f"barrier sup {rep.min_sup:.5f} fell under "
                f"{rep.bound:.5f} - {slack:.5f}"]
    return []


def _verify_montecarlo(bundle, result, cfg: RunConfig) -> list[str]:
    start = bundle.default_start
    if start is None:
        return []
    try:
        sl = _root_slice_for(result, start[0], len(start[2]))
    except KeyError:
        return ["no kept slice matches the default start point"]
    prof = _profile_along_m(sl, result.config, start[1], start[2])
    w_grid = float(np.interp(start[3], result.config.m_grid(), prof))
    policy = zero_policy(bundle.spec)
    paths = simulate_paths(bundle.spec, policy, start, min(cfg.paths, 20000),
                           min(cfg.steps, 100), cfg.seed)
    est = estimate_J(paths, bundle.spec.loss)
    if w_grid > est.mean + 3.0 * est.stderr + 0.01:
        return [f"grid value {w_grid:.5f} exceeds the zero-policy upper bound "
                f"{est.mean:.5f} + 3*{est.stderr:.2g}"]
    return []


def cmd_verify(cfg: RunConfig) -> int:
    bundle, result = _load_run(cfg.out)
    scaling = _scaling_for(cfg)
    wanted = tuple(cfg.checks) or ("invariants", "gmatrix", "oracle",
                                   "residual", "supersolution", "montecarlo")
    report = []
    failed = None
    for check in wanted:
        if check == "invariants":
            errs = _verify_invariants(bundle, result)
        elif check == "gmatrix":
            errs = _verify_gmatrix(bundle, scaling, cfg.seed)
        elif check == "oracle":
            errs = _verify_oracle(bundle, result)
        elif check == "residual":
            errs, med = _verify_residual(bundle, result, scaling, cfg.seed)
            if med is not None:
                report.append(f"residual median {med:.3e}")
        elif check == "supersolution":
            errs = _verify_supersolution(bundle, result, scaling, cfg.seed)
        elif check == "montecarlo":
            errs = _verify_montecarlo(bundle, result, cfg)
        else:
            raise ConfigError(f"unknown check {check!r}")
        status = "pass" if not errs else "FAIL"
        report.append(f"{check}: {status}")
        report += [f"  {e}" for e in errs]
        if errs and failed is None:
            failed = check
    text = "\n".join(report)
    with open(os.path.join(cfg.out, "verify.txt"), "w") as fh:
        fh.write(text + "\n")
    print(text)
    if failed:
        print(f"verification failed: {failed}", file=sys.stderr)
        return 5
    return 0


def cmd_simulate(cfg: RunConfig) -> int:
    bundle = _bundle_for(cfg)
    start = cfg.sim_start or bundle.default_start
    if start is None:
        raise ConfigError("simulate needs sim_start = t, z, p..., m")
    if cfg.sim_start:
        flat = tuple(float(v) for v in cfg.sim_start)
        n_p = bundle.spec.grid.n
        if len(flat) != 2 + n_p + 1:
            raise ConfigError(
                f"sim_start needs t, z, {n_p} budgets and m for {bundle.name}")
        start = (flat[0], (flat[1],), flat[2:2 + n_p], flat[-1])
    if cfg.policy == "zero":
        policy = zero_policy(bundle.spec)
    elif cfg.policy == "replicating":
        if bundle.means is None:
            raise ConfigError(
                f"preset {bundle.name} has no analytic means for a "
                "replicating policy")
        policy = delta_hedge_policy(bundle.spec, bundle.means)
    elif cfg.policy == "argmin":
        result = solve_problem(bundle.spec, bundle.grid,
                               scaling=_scaling_for(cfg),
                               keep_times=(start[0],),
                               policy_times=(start[0],),
                               residual_samples=0)
        policy = solver_argmin_policy(result, bundle.spec)
    else:
        raise ConfigError(f"unknown policy {cfg.policy!r}")
    paths = simulate_paths(bundle.spec, policy, start, cfg.paths, cfg.steps,
                           cfg.seed)
    est = estimate_J(paths, bundle.spec.loss)
    os.makedirs(cfg.out, exist_ok=True)
    out_path = os.path.join(cfg.out, f"estimate_{cfg.policy}.csv")
    with open(out_path, "w") as fh:
        fh.write("policy,mean,stderr,n_paths,seed\n")
        fh.write(f"{cfg.policy},%.17g,%.17g,{est.n_paths},{est.seed}\n"
                 % (est.mean, est.stderr))
    print(f"{cfg.policy}: mean {est.mean:.9g} stderr {est.stderr:.3g} "
          f"({est.n_paths} paths, seed {est.seed})")
    print(f"wrote {out_path}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def _add_common(sub):
    sub.add_argument("--preset", choices=PRESET_NAMES)
    sub.add_argument("--config")
    sub.add_argument("--out")
    sub.add_argument("--dt", type=float)
    sub.add_argument("--nz", type=int)
    sub.add_argument("--np", type=int)
    sub.add_argument("--nm", type=int)
    sub.add_argument("--amax", type=float)
    sub.add_argument("--scaling", choices=("unit", "one_vee"))
    sub.add_argument("--seed", type=int)
    sub.add_argument("--paths", type=int)
    sub.add_argument("--policy", choices=("zero", "replicating", "argmin"))
    sub.add_argument("--checks")
    sub.add_argument("--eps", type=float)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="lscontrol",
        description="grid solver for expectation-constrained control "
                    "via penalized level sets")
    subs = parser.add_subparsers(dest="command", required=True)
    for name in ("solve", "extract", "verify", "simulate"):
        _add_common(subs.add_parser(name))
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _config_from_args(args)
        handler = {
            "solve": cmd_solve,
            "extract": cmd_extract,
            "verify": cmd_verify,
            "simulate": cmd_simulate,
        }[args.command]
        return handler(cfg)
    except ConfigError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 2
    except AllInfeasibleError as exc:
        print(str(exc), file=sys.stderr)
        return 3
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except VerificationFailure as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return 5
    except AssertionError as exc:
        print(f"consistency check failed: {exc}", file=sys.stderr)
        return 5
    except (ValueError, KeyError) as exc:
        print(f"invalid request: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
