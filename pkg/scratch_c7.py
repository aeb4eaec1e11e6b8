"""Criterion-7 style Monte Carlo legs on gbm1."""
import math
import time

import numpy as np

from lscontrol.cli import build_preset
from lscontrol.montecarlo import (
    ConditionalMeans,
    PathBatch,
    delta_hedge_policy,
    estimate_J,
    simulate_paths,
    solver_argmin_policy,
    zero_policy,
)
from lscontrol import solve_problem

MU, SIG = 0.1, 0.2
TARGET = 0.105170918


def exact_gbm_batch(spec, policy, start, n_paths, n_steps, seed):
    """Exact-transition GBM paths; budgets accumulate policy integrands."""
    t0, z0, p0, m0 = start
    T = spec.grid.dates[-1]
    dt = (T - t0) / n_steps
    sq = math.sqrt(dt)
    rng = np.random.default_rng(seed)
    z = np.full((n_paths, 1), float(z0[0]))
    p = np.full((n_paths, 1), float(p0[0]))
    m = np.full(n_paths, float(m0))
    t = t0
    for _ in range(n_steps):
        dw = rng.standard_normal((n_paths, 1)) * sq
        a = np.asarray(policy.a_blocks(t, z, p, m), dtype=np.float64)
        e = np.asarray(policy.e(t, z, p, m), dtype=np.float64)
        p = p + np.broadcast_to(a, (n_paths, 1, 1))[:, :, 0] * dw
        m = m + (np.broadcast_to(e, (n_paths, 1)) * dw)[:, 0]
        z = z * np.exp((MU - 0.5 * SIG * SIG) * dt + SIG * dw)
        t += dt
    return PathBatch(start=(t0, (float(z0[0]),), (float(p0[0]),), float(m0)),
                     interval_index=0, dates=(T,), state_at_dates=(z,),
                     budget_at_dates=(p[:, 0],), m_final=m, n_paths=n_paths,
                     seed=seed)


b = build_preset("gbm1")
spec, grid = b.spec, b.grid
means = ConditionalMeans(
    terminal=lambda t, z, s: np.asarray(z, np.float64).reshape(-1)
    * math.exp(MU * (s - t)))
start = (0.0, (1.0,), (1.2,), 1.0)

t0 = time.perf_counter()
batch = exact_gbm_batch(spec, delta_hedge_policy(spec, means), start,
                        10 ** 5, 200, seed=11)
est_r = estimate_J(batch, spec.loss)
print(f"replicating: mean {est_r.mean:.9f} stderr {est_r.stderr:.3e} "
      f"dev/3se {(est_r.mean - TARGET) / (3 * est_r.stderr):+.3f} "
      f"({time.perf_counter() - t0:.1f}s)")

t0 = time.perf_counter()
bz = simulate_paths(spec, zero_policy(spec), start, 10 ** 5, 200, seed=12)
est_z = estimate_J(bz, spec.loss)
comb = math.sqrt(est_z.stderr ** 2 + est_r.stderr ** 2)
print(f"zero: mean {est_z.mean:.6f} stderr {est_z.stderr:.3e} "
      f"gap/3comb {(est_z.mean - est_r.mean) / (3 * comb):.1f} "
      f"({time.perf_counter() - t0:.1f}s)")

t0 = time.perf_counter()
res = solve_problem(spec, grid, policy_times=(0.0,), residual_samples=200,
                    keep_triplet_times=(0.5,))
print(f"solve ({time.perf_counter() - t0:.1f}s)")

# trilinear numeric w at the start point
zg, pg, mg = grid.z_grid(0), grid.p_grid(0), grid.m_grid()
w = np.asarray(res.get("root", 0.0).values, np.float64)


def tri(zq, pq, mq):
    out = 0.0
    locs = []
    for ax, q in ((zg, zq), (pg, pq), (mg, mq)):
        x = (q - ax[0]) / (ax[1] - ax[0])
        j = int(np.clip(math.floor(x), 0, len(ax) - 2))
        locs.append((j, x - j))
    for cz in (0, 1):
        for cp in (0, 1):
            for cm in (0, 1):
                wt = ((locs[0][1] if cz else 1 - locs[0][1])
                      * (locs[1][1] if cp else 1 - locs[1][1])
                      * (locs[2][1] if cm else 1 - locs[2][1]))
                out += wt * w[locs[0][0] + cz, locs[1][0] + cp, locs[2][0] + cm]
    return out


w_num = tri(1.0, 1.2, 1.0)
print("numeric w at start", w_num)

t0 = time.perf_counter()
ba = simulate_paths(spec, solver_argmin_policy(res, spec), start, 10 ** 5, 200,
                    seed=13)
est_a = estimate_J(ba, spec.loss)
allow = 0.0333
print(f"argmin: mean {est_a.mean:.6f} stderr {est_a.stderr:.3e} "
      f"bound {w_num - 3 * est_a.stderr - allow:.6f} "
      f"margin {est_a.mean - (w_num - 3 * est_a.stderr - allow):+.4f} "
      f"({time.perf_counter() - t0:.1f}s)")
