"""Full-scale gbm2 calibration: runtime, masked accuracy, jump propagation."""
import math
import time

import numpy as np

from lscontrol.cli import _smooth_mask, build_preset
from lscontrol import check_slice_invariants, solve_problem

b = build_preset("gbm2")
spec, grid = b.spec, b.grid
print("dates", spec.grid.dates, "quad", grid.quadrature, "hedge", grid.hedge_grid,
      "dtype", grid.dtype, flush=True)

t0 = time.perf_counter()
res = solve_problem(spec, grid, keep_times=(0.5,), residual_samples=200,
                    keep_triplet_times=(0.25,))
el = time.perf_counter() - t0
print(f"solve wall {el:.1f}s", flush=True)
print("median_residual", res.diagnostics.get("median_residual"), flush=True)
print("labels", sorted({lab for lab, _ in res.slices}), flush=True)

zg = grid.z_grid(0)
p1g, p2g = grid.p_grid(0), grid.p_grid(1)
mg = grid.m_grid()
G1, G2 = math.exp(0.05), math.exp(0.1)

w = res.get("root", 0.0).values  # (z, p1, p2, m), float32 likely
print("root t=0 shape dtype", w.shape, w.dtype, flush=True)

# masked relative error, chunked over p1 to bound memory
mask_curv = _smooth_mask(np.asarray(w))  # bool, ~107MB
worst = 0.0
worst_at = None
count = 0
for j in range(2, len(p1g) - 2):
    sub = np.asarray(w[:, j, :, :], np.float64)
    Z, P2, M = np.meshgrid(zg, p2g, mg, indexing="ij")
    truth = (np.maximum(Z * G1 - p1g[j], 0.0) + np.maximum(Z * G2 - P2, 0.0)
             + np.maximum(Z * G2 - M, 0.0))
    msk = mask_curv[:, j - 1, :, :] & mask_curv[:, j, :, :] & mask_curv[:, j + 1, :, :]
    # stay 2 cells away from the p1 hinge surface as well
    dist = np.abs(Z * G1 - p1g[j])
    msk &= dist >= 2.0 * (G1 * (zg[1] - zg[0]) + (p1g[1] - p1g[0]))
    if not msk.any():
        continue
    err = np.abs(sub - truth) / np.maximum(1.0, np.abs(truth))
    count += int(msk.sum())
    mx = float(err[msk].max())
    if mx > worst:
        worst = mx
        k = np.unravel_index(np.argmax(np.where(msk, err, -1.0)), err.shape)
        worst_at = (zg[k[0]], p1g[j], p2g[k[1]], mg[k[2]], sub[k], truth[k])
print(f"criterion2 masked max rel err {worst:.5f} over {count} nodes", flush=True)
print("worst at", worst_at, flush=True)

# jump propagation at t = 0.5
left = np.asarray(res.get("root", 0.5).values, np.float64)
i1lab = [lab for lab, _ in res.slices if lab.startswith("i1") and lab.endswith("m")]
print("i1 labels", sorted(set(i1lab)), flush=True)
cont = None
for lab in set(i1lab):
    sl = res.get(lab, 0.5)
    if np.asarray(sl.values).ndim == 3:
        cont = np.asarray(sl.values, np.float64)
        contlab = lab
if cont is not None:
    jump = cont[:, None, :, :] + np.maximum(
        zg[:, None, None, None] - p1g[None, :, None, None], 0.0)
    dmax = float(np.abs(left - jump).max())
    print(f"jump check vs {contlab}: max abs diff {dmax:.3e}", flush=True)

# invariants on a sample of slices (full sweep happens in the test suite)
bad = 0
checked = 0
for (label, t), sl in res.slices.items():
    if np.asarray(sl.values).ndim >= 4 and t not in (0.0, 0.5):
        continue
    w0c = None
    if sl.variant.has_m:
        k0 = (sl.variant.drop_m().label(), t)
        if k0 in res.slices:
            w0c = res.slices[k0]
    errs = check_slice_invariants(sl, spec, grid, w0=w0c)
    checked += 1
    if errs:
        bad += 1
        print("INVARIANT", label, t, errs[:2], flush=True)
print(f"invariants: {bad} bad of {checked} checked", flush=True)
