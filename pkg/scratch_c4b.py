"""Locate the terminal-gap argmax and its distance-to-face profile."""
import dataclasses
import math

import numpy as np

from lscontrol.cli import build_preset
from lscontrol.model import TimeGrid
from lscontrol import solve_problem

offs = (0.01, 0.04, 0.16)
b = build_preset("gbm1")
spec = dataclasses.replace(b.spec, grid=TimeGrid([0.0, 0.16]))
grid = b.grid
keep = tuple(round(0.16 - h, 10) for h in offs)
res = solve_problem(spec, grid, keep_times=keep, residual_samples=0)

zg, pg, mg = grid.z_grid(0), grid.p_grid(0), grid.m_grid()
Z, P, M = np.meshgrid(zg, pg, mg, indexing="ij")
term = np.maximum(Z - M, 0.0) + np.maximum(Z - P, 0.0)
G = math.exp(0.1)

for h in offs:
    w = np.asarray(res.get("root", round(0.16 - h, 10)).values, np.float64)
    diff = np.abs(w - term)
    idx = np.unravel_index(np.argmax(diff), diff.shape)
    print(f"h={h}: max {diff.max():.5f} at z={zg[idx[0]]:.3f} "
          f"p={pg[idx[1]]:.3f} m={mg[idx[2]]:.3f}")
    # drift-only reference gap (replicated continuous solution)
    gh = math.exp(0.1 * h)
    truegap = np.abs(np.maximum(Z * gh - M, 0) + np.maximum(Z * gh - P, 0) - term)
    print(f"   drift-only max {truegap.max():.5f}")
    for cut in (1, 2, 3, 5, 8, 12, 20):
        sub = diff[:, :-cut, :-cut]
        print(f"   p,m top margin {cut}: max {sub.max():.5f}", end="")
    print()
    sub = diff[2:-2, 2:-2, 2:-2]
    i2 = np.unravel_index(np.argmax(sub), sub.shape)
    print(f"   interior2 max {sub.max():.5f} at z={zg[i2[0]+2]:.3f} "
          f"p={pg[i2[1]+2]:.3f} m={mg[i2[2]+2]:.3f}")

# beta for a few margins
for cut in (0, 2, 5, 10):
    gs = []
    for h in offs:
        w = np.asarray(res.get("root", round(0.16 - h, 10)).values, np.float64)
        diff = np.abs(w - term)
        if cut:
            diff = diff[cut:-cut, cut:-cut, cut:-cut]
        gs.append(diff.max())
    beta = np.polyfit(np.log(offs), np.log(gs), 1)[0]
    print(f"margin {cut}: gaps {gs[0]:.5f} {gs[1]:.5f} {gs[2]:.5f} beta {beta:.4f}")
