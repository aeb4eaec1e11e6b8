"""Probe terminal-gap resolution vs dt and budget-grid density.

Short horizon T=0.16 reproduces the T=1 near-terminal slices exactly
(backward induction from the same terminal data with the same step size).
"""
import dataclasses
import math
import time

import numpy as np

from lscontrol.cli import build_preset
from lscontrol.model import TimeGrid
from lscontrol import solve_problem, terminal_gap_report

offs = (0.01, 0.04, 0.16)

for dt, gh in [(0.005, 5), (0.005, 7), (0.005, 9), (0.0025, 7), (0.0025, 9)]:
    b = build_preset("gbm1", dt=dt, quadrature=("gauss_hermite", gh))
    spec = dataclasses.replace(b.spec, grid=TimeGrid([0.0, 0.16]))
    grid = b.grid
    keep = tuple(round(0.16 - h, 10) for h in offs)
    t0 = time.perf_counter()
    res = solve_problem(spec, grid, keep_times=keep, residual_samples=0)
    el = time.perf_counter() - t0
    rep = terminal_gap_report(res, spec, offs)
    g = rep["gaps"]
    beta = rep["beta"]
    print(f"dt={dt} gh={gh}: wall {el:.1f}s gaps "
          f"{g[0]:.5f} {g[1]:.5f} {g[2]:.5f} beta {beta:.4f}")
