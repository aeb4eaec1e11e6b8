"""Terminal-gap exponent vs hedge sampling and very small dt."""
import dataclasses
import time

import numpy as np

from lscontrol.cli import build_preset
from lscontrol.model import TimeGrid
from lscontrol import solve_problem, terminal_gap_report

offs = (0.01, 0.04, 0.16)

cases = [
    ("box3", 0.005, ("box", 3)),
    ("box5", 0.005, ("box", 5)),
    ("box9", 0.005, ("box", 9)),
    ("box5 fine-dt", 0.00125, ("box", 5)),
    ("sigma tiny-dt", 0.000625, None),
]
for name, dt, hg in cases:
    b = build_preset("gbm1", dt=dt)
    grid = b.grid
    if hg is not None:
        grid = dataclasses.replace(grid, hedge_grid=hg)
    spec = dataclasses.replace(b.spec, grid=TimeGrid([0.0, 0.16]))
    keep = tuple(round(0.16 - h, 10) for h in offs)
    t0 = time.perf_counter()
    res = solve_problem(spec, grid, keep_times=keep, residual_samples=0)
    el = time.perf_counter() - t0
    rep = terminal_gap_report(res, spec, offs)
    g = rep["gaps"]
    print(f"{name}: wall {el:.1f}s gaps {g[0]:.5f} {g[1]:.5f} {g[2]:.5f} "
          f"beta {rep['beta']:.4f} norm-beta "
          f"{np.polyfit(np.log(offs), np.log(rep['normalized_gaps']), 1)[0]:.4f}")
