"""Residual-median decrease under uniform refinement (coarse gbm1 pair)."""
import time

import numpy as np

from lscontrol.cli import build_preset
from lscontrol import hjb_residual, make_scaling, residual_sample_nodes, solve_problem

sc = make_scaling("one_vee")
out = {}
for tag, dt, nz, nb in [("base", 0.02, 51, 21), ("refined", 0.01, 101, 41)]:
    b = build_preset("gbm1", dt=dt, nz=nz, np_pts=nb, nm=nb)
    t0 = time.perf_counter()
    res = solve_problem(b.spec, b.grid, keep_triplet_times=(0.5,),
                        residual_samples=0)
    el = time.perf_counter() - t0
    nodes = residual_sample_nodes(res, "root", 0.5, 200, seed=0)
    st = hjb_residual(res, nodes, sc, b.spec)
    out[tag] = st
    print(f"{tag}: wall {el:.1f}s n={len(nodes)} median {st.median:.3e} "
          f"mean {st.mean:.3e} max {st.max:.3e}")
r = out["base"].median / out["refined"].median
print("ratio", r)
