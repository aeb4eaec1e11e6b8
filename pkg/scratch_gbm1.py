import sys, time
import numpy as np

sys.path.insert(0, "src")
from lscontrol.model import (
    SdeCoefficients, LossSpec, TimeGrid, ControlSet, ProblemSpec,
)
from lscontrol.solver import GridSpec, solve_problem

relu = lambda z: float(max(z[0], 0.0))
sde = SdeCoefficients(
    drift=lambda t, z, u: 0.1 * z,
    diffusion=lambda t, z, u: (0.2 * z).reshape(1, 1),
    state_dim=1, lipschitz_z=0.2, growth_z=0.2,
)
loss = LossSpec(terminal_cost=relu, loss=relu, lipschitz_f=1.0, lipschitz_psi=1.0)
spec = ProblemSpec(sde=sde, loss=loss, grid=TimeGrid((0.0, 1.0)),
                   controls=ControlSet.finite(np.zeros((1, 1))),
                   thresholds=(1.2,), sample_box=((0.2, 3.0),))

quad = sys.argv[1] if len(sys.argv) > 1 else "gh3"
mults = (0.0, 1.0, 1.05, 1.1)
qd = ("gauss_hermite", 3) if quad == "gh3" else "two_point"
grid = GridSpec(z_axis=((0.2, 3.0, 201),), p_axis=((2.0, 81),), m_axis=(2.0, 81),
                dt=0.005, a_bound=2.0, quadrature=qd,
                hedge_grid=("sigma_multipliers", mults))

t0 = time.time()
res = solve_problem(spec, grid, residual_samples=0)
t1 = time.time()
print(f"quad={quad} solve seconds: {t1 - t0:.1f}")

sl = res.get("root", 0.0)
w = np.asarray(sl.values, dtype=np.float64)
zg = grid.z_grid(0); pg = grid.p_grid(1); mg = grid.m_grid()
gz = np.exp(0.1)
true = (np.maximum(zg[:, None, None] * gz - mg[None, None, :], 0.0)
        + np.maximum(zg[:, None, None] * gz - pg[None, :, None], 0.0))
err = np.abs(w - true)
rel = err / np.maximum(1.0, np.abs(true))
dz, dp, dm = zg[1] - zg[0], pg[1] - pg[0], mg[1] - mg[0]
# cells-from-kink along own axis
dist_m = np.abs(zg[:, None, None] * gz - mg[None, None, :]) / dm
dist_p = np.abs(zg[:, None, None] * gz - pg[None, :, None]) / dp
interior = np.zeros_like(w, dtype=bool)
interior[2:-2, 2:-2, 2:-2] = True
for margin in (2, 3, 4, 6):
    mask = interior & (dist_m > margin) & (dist_p > margin)
    print(f"margin {margin}: nodes {mask.sum():>8} max rel {rel[mask].max()*100:.2f}%"
          f"  mean rel {rel[mask].mean()*100:.3f}%")
    idx = np.unravel_index(np.argmax(np.where(mask, rel, -1)), rel.shape)
    print(f"   worst at z={zg[idx[0]]:.3f} p={pg[idx[1]]:.3f} m={mg[idx[2]]:.3f}"
          f" w={w[idx]:.4f} true={true[idx]:.4f}")
# extraction profile at z=1, p=1.2
iz = int(np.argmin(abs(zg - 1.0))); ip = int(np.argmin(abs(pg - 1.2)))
prof = w[iz, ip, :]
print("w(0,1,1.2,m) around m*=1.105:")
for im in range(38, 56, 2):
    print(f"   m={mg[im]:.3f} w={prof[im]:.5f} true={true[iz, ip, im]:.5f}")
print("intervals:", res.diagnostics["intervals"])
