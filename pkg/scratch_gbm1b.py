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

mults = (0.0, 1.0, 1.05, 1.1)
if len(sys.argv) > 1 and sys.argv[1] == "dense":
    mults = (0.0, 0.85, 0.95, 1.0, 1.05, 1.1, 1.15, 1.25)
grid = GridSpec(z_axis=((0.2, 3.0, 201),), p_axis=((2.0, 81),), m_axis=(2.0, 81),
                dt=0.005, a_bound=2.0, quadrature=("gauss_hermite", 3),
                hedge_grid=("sigma_multipliers", mults))

t0 = time.time()
res = solve_problem(spec, grid, residual_samples=0)
print(f"mults={mults} solve seconds: {time.time() - t0:.1f}")

sl = res.get("root", 0.0)
w = np.asarray(sl.values, dtype=np.float64)
zg = grid.z_grid(0); pg = grid.p_grid(1); mg = grid.m_grid()
gz = np.exp(0.1)
true = (np.maximum(zg[:, None, None] * gz - mg[None, None, :], 0.0)
        + np.maximum(zg[:, None, None] * gz - pg[None, :, None], 0.0))
rel = np.abs(w - true) / np.maximum(1.0, np.abs(true))
dp, dm = pg[1] - pg[0], mg[1] - mg[0]
dist_m = np.abs(zg[:, None, None] * gz - mg[None, None, :]) / dm
dist_p = np.abs(zg[:, None, None] * gz - pg[None, :, None]) / dp
faces = np.zeros_like(w, dtype=bool)
faces[2:-2, 2:-2, 2:-2] = True
sig = 0.2 * zg

def report(name, mask):
    if not mask.any():
        print(f"{name}: empty"); return
    mx = rel[mask].max()
    idx = np.unravel_index(np.argmax(np.where(mask, rel, -1)), rel.shape)
    print(f"{name}: nodes {mask.sum():>8} max {mx*100:6.2f}% "
          f"at z={zg[idx[0]]:.3f} p={pg[idx[1]]:.3f} m={mg[idx[2]]:.3f} "
          f"true={true[idx]:.3f}")

print("-- closed-form kink margin k x headroom lam --")
for k in (2, 3, 4, 6, 8):
    for lam in (0.0, 1.2, 1.5):
        hm = (2.0 - mg[None, None, :]) >= lam * sig[:, None, None]
        hp = (2.0 - pg[None, :, None]) >= lam * sig[:, None, None]
        report(f"k={k} lam={lam}", faces & (dist_m > k) & (dist_p > k) & hm & hp)

print("-- curvature-outlier mask (factor 4, dilate c cells) --")
def curvature_kinks(arr, factor, dilate):
    flag = np.zeros_like(arr, dtype=bool)
    for ax in range(3):
        a = np.moveaxis(arr, ax, 0)
        d2 = np.abs(a[2:] - 2.0 * a[1:-1] + a[:-2])
        med = np.median(d2)
        f = np.zeros_like(a, dtype=bool)
        f[1:-1] = d2 > factor * max(med, 1e-15)
        flag |= np.moveaxis(f, 0, ax)
    for _ in range(dilate):
        g = flag.copy()
        g[1:] |= flag[:-1]; g[:-1] |= flag[1:]
        g[:, 1:] |= flag[:, :-1]; g[:, :-1] |= flag[:, 1:]
        g[:, :, 1:] |= flag[:, :, :-1]; g[:, :, :-1] |= flag[:, :, 1:]
        flag = g
    return flag

for dil in (1, 2, 3):
    kinks = curvature_kinks(w, 4.0, dil)
    report(f"curv dil={dil}        ", faces & ~kinks)
    for lam in (1.2,):
        hm = (2.0 - mg[None, None, :]) >= lam * sig[:, None, None]
        hp = (2.0 - pg[None, :, None]) >= lam * sig[:, None, None]
        report(f"curv dil={dil} lam={lam}", faces & ~kinks & hm & hp)
