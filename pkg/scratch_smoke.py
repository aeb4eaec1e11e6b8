import numpy as np
import sys

sys.path.insert(0, "src")

from lscontrol.model import (
    SdeCoefficients, LossSpec, TimeGrid, ControlSet, ProblemSpec, VariantKey,
    build_variant_lattice, boundary_sources,
)
from lscontrol.solver import (
    GridSpec, terminal_slice, jump_slice, sl_step, step_tables, solve_problem,
    ValueSlice, _step_numpy, _step_via_kernel, boundary_inject,
)

relu = lambda z: float(max(z[0], 0.0))

def gbm_spec(dates=(0.0, 1.0), thresholds=(1.2,), mu=0.1, sig=0.2):
    sde = SdeCoefficients(
        drift=lambda t, z, u: mu * z,
        diffusion=lambda t, z, u: (sig * z).reshape(1, 1),
        state_dim=1, lipschitz_z=max(abs(mu), sig), growth_z=max(abs(mu), sig),
    )
    loss = LossSpec(terminal_cost=relu, loss=relu, lipschitz_f=1.0, lipschitz_psi=1.0)
    return ProblemSpec(sde=sde, loss=loss, grid=TimeGrid(dates),
                       controls=ControlSet.finite(np.zeros((1, 1))),
                       thresholds=thresholds, sample_box=((0.2, 3.0),))

spec = gbm_spec()
grid = GridSpec(z_axis=((0.2, 3.0, 15),), p_axis=((2.0, 7),), m_axis=(2.0, 7),
                dt=0.05, a_bound=2.0,
                hedge_grid=("sigma_multipliers", (0.0, 0.5, 1.0)))

lat = build_variant_lattice(spec, 0)
print("lattice:", [k.label() for k in lat])

root = [k for k in lat if k.is_root][0]
ts = terminal_slice(root, grid, spec.loss, spec)
print("terminal root shape", ts.values.shape, "t", ts.t)

# hand values: z=1.2 -> index? z grid 0.2..3 with 15 pts step 0.2 -> z=1.2 at idx 5
zg = grid.z_grid(0); pg = grid.p_grid(1); mg = grid.m_grid()
iz = int(np.argmin(abs(zg - 1.2))); ip = int(np.argmin(abs(pg - 1.0))); im = int(np.argmin(abs(mg - 1.0)))
print("z", zg[iz], "p", pg[ip], "m", mg[im])
v = ts.values[iz, ip, im]
print("root terminal at (1.2, p=1.0, m=1.0):", v, "expect (1.2-1)+ + (1.2-1.0)+ = 0.4")

# (2-3)+ = 0 check: z=2 (idx), m=... use m-only variant? root with big p to kill psi term
ip2 = len(pg) - 1  # p=2 >= psi -> psi term 0
iz2 = int(np.argmin(abs(zg - 2.0)))
im3 = int(np.argmin(abs(mg - 2.0)))
print("(2-2)+ at p=2:", ts.values[iz2, ip2, im3], "expect 0")

w0type = [k for k in lat if not k.has_m and k.active_p == (1,)][0]
ts0 = terminal_slice(w0type, grid, spec.loss, spec)
ip3 = int(np.argmin(abs(pg - 1.1)))
print("w0-type at z=1.2 p=1.0:", ts0.values[iz, ip], "expect 1.2 + 0.2 = 1.4")

# --- identity step: mu = sigma = 0 ---
spec0 = gbm_spec(mu=0.0, sig=0.0)
ts_id = terminal_slice(root, grid, spec0.loss, spec0)
stepped = sl_step(ts_id, grid, spec0, dt=0.05, engine="numpy")
err = np.abs(np.asarray(stepped.values) - np.asarray(ts_id.values)).max()
print("identity step max err (numpy):", err)
stepped_k = sl_step(ts_id, grid, spec0, dt=0.05, engine="numba")
err_k = np.abs(np.asarray(stepped_k.values) - np.asarray(ts_id.values)).max()
print("identity step max err (numba):", err_k)
print("engines equal:", np.array_equal(np.asarray(stepped.values), np.asarray(stepped_k.values)))

# --- replication: f=z, psi=0, sigma const, mu=0: w=(z-m)+ preserved, e*=sigma ---
lin = lambda z: float(z[0])
zero = lambda z: 0.0
sde_c = SdeCoefficients(
    drift=lambda t, z, u: 0.0 * z,
    diffusion=lambda t, z, u: np.full((1, 1), 0.3),
    state_dim=1, lipschitz_z=0.0, growth_z=0.3,
)
loss_c = LossSpec(terminal_cost=lin, loss=zero, lipschitz_f=1.0, lipschitz_psi=0.0,
                  date_losses=(zero,))
spec_c = ProblemSpec(sde=sde_c, loss=loss_c, grid=TimeGrid((0.0, 1.0)),
                     controls=ControlSet.finite(np.zeros((1, 1))),
                     thresholds=(1.2,), sample_box=((0.5, 3.0),))
grid_c = GridSpec(z_axis=((0.5, 3.0, 26),), p_axis=((2.0, 5),), m_axis=(2.0, 21),
                  dt=0.01, a_bound=2.0,
                  hedge_grid=("sigma_multipliers", (0.0, 0.5, 1.0)))
mvar = VariantKey(0, (), (1,), True)
ts_c = terminal_slice(mvar, grid_c, spec_c.loss, spec_c)
st = ts_c
for k in range(30):
    want = k == 29
    st = sl_step(st, grid_c, spec_c, dt=0.01, want_policy=want, engine="numba")
mg_c = grid_c.m_grid(); zg_c = grid_c.z_grid(0)
expect = np.maximum(zg_c[:, None] - mg_c[None, :], 0.0)
print("replication max err after 30 steps:", np.abs(st.values - expect).max())
# kink node z=1.5,m=1.5
izc = int(np.argmin(abs(zg_c - 1.5))); imc = int(np.argmin(abs(mg_c - 1.5)))
flat = int(st.policy.tuple_index[izc, imc])
print("policy at kink after 30 steps:", st.policy.control_values(flat, 0.3),
      "expect e=0.3 (mult 1)")

# --- numpy vs numba parity on random data, all aux dims ---
rng = np.random.default_rng(0)
spec2 = gbm_spec(dates=(0.0, 0.5, 1.0), thresholds=(1.0, 1.2))
for key, shape in [
    (VariantKey(1, (), (2,), False), (15,)),
    (VariantKey(1, (2,), (), False), (15, 7)),
    (VariantKey(1, (2,), (), True), (15, 7, 7)),
    (VariantKey(0, (1, 2), (), True), (15, 7, 7, 7)),
]:
    grid2 = GridSpec(z_axis=((0.2, 3.0, 15),), p_axis=((2.0, 7), (2.0, 7)),
                     m_axis=(2.0, 7), dt=0.05, a_bound=2.0,
                     hedge_grid=("sigma_multipliers", (0.0, 1.0)))
    for dt_ in (np.float64, np.float32):
        w = rng.uniform(0.0, 3.0, size=shape).astype(dt_)
        tabs = step_tables(spec2, grid2, key, 0.05, w.dtype, 0.4)
        b1, a1 = _step_numpy(w, tabs, True)
        b2, a2 = _step_via_kernel(w, tabs, True)
        same = np.array_equal(b1, b2) and np.array_equal(a1, a2)
        print(f"parity naux={len(shape)-1} {np.dtype(dt_).name}: values+argmin equal = {same}")
        if not same:
            bad = np.argwhere(b1 != b2)
            print("  first diff at", bad[:3], b1[tuple(bad[0])], b2[tuple(bad[0])])
print("smoke done")
