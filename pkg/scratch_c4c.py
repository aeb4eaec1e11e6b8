"""1-D unhedged SL evolution of an ATM hinge: where does the value go?"""
import math

import numpy as np

mu, sig = 0.1, 0.2
zg = np.linspace(0.2, 3.0, 201)
dz = zg[1] - zg[0]


def run(dt, n, order):
    x, w = np.polynomial.hermite.hermgauss(order)
    dwn = x * math.sqrt(2.0 * dt)
    qw = w / math.sqrt(math.pi)
    v = np.maximum(zg - 2.0, 0.0)
    for _ in range(n):
        top = (v[-1] - v[-2]) / dz
        out = np.zeros_like(v)
        for dwq, wq in zip(dwn, qw):
            zp = zg + mu * zg * dt + sig * zg * dwq
            ov = np.maximum(zp - zg[-1], 0.0)
            x2 = np.clip((zp - zg[0]) / dz, 0.0, len(zg) - 1.0)
            j = np.clip(x2.astype(int), 0, len(zg) - 2)
            fr = x2 - j
            out += wq * (v[j] + fr * (v[j + 1] - v[j]) + top * ov)
        v = np.maximum(out, 0.0)
    return v


def black(z, h):
    F = z * math.exp(mu * h)
    if abs(F - 2.0) < 1e-12:
        return 0.0
    from math import erf, log, sqrt

    def Phi(t):
        return 0.5 * (1 + erf(t / sqrt(2)))

    sd = sig * math.sqrt(h)
    d1 = (log(F / 2.0) + 0.5 * sd * sd) / sd
    return F * Phi(d1) - 2.0 * Phi(d1 - sd)


for dt, n, order in [(0.005, 2, 3), (0.005, 2, 9), (0.0025, 4, 9),
                     (0.00125, 8, 9), (0.000625, 16, 9)]:
    h = dt * n
    v = run(dt, n, order)
    gap = v - np.maximum(zg - 2.0, 0.0)
    iz = int(np.argmax(gap))
    bl = np.array([black(z, h) - max(z - 2.0, 0.0) for z in zg])
    ib = int(np.argmax(bl))
    print(f"dt={dt} n={n} gh={order}: scheme max gap {gap.max():.5f} at z={zg[iz]:.3f}"
          f" | black max {bl.max():.5f} at z={zg[ib]:.3f}"
          f" | scheme at that z {gap[ib]:.5f}")
