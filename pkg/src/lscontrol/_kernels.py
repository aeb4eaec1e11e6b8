"""Compiled stepping kernels, one per number of budget axes.

Each kernel consumes the stacked lookup tables from ``solver.step_tables``:

    wnext        (nz, *aux)               next-level values
    zj0/zfr/zcap (nu, nq, nz)             state blend tables per control
    zex          (nu, nq, nz)             additive z-edge extension per read
    a*j0/a*fr    (nu, nc, nq, nz, n_axis) budget blend tables per axis
    a*ex         same shape               additive below-face extension
    qw           (nq,)                    quadrature weights
    best         (nz, *aux)               preset to +inf, minimum written here
    arg          same shape (or dummy)    flat tuple index of the argmin
    want_arg     0/1                      whether to record argmin indices

Arithmetic is kept in the exact order of the numpy reference engine and the
exhaustive oracle (blend z, add the edge extension, floor at zero, cap at the
growth bound, then budget axes ascending with the extension added after each
blend, weighted sum over quadrature nodes in order, strict-less comparison
with first-wins ties), and fastmath stays off, so all three agree bit-for-bit
at equal dtype.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def step_a0(wnext, zj0, zfr, zcap, zex, qw, best, arg, want_arg):
    nu, nq, nz = zj0.shape
    for jz in range(nz):
        for u in range(nu):
            a = qw[0] * 0.0
            for q in range(nq):
                j = zj0[u, q, jz]
                lo = wnext[j]
                v = lo + zfr[u, q, jz] * (wnext[j + 1] - lo) + zex[u, q, jz]
                if v < 0.0:
                    v = 0.0
                if v > zcap[u, q, jz]:
                    v = zcap[u, q, jz]
                if q == 0:
                    a = qw[0] * v
                else:
                    a = a + qw[q] * v
            if a < best[jz]:
                best[jz] = a
                if want_arg == 1:
                    arg[jz] = u


@njit(cache=True)
def step_a1(wnext, zj0, zfr, zcap, zex, a1j0, a1fr, a1ex, qw, best, arg,
            want_arg):
    nu, nq, nz = zj0.shape
    n1 = wnext.shape[1]
    nc1 = a1j0.shape[1]
    slab = np.empty((nq, n1), dtype=wnext.dtype)
    for jz in range(nz):
        for u in range(nu):
            for q in range(nq):
                j = zj0[u, q, jz]
                f = zfr[u, q, jz]
                e = zex[u, q, jz]
                cap = zcap[u, q, jz]
                for i1 in range(n1):
                    lo = wnext[j, i1]
                    v = lo + f * (wnext[j + 1, i1] - lo) + e
                    if v < 0.0:
                        v = 0.0
                    if v > cap:
                        v = cap
                    slab[q, i1] = v
            for c1 in range(nc1):
                flat = u * nc1 + c1
                for i1 in range(n1):
                    j1 = a1j0[u, c1, 0, jz, i1]
                    lo = slab[0, j1]
                    a = qw[0] * (lo + a1fr[u, c1, 0, jz, i1]
                                 * (slab[0, j1 + 1] - lo)
                                 + a1ex[u, c1, 0, jz, i1])
                    for q in range(1, nq):
                        j1q = a1j0[u, c1, q, jz, i1]
                        loq = slab[q, j1q]
                        a = a + qw[q] * (loq + a1fr[u, c1, q, jz, i1]
                                         * (slab[q, j1q + 1] - loq)
                                         + a1ex[u, c1, q, jz, i1])
                    if a < best[jz, i1]:
                        best[jz, i1] = a
                        if want_arg == 1:
                            arg[jz, i1] = flat


@njit(cache=True)
def step_a2(wnext, zj0, zfr, zcap, zex, a1j0, a1fr, a1ex, a2j0, a2fr, a2ex,
            qw, best, arg, want_arg):
    nu, nq, nz = zj0.shape
    n1 = wnext.shape[1]
    n2 = wnext.shape[2]
    nc1 = a1j0.shape[1]
    nc2 = a2j0.shape[1]
    slab = np.empty((nq, n1, n2), dtype=wnext.dtype)
    s1 = np.empty((nq, n1, n2), dtype=wnext.dtype)
    for jz in range(nz):
        for u in range(nu):
            for q in range(nq):
                j = zj0[u, q, jz]
                f = zfr[u, q, jz]
                e = zex[u, q, jz]
                cap = zcap[u, q, jz]
                for i1 in range(n1):
                    for i2 in range(n2):
                        lo = wnext[j, i1, i2]
                        v = lo + f * (wnext[j + 1, i1, i2] - lo) + e
                        if v < 0.0:
                            v = 0.0
                        if v > cap:
                            v = cap
                        slab[q, i1, i2] = v
            for c1 in range(nc1):
                for q in range(nq):
                    for i1 in range(n1):
                        j1 = a1j0[u, c1, q, jz, i1]
                        f1 = a1fr[u, c1, q, jz, i1]
                        e1 = a1ex[u, c1, q, jz, i1]
                        for i2 in range(n2):
                            lo = slab[q, j1, i2]
                            s1[q, i1, i2] = lo + f1 * (slab[q, j1 + 1, i2]
                                                       - lo) + e1
                for c2 in range(nc2):
                    flat = (u * nc1 + c1) * nc2 + c2
                    for i1 in range(n1):
                        for i2 in range(n2):
                            j2 = a2j0[u, c2, 0, jz, i2]
                            lo = s1[0, i1, j2]
                            a = qw[0] * (lo + a2fr[u, c2, 0, jz, i2]
                                         * (s1[0, i1, j2 + 1] - lo)
                                         + a2ex[u, c2, 0, jz, i2])
                            for q in range(1, nq):
                                j2q = a2j0[u, c2, q, jz, i2]
                                loq = s1[q, i1, j2q]
                                a = a + qw[q] * (loq + a2fr[u, c2, q, jz, i2]
                                                 * (s1[q, i1, j2q + 1] - loq)
                                                 + a2ex[u, c2, q, jz, i2])
                            if a < best[jz, i1, i2]:
                                best[jz, i1, i2] = a
                                if want_arg == 1:
                                    arg[jz, i1, i2] = flat


@njit(cache=True)
def step_a3(wnext, zj0, zfr, zcap, zex, a1j0, a1fr, a1ex, a2j0, a2fr, a2ex,
            a3j0, a3fr, a3ex, qw, best, arg, want_arg):
    nu, nq, nz = zj0.shape
    n1 = wnext.shape[1]
    n2 = wnext.shape[2]
    n3 = wnext.shape[3]
    nc1 = a1j0.shape[1]
    nc2 = a2j0.shape[1]
    nc3 = a3j0.shape[1]
    slab = np.empty((nq, n1, n2, n3), dtype=wnext.dtype)
    s1 = np.empty((nq, n1, n2, n3), dtype=wnext.dtype)
    s2 = np.empty((nq, n1, n2, n3), dtype=wnext.dtype)
    for jz in range(nz):
        for u in range(nu):
            for q in range(nq):
                j = zj0[u, q, jz]
                f = zfr[u, q, jz]
                e = zex[u, q, jz]
                cap = zcap[u, q, jz]
                for i1 in range(n1):
                    for i2 in range(n2):
                        for i3 in range(n3):
                            lo = wnext[j, i1, i2, i3]
                            v = lo + f * (wnext[j + 1, i1, i2, i3] - lo) + e
                            if v < 0.0:
                                v = 0.0
                            if v > cap:
                                v = cap
                            slab[q, i1, i2, i3] = v
            for c1 in range(nc1):
                for q in range(nq):
                    for i1 in range(n1):
                        j1 = a1j0[u, c1, q, jz, i1]
                        f1 = a1fr[u, c1, q, jz, i1]
                        e1 = a1ex[u, c1, q, jz, i1]
                        for i2 in range(n2):
                            for i3 in range(n3):
                                lo = slab[q, j1, i2, i3]
                                s1[q, i1, i2, i3] = lo + f1 * (
                                    slab[q, j1 + 1, i2, i3] - lo) + e1
                for c2 in range(nc2):
                    for q in range(nq):
                        for i1 in range(n1):
                            for i2 in range(n2):
                                j2 = a2j0[u, c2, q, jz, i2]
                                f2 = a2fr[u, c2, q, jz, i2]
                                e2 = a2ex[u, c2, q, jz, i2]
                                for i3 in range(n3):
                                    lo = s1[q, i1, j2, i3]
                                    s2[q, i1, i2, i3] = lo + f2 * (
                                        s1[q, i1, j2 + 1, i3] - lo) + e2
                    for c3 in range(nc3):
                        flat = ((u * nc1 + c1) * nc2 + c2) * nc3 + c3
                        for i1 in range(n1):
                            for i2 in range(n2):
                                for i3 in range(n3):
                                    j3 = a3j0[u, c3, 0, jz, i3]
                                    lo = s2[0, i1, i2, j3]
                                    a = qw[0] * (lo + a3fr[u, c3, 0, jz, i3]
                                                 * (s2[0, i1, i2, j3 + 1] - lo)
                                                 + a3ex[u, c3, 0, jz, i3])
                                    for q in range(1, nq):
                                        j3q = a3j0[u, c3, q, jz, i3]
                                        loq = s2[q, i1, i2, j3q]
                                        a = a + qw[q] * (
                                            loq + a3fr[u, c3, q, jz, i3]
                                            * (s2[q, i1, i2, j3q + 1] - loq)
                                            + a3ex[u, c3, q, jz, i3])
                                    if a < best[jz, i1, i2, i3]:
                                        best[jz, i1, i2, i3] = a
                                        if want_arg == 1:
                                            arg[jz, i1, i2, i3] = flat
