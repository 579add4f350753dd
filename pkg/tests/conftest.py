import numpy as np
import pytest

from polywave import (ModelParams, build_sphere_quadrature, make_grid, sample_strength,
                      zero_potential)


@pytest.fixture(scope="session")
def grid16():
    return make_grid(1.0, 16)


@pytest.fixture(scope="session")
def bump16(grid16):
    return sample_strength("smooth_bump", grid16, amplitude=1.0, radius=0.8)


@pytest.fixture(scope="session")
def quad16():
    return build_sphere_quadrature(2.0, 16, 16)


@pytest.fixture(scope="session")
def params_n2_k4():
    return ModelParams(n=2, k=4.0, R=2.0)


def fd_laplacian_stencil(order):
    """1D second-derivative coefficients: {offset: coeff} (unit step).

    Exact fractions: composed stencils inherit float rounding of their
    coefficients otherwise, which breaks the moment conditions at the 1e-16
    level and is amplified by 1/h^(2n).
    """
    from fractions import Fraction as F

    if order == 4:
        return {-2: F(-1, 12), -1: F(4, 3), 0: F(-5, 2), 1: F(4, 3), 2: F(-1, 12)}
    if order == 6:
        return {-3: F(1, 90), -2: F(-3, 20), -1: F(3, 2), 0: F(-49, 18),
                1: F(3, 2), 2: F(-3, 20), 3: F(1, 90)}
    raise ValueError(order)


def laplacian_stencil_3d(order):
    """{(ox,oy,oz): coeff} for the 3D Laplacian (unit step)."""
    c1 = fd_laplacian_stencil(order)
    out = {}
    for axis in range(3):
        for off, w in c1.items():
            key = tuple(off if a == axis else 0 for a in range(3))
            out[key] = out.get(key, 0) + w
    return out


def compose_stencils(a, b):
    """Convolution of two offset->coeff maps."""
    out = {}
    for ka, va in a.items():
        for kb, vb in b.items():
            key = tuple(x + y for x, y in zip(ka, kb))
            out[key] = out.get(key, 0) + va * vb
    return out


def iterated_laplacian_fd(f, x, h, n, order=4):
    """n-fold FD Laplacian of f at x (f vectorized over points)."""
    st = laplacian_stencil_3d(order)
    for _ in range(n - 1):
        st = compose_stencils(st, laplacian_stencil_3d(order))
    offsets = np.array(list(st.keys()), dtype=float)
    coeffs = np.array([float(c) for c in st.values()])
    vals = f(np.asarray(x) + h * offsets)
    return np.sum(coeffs * vals) / h ** (2 * n)


def pde_residual_relative(params, x, y, h=1e-2, order=4):
    """|((-Delta)^n - k^2n) G| / (k^2n |G|) by FD, relative to the kernel scale.

    n >= 3 composes a 6th-order operator: the 1/h^6 division amplifies float64
    rounding past the tolerance, so the stencil sum runs in extended precision
    (the identity itself, step, and stencil order are unchanged).
    """
    from polywave.kernel import poly_green, split_roots

    n, k = params.n, params.k
    st = laplacian_stencil_3d(order)
    for _ in range(n - 1):
        st = compose_stencils(st, laplacian_stencil_3d(order))
    g0 = poly_green(x, y, params)
    if n <= 2:
        offsets = np.array(list(st.keys()), dtype=float)
        coeffs = np.array([float(c) for c in st.values()])
        vals = poly_green(np.asarray(x) + h * offsets, y, params)
        lap = np.sum(coeffs * vals) / h ** (2 * n)
        resid = (-1) ** n * lap - k ** (2 * n) * g0
        return abs(resid) / (k ** (2 * n) * abs(g0))
    import mpmath as mp

    with mp.workdps(40):
        # stencil geometry and roots both in extended precision: float64-rounded
        # coordinates would inject incoherent noise amplified by 1/h^(2n)
        kk = mp.mpf(k)
        roots = [kk * mp.exp(1j * mp.pi * j / n) for j in range(n)]
        scale = mp.mpf(1) / (n * kk ** (2 * n))
        x0 = [mp.mpf(float(c)) for c in x]
        y0 = [mp.mpf(float(c)) for c in y]
        hh = mp.mpf(h)

        def G(px, py, pz):
            r = mp.sqrt((px - y0[0])**2 + (py - y0[1])**2 + (pz - y0[2])**2)
            total = mp.mpc(0)
            for kap in roots:
                total += kap**2 * mp.exp(1j * kap * r)
            return scale * total / (4 * mp.pi * r)

        acc = mp.mpc(0)
        for (ox, oy, oz), c in st.items():
            w = mp.mpf(c.numerator) / c.denominator
            acc += w * G(x0[0] + hh * ox, x0[1] + hh * oy, x0[2] + hh * oz)
        lap = acc / hh ** (2 * n)
        g0 = G(*x0)
        resid = (-1) ** n * lap - kk ** (2 * n) * g0
        return float(mp.fabs(resid) / (kk ** (2 * n) * mp.fabs(g0)))
