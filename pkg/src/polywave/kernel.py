"""Outgoing Green's functions of the polyharmonic wave operator.

The operator (-Delta)^n - k^(2n) factors over the rotated wavenumbers
kappa_j = k*exp(i*j*pi/n), and its fundamental solution is the weighted sum
of Helmholtz kernels

    G(x, y) = 1/(n k^(2n)) * sum_j kappa_j^2 * Phi(x, y, kappa_j),
    Phi(x, y, kappa) = exp(i*kappa*|x-y|) / (4*pi*|x-y|).

Off the diagonal each Phi_j is an eigenfunction of the Laplacian
(Delta Phi_j = -kappa_j^2 Phi_j), so iterated Laplacians and normal
derivatives of G come in closed form. All functions are pure and accept
vectorized point arrays.
"""

from dataclasses import dataclass, field

import numpy as np

from ._fast import cexp

FOUR_PI = 4.0 * np.pi

#: distances below this are treated as on-diagonal (singular) evaluations
SINGULAR_EPS = 1e-12


class SingularPointError(ValueError):
    """Kernel evaluated at (or numerically on) the diagonal x = y."""


@dataclass(frozen=True)
class ModelParams:
    """Physical configuration: polyharmonic order, wavenumber, measurement radius."""

    n: int
    k: float
    R: float

    def __post_init__(self):
        if not (isinstance(self.n, (int, np.integer)) and self.n >= 1):
            raise ValueError(f"polyharmonic order n must be an integer >= 1, got {self.n}")
        if not self.k > 0:
            raise ValueError(f"wavenumber k must be positive, got {self.k}")
        if not self.R > 1:
            raise ValueError(f"measurement radius R must exceed 1, got {self.R}")

    @property
    def k2n(self):
        return self.k ** (2 * self.n)


@dataclass(frozen=True)
class RootSet:
    """The n rotated wavenumbers kappa_j = k*exp(i*j*pi/n), j = 0..n-1."""

    roots: np.ndarray = field(repr=False)

    def __len__(self):
        return len(self.roots)


def split_roots(params: ModelParams) -> RootSet:
    """Rotated wavenumbers of the operator splitting, in index order (kappa_0 = k)."""
    j = np.arange(params.n)
    angles = j * np.pi / params.n
    roots = params.k * (np.cos(angles) + 1j * np.sin(angles))
    roots[0] = params.k  # exact real value for j = 0
    return RootSet(roots=roots)


def _distance(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    d = x - y
    r = np.sqrt(np.sum(d * d, axis=-1))
    if np.any(r < SINGULAR_EPS):
        raise SingularPointError("kernel evaluated at coincident points (|x-y| < 1e-12)")
    return d, r


def helmholtz_green(x, y, kappa):
    """Outgoing Helmholtz kernel exp(i*kappa*r)/(4*pi*r), r = |x-y|."""
    _, r = _distance(x, y)
    return cexp(kappa, r) / (FOUR_PI * r)


def poly_green(x, y, params: ModelParams):
    """Polyharmonic outgoing kernel via the splitting over split_roots(params)."""
    return poly_green_laplacian(x, y, params, 0)


def poly_green_laplacian(x, y, params: ModelParams, m: int):
    """Closed-form Delta_x^m G(x, y): coefficients (-1)^m kappa_j^(2m+2) on each Phi_j."""
    if not 0 <= m <= params.n - 1:
        raise ValueError(f"Laplacian order m must satisfy 0 <= m <= n-1, got m={m}, n={params.n}")
    _, r = _distance(x, y)
    roots = split_roots(params).roots
    scale = (-1.0) ** m / (params.n * params.k2n)
    out = np.zeros(np.shape(r), dtype=np.complex128)
    for kappa in roots:
        out += kappa ** (2 * m + 2) * cexp(kappa, r)
    return scale * out / (FOUR_PI * r)


def poly_green_normal_derivative(x, y, params: ModelParams, m: int, nu):
    """nu . grad_x Delta_x^m G(x, y) for a unit direction nu.

    grad_x Phi = (i*kappa - 1/r) * Phi * (x-y)/r, applied termwise to the
    splitting sum; nu may be a single vector or one vector per point pair.
    """
    if not 0 <= m <= params.n - 1:
        raise ValueError(f"Laplacian order m must satisfy 0 <= m <= n-1, got m={m}, n={params.n}")
    d, r = _distance(x, y)
    nu = np.asarray(nu, dtype=np.float64)
    proj = np.sum(nu * d, axis=-1) / r
    roots = split_roots(params).roots
    scale = (-1.0) ** m / (params.n * params.k2n)
    out = np.zeros(np.shape(r), dtype=np.complex128)
    for kappa in roots:
        out += kappa ** (2 * m + 2) * (1j * kappa - 1.0 / r) * cexp(kappa, r)
    return scale * out * proj / (FOUR_PI * r)
