"""Direct problem: from one noise realization to boundary traces on the sphere.

Without a potential the field is the pure convolution u = H_k f, and the
Cauchy-type traces Delta^j u, dnu Delta^j u on |x| = R are evaluated directly
from closed-form kernel derivatives. With a potential the volume field first
solves the Lippmann-Schwinger equation u + K_k u = H_k f (restarted GMRES, or
a support-restricted dense factorization for realization batches), after
which traces use the representation u = H_k f - K_k u with smooth exterior
kernels.

The weakly singular self-cell of the volume kernels integrates the 1/(4*pi*r)
part analytically over the volume-equal ball and the remaining smooth part by
midpoint.
"""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse.linalg

from ._fast import cexp
from .fields import NoiseRealization, PotentialField, StrengthField, VolumeGrid
from .kernel import FOUR_PI, ModelParams, split_roots

_NODE_CHUNK = 64  # boundary nodes per kernel-assembly chunk (bounds peak memory)


class SolverDivergenceError(RuntimeError):
    """Lippmann-Schwinger iteration failed; usually k too small or q too large."""

    def __init__(self, message, iterations=None, residual=None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


# ---------------------------------------------------------------------------
# sphere quadrature
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SphereQuadrature:
    """Product rule on |x| = R: Gauss-Legendre in cos(theta) x uniform azimuth."""

    R: float
    n_theta: int
    n_phi: int
    nodes: np.ndarray = field(repr=False)      # (P, 3)
    normals: np.ndarray = field(repr=False)    # (P, 3) outward units
    weights: np.ndarray = field(repr=False)    # (P,), sums to 4 pi R^2

    @property
    def num_nodes(self):
        return len(self.weights)

    def integrate(self, values):
        return np.sum(self.weights * values)


def build_sphere_quadrature(R, n_theta=32, n_phi=32) -> SphereQuadrature:
    if not R > 1:
        raise ValueError(f"measurement radius must exceed 1, got {R}")
    if n_theta < 2 or n_phi < 2:
        raise ValueError(f"need at least 2 nodes per axis, got ({n_theta}, {n_phi})")
    mu, w_mu = np.polynomial.legendre.leggauss(n_theta)
    phi = 2.0 * np.pi * np.arange(n_phi) / n_phi
    s = np.sqrt(1.0 - mu**2)
    # outer product layout: theta-major, phi-minor
    x = np.outer(s, np.cos(phi)).ravel()
    y = np.outer(s, np.sin(phi)).ravel()
    z = np.outer(mu, np.ones(n_phi)).ravel()
    normals = np.stack([x, y, z], axis=-1)
    weights = np.outer(w_mu, np.full(n_phi, 2.0 * np.pi / n_phi)).ravel() * R**2
    return SphereQuadrature(
        R=float(R), n_theta=n_theta, n_phi=n_phi,
        nodes=R * normals, normals=normals, weights=weights,
    )


# ---------------------------------------------------------------------------
# kernel sums and matrices
# ---------------------------------------------------------------------------

def kernel_sum(points, weights, sources, params: ModelParams, m=0, nu=None):
    """sum_c Delta^m G(x_p, y_c) * weights_c, or the nu-directional derivative.

    `points` (P,3) must stay away from `sources` (C,3); `weights` already
    carry whatever measure applies (cell volume or noise increments). With
    nu given ((P,3) unit vectors) returns nu.grad_x of the same sum.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    sources = np.atleast_2d(np.asarray(sources, dtype=np.float64))
    weights = np.asarray(weights, dtype=np.complex128)
    roots = split_roots(params).roots
    scale = (-1.0) ** m / (params.n * params.k2n)
    out = np.zeros(len(points), dtype=np.complex128)
    for lo in range(0, len(points), _NODE_CHUNK):
        pts = points[lo:lo + _NODE_CHUNK]
        diff = pts[:, None, :] - sources[None, :, :]
        r = np.sqrt(np.sum(diff * diff, axis=-1))
        base = weights[None, :] / (FOUR_PI * r)
        if nu is not None:
            base = base * (np.sum(nu[lo:lo + _NODE_CHUNK, None, :] * diff, axis=-1) / r)
        acc = np.zeros(r.shape, dtype=np.complex128)
        for kappa in roots:
            term = kappa ** (2 * m + 2) * cexp(kappa, r)
            if nu is not None:
                term = term * (1j * kappa - 1.0 / r)
            acc += term
        out[lo:lo + _NODE_CHUNK] = scale * np.sum(acc * base, axis=1)
    return out


@dataclass
class KernelMatrixSet:
    """Dense maps from source cells to boundary trace values.

    dirichlet[j][p, c] = Delta^j G(node_p, cell_c) and neumann[j][p, c] the
    outward normal derivative, j = 0..n-1, columns restricted to `cells`
    (flat indices into the grid). Immutable after construction; shared
    read-only across realization workers.
    """

    params: ModelParams
    cells: np.ndarray
    dirichlet: list = field(repr=False)
    neumann: list = field(repr=False)

    def apply(self, coeffs):
        """Stack traces for per-cell coefficient vector/matrix (cells,) or (cells, B).

        Returns (dirichlet, neumann) arrays of shape (n, P[, B]).
        """
        d = np.stack([M @ coeffs for M in self.dirichlet])
        nm = np.stack([M @ coeffs for M in self.neumann])
        return d, nm


def boundary_kernel_matrices(quad: SphereQuadrature, grid: VolumeGrid,
                             params: ModelParams, cells=None) -> KernelMatrixSet:
    """Assemble the (node x cell) matrices of Delta^j G and dnu Delta^j G.

    The Helmholtz factors exp(i*kappa_j*r)/(4*pi*r) are computed once per
    root and reused for every trace order, which keeps the transcendental
    count at n per (node, cell) pair.
    """
    nodes = quad.nodes
    normals = quad.normals
    if cells is None:
        cells = np.arange(grid.num_cells)
    cells = np.asarray(cells)
    sources = grid.nodes[cells]
    n, P, C = params.n, len(nodes), len(cells)
    roots = split_roots(params).roots
    D = [np.zeros((P, C), dtype=np.complex128) for _ in range(n)]
    Nm = [np.zeros((P, C), dtype=np.complex128) for _ in range(n)]
    for lo in range(0, P, _NODE_CHUNK):
        pts = nodes[lo:lo + _NODE_CHUNK]
        diff = pts[:, None, :] - sources[None, :, :]
        r = np.sqrt(np.sum(diff * diff, axis=-1))
        inv4pir = 1.0 / (FOUR_PI * r)
        proj = np.sum(normals[lo:lo + _NODE_CHUNK, None, :] * diff, axis=-1) / r
        for kappa in roots:
            phi = cexp(kappa, r) * inv4pir
            dphi = (1j * kappa - 1.0 / r) * phi * proj
            for m in range(n):
                coef = (-1.0) ** m * kappa ** (2 * m + 2) / (n * params.k2n)
                D[m][lo:lo + _NODE_CHUNK] += coef * phi
                Nm[m][lo:lo + _NODE_CHUNK] += coef * dphi
    return KernelMatrixSet(params=params, cells=cells, dirichlet=D, neumann=Nm)


# ---------------------------------------------------------------------------
# volume convolution (H_k and K_k on the grid)
# ---------------------------------------------------------------------------

def _self_cell_integral(params: ModelParams, vol):
    """Integral of G over the volume-equal ball around its own center.

    The 1/(4*pi*r) part integrates to r_eq^2/2 exactly; the remaining smooth
    part (exp(i*kappa*r)-1)/(4*pi*r) -> i*kappa/(4*pi) is done by midpoint.
    """
    r_eq = (3.0 * vol / FOUR_PI) ** (1.0 / 3.0)
    roots = split_roots(params).roots
    total = 0.0 + 0.0j
    for kappa in roots:
        total += kappa**2 * (r_eq**2 / 2.0 + 1j * kappa * vol / FOUR_PI)
    return total / (params.n * params.k2n)


def _offset_kernel(grid: VolumeGrid, params: ModelParams):
    """G(d*h)*vol on the difference lattice d in [-(N-1), N-1]^3, corrected at 0."""
    N, h, vol = grid.N, grid.h, grid.cell_volume
    d = np.arange(-(N - 1), N)
    DX, DY, DZ = np.meshgrid(d, d, d, indexing="ij")
    r = h * np.sqrt(DX**2 + DY**2 + DZ**2)
    center = (N - 1, N - 1, N - 1)
    r[center] = 1.0  # placeholder, overwritten below
    roots = split_roots(params).roots
    T = np.zeros(r.shape, dtype=np.complex128)
    for kappa in roots:
        T += kappa**2 * cexp(kappa, r)
    T *= vol / (params.n * params.k2n * FOUR_PI * r)
    T[center] = _self_cell_integral(params, vol)
    return T


class VolumeConvolver:
    """FFT-accelerated application of phi -> sum_c' T(c - c') phi(c').

    T is the cell-integrated polyharmonic kernel (midpoint off-diagonal,
    analytically corrected self cell), so apply_density(phi) is the midpoint
    discretization of H_k acting on the density phi at every cell center.
    """

    def __init__(self, grid: VolumeGrid, params: ModelParams):
        self.grid = grid
        self.params = params
        self.offsets = _offset_kernel(grid, params)
        N = grid.N
        M = 2 * N  # zero-padding that makes circular convolution exact
        wrapped = np.zeros((M, M, M), dtype=np.complex128)
        idx = np.arange(M)
        off = np.where(idx < N, idx, idx - M)  # lattice offsets in wrap order
        valid = np.abs(off) <= N - 1  # offset -N never occurs for outputs in [0, N)^3
        src = off + (N - 1)
        wrapped[np.ix_(idx[valid], idx[valid], idx[valid])] = self.offsets[np.ix_(src[valid], src[valid], src[valid])]
        self._That = np.fft.fftn(wrapped)
        self._M = M

    def apply_density(self, phi):
        """Convolve a per-volume density given flat (C,) or cube (N,N,N); returns flat."""
        N = self.grid.N
        phi3 = np.asarray(phi).reshape(N, N, N)
        padded = np.zeros((self._M,) * 3, dtype=np.complex128)
        padded[:N, :N, :N] = phi3
        out = np.fft.ifftn(np.fft.fftn(padded) * self._That)[:N, :N, :N]
        return out.ravel()

    def apply_density_adjoint(self, v):
        """Adjoint convolution (kernel conj(T); T is offset-symmetric)."""
        N = self.grid.N
        v3 = np.asarray(v).reshape(N, N, N)
        padded = np.zeros((self._M,) * 3, dtype=np.complex128)
        padded[:N, :N, :N] = v3
        out = np.fft.ifftn(np.fft.fftn(padded) * np.conj(self._That))[:N, :N, :N]
        return out.ravel()

    def dense_matrix(self, rows=None, cols=None):
        """Explicit T(c - c') matrix for row/col cell subsets (direct-sum oracle, LU path)."""
        N = self.grid.N
        all_idx = np.indices((N, N, N)).reshape(3, -1)
        rows = np.arange(N**3) if rows is None else np.asarray(rows)
        cols = np.arange(N**3) if cols is None else np.asarray(cols)
        ri = all_idx[:, rows]
        ci = all_idx[:, cols]
        d = ri[:, :, None] - ci[:, None, :] + (N - 1)
        return self.offsets[d[0], d[1], d[2]]


def apply_Hk(conv: VolumeConvolver, source_density, targets="self", params=None, grid=None):
    """H_k applied to a per-volume density: on-grid via FFT, or at exterior points.

    targets="self" evaluates at every cell center (with the self-cell
    correction); otherwise targets is an (P,3) array of points that must stay
    clear of all cell centers.
    """
    if isinstance(targets, str) and targets == "self":
        return conv.apply_density(source_density)
    grid = grid or conv.grid
    params = params or conv.params
    pts = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    src = grid.nodes
    dmin = np.min(np.linalg.norm(pts[:, None, :] - src[None, :, :], axis=-1))
    if dmin < 0.5 * grid.h:
        raise ValueError(
            f"target within half a cell ({dmin:.3g}) of a source cell center; "
            "use targets='self' for on-grid evaluation"
        )
    weights = np.asarray(source_density, dtype=np.complex128) * grid.cell_volume
    return kernel_sum(pts, weights, src, params)


def apply_Kk(conv: VolumeConvolver, u_cells, q: PotentialField):
    """K_k u = H_k(q u) at every cell center."""
    u_cells = np.asarray(u_cells)
    if u_cells.size != q.values.size:
        raise ValueError(f"u has {u_cells.size} cells but q has {q.values.size}")
    return conv.apply_density(q.values * u_cells.ravel())


def apply_Kk_direct(conv: VolumeConvolver, u_cells, q: PotentialField):
    """Direct-summation oracle for apply_Kk (O(N^6); small grids only)."""
    T = conv.dense_matrix()
    return T @ (q.values * np.asarray(u_cells).ravel())


# ---------------------------------------------------------------------------
# Lippmann-Schwinger solves
# ---------------------------------------------------------------------------

def lippmann_schwinger_solve(conv: VolumeConvolver, q: PotentialField, b,
                             rtol=1e-8, restart=50, max_cycles=10):
    """Solve (I + K_k) u = b by restarted GMRES; raises on non-convergence."""
    C = conv.grid.num_cells
    qv = q.values

    def mv(v):
        return v + conv.apply_density(qv * v)

    op = scipy.sparse.linalg.LinearOperator((C, C), matvec=mv, dtype=np.complex128)
    iters = [0]

    def cb(_):
        iters[0] += 1

    u, info = scipy.sparse.linalg.gmres(
        op, b, rtol=rtol, atol=0.0, restart=restart, maxiter=max_cycles,
        callback=cb, callback_type="pr_norm",
    )
    resid = np.linalg.norm(mv(u) - b) / np.linalg.norm(b)
    if info != 0 or resid > rtol * 10:
        raise SolverDivergenceError(
            f"Lippmann-Schwinger GMRES did not converge (k may be too small or "
            f"q too large): relative residual {resid:.3e} after {iters[0]} iterations",
            iterations=iters[0], residual=resid,
        )
    return u


class PotentialSolveCache:
    """Support-restricted dense factorization of (I + K_k) for batched solves.

    K_k only reads u on supp(q), so the solve reduces to the q-active block:
    (I + T_aa diag(q_a)) u_a = b_a. Factorized once per (grid, params, q) and
    reused across every realization in a sweep.
    """

    def __init__(self, conv: VolumeConvolver, q: PotentialField):
        self.conv = conv
        self.q = q
        self.active = q.active
        T_aa = conv.dense_matrix(rows=self.active, cols=self.active)
        A = T_aa * q.values[self.active][None, :]
        A[np.diag_indices_from(A)] += 1.0
        self._lu = scipy.linalg.lu_factor(A)

    def solve_active(self, b_active):
        """u restricted to q-active cells, for (A,) or (A, B) right-hand sides."""
        return scipy.linalg.lu_solve(self._lu, b_active)


# ---------------------------------------------------------------------------
# boundary traces
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoundaryTrace:
    """Cauchy data of one realization: Delta^j u and dnu Delta^j u at the quadrature nodes."""

    dirichlet: np.ndarray = field(repr=False)   # (n, P) complex
    neumann: np.ndarray = field(repr=False)     # (n, P) complex
    realization_seed: tuple = (0, 0)

    @property
    def n(self):
        return self.dirichlet.shape[0]

    @property
    def num_nodes(self):
        return self.dirichlet.shape[1]

    def stacked(self):
        """Concatenated [dirichlet; neumann] blocks, shape (2*n*P,)."""
        return np.concatenate([self.dirichlet.ravel(), self.neumann.ravel()])


@dataclass(frozen=True)
class BoundaryTraceBatch:
    """Traces of a contiguous run of realizations, stored as (n, P, B) arrays."""

    dirichlet: np.ndarray = field(repr=False)
    neumann: np.ndarray = field(repr=False)
    seeds: list = field(default_factory=list)

    @property
    def count(self):
        return self.dirichlet.shape[2]

    def realization(self, b) -> BoundaryTrace:
        return BoundaryTrace(
            dirichlet=np.ascontiguousarray(self.dirichlet[:, :, b]),
            neumann=np.ascontiguousarray(self.neumann[:, :, b]),
            realization_seed=self.seeds[b],
        )

    def stacked(self):
        """(2*n*P, B) matrix of stacked trace vectors."""
        n, P, B = self.dirichlet.shape
        return np.concatenate([
            self.dirichlet.reshape(n * P, B), self.neumann.reshape(n * P, B),
        ])


class DirectSolver:
    """Reusable direct-problem context for a fixed (sigma, q, params, grid, quad).

    Precomputes the boundary kernel matrices over the source support (and the
    potential support when q != 0) plus the volume convolver; every
    realization then reduces to dense products and, with a potential, one
    Lippmann-Schwinger solve.
    """

    def __init__(self, sigma: StrengthField, q: PotentialField, params: ModelParams,
                 grid: VolumeGrid, quad: SphereQuadrature, solver="auto"):
        if sigma.grid.N != grid.N or q.grid.N != grid.N:
            raise ValueError("sigma/q sampled on a different grid")
        self.sigma, self.q, self.params, self.grid, self.quad = sigma, q, params, grid, quad
        self.src_cells = sigma.active
        self.kms_src = boundary_kernel_matrices(quad, grid, params, cells=self.src_cells)
        self.conv = None
        self.kms_q = None
        self._cache = None
        self.solver = solver
        if not q.is_zero():
            self.conv = VolumeConvolver(grid, params)
            self.kms_q = boundary_kernel_matrices(quad, grid, params, cells=q.active)
            use_lu = solver == "lu" or (solver == "auto" and len(q.active) <= 4096)
            if use_lu:
                self._cache = PotentialSolveCache(self.conv, q)
                self._T_as = self.conv.dense_matrix(rows=q.active, cols=self.src_cells)

    def _source_coeffs(self, dw_active):
        """sqrt(sigma) * DW restricted to active cells; accepts (A,) or (A, B)."""
        s = self.sigma.sqrt_values[self.src_cells]
        return s[:, None] * dw_active if dw_active.ndim == 2 else s * dw_active

    def traces_from_increments(self, dw_active, seeds):
        """Boundary traces for noise increments already restricted to source cells."""
        g = self._source_coeffs(np.asarray(dw_active))
        D, Nm = self.kms_src.apply(g)
        if not self.q.is_zero():
            u_act = self._volume_solution_active(g)
            w = self.q.values[self.q.active] * self.grid.cell_volume
            corr = w[:, None] * u_act if u_act.ndim == 2 else w * u_act
            Dc, Nc = self.kms_q.apply(corr)
            D, Nm = D - Dc, Nm - Nc
        if g.ndim == 1:
            return BoundaryTrace(dirichlet=D, neumann=Nm, realization_seed=seeds)
        return BoundaryTraceBatch(dirichlet=D, neumann=Nm, seeds=list(seeds))

    def _volume_solution_active(self, g):
        """u at q-active cells, solving u + K u = H f for source coefficients g."""
        vol = self.grid.cell_volume
        if self._cache is not None:
            b_act = self._T_as @ (g / vol)
            return self._cache.solve_active(b_act)
        # contractual GMRES path (one realization at a time)
        density = np.zeros(self.grid.num_cells, dtype=np.complex128)
        if g.ndim == 1:
            density[self.src_cells] = g / vol
            b = self.conv.apply_density(density)
            u = lippmann_schwinger_solve(self.conv, self.q, b)
            return u[self.q.active]
        cols = []
        for col in range(g.shape[1]):
            density[:] = 0.0
            density[self.src_cells] = g[:, col] / vol
            b = self.conv.apply_density(density)
            cols.append(lippmann_schwinger_solve(self.conv, self.q, b)[self.q.active])
        return np.stack(cols, axis=-1)

    def residual_norm(self, noise: NoiseRealization):
        """||u + K u - H f|| / ||H f|| on the grid for one realization (q != 0)."""
        if self.q.is_zero():
            return 0.0
        conv = self.conv
        density = np.zeros(self.grid.num_cells, dtype=np.complex128)
        density[self.src_cells] = (
            self.sigma.sqrt_values[self.src_cells] * noise.increments[self.src_cells]
            / self.grid.cell_volume
        )
        b = conv.apply_density(density)
        u = lippmann_schwinger_solve(conv, self.q, b)
        r = u + conv.apply_density(self.q.values * u) - b
        return float(np.linalg.norm(r) / np.linalg.norm(b))


def solve_direct(sigma: StrengthField, q: PotentialField, noise: NoiseRealization,
                 params: ModelParams, grid: VolumeGrid, quad: SphereQuadrature,
                 solver="auto") -> BoundaryTrace:
    """One-shot direct solve; build a DirectSolver explicitly to amortize over realizations."""
    ds = DirectSolver(sigma, q, params, grid, quad, solver=solver)
    return ds.traces_from_increments(noise.increments[ds.src_cells], noise.seed)


# ---------------------------------------------------------------------------
# radiation condition diagnostic
# ---------------------------------------------------------------------------

def radiation_residual(sigma: StrengthField, noise: NoiseRealization, params: ModelParams,
                       grid: VolumeGrid, radii=None, n_dirs=32, seed=7):
    """max over directions of |r (du/dr - i k u)| at each sample radius.

    u is the q = 0 field of the given realization, evaluated by exterior
    kernel sums; the radiation condition makes the result decay in r.
    """
    if radii is None:
        radii = [params.R * s for s in (1, 2, 4, 8)]
    rng = np.random.Generator(np.random.Philox(key=seed))
    dirs = rng.standard_normal((n_dirs, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    act = sigma.active
    weights = sigma.sqrt_values[act] * noise.increments[act]
    src = grid.nodes[act]
    out = {}
    for r in radii:
        pts = r * dirs
        if len(act) == 0:
            out[r] = 0.0
            continue
        u = kernel_sum(pts, weights, src, params)
        du = kernel_sum(pts, weights, src, params, nu=dirs)
        out[r] = float(np.max(np.abs(r * (du - 1j * params.k * u))))
    return out


# ---------------------------------------------------------------------------
# operator norm estimation
# ---------------------------------------------------------------------------

def estimate_operator_norm(matvec, rmatvec, shape, tol=1e-4, maxiter=500, seed=11):
    """Largest singular value by power iteration on the normal operator A^H A."""
    m, n = shape
    if n == 0 or m == 0:
        return 0.0
    rng = np.random.Generator(np.random.Philox(key=seed))
    x = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    x /= np.linalg.norm(x)
    s_old = 0.0
    for _ in range(maxiter):
        y = matvec(x)
        s = np.linalg.norm(y)
        if s == 0.0:
            return 0.0
        z = rmatvec(y)
        nz = np.linalg.norm(z)
        if abs(s - s_old) <= tol * s:
            return float(s)
        x = z / nz
        s_old = s
    raise RuntimeError(f"operator-norm power iteration did not converge in {maxiter} steps")


def hk_boundary_operator(quad: SphereQuadrature, grid: VolumeGrid, params: ModelParams):
    """H_k : L^2(volume) -> L^2(boundary) as a weighted dense matrix (j = 0 trace)."""
    kms = boundary_kernel_matrices(quad, grid, params)
    A = kms.dirichlet[0] * grid.cell_volume
    A = np.sqrt(quad.weights)[:, None] * A / np.sqrt(grid.cell_volume)
    return A


def kk_volume_norm(grid: VolumeGrid, params: ModelParams, q: PotentialField, tol=1e-4):
    """Estimated spectral norm of K_k on L^2 of the grid box."""
    conv = VolumeConvolver(grid, params)
    qv = q.values
    mv = lambda v: conv.apply_density(qv * v)
    rmv = lambda v: np.conj(qv) * conv.apply_density_adjoint(v)
    C = grid.num_cells
    return estimate_operator_norm(mv, rmv, (C, C), tol=tol)


# ---------------------------------------------------------------------------
# trace archives
# ---------------------------------------------------------------------------

_TRACE_MAGIC = b"PWTR1\n"


def write_trace_archive(path, batch: BoundaryTraceBatch, meta=None):
    """Binary trace archive: header JSON + per-realization complex records + sha256 trailer."""
    n, P, B = batch.dirichlet.shape
    header = dict(meta or {})
    header.update({"n": int(n), "nodes": int(P), "count": int(B),
                   "seeds": [list(map(int, s)) for s in batch.seeds]})
    hdr = json.dumps(header).encode()
    payload = bytearray()
    for b in range(B):
        payload += np.ascontiguousarray(batch.dirichlet[:, :, b]).tobytes()
        payload += np.ascontiguousarray(batch.neumann[:, :, b]).tobytes()
    digest = hashlib.sha256(payload).hexdigest().encode()
    with open(path, "wb") as fh:
        fh.write(_TRACE_MAGIC)
        fh.write(len(hdr).to_bytes(8, "little"))
        fh.write(hdr)
        fh.write(bytes(payload))
        fh.write(digest)


def read_trace_archive(path):
    """Load a trace archive; verifies the payload checksum. Returns (batch, meta)."""
    with open(path, "rb") as fh:
        if fh.read(len(_TRACE_MAGIC)) != _TRACE_MAGIC:
            raise ValueError(f"{path}: not a polywave trace archive")
        hlen = int.from_bytes(fh.read(8), "little")
        meta = json.loads(fh.read(hlen).decode())
        n, P, B = meta["n"], meta["nodes"], meta["count"]
        payload = fh.read(2 * n * P * B * 16)
        digest = fh.read(64).decode()
    if hashlib.sha256(payload).hexdigest() != digest:
        raise ValueError(f"{path}: trace archive payload checksum mismatch")
    rec = np.frombuffer(payload, dtype=np.complex128).reshape(B, 2, n, P)
    batch = BoundaryTraceBatch(
        dirichlet=np.ascontiguousarray(np.moveaxis(rec[:, 0], 0, -1)),
        neumann=np.ascontiguousarray(np.moveaxis(rec[:, 1], 0, -1)),
        seeds=[tuple(s) for s in meta.get("seeds", [])],
    )
    return batch, meta
