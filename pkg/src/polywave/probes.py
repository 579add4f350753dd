"""Probe solutions whose pointwise product carries a single Fourier mode.

Two families solve the homogeneous equation:

* plane-wave pairs (no potential): real vectors with xi1 + xi2 = -gamma and
  xi.xi = k^2, so U1*U2 = exp(-i*gamma.x) exactly;
* CGO pairs (with potential): complex vectors with xi.xi = 0 and
  |Im xi| = t, U_i = exp(i*xi.x)(1 + v_i) with a remainder v that decays
  like t^(-n).

The remainder solves the conjugated equation

    [(-Delta - 2i xi.grad)^n - k^(2n)] v = (k^(2n) - q) - q v

spectrally on a periodic box whose frequency lattice is shifted by half a
step along d2. The k^(2n) term is kept inside the inverted symbol: inverting
the bare polyharmonic symbol and iterating on k^(2n)(1+v) has linearized
gain k^(2n)/min|symbol|^n, which exceeds 1 for moderate t, while the
retained form only iterates on the compactly supported q coupling.
"""

from dataclasses import dataclass, field

import numpy as np

from .fields import PotentialField, VolumeGrid, profile_values
from .kernel import ModelParams

#: probe magnitudes exp(2*R*t) beyond this make boundary products meaningless
CONDITIONING_LIMIT = 1e14


class FrequencyRangeError(ValueError):
    """Requested |gamma| outside the admissible probe band."""


class AdmissibilityError(ValueError):
    """CGO imaginary magnitude t below the admissible range."""


class NonContractionError(RuntimeError):
    """CGO remainder iteration diverged; t is below the contractive range."""

    def __init__(self, message, ratio=None):
        super().__init__(message)
        self.ratio = ratio


class BoxCoverageError(ValueError):
    """Evaluation points leave the periodic box's safe interior."""


# ---------------------------------------------------------------------------
# probe vector algebra
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProbeVectorPair:
    """Wave vectors of one probe pair; xi1 + xi2 = -gamma always."""

    gamma: np.ndarray
    xi1: np.ndarray
    xi2: np.ndarray
    kind: str                      # "plane_wave" | "cgo"
    k: float
    t: float = 0.0                 # imaginary magnitude (cgo only)
    d: np.ndarray = None           # plane-wave direction
    d1: np.ndarray = None          # cgo frame
    d2: np.ndarray = None


def choose_orthonormal_frame(gamma):
    """Deterministic orthonormal pair (d1, d2) with d1, d2 both orthogonal to gamma.

    d1 comes from Gram-Schmidt of the standard basis vector least aligned
    with gamma (lowest index on ties); d2 = normalized gamma x d1. For
    gamma = 0 returns (e1, e2).
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    norm = np.linalg.norm(gamma)
    if norm == 0.0:
        return np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])
    ghat = gamma / norm
    axis = int(np.argmin(np.abs(ghat)))
    e = np.zeros(3)
    e[axis] = 1.0
    d1 = e - (e @ ghat) * ghat
    d1 /= np.linalg.norm(d1)
    d2 = np.cross(ghat, d1)
    d2 /= np.linalg.norm(d2)
    return d1, d2


def plane_wave_pair(gamma, params: ModelParams, d=None) -> ProbeVectorPair:
    """Real pair xi = -gamma/2 +- sqrt(k^2 - |gamma|^2/4) d; requires |gamma| < 2k."""
    gamma = np.asarray(gamma, dtype=np.float64)
    k = params.k
    g2 = float(gamma @ gamma)
    if g2 >= (2.0 * k) ** 2:
        raise FrequencyRangeError(
            f"|gamma| = {np.sqrt(g2):.4g} >= 2k = {2 * k:.4g}: no real plane-wave pair"
        )
    if d is None:
        d, _ = choose_orthonormal_frame(gamma)
    else:
        d = np.asarray(d, dtype=np.float64)
        if abs(d @ gamma) > 1e-12 * max(1.0, np.linalg.norm(gamma)):
            raise ValueError("plane-wave direction d must be orthogonal to gamma")
    root = np.sqrt(k**2 - g2 / 4.0)
    xi1 = -gamma / 2.0 + root * d
    xi2 = -gamma / 2.0 - root * d
    return ProbeVectorPair(gamma=gamma, xi1=xi1, xi2=xi2, kind="plane_wave", k=k, d=d)


def cgo_pair(gamma, t, params: ModelParams, frame=None, t_min=0.0) -> ProbeVectorPair:
    """Complex pair xi = -gamma/2 +- (i t d1 + sqrt(t^2 - |gamma|^2/4) d2); xi.xi = 0."""
    gamma = np.asarray(gamma, dtype=np.float64)
    g = float(np.linalg.norm(gamma))
    if t <= g / 2.0:
        raise AdmissibilityError(f"t = {t:.4g} must exceed |gamma|/2 = {g / 2:.4g}")
    if t < t_min:
        raise AdmissibilityError(f"t = {t:.4g} below the configured admissibility floor {t_min:.4g}")
    d1, d2 = frame if frame is not None else choose_orthonormal_frame(gamma)
    d1 = np.asarray(d1, dtype=np.float64)
    d2 = np.asarray(d2, dtype=np.float64)
    root = np.sqrt(t**2 - g**2 / 4.0)
    xi1 = -gamma / 2.0 + 1j * t * d1 + root * d2
    xi2 = -gamma / 2.0 - 1j * t * d1 - root * d2
    return ProbeVectorPair(gamma=gamma, xi1=xi1, xi2=xi2, kind="cgo", k=params.k,
                           t=float(t), d1=d1, d2=d2)


# ---------------------------------------------------------------------------
# periodic box and the conjugated spectral solve
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PeriodicBox:
    """Cubic periodic box [-L/2, L/2)^3 with M collocation points per axis."""

    L: float
    M: int
    axis: np.ndarray = field(repr=False)     # (M,) grid coords
    freqs: np.ndarray = field(repr=False)    # (M,) unshifted lattice frequencies

    @property
    def h(self):
        return self.L / self.M

    def nodes(self):
        X, Y, Z = np.meshgrid(self.axis, self.axis, self.axis, indexing="ij")
        return np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=-1)


def make_box(R, M=64, margin=2.0) -> PeriodicBox:
    """Box of side 4R + margin, covering B_{2R} with wrap-around clearance."""
    L = 4.0 * R + margin
    h = L / M
    axis = -L / 2.0 + h * np.arange(M)
    freqs = 2.0 * np.pi * np.fft.fftfreq(M, d=h)
    return PeriodicBox(L=L, M=int(M), axis=axis, freqs=freqs)


def _potential_on_box(q: PotentialField, box: PeriodicBox):
    """Re-evaluate the potential's named profile on the box grid."""
    if q.is_zero():
        return np.zeros((box.M,) * 3)
    meta = dict(q.profile_meta)
    name = meta.pop("name", None)
    if name is None:
        raise ValueError("potential lacks profile metadata; cannot resample on the CGO box")
    vals = profile_values(name, box.nodes(), **meta)
    r = np.linalg.norm(box.nodes(), axis=-1)
    vals = np.where(r >= 1.0, 0.0, vals)
    return vals.reshape(box.M, box.M, box.M)


class _ShiftedLattice:
    """Half-step-shifted Fourier lattice and transforms for one probe vector."""

    def __init__(self, box: PeriodicBox, shift_dir):
        self.box = box
        self.shift = (np.pi / box.L) * np.asarray(shift_dir, dtype=np.float64)
        nodes = box.axis
        # conjugation phases exp(+-i s.x), separable per axis
        self._phase = [np.exp(1j * s * nodes) for s in self.shift]
        f = box.freqs
        self.eta = [f + s for s in self.shift]   # per-axis shifted frequencies

    def phase3d(self, sign=+1):
        px, py, pz = self._phase
        if sign < 0:
            px, py, pz = np.conj(px), np.conj(py), np.conj(pz)
        return px[:, None, None] * py[None, :, None] * pz[None, None, :]

    def to_coeffs(self, g):
        """Shifted-basis coefficients of grid values g."""
        return np.fft.fftn(self.phase3d(-1) * g) / self.box.M**3

    def from_coeffs(self, c):
        """Grid values from shifted-basis coefficients."""
        return self.phase3d(+1) * np.fft.ifftn(c * self.box.M**3)

    def symbol_quadratic(self, xi):
        """p(eta) = |eta|^2 + 2 xi.eta on the shifted lattice, shape (M, M, M)."""
        ex, ey, ez = self.eta
        p = (ex**2)[:, None, None] + (ey**2)[None, :, None] + (ez**2)[None, None, :]
        p = p.astype(np.complex128)
        p += 2.0 * (xi[0] * ex[:, None, None] + xi[1] * ey[None, :, None] + xi[2] * ez[None, None, :])
        return p


@dataclass
class CGORemainder:
    """Solution v of the conjugated remainder equation on the periodic box."""

    box: PeriodicBox
    xi: np.ndarray
    t: float
    v: np.ndarray = field(repr=False)          # (M, M, M) grid values
    iteration_count: int = 0
    residual: float = 0.0                      # relative fixed-point increment at stop
    lattice_shift: np.ndarray = None
    min_symbol: float = 0.0                    # min |p^n - k^2n| over the lattice

    def norm_in_ball(self, radius):
        """L^2 norm of v over the ball |x| <= radius."""
        r = np.linalg.norm(self.box.nodes(), axis=-1).reshape(self.v.shape)
        mask = r <= radius
        return float(np.sqrt(np.sum(np.abs(self.v[mask]) ** 2) * self.box.h**3))


def cgo_remainder(xi, q: PotentialField, params: ModelParams, box: PeriodicBox,
                  shift_dir=None, tol=1e-10, max_iter=200) -> CGORemainder:
    """Solve [(-Delta - 2i xi.grad)^n - k^(2n)] v = (k^(2n) - q) - q v spectrally.

    The constant-coefficient part of the conjugated operator (everything but
    the q coupling) is inverted exactly on the shifted lattice; Picard
    iteration handles the q term and converges once ||q|| / min|symbol| < 1.
    Divergence raises NonContractionError with the observed growth ratio.
    """
    xi = np.asarray(xi, dtype=np.complex128)
    if abs(xi @ xi) > 1e-8 * max(1.0, np.linalg.norm(xi) ** 2):
        raise ValueError(f"xi.xi = {xi @ xi:.3g} must vanish for a CGO vector")
    t = float(np.linalg.norm(xi.imag))
    if shift_dir is None:
        # half-step along d1 + d2: the d1 component keeps Im(symbol) nonzero on
        # every mode carrying the constant forcing (a d2-only shift leaves the
        # on-axis symbol real, whose zeros cross lattice points as t varies)
        im = xi.imag / max(t, 1e-300)
        re = xi.real.copy()
        re -= (re @ im) * im
        nrm = np.linalg.norm(re)
        shift_dir = im + (re / nrm if nrm > 1e-12 else _any_orthogonal(im))
    lat = _ShiftedLattice(box, shift_dir)
    p = lat.symbol_quadratic(xi)
    symbol = p**params.n - params.k2n
    min_sym = float(np.min(np.abs(symbol)))
    if min_sym < 1e-10:
        raise NonContractionError(
            f"conjugated symbol nearly vanishes on the shifted lattice (min {min_sym:.2e})"
        )
    inv = 1.0 / symbol
    qbox = _potential_on_box(q, box)
    const_rhs = params.k2n - qbox              # (k^2n - q) * 1
    v = np.zeros((box.M,) * 3, dtype=np.complex128)
    prev_delta = None
    ratio = None
    for it in range(1, max_iter + 1):
        rhs = const_rhs - qbox * v
        v_new = lat.from_coeffs(inv * lat.to_coeffs(rhs))
        delta = np.linalg.norm(v_new - v)
        scale = max(np.linalg.norm(v_new), 1e-300)
        v = v_new
        if delta / scale <= tol:
            return CGORemainder(box=box, xi=xi, t=t, v=v, iteration_count=it,
                                residual=delta / scale, lattice_shift=lat.shift,
                                min_symbol=min_sym)
        if prev_delta is not None and prev_delta > 0:
            ratio = delta / prev_delta
            if it > 3 and ratio > 1.05:
                raise NonContractionError(
                    f"remainder iteration diverging (growth ratio {ratio:.3f} at "
                    f"iteration {it}); t = {t:.3g} is below the admissible range",
                    ratio=ratio,
                )
        prev_delta = delta
    raise NonContractionError(
        f"remainder iteration did not reach {tol:.1e} in {max_iter} steps "
        f"(last increment {delta / scale:.2e})", ratio=ratio,
    )


def _any_orthogonal(u):
    e = np.zeros(3)
    e[int(np.argmin(np.abs(u)))] = 1.0
    w = e - (e @ u) * u
    return w / np.linalg.norm(w)


def apply_conjugated(v, xi, n, box: PeriodicBox, shift, include_k=None):
    """Spectral application of (-Delta - 2i xi.grad)^n (minus k^2n when given)."""
    lat = _ShiftedLattice(box, shift / (np.pi / box.L))
    p = lat.symbol_quadratic(np.asarray(xi, dtype=np.complex128))
    mult = p**n if include_k is None else p**n - include_k
    return lat.from_coeffs(mult * lat.to_coeffs(v))


# ---------------------------------------------------------------------------
# boundary/volume data of a probe
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProbeBoundaryData:
    """Traces Delta^m U, dnu Delta^m U at the quadrature nodes plus volume samples."""

    dirichlet: np.ndarray = field(repr=False)        # (n, P)
    neumann: np.ndarray = field(repr=False)          # (n, P)
    volume_samples: np.ndarray = field(repr=False)   # (N^3,) U at source-grid cells
    kind: str = "plane_wave"
    xi: np.ndarray = None

    def stacked_functional_row(self, weights):
        """Row r with r . [dirichlet_traces; neumann_traces] = boundary functional.

        Implements (-1)^n sum_j [w Delta^(n-j)U . neumann_(j-1)
        - w dnu Delta^(n-j)U . dirichlet_(j-1)] as one vector against the
        stacked trace layout of BoundaryTrace.stacked().
        """
        n, P = self.dirichlet.shape
        sign = (-1.0) ** n
        row_d = np.zeros((n, P), dtype=np.complex128)
        row_n = np.zeros((n, P), dtype=np.complex128)
        for j in range(1, n + 1):
            row_n[j - 1] += sign * weights * self.dirichlet[n - j]
            row_d[j - 1] -= sign * weights * self.neumann[n - j]
        return np.concatenate([row_d.ravel(), row_n.ravel()])


def _plane_wave_data(pair_xi, params, quad, grid, with_volume=True) -> ProbeBoundaryData:
    n = params.n
    k2 = params.k**2
    phase = np.exp(1j * (quad.nodes @ pair_xi))
    dn = 1j * (quad.normals @ pair_xi) * phase
    D = np.stack([(-k2) ** m * phase for m in range(n)])
    Nm = np.stack([(-k2) ** m * dn for m in range(n)])
    vol = np.exp(1j * (grid.nodes @ pair_xi)) if with_volume else None
    return ProbeBoundaryData(dirichlet=D, neumann=Nm, volume_samples=vol,
                             kind="plane_wave", xi=pair_xi)


def _eval_shifted_fields(coeffs, lat: _ShiftedLattice, points):
    """Evaluate shifted-basis coefficient fields (F, M, M, M) at arbitrary points (P, 3).

    The DFT basis of to_coeffs is exp(i*eta0.(x + L/2)); the half-step shift
    contributes exp(i*s.x) with the true coordinate.
    """
    pts = np.atleast_2d(points)
    half = lat.box.L / 2.0
    f = lat.box.freqs
    out = np.empty((coeffs.shape[0], len(pts)), dtype=np.complex128)
    for lo in range(0, len(pts), 128):
        sl = pts[lo:lo + 128]
        Az = np.exp(1j * np.outer(f, sl[:, 2] + half))
        Ay = np.exp(1j * np.outer(f, sl[:, 1] + half))
        Ax = np.exp(1j * np.outer(f, sl[:, 0] + half))
        s1 = np.tensordot(coeffs, Az, axes=([3], [0]))        # (F, M, M, Pc)
        s2 = np.einsum("fabp,bp->fap", s1, Ay)
        out[:, lo:lo + 128] = np.einsum("fap,ap->fp", s2, Ax)
    return out * np.exp(1j * (pts @ lat.shift))[None, :]


def _eval_shifted_fields_grid(coeffs, lat: _ShiftedLattice, axis):
    """Same as _eval_shifted_fields for a tensor-product grid; returns (F, N, N, N)."""
    half = lat.box.L / 2.0
    f = lat.box.freqs
    A = [np.exp(1j * np.outer(f, np.asarray(axis) + half)) for _ in range(3)]
    s = np.tensordot(coeffs, A[0], axes=([1], [0]))           # (F, M, M, N) x-contracted
    s = np.tensordot(s, A[1], axes=([1], [0]))                # (F, M, N, N)
    s = np.tensordot(s, A[2], axes=([1], [0]))                # (F, N, N, N)
    sx, sy, sz = lat.shift
    ph = (np.exp(1j * sx * axis)[:, None, None]
          * np.exp(1j * sy * axis)[None, :, None]
          * np.exp(1j * sz * axis)[None, None, :])
    return s * ph[None]


def _cgo_data(xi, remainder: CGORemainder, params, quad, grid, with_volume=True) -> ProbeBoundaryData:
    n = params.n
    box = remainder.box
    if np.max(np.abs(quad.nodes)) > box.L / 2.0 - 2.0 * box.h:
        raise BoxCoverageError(
            f"boundary nodes reach {np.max(np.abs(quad.nodes)):.3g}, beyond the box's "
            f"safe interior {box.L / 2 - 2 * box.h:.3g}"
        )
    lat = _ShiftedLattice(box, remainder.lattice_shift / (np.pi / box.L))
    p = lat.symbol_quadratic(xi)
    vhat = lat.to_coeffs(remainder.v)
    # stack: w_m = (Delta + 2i xi.grad)^m v for m = 0..n-1, then grad components of each
    fields = [((-p) ** m) * vhat for m in range(n)]
    ex, ey, ez = lat.eta
    for m in range(n):
        wm = fields[m]
        fields.append(1j * ex[:, None, None] * wm)
        fields.append(1j * ey[None, :, None] * wm)
        fields.append(1j * ez[None, None, :] * wm)
    stack = np.stack(fields)
    vals = _eval_shifted_fields(stack, lat, quad.nodes)
    w = vals[:n]                                   # (n, P): w_m at nodes
    grads = vals[n:].reshape(n, 3, -1)             # (n, 3, P)
    phase = np.exp(1j * (quad.nodes @ xi))
    xin = quad.normals @ xi                        # (P,) xi.nu
    D = np.empty((n, len(quad.nodes)), dtype=np.complex128)
    Nm = np.empty_like(D)
    for m in range(n):
        core = (1.0 if m == 0 else 0.0) + w[m]
        grad_n = np.einsum("ip,pi->p", grads[m], quad.normals)
        D[m] = phase * core
        Nm[m] = phase * (1j * xin * core + grad_n)
    vol = None
    if with_volume:
        v_on_grid = _eval_shifted_fields_grid(vhat[None], lat, grid.axis)[0]
        vol = np.exp(1j * (grid.nodes @ xi)) * (1.0 + v_on_grid.ravel())
    return ProbeBoundaryData(dirichlet=D, neumann=Nm, volume_samples=vol, kind="cgo", xi=xi)


def probe_boundary_data(pair: ProbeVectorPair, quad, grid: VolumeGrid, params: ModelParams,
                        remainders=None, with_volume=True):
    """Boundary and volume data for both probes of a pair.

    Plane waves are closed-form. CGO probes need their two remainders and are
    rejected when exp(2*R*t) overflows the conditioning budget. with_volume=False
    skips the volume samples (only the identity oracles need them).
    """
    if pair.kind == "plane_wave":
        return (_plane_wave_data(pair.xi1, params, quad, grid, with_volume),
                _plane_wave_data(pair.xi2, params, quad, grid, with_volume))
    if remainders is None or len(remainders) != 2:
        raise ValueError("CGO probe data needs the two remainder solutions")
    growth = 2.0 * params.R * pair.t
    if np.exp(min(growth, 700.0)) > CONDITIONING_LIMIT:
        raise AdmissibilityError(
            f"exp(2Rt) = exp({growth:.3g}) exceeds the conditioning budget {CONDITIONING_LIMIT:.1e}"
        )
    return (_cgo_data(pair.xi1, remainders[0], params, quad, grid, with_volume),
            _cgo_data(pair.xi2, remainders[1], params, quad, grid, with_volume))
