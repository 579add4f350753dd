"""Source-strength reconstruction from boundary data.

The boundary functional

    B[u, U] = (-1)^n sum_{j=1..n} [ int_dB Delta^(n-j)U dnu Delta^(j-1)u
                                  - int_dB Delta^(j-1)u dnu Delta^(n-j)U ]

equals the stochastic pairing <f, U> realization by realization, so averaged
probe products recover Fourier data of the strength:

    E[ B[u,U1] B[u,U2] ] = (2pi)^3 sigma_hat(gamma)   (+ a remainder term for
                                                       CGO probes)

with the convention sigma_hat(gamma) = (2pi)^(-3) int sigma exp(-i gamma.x) dx.
Truncated synthesis sums exp(i gamma.x) sigma_hat(gamma) over a frequency
ball; stability sweeps report how reconstruction error responds to the
realization budget and the data statistic M.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .correlation import CorrelationTensor, compute_M
from .direct import (BoundaryTrace, BoundaryTraceBatch, DirectSolver, SphereQuadrature)
from .fields import StrengthField, VolumeGrid, profile_values, sample_white_noise_batch
from .kernel import ModelParams
from .probes import (AdmissibilityError, ProbeBoundaryData, cgo_pair, cgo_remainder,
                     make_box, plane_wave_pair, probe_boundary_data)

TWO_PI_CUBED = (2.0 * np.pi) ** 3


# ---------------------------------------------------------------------------
# boundary functional and Fourier estimation
# ---------------------------------------------------------------------------

def boundary_functional(trace: BoundaryTrace, probe: ProbeBoundaryData,
                        quad: SphereQuadrature) -> complex:
    """Quadrature evaluation of the pairing identity; equals <f, U> per realization."""
    if probe.dirichlet.shape != trace.dirichlet.shape:
        raise ValueError(
            f"probe traces {probe.dirichlet.shape} do not match boundary traces "
            f"{trace.dirichlet.shape} (different quadrature?)"
        )
    row = probe.stacked_functional_row(quad.weights)
    return complex(row @ trace.stacked())


def boundary_functional_batch(batch: BoundaryTraceBatch, probe: ProbeBoundaryData,
                              quad: SphereQuadrature):
    """Boundary functionals of a whole trace batch, shape (B,)."""
    row = probe.stacked_functional_row(quad.weights)
    return row @ batch.stacked()


def _product_stats(prod):
    """Mean and standard error of a complex product stream."""
    P = len(prod)
    mean = np.mean(prod)
    if P < 2:
        return mean, float("inf")
    var = (np.mean(np.abs(prod) ** 2) - abs(mean) ** 2) * P / (P - 1)
    return mean, math.sqrt(max(var, 0.0) / P)


def fourier_estimate_at(gamma, traces, probe_pair_data, quad: SphereQuadrature,
                        params: ModelParams):
    """(sigma_hat estimate, standard error) at one frequency from a trace stream.

    traces may be a BoundaryTraceBatch or an iterable of BoundaryTrace;
    probe_pair_data is the (U1, U2) boundary data of the pair for gamma.
    """
    pd1, pd2 = probe_pair_data
    if isinstance(traces, BoundaryTraceBatch):
        b1 = boundary_functional_batch(traces, pd1, quad)
        b2 = boundary_functional_batch(traces, pd2, quad)
    else:
        b1 = np.array([boundary_functional(t, pd1, quad) for t in traces])
        b2 = np.array([boundary_functional(t, pd2, quad) for t in traces])
    mean, se = _product_stats(b1 * b2)
    return mean / TWO_PI_CUBED, se / TWO_PI_CUBED


def contract_correlations(tensor: CorrelationTensor, probe_pair_data,
                          quad: SphereQuadrature) -> complex:
    """Bilinear contraction of the correlation slabs against one probe pair.

    Expands E[B1 * B2] in the stored F^alpha_{i,j}; unordered index pairs use
    the exact finite-sample transposition identities (e.g. F1_ab = F1_ba^T).
    Matches the product-averaging pathway to rounding, demonstrating that the
    correlation tensors alone determine the Fourier data.
    """
    pd1, pd2 = probe_pair_data
    n = tensor.n
    if pd1.dirichlet.shape != (n, tensor.num_nodes):
        raise ValueError("probe data does not match tensor shape")
    w = quad.weights

    def slab(alpha, a, b):
        if a <= b:
            return tensor.mean(alpha, a, b)
        swapped = {"F1": "F1", "F4": "F4", "F2": "F3", "F3": "F2"}[alpha]
        return tensor.mean(swapped, b, a).T

    total = 0.0 + 0.0j
    for a in range(n):
        A1 = w * pd1.dirichlet[n - 1 - a]
        B1 = w * pd1.neumann[n - 1 - a]
        for b in range(n):
            A2 = w * pd2.dirichlet[n - 1 - b]
            B2 = w * pd2.neumann[n - 1 - b]
            total += A1 @ slab("F4", a, b) @ A2
            total -= A1 @ slab("F2", a, b) @ B2
            total -= B1 @ slab("F3", a, b) @ A2
            total += B1 @ slab("F1", a, b) @ B2
    return complex(total)


# ---------------------------------------------------------------------------
# frequency grids, quadrature oracle, synthesis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FourierEstimate:
    """sigma_hat samples on a frequency ball with Monte Carlo error bars."""

    frequencies: np.ndarray = field(repr=False)   # (F, 3)
    values: np.ndarray = field(repr=False)        # (F,) complex
    std_errors: np.ndarray = field(repr=False)    # (F,)
    zeta: float = 0.0
    spacing: float = 0.0


def frequency_ball(zeta, spacing):
    """Cubic lattice of spacing `spacing` restricted to |gamma| <= zeta."""
    m = int(np.floor(zeta / spacing))
    axis = spacing * np.arange(-m, m + 1)
    G = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    return G[np.linalg.norm(G, axis=1) <= zeta + 1e-12]


def quadrature_fourier_transform(sigma: StrengthField, gammas):
    """Independent midpoint-quadrature oracle for sigma_hat(gamma)."""
    gammas = np.atleast_2d(gammas)
    act = sigma.active
    pts = sigma.grid.nodes[act]
    vals = sigma.values[act] * sigma.grid.cell_volume
    out = np.empty(len(gammas), dtype=np.complex128)
    for lo in range(0, len(gammas), 256):
        gs = gammas[lo:lo + 256]
        out[lo:lo + 256] = np.exp(-1j * (gs @ pts.T)) @ vals
    return out / TWO_PI_CUBED


@dataclass(frozen=True)
class ReconstructionResult:
    """Synthesized strength on evaluation points plus error diagnostics."""

    points: np.ndarray = field(repr=False)
    sigma_rec: np.ndarray = field(repr=False)     # real part of the synthesis
    imag_residual: float = 0.0                    # max |imaginary part|
    propagated_se: float = 0.0                    # rss of per-frequency errors
    error_linf: float = float("nan")              # vs ground truth, absolute
    error_l2: float = float("nan")
    config: dict = field(default_factory=dict)


def synthesize_sigma(fe: FourierEstimate, points, truth=None, config=None) -> ReconstructionResult:
    """Truncated inverse transform sigma_rec(x) = Re sum_g exp(i g.x) sigma_hat(g) dg^3."""
    if len(fe.frequencies) == 0:
        raise ValueError("empty frequency grid")
    points = np.atleast_2d(points)
    dg3 = fe.spacing**3
    rec = np.zeros(len(points), dtype=np.complex128)
    for lo in range(0, len(points), 512):
        ph = np.exp(1j * (points[lo:lo + 512] @ fe.frequencies.T))
        rec[lo:lo + 512] = ph @ fe.values * dg3
    prop = float(np.sqrt(np.sum(fe.std_errors**2))) * dg3
    err_linf = err_l2 = float("nan")
    if truth is not None:
        truth = np.asarray(truth)
        err_linf = float(np.max(np.abs(rec.real - truth)))
        err_l2 = float(np.sqrt(np.mean(np.abs(rec.real - truth) ** 2)))
    return ReconstructionResult(
        points=points, sigma_rec=rec.real, imag_residual=float(np.max(np.abs(rec.imag))),
        propagated_se=prop, error_linf=err_linf, error_l2=err_l2, config=dict(config or {}),
    )


# ---------------------------------------------------------------------------
# decay diagnostics
# ---------------------------------------------------------------------------

def decay_diagnostic(sigma: StrengthField, s_nominal=None, zeta=6.0, gamma_max=20.0,
                     n_radii=40, n_dirs=16, seed=2):
    """High-frequency behavior of sigma_hat along rays.

    Reports sup over the sampled grid of |sigma_hat|(1+|gamma|)^s, the tail
    integrals int_{|gamma|>z} |sigma_hat| d gamma on a radial grid, and the
    fitted tail constant c1 in c1 * z^(3-s).
    """
    s = sigma.profile_meta.get("s_nominal", 4.0) if s_nominal is None else s_nominal
    rng = np.random.Generator(np.random.Philox(key=seed))
    dirs = rng.standard_normal((n_dirs, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = np.linspace(0.0, gamma_max, n_radii + 1)[1:]
    gammas = (radii[:, None, None] * dirs[None, :, :]).reshape(-1, 3)
    vals = np.abs(quadrature_fourier_transform(sigma, gammas)).reshape(len(radii), n_dirs)
    shell_mean = vals.mean(axis=1)                      # spherical average per radius
    sup_weighted = float(np.max(vals * (1.0 + radii[:, None]) ** s))
    # tail integral via int_z^inf 4 pi r^2 mean|sigma_hat|(r) dr on the radial grid
    integrand = 4.0 * np.pi * radii**2 * shell_mean
    tail = {}
    for z in np.arange(1.0, zeta + 1e-9):
        mask = radii > z
        tail[float(z)] = float(np.trapezoid(integrand[mask], radii[mask])) if mask.sum() > 1 else 0.0
    tail_at_zeta = tail.get(float(zeta), 0.0)
    c1_fit = tail_at_zeta * zeta ** (s - 3.0)
    # growth trend of |sigma_hat| (1+|gamma|)^s over the upper half of the range:
    # positive slope means the field is rougher than the claimed smoothness
    upper = radii >= 0.5 * gamma_max
    weighted = shell_mean * (1.0 + radii) ** s
    pos = upper & (weighted > 0)
    slope = float(np.polyfit(np.log(radii[pos]), np.log(weighted[pos]), 1)[0]) if pos.sum() > 3 else 0.0
    return {
        "s_nominal": float(s),
        "radii": radii,
        "shell_mean": shell_mean,
        "sup_weighted": sup_weighted,
        "tail_integrals": tail,
        "zeta": float(zeta),
        "tail_at_zeta": tail_at_zeta,
        "c1_fit": float(c1_fit),
        "weighted_slope": slope,
        "decay_violation": bool(slope > 0.5),
    }


# ---------------------------------------------------------------------------
# probe tables and the stability sweep
# ---------------------------------------------------------------------------

def make_probe_factory(params: ModelParams, quad, grid, kind="plane_wave",
                       t=None, box=None, q=None, t_min=0.0, with_volume=False):
    """Callable gamma -> (U1, U2) boundary data; CGO probes share one t."""
    def factory(g):
        if kind == "plane_wave":
            pair = plane_wave_pair(g, params)
            return probe_boundary_data(pair, quad, grid, params, with_volume=with_volume)
        pair = cgo_pair(g, t, params, t_min=t_min)
        shift = pair.d1 + pair.d2
        r1 = cgo_remainder(pair.xi1, q, params, box, shift_dir=shift)
        r2 = cgo_remainder(pair.xi2, q, params, box, shift_dir=shift)
        return probe_boundary_data(pair, quad, grid, params, remainders=(r1, r2),
                                   with_volume=with_volume)
    return factory


def estimate_fourier_grid(gammas, batch: BoundaryTraceBatch, probe_factory,
                          quad: SphereQuadrature, params: ModelParams, spacing,
                          count=None, chunk=256) -> FourierEstimate:
    """sigma_hat over a frequency grid from (a prefix of) a trace batch.

    Probe functional rows are built lazily per frequency chunk and contracted
    against the stacked traces as one matrix product per chunk.
    """
    gam = np.atleast_2d(np.asarray(gammas, dtype=np.float64))
    stacked = batch.stacked()
    if count is not None:
        stacked = stacked[:, :count]
    P = stacked.shape[1]
    values = np.empty(len(gam), dtype=np.complex128)
    errs = np.empty(len(gam))
    w = quad.weights
    for lo in range(0, len(gam), chunk):
        sl = gam[lo:lo + chunk]
        rows1 = np.empty((len(sl), stacked.shape[0]), dtype=np.complex128)
        rows2 = np.empty_like(rows1)
        for idx, g in enumerate(sl):
            pd1, pd2 = probe_factory(g)
            rows1[idx] = pd1.stacked_functional_row(w)
            rows2[idx] = pd2.stacked_functional_row(w)
        prod = (rows1 @ stacked) * (rows2 @ stacked)
        mean = prod.mean(axis=1)
        var = (np.mean(np.abs(prod) ** 2, axis=1) - np.abs(mean) ** 2) * P / max(P - 1, 1)
        values[lo:lo + chunk] = mean / TWO_PI_CUBED
        errs[lo:lo + chunk] = np.sqrt(np.maximum(var, 0.0) / P) / TWO_PI_CUBED
    radii = np.linalg.norm(gam, axis=1)
    return FourierEstimate(frequencies=gam, values=values, std_errors=errs,
                           zeta=float(np.max(radii)), spacing=float(spacing))


def sweep_t_rule(M, R, tau, t_min=0.0, zeta=0.0):
    """CGO magnitude rule t = (1-tau) ln(3 + 1/M)/(4R), floored to admissibility."""
    rule = (1.0 - tau) * math.log(3.0 + 1.0 / max(M, 1e-300)) / (4.0 * R)
    return rule, max(rule, t_min, zeta / 2.0 + 0.25)


def stability_sweep(sigma: StrengthField, q, params: ModelParams, grid: VolumeGrid,
                    quad: SphereQuadrature, P_list, master_seed=0, zeta=4.0, dgamma=0.8,
                    kind="plane_wave", t=None, tau=0.5, t_min=0.0, eval_points=None,
                    truth=None, batch_size=500, apply_t_rule=False):
    """Reconstruction-vs-budget table shadowing the stability estimates.

    For each realization count P (nested prefixes of one stream): plug-in M,
    Fourier estimation over the ball, synthesis, and errors vs truth. Returns
    (rows, fits) where fits holds the log-log slopes of error against M and
    against the mean standard-error level.
    """
    P_list = list(P_list)
    if not P_list:
        raise ValueError("empty realization-count list")
    if any(p < 2 for p in P_list):
        raise ValueError("realization counts must be >= 2")
    P_max = max(P_list)
    gammas = frequency_ball(zeta, dgamma)
    if eval_points is None:
        ax = np.linspace(-0.9, 0.9, 13)
        pts = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)
        eval_points = pts[np.linalg.norm(pts, axis=1) <= 1.0]
    if truth is None:
        meta = dict(sigma.profile_meta)
        truth = profile_values(meta.pop("name"), eval_points,
                               **{k: v for k, v in meta.items() if k != "s_nominal"})
    solver = DirectSolver(sigma, q, params, grid, quad)
    batches = []
    for lo in range(0, P_max, batch_size):
        cnt = min(batch_size, P_max - lo)
        dw = sample_white_noise_batch(grid, master_seed, lo, cnt, cells=solver.src_cells)
        seeds = [(master_seed, lo + b) for b in range(cnt)]
        batches.append(solver.traces_from_increments(dw, seeds))
    full = BoundaryTraceBatch(
        dirichlet=np.concatenate([b.dirichlet for b in batches], axis=2),
        neumann=np.concatenate([b.neumann for b in batches], axis=2),
        seeds=[s for b in batches for s in b.seeds],
    )
    box = None
    if kind == "cgo":
        box = make_box(params.R)
        if t is None and not apply_t_rule:
            raise AdmissibilityError("CGO sweep needs a fixed admissible t (or apply_t_rule)")
    rows = []
    factory = None
    truth_linf = float(np.max(np.abs(truth)))
    tensor = CorrelationTensor(params.n, quad.num_nodes)
    for P in sorted(P_list):
        done = tensor.count
        for b_idx, b in enumerate(batches):
            first = b_idx * batch_size
            take = min(first + b.count, P) - max(first, done)
            if take <= 0:
                continue
            lo = max(first, done) - first
            sub = b if (lo == 0 and take == b.count) else BoundaryTraceBatch(
                dirichlet=b.dirichlet[:, :, lo:lo + take], neumann=b.neumann[:, :, lo:lo + take],
                seeds=b.seeds[lo:lo + take])
            tensor.accumulate_batch(sub)
        M = compute_M(tensor, quad).M
        t_rule = t_applied = None
        if kind == "cgo":
            t_rule, t_floored = sweep_t_rule(M, params.R, tau, t_min=t_min, zeta=zeta)
            t_applied = t if (t is not None and not apply_t_rule) else t_floored
        if factory is None or (kind == "cgo" and apply_t_rule):
            factory = make_probe_factory(params, quad, grid, kind=kind,
                                         t=t_applied, box=box, q=q, t_min=t_min)
        fe = estimate_fourier_grid(gammas, full, factory, quad, params, dgamma, count=P)
        res = synthesize_sigma(fe, eval_points, truth=truth,
                               config={"P": P, "zeta": zeta, "dgamma": dgamma, "kind": kind})
        rows.append({
            "P": P, "M": M, "error_linf": res.error_linf,
            "error_linf_rel": res.error_linf / truth_linf,
            "error_l2": res.error_l2, "mean_se": float(np.mean(fe.std_errors)),
            "imag_residual": res.imag_residual, "t_rule": t_rule, "t_applied": t_applied,
        })
    fits = {}
    if len(rows) >= 2:
        e = np.log([r["error_linf"] for r in rows])
        fits["slope_error_vs_M"] = float(np.polyfit(np.log([r["M"] for r in rows]), e, 1)[0])
        fits["slope_error_vs_se"] = float(np.polyfit(np.log([r["mean_se"] for r in rows]), e, 1)[0])
        fits["slope_error_vs_P"] = float(np.polyfit(np.log([r["P"] for r in rows]), e, 1)[0])
    return rows, fits
