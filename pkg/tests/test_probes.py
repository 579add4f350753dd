import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polywave import ModelParams, build_sphere_quadrature, make_grid, sample_potential, zero_potential
from polywave.probes import (AdmissibilityError, BoxCoverageError, FrequencyRangeError,
                             NonContractionError, apply_conjugated, cgo_pair, cgo_remainder,
                             choose_orthonormal_frame, make_box, plane_wave_pair,
                             probe_boundary_data, _potential_on_box)

from conftest import laplacian_stencil_3d

vec3 = st.lists(st.floats(-10, 10, allow_nan=False), min_size=3, max_size=3)


# ---------------------------------------------------------------------------
# frames and vector pairs
# ---------------------------------------------------------------------------

def test_frame_axis_aligned_and_degenerate():
    d1, d2 = choose_orthonormal_frame(np.array([1.0, 0, 0]))
    assert np.allclose(d1, [0, 1, 0]) and np.allclose(d2, [0, 0, 1])
    d1, d2 = choose_orthonormal_frame(np.zeros(3))
    assert np.allclose(d1, [1, 0, 0]) and np.allclose(d2, [0, 1, 0])


@given(vec3)
@settings(max_examples=60, deadline=None)
def test_frame_orthonormal(g):
    gamma = np.asarray(g)
    d1, d2 = choose_orthonormal_frame(gamma)
    assert abs(d1 @ gamma) <= 1e-14 * max(1.0, np.linalg.norm(gamma))
    assert abs(d2 @ gamma) <= 1e-13 * max(1.0, np.linalg.norm(gamma))
    assert abs(d1 @ d2) <= 1e-14
    assert np.linalg.norm(d1) == pytest.approx(1.0, abs=1e-14)
    assert np.linalg.norm(d2) == pytest.approx(1.0, abs=1e-14)


def test_plane_wave_pair_closed_form():
    p = ModelParams(n=1, k=1.0, R=2.0)
    pair = plane_wave_pair([1.0, 0, 0], p, d=[0.0, 0, 1.0])
    assert np.allclose(pair.xi1, [-0.5, 0, np.sqrt(3) / 2])
    assert np.allclose(pair.xi2, [-0.5, 0, -np.sqrt(3) / 2])
    pair0 = plane_wave_pair([0.0, 0, 0], p)
    assert np.allclose(pair0.xi1, -pair0.xi2)
    assert np.linalg.norm(pair0.xi1) == pytest.approx(1.0)
    with pytest.raises(FrequencyRangeError):
        plane_wave_pair([2.0, 0, 0], p)  # |gamma| = 2k


def test_cgo_pair_closed_form():
    p = ModelParams(n=1, k=1.0, R=2.0)
    pair = cgo_pair([1.0, 0, 0], 2.0, p, frame=([0.0, 1, 0], [0.0, 0, 1]))
    assert np.allclose(pair.xi1, [-0.5, 2.0j, np.sqrt(3.75)])
    assert np.allclose(pair.xi1 + pair.xi2, [-1.0, 0, 0])
    assert abs(pair.xi1 @ pair.xi1) < 1e-14
    with pytest.raises(AdmissibilityError):
        cgo_pair([1.0, 0, 0], 0.4, p)
    with pytest.raises(AdmissibilityError):
        cgo_pair([0.0, 0, 0], 1.0, p, t_min=2.0)


@given(vec3, st.floats(0.1, 20.0))
@settings(max_examples=60, deadline=None)
def test_pair_invariants_randomized(g, t_extra):
    gamma = np.asarray(g)
    p = ModelParams(n=2, k=1.0 + np.linalg.norm(gamma), R=2.0)  # ensures |gamma| < 2k
    pw = plane_wave_pair(gamma, p)
    assert np.max(np.abs(pw.xi1 + pw.xi2 + gamma)) <= 1e-12 * max(1, np.linalg.norm(gamma))
    for xi in (pw.xi1, pw.xi2):
        assert abs(xi @ xi - p.k**2) <= 1e-10 * p.k**2
    t = np.linalg.norm(gamma) / 2 + t_extra
    cg = cgo_pair(gamma, t, p)
    assert np.max(np.abs(cg.xi1 + cg.xi2 + gamma)) <= 1e-10 * max(1, t)
    for xi in (cg.xi1, cg.xi2):
        assert abs(xi @ xi) <= 1e-9 * t**2
        assert np.linalg.norm(xi.imag) == pytest.approx(t, rel=1e-13)


# ---------------------------------------------------------------------------
# remainder solves
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def box_r2():
    return make_box(2.0, M=64)


def test_remainder_zero_forcing_limit(box_r2):
    # k -> 0 with q = 0 leaves no right-hand side: v = 0
    p = ModelParams(n=1, k=1e-9, R=2.0)
    grid = make_grid(1.0, 8)
    pair = cgo_pair([0.0, 0, 0], 4.0, p)
    rem = cgo_remainder(pair.xi1, zero_potential(grid), p, box_r2, shift_dir=pair.d1 + pair.d2)
    assert rem.norm_in_ball(4.0) <= 1e-12


def test_remainder_operator_identity(box_r2):
    # n = 1, q = 0: the solve satisfies (-Delta - 2i xi.grad) v = k^2 (1 + v) spectrally
    p = ModelParams(n=1, k=2.0, R=2.0)
    grid = make_grid(1.0, 8)
    pair = cgo_pair([0.0, 0, 0], 8.0, p)
    rem = cgo_remainder(pair.xi1, zero_potential(grid), p, box_r2, shift_dir=pair.d1 + pair.d2)
    lhs = apply_conjugated(rem.v, pair.xi1, 1, box_r2, rem.lattice_shift)
    rhs = p.k**2 * (1.0 + rem.v)
    assert np.linalg.norm(lhs - rhs) <= 1e-8 * np.linalg.norm(rhs)


def test_remainder_conjugated_residual_with_potential(box_r2):
    p = ModelParams(n=2, k=2.0, R=2.0)
    grid = make_grid(1.0, 12)
    q = sample_potential("smooth_bump", grid, amplitude=0.5, radius=0.8)
    pair = cgo_pair([0.5, -0.3, 0.8], 4.0, p)
    rem = cgo_remainder(pair.xi1, q, p, box_r2, shift_dir=pair.d1 + pair.d2)
    qbox = _potential_on_box(q, box_r2)
    lhs = apply_conjugated(rem.v, pair.xi1, p.n, box_r2, rem.lattice_shift, include_k=p.k2n)
    rhs = (p.k2n - qbox) - qbox * rem.v
    assert np.linalg.norm(lhs - rhs) <= 1e-8 * np.linalg.norm(rhs)


def test_remainder_decay_with_t(box_r2):
    # light two-point check of the t^-n law (full regression in acceptance)
    grid = make_grid(1.0, 12)
    q = sample_potential("smooth_bump", grid, amplitude=0.5, radius=0.8)
    p = ModelParams(n=1, k=2.0, R=2.0)
    norms = []
    for t in (8.0, 16.0):
        pair = cgo_pair([0.0, 0, 0], t, p)
        rem = cgo_remainder(pair.xi1, q, p, box_r2, shift_dir=pair.d1 + pair.d2)
        norms.append(rem.norm_in_ball(4.0))
    slope = np.log(norms[1] / norms[0]) / np.log(2.0)
    assert -1.6 <= slope <= -0.5


def test_remainder_non_contraction_error(box_r2):
    # overwhelming potential at tiny t cannot contract; diagnostic error reports the ratio
    p = ModelParams(n=2, k=2.0, R=2.0)
    grid = make_grid(1.0, 12)
    q = sample_potential("smooth_bump", grid, amplitude=300.0, radius=0.8)
    pair = cgo_pair([0.0, 0, 0], 1.0, p)
    with pytest.raises(NonContractionError) as exc:
        cgo_remainder(pair.xi1, q, p, box_r2, shift_dir=pair.d1 + pair.d2, max_iter=60)
    assert exc.value.ratio is None or exc.value.ratio > 1.0


def test_remainder_rejects_nonisotropic_xi(box_r2):
    p = ModelParams(n=1, k=2.0, R=2.0)
    grid = make_grid(1.0, 8)
    with pytest.raises(ValueError, match="xi.xi"):
        cgo_remainder(np.array([1.0, 2.0j, 0.5]), zero_potential(grid), p, box_r2)


# ---------------------------------------------------------------------------
# probe boundary data
# ---------------------------------------------------------------------------

def test_plane_wave_probe_data(params_n2_k4):
    quad = build_sphere_quadrature(2.0, 8, 8)
    grid = make_grid(1.0, 8)
    pair = plane_wave_pair([1.0, 0, 0], params_n2_k4, d=[0.0, 0, 1.0])
    pd1, pd2 = probe_boundary_data(pair, quad, grid, params_n2_k4)
    phase = np.exp(1j * quad.nodes @ pair.xi1)
    assert np.allclose(pd1.dirichlet[0], phase)
    assert np.allclose(pd1.dirichlet[1], -params_n2_k4.k**2 * phase)
    assert np.allclose(pd1.neumann[0], 1j * (quad.normals @ pair.xi1) * phase)
    # product structure: U1 U2 = exp(-i gamma x) at the volume nodes
    prod = pd1.volume_samples * pd2.volume_samples
    assert np.max(np.abs(prod - np.exp(-1j * grid.nodes @ pair.gamma))) < 1e-13


def test_cgo_probe_data_against_fd(box_r2):
    # Delta^m U from the spectral pipeline vs 6th-order FD of assembled U on the box grid
    p = ModelParams(n=2, k=2.0, R=2.0)
    grid = make_grid(1.0, 8)
    quad = build_sphere_quadrature(2.0, 8, 8)
    q = sample_potential("smooth_bump", grid, amplitude=0.5, radius=0.8)
    pair = cgo_pair([0.8, 0.2, -0.5], 2.5, p)
    shift = pair.d1 + pair.d2
    r1 = cgo_remainder(pair.xi1, q, p, box_r2, shift_dir=shift)
    r2 = cgo_remainder(pair.xi2, q, p, box_r2, shift_dir=shift)
    pd1, _ = probe_boundary_data(pair, quad, grid, p, remainders=(r1, r2))

    M, h = box_r2.M, box_r2.h
    X, Y, Z = np.meshgrid(box_r2.axis, box_r2.axis, box_r2.axis, indexing="ij")
    U = np.exp(1j * (X * pair.xi1[0] + Y * pair.xi1[1] + Z * pair.xi1[2])) * (1.0 + r1.v)
    st = laplacian_stencil_3d(6)
    lap = np.zeros_like(U)
    for (ox, oy, oz), c in st.items():
        lap += float(c) * np.roll(U, (-ox, -oy, -oz), axis=(0, 1, 2))
    lap /= h**2
    # spectral Delta U on the grid via the same machinery used for the traces
    from polywave.probes import _ShiftedLattice, _eval_shifted_fields_grid
    lat = _ShiftedLattice(box_r2, r1.lattice_shift / (np.pi / box_r2.L))
    vhat = lat.to_coeffs(r1.v)
    pm = lat.symbol_quadratic(pair.xi1)
    w1 = _eval_shifted_fields_grid(((-pm) * vhat)[None], lat, box_r2.axis)[0]
    phase = np.exp(1j * (X * pair.xi1[0] + Y * pair.xi1[1] + Z * pair.xi1[2]))
    spectral = phase * w1
    interior = (np.abs(X) < 3.5) & (np.abs(Y) < 3.5) & (np.abs(Z) < 3.5)
    scale = np.max(np.abs(spectral[interior]))
    assert np.max(np.abs((lap - spectral)[interior])) <= 1e-4 * scale


def test_cgo_pde_residual_interior(box_r2):
    # assembled U satisfies ((-Delta)^n - k^2n + q) U ~ 0 relative to k^2n |U|
    p = ModelParams(n=2, k=2.0, R=2.0)
    grid = make_grid(1.0, 8)
    q = sample_potential("smooth_bump", grid, amplitude=0.5, radius=0.8)
    pair = cgo_pair([0.0, 0.0, 0.0], 3.0, p)
    shift = pair.d1 + pair.d2
    rem = cgo_remainder(pair.xi1, q, p, box_r2, shift_dir=shift)
    qbox = _potential_on_box(q, box_r2)
    conj_resid = (apply_conjugated(rem.v, pair.xi1, p.n, box_r2, rem.lattice_shift,
                                   include_k=p.k2n)
                  - ((p.k2n - qbox) - qbox * rem.v))
    # residual of the original equation relative to k^2n |U|, phase factored out
    rel = np.abs(conj_resid) / (p.k2n * np.abs(1.0 + rem.v))
    r = np.linalg.norm(box_r2.nodes(), axis=-1).reshape(rem.v.shape)
    assert np.max(rel[r <= 4.0]) <= 1e-4


def test_cgo_product_remainder_bound(box_r2):
    # ||p||_L1(B1) <= ||v1|| + ||v2|| + ||v1|| ||v2|| (L2 norms on B1, Cauchy-Schwarz)
    p = ModelParams(n=1, k=2.0, R=2.0)
    grid = make_grid(1.0, 10)
    q = sample_potential("smooth_bump", grid, amplitude=0.5, radius=0.8)
    pair = cgo_pair([0.5, 0, 0], 6.0, p)
    shift = pair.d1 + pair.d2
    r1 = cgo_remainder(pair.xi1, q, p, box_r2, shift_dir=shift)
    r2 = cgo_remainder(pair.xi2, q, p, box_r2, shift_dir=shift)
    pd1, pd2 = probe_boundary_data(pair, quad=build_sphere_quadrature(2.0, 6, 6),
                                   grid=grid, params=p, remainders=(r1, r2))
    prod = pd1.volume_samples * pd2.volume_samples
    p_rem = prod / np.exp(-1j * grid.nodes @ pair.gamma) - 1.0
    vol = grid.cell_volume
    inside = np.linalg.norm(grid.nodes, axis=1) < 1.0
    l1 = np.sum(np.abs(p_rem[inside])) * vol
    n1 = r1.norm_in_ball(1.0)
    n2 = r2.norm_in_ball(1.0)
    vol_b1 = 4.0 / 3.0 * np.pi
    # Cauchy-Schwarz on B1: ||v||_L1 <= sqrt(|B1|) ||v||_L2
    bound = np.sqrt(vol_b1) * (n1 + n2) + n1 * n2
    assert l1 <= bound * 1.05


def test_box_coverage_error(box_r2, params_n2_k4):
    p = ModelParams(n=1, k=2.0, R=4.9)  # nodes at 4.9 vs box interior up to ~4.7
    quad = build_sphere_quadrature(p.R, 6, 6)
    grid = make_grid(1.0, 8)
    q = zero_potential(grid)
    pair = cgo_pair([0.0, 0, 0], 2.0, p)
    shift = pair.d1 + pair.d2
    r1 = cgo_remainder(pair.xi1, q, p, box_r2, shift_dir=shift)
    r2 = cgo_remainder(pair.xi2, q, p, box_r2, shift_dir=shift)
    with pytest.raises(BoxCoverageError):
        probe_boundary_data(pair, quad, grid, p, remainders=(r1, r2))


def test_conditioning_guard(box_r2):
    p = ModelParams(n=1, k=2.0, R=2.0)
    grid = make_grid(1.0, 8)
    quad = build_sphere_quadrature(2.0, 6, 6)
    pair = cgo_pair([0.0, 0, 0], 12.0, p)  # exp(2Rt) = exp(48) > 1e14
    with pytest.raises(AdmissibilityError, match="conditioning"):
        probe_boundary_data(pair, quad, grid, p, remainders=("x", "y"))
