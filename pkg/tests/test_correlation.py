import numpy as np
import pytest

from polywave import (ModelParams, build_sphere_quadrature, make_grid, sample_strength,
                      sample_white_noise, zero_potential)
from polywave.correlation import (CorrelationTensor, compute_M, index_pairs, load_checkpoint,
                                  save_checkpoint)
from polywave.direct import BoundaryTrace, BoundaryTraceBatch, DirectSolver
from polywave.fields import sample_white_noise_batch
from polywave.kernel import poly_green


def _trace(D, Nm, seed=(0, 0)):
    return BoundaryTrace(dirichlet=np.atleast_2d(D).astype(complex),
                         neumann=np.atleast_2d(Nm).astype(complex), realization_seed=seed)


def _batch_from(traces):
    return BoundaryTraceBatch(
        dirichlet=np.stack([t.dirichlet for t in traces], axis=-1),
        neumann=np.stack([t.neumann for t in traces], axis=-1),
        seeds=[t.realization_seed for t in traces])


def test_sigma_index_set():
    assert index_pairs(1) == [(0, 0)]
    assert index_pairs(2) == [(0, 0), (0, 1), (1, 1)]
    assert index_pairs(3) == [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]
    t = CorrelationTensor(1, 4)
    assert len(t._acc) == 4  # n = 1: exactly four slabs


def test_accumulate_ones_and_cancellation():
    t = CorrelationTensor(1, 3)
    t.accumulate(_trace(np.ones(3), np.zeros(3)))
    assert np.allclose(t.mean("F1", 0, 0), 1.0)
    assert np.allclose(t.mean("F2", 0, 0), 0.0)
    # the estimator averages plain (unconjugated) products, so a trace and its
    # i-rotation cancel: (i z)(i w) = -z w; plain negation would double instead
    t2 = CorrelationTensor(1, 3)
    tr = _trace(np.arange(1, 4), np.arange(3, 0, -1))
    t2.accumulate(tr)
    t2.accumulate(_trace(1j * tr.dirichlet[0], 1j * tr.neumann[0]))
    for a in ("F1", "F2", "F3", "F4"):
        assert np.allclose(t2.mean(a, 0, 0), 0.0)
    t3 = CorrelationTensor(1, 3)
    t3.accumulate(tr)
    t3.accumulate(_trace(-tr.dirichlet[0], -tr.neumann[0]))
    assert np.allclose(t3.mean("F1", 0, 0), np.outer(tr.dirichlet[0], tr.dirichlet[0]))


def test_shape_mismatch_and_empty_errors():
    t = CorrelationTensor(1, 3)
    with pytest.raises(ValueError):
        t.accumulate(_trace(np.ones(4), np.ones(4)))
    with pytest.raises(ValueError):
        t.mean("F1", 0, 0)
    with pytest.raises(ValueError):
        compute_M(t, build_sphere_quadrature(2.0, 2, 2))


def test_estimator_symmetry_exact():
    rng = np.random.default_rng(1)
    t = CorrelationTensor(2, 5)
    for i in range(7):
        D = rng.standard_normal((2, 5)) + 1j * rng.standard_normal((2, 5))
        Nm = rng.standard_normal((2, 5)) + 1j * rng.standard_normal((2, 5))
        t.accumulate(BoundaryTrace(dirichlet=D, neumann=Nm, realization_seed=(0, i)))
    for i in (0, 1):
        F = t.mean("F1", i, i)
        assert np.array_equal(F, F.T)


def test_batch_matches_streaming_and_order_independence():
    rng = np.random.default_rng(2)
    traces = [_trace(rng.standard_normal(4) + 1j * rng.standard_normal(4),
                     rng.standard_normal(4), seed=(0, i)) for i in range(20)]
    one = CorrelationTensor(1, 4)
    for tr in traces:
        one.accumulate(tr)
    batched = CorrelationTensor(1, 4).accumulate_batch(_batch_from(traces))
    shuffled = CorrelationTensor(1, 4)
    for tr in reversed(traces):
        shuffled.accumulate(tr)
    for a in ("F1", "F2", "F3", "F4"):
        ref = one.mean(a, 0, 0)
        scale = np.max(np.abs(ref))
        assert np.max(np.abs(batched.mean(a, 0, 0) - ref)) <= 1e-12 * scale
        assert np.max(np.abs(shuffled.mean(a, 0, 0) - ref)) <= 1e-12 * scale
    # identical batching order reproduces bit-identically
    again = CorrelationTensor(1, 4).accumulate_batch(_batch_from(traces))
    assert np.array_equal(again.mean("F1", 0, 0), batched.mean("F1", 0, 0))


def test_merge_associative():
    rng = np.random.default_rng(3)
    traces = [_trace(rng.standard_normal(3), rng.standard_normal(3), seed=(0, i))
              for i in range(30)]
    whole = CorrelationTensor(1, 3)
    for tr in traces:
        whole.accumulate(tr)
    parts = []
    for lo in (0, 10, 20):
        shard = CorrelationTensor(1, 3)
        for tr in traces[lo:lo + 10]:
            shard.accumulate(tr)
        parts.append(shard)
    merged = parts[0].merge(parts[1]).merge(parts[2])
    assert merged.count == 30
    ref = whole.mean("F1", 0, 0)
    assert np.max(np.abs(merged.mean("F1", 0, 0) - ref)) <= 1e-12 * np.max(np.abs(ref))
    with pytest.raises(ValueError):
        parts[0].merge(CorrelationTensor(1, 4))


def test_standard_error_trivials_and_coverage():
    t = CorrelationTensor(1, 3)
    tr = _trace(np.arange(1.0, 4.0), np.zeros(3))
    t.accumulate(tr)
    with pytest.raises(ValueError):
        t.standard_error("F1", 0, 0)
    for _ in range(9):
        t.accumulate(tr)
    assert np.allclose(t.standard_error("F1", 0, 0), 0.0, atol=1e-13)
    # coverage: gaussian entries with truth 0, ~95% within 2 SE
    rng = np.random.default_rng(4)
    t2 = CorrelationTensor(1, 8)
    P = 400
    for i in range(P):
        t2.accumulate(_trace(rng.standard_normal(8), rng.standard_normal(8), seed=(0, i)))
    m = t2.mean("F1", 0, 0)
    se = t2.standard_error("F1", 0, 0)
    cover = np.mean(np.abs(m) <= 2 * se)
    assert 0.88 <= cover <= 0.995


def test_se_decay_rate():
    # mean entrywise SE ~ P^(-1/2): regression slope within -0.5 +- 0.1
    rng = np.random.default_rng(5)
    levels, means = [100, 1000, 10000], []
    for P in levels:
        t = CorrelationTensor(1, 2)
        D = rng.standard_normal((2, P)) + 1j * rng.standard_normal((2, P))
        Nm = rng.standard_normal((2, P))
        batch = BoundaryTraceBatch(dirichlet=D[None, :, :] * np.ones((1, 1, 1)),
                                   neumann=Nm[None, :, :] * np.ones((1, 1, 1)),
                                   seeds=[(0, i) for i in range(P)])
        t.accumulate_batch(batch)
        means.append(np.mean(t.standard_error("F1", 0, 0)))
    slope = np.polyfit(np.log(levels), np.log(means), 1)[0]
    assert -0.6 <= slope <= -0.4


def test_correlation_matches_quadrature_oracle(grid16, bump16):
    # E[u(x) u(y)] = sum_c sigma_c G(x,c) G(y,c) vol for q = 0, n = 1
    par = ModelParams(n=1, k=4.0, R=2.0)
    quad = build_sphere_quadrature(2.0, 8, 8)
    ds = DirectSolver(bump16, zero_potential(grid16), par, grid16, quad)
    tensor = CorrelationTensor(1, quad.num_nodes)
    for lo in range(0, 4000, 1000):
        dw = sample_white_noise_batch(grid16, 11, lo, 1000, cells=ds.src_cells)
        tensor.accumulate_batch(ds.traces_from_increments(dw, [(11, lo + b) for b in range(1000)]))
    F = tensor.mean("F1", 0, 0)
    SE = tensor.standard_error("F1", 0, 0)
    src = grid16.nodes[ds.src_cells]
    svals = bump16.values[ds.src_cells]
    rng = np.random.default_rng(0)
    for _ in range(10):
        p, q = rng.integers(0, quad.num_nodes, 2)
        gx = poly_green(np.broadcast_to(quad.nodes[p], src.shape), src, par)
        gy = poly_green(np.broadcast_to(quad.nodes[q], src.shape), src, par)
        want = np.sum(svals * gx * gy) * grid16.cell_volume
        assert abs(F[p, q] - want) <= 5 * SE[p, q]


def test_compute_M_constant_slab():
    quad = build_sphere_quadrature(2.0, 8, 8)
    t = CorrelationTensor(1, quad.num_nodes)
    t.accumulate(_trace(np.ones(quad.num_nodes), np.zeros(quad.num_nodes)))
    stat = compute_M(t, quad)
    area = 4 * np.pi * quad.R**2
    assert stat.M == pytest.approx(area, rel=1e-12)
    assert stat.norms[("F2", 0, 0)] == 0.0
    zero = CorrelationTensor(1, quad.num_nodes)
    zero.accumulate(_trace(np.zeros(quad.num_nodes), np.zeros(quad.num_nodes)))
    assert compute_M(zero, quad).M == 0.0


def test_M_scales_linearly_in_sigma(grid16, quad16):
    # scaling sigma by lambda scales E[uu]-type data by lambda (paired seeds)
    par = ModelParams(n=1, k=4.0, R=2.0)
    lam = 2.7
    quad = build_sphere_quadrature(2.0, 6, 6)
    Ms = []
    for amp in (1.0, lam):
        sig = sample_strength("smooth_bump", grid16, amplitude=amp, radius=0.8)
        ds = DirectSolver(sig, zero_potential(grid16), par, grid16, quad)
        dw = sample_white_noise_batch(grid16, 7, 0, 200, cells=ds.src_cells)
        tensor = CorrelationTensor(1, quad.num_nodes)
        tensor.accumulate_batch(ds.traces_from_increments(dw, [(7, i) for i in range(200)]))
        Ms.append(compute_M(tensor, quad).M)
    assert Ms[1] / Ms[0] == pytest.approx(lam, rel=1e-10)


def test_checkpoint_roundtrip_and_resume(tmp_path):
    rng = np.random.default_rng(6)
    traces = [_trace(rng.standard_normal(3) + 1j * rng.standard_normal(3),
                     rng.standard_normal(3), seed=(0, i)) for i in range(12)]
    t = CorrelationTensor(1, 3)
    for tr in traces[:8]:
        t.accumulate(tr)
    path = tmp_path / "tensor.ckpt"
    save_checkpoint(t, path, params_hash="abc123")
    loaded, h = load_checkpoint(path)
    assert h == "abc123" and loaded.count == 8
    assert np.array_equal(loaded.mean("F1", 0, 0), t.mean("F1", 0, 0))
    # resume accumulation on the loaded tensor
    for tr in traces[8:]:
        t.accumulate(tr)
        loaded.accumulate(tr)
    assert np.array_equal(loaded.mean("F4", 0, 0), t.mean("F4", 0, 0))
    raw = bytearray(path.read_bytes())
    raw[150] ^= 0x1
    (tmp_path / "bad.ckpt").write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="checksum"):
        load_checkpoint(tmp_path / "bad.ckpt")
