"""Config-driven experiment runner.

Subcommands: direct (trace archives), reconstruct (Fourier estimates and
synthesized strength), sweep (stability tables), selftest (fast invariant
suite). Every run writes a manifest with the config hash, stage timings,
warnings, and a checksum of each output file, so results are quotable by
hash. Exit codes: 0 ok, 2 config error, 3 numerical failure.
"""

import argparse
import copy
import csv
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__
from .correlation import CorrelationTensor, compute_M
from .direct import (BoundaryTraceBatch, DirectSolver, SolverDivergenceError,
                     build_sphere_quadrature, radiation_residual, read_trace_archive,
                     write_trace_archive)
from .fields import (export_field_binary, make_grid, sample_potential, sample_strength,
                     sample_white_noise, sample_white_noise_batch, zero_potential)
from .kernel import ModelParams
from .probes import NonContractionError, make_box
from .recon import (estimate_fourier_grid, frequency_ball, make_probe_factory,
                    quadrature_fourier_transform, stability_sweep, synthesize_sigma)

DEFAULT_CONFIG = {
    "model": {"n": 2, "k": 4.0, "R": 2.0},
    "grid": {"extent": 1.0, "N": 24},
    "quadrature": {"n_theta": 24, "n_phi": 24},
    "source": {"profile": "smooth_bump", "amplitude": 1.0, "radius": 0.8},
    "potential": {"profile": "none", "amplitude": 0.0, "radius": 0.8},
    "monte_carlo": {"P": 1000, "master_seed": 12345, "reproducible": True,
                    "batch_size": 500},
    "probes": {"kind": "plane_wave", "zeta": 4.0, "dgamma": 0.8, "t": 4.0,
               "tau": 0.5, "t_min": 0.0},
    "sweep": {"P_list": [100, 1000]},
    "outputs": {"directory": "runs", "formats": ["csv", "json"]},
}


class ConfigError(ValueError):
    pass


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, val in (override or {}).items():
        if key not in out:
            raise ConfigError(f"unknown config section or key: {key!r}")
        if isinstance(out[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config section {key!r} must be a table")
            for k2, v2 in val.items():
                if k2 not in out[key]:
                    raise ConfigError(f"unknown config key: {key}.{k2}")
                out[key][k2] = v2
        else:
            out[key] = val
    return out


def config_hash(cfg):
    """sha256 of the canonical (key-sorted) JSON; stable under field reordering."""
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


class ExperimentConfig:
    """Validated experiment configuration; builds the model objects on demand."""

    def __init__(self, data=None):
        self.data = _merge(DEFAULT_CONFIG, data or {})
        try:
            self.params = ModelParams(n=int(self.data["model"]["n"]),
                                      k=float(self.data["model"]["k"]),
                                      R=float(self.data["model"]["R"]))
            self.grid = make_grid(self.data["grid"]["extent"], self.data["grid"]["N"])
            self.quad = build_sphere_quadrature(self.params.R,
                                                self.data["quadrature"]["n_theta"],
                                                self.data["quadrature"]["n_phi"])
            src = dict(self.data["source"])
            self.sigma = sample_strength(src.pop("profile"), self.grid, **src)
            pot = dict(self.data["potential"])
            prof = pot.pop("profile")
            if prof in (None, "none") or pot.get("amplitude", 0.0) == 0.0:
                self.potential = zero_potential(self.grid)
            else:
                self.potential = sample_potential(prof, self.grid, **pot)
            mc = self.data["monte_carlo"]
            if int(mc["P"]) < 1:
                raise ValueError(f"monte_carlo.P must be >= 1, got {mc['P']}")
            pr = self.data["probes"]
            if pr["kind"] not in ("plane_wave", "cgo"):
                raise ValueError(f"unknown probe kind {pr['kind']!r}")
            if pr["kind"] == "plane_wave" and pr["zeta"] >= 2 * self.params.k:
                raise ValueError(
                    f"probes.zeta = {pr['zeta']} must be < 2k = {2 * self.params.k} for plane waves"
                )
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def hash(self):
        return config_hash(self.data)

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                return cls(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc


class RunManifest:
    """Per-run record: config hash, code version, timings, warnings, file checksums."""

    def __init__(self, cfg: ExperimentConfig, out_dir):
        self.data = {"config_hash": cfg.hash, "version": __version__, "config": cfg.data,
                     "timings": {}, "warnings": [], "files": {}}
        self.out_dir = out_dir
        self._t0 = {}

    def start(self, stage):
        self._t0[stage] = time.perf_counter()

    def stop(self, stage):
        self.data["timings"][stage] = round(time.perf_counter() - self._t0[stage], 3)

    def warn(self, message):
        self.data["warnings"].append(message)

    def add_file(self, path):
        with open(path, "rb") as fh:
            digest = hashlib.sha256(fh.read()).hexdigest()
        self.data["files"][os.path.basename(path)] = digest

    def write(self):
        path = os.path.join(self.out_dir, "manifest.json")
        with open(path, "w") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)
        return path


def _num_threads(args):
    if getattr(args, "threads", None):
        return max(1, args.threads)
    return max(1, int(os.environ.get("POLYWAVE_THREADS", "1")))


def _generate_traces(cfg: ExperimentConfig, manifest, threads=1):
    mc = cfg.data["monte_carlo"]
    P, seed, bs = int(mc["P"]), int(mc["master_seed"]), int(mc["batch_size"])
    solver = DirectSolver(cfg.sigma, cfg.potential, cfg.params, cfg.grid, cfg.quad)
    starts = list(range(0, P, bs))

    def run(start):
        cnt = min(bs, P - start)
        dw = sample_white_noise_batch(cfg.grid, seed, start, cnt, cells=solver.src_cells)
        seeds = [(seed, start + b) for b in range(cnt)]
        return solver.traces_from_increments(dw, seeds)

    if threads > 1 and not mc["reproducible"]:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            batches = list(pool.map(run, starts))
    else:
        # deterministic sequential order under the reproducible flag
        batches = [run(s) for s in starts]
    return solver, BoundaryTraceBatch(
        dirichlet=np.concatenate([b.dirichlet for b in batches], axis=2),
        neumann=np.concatenate([b.neumann for b in batches], axis=2),
        seeds=[s for b in batches for s in b.seeds],
    )


def cmd_direct(cfg: ExperimentConfig, out_dir, threads=1):
    """Solve P realizations, archive the traces, and report the radiation residual."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = RunManifest(cfg, out_dir)
    manifest.start("direct")
    solver, batch = _generate_traces(cfg, manifest, threads)
    manifest.stop("direct")
    archive = os.path.join(out_dir, "traces.bin")
    write_trace_archive(archive, batch, meta={"config_hash": cfg.hash})
    manifest.add_file(archive)
    # radiation residual for the first realization
    mc = cfg.data["monte_carlo"]
    noise = sample_white_noise(cfg.grid, int(mc["master_seed"]), 0)
    rad = radiation_residual(cfg.sigma, noise, cfg.params, cfg.grid)
    rad_path = os.path.join(out_dir, "radiation.json")
    with open(rad_path, "w") as fh:
        json.dump({f"{r:g}": v for r, v in rad.items()}, fh, indent=2)
    manifest.add_file(rad_path)
    radii = sorted(rad)
    if rad[radii[0]] > 0 and rad[radii[-1]] > rad[radii[0]]:
        manifest.warn("radiation residual did not decrease with radius")
    return manifest.write()


def cmd_reconstruct(cfg: ExperimentConfig, out_dir, archive=None, threads=1):
    """Estimate sigma_hat on the frequency ball and synthesize sigma."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = RunManifest(cfg, out_dir)
    if archive is not None:
        if not os.path.exists(archive):
            raise ConfigError(f"trace archive not found: {archive}")
        batch, meta = read_trace_archive(archive)
        if batch.dirichlet.shape[:2] != (cfg.params.n, cfg.quad.num_nodes):
            raise ConfigError("trace archive does not match the configured model/quadrature")
    else:
        manifest.start("direct")
        _, batch = _generate_traces(cfg, manifest, threads)
        manifest.stop("direct")
    pr = cfg.data["probes"]
    gammas = frequency_ball(pr["zeta"], pr["dgamma"])
    box = make_box(cfg.params.R) if pr["kind"] == "cgo" else None
    factory = make_probe_factory(cfg.params, cfg.quad, cfg.grid, kind=pr["kind"],
                                 t=pr["t"], box=box, q=cfg.potential, t_min=pr["t_min"])
    manifest.start("fourier")
    fe = estimate_fourier_grid(gammas, batch, factory, cfg.quad, cfg.params,
                               pr["dgamma"])
    manifest.stop("fourier")
    csv_path = os.path.join(out_dir, "sigma_hat.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["gamma_x", "gamma_y", "gamma_z", "re", "im", "se"])
        for g, v, se in zip(fe.frequencies, fe.values, fe.std_errors):
            writer.writerow([f"{g[0]:.9g}", f"{g[1]:.9g}", f"{g[2]:.9g}",
                             f"{v.real:.12g}", f"{v.imag:.12g}", f"{se:.6g}"])
    manifest.add_file(csv_path)
    manifest.start("synthesis")
    pts = cfg.grid.nodes
    truth = cfg.sigma.values
    res = synthesize_sigma(fe, pts, truth=truth, config={"hash": cfg.hash})
    manifest.stop("synthesis")
    field_path = os.path.join(out_dir, "sigma_rec.bin")
    export_field_binary(res.sigma_rec, cfg.grid, field_path)
    manifest.add_file(field_path)
    summary = {
        "error_linf": res.error_linf, "error_l2": res.error_l2,
        "error_linf_rel": res.error_linf / max(np.max(np.abs(truth)), 1e-300),
        "imag_residual": res.imag_residual, "propagated_se": res.propagated_se,
        "frequencies": len(gammas),
    }
    sum_path = os.path.join(out_dir, "summary.json")
    with open(sum_path, "w") as fh:
        json.dump(summary, fh, indent=2)
    manifest.add_file(sum_path)
    return manifest.write()


def cmd_sweep(cfg: ExperimentConfig, out_dir, threads=1):
    """Run the stability sweep over the configured realization counts."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = RunManifest(cfg, out_dir)
    sw = cfg.data["sweep"]
    pr = cfg.data["probes"]
    if not sw["P_list"]:
        raise ConfigError("sweep.P_list is empty")
    manifest.start("sweep")
    rows, fits = stability_sweep(
        cfg.sigma, cfg.potential, cfg.params, cfg.grid, cfg.quad, sw["P_list"],
        master_seed=int(cfg.data["monte_carlo"]["master_seed"]),
        zeta=pr["zeta"], dgamma=pr["dgamma"], kind=pr["kind"], t=pr["t"],
        tau=pr["tau"], t_min=pr["t_min"],
        batch_size=int(cfg.data["monte_carlo"]["batch_size"]),
    )
    manifest.stop("sweep")
    csv_path = os.path.join(out_dir, "sweep.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        cols = ["P", "M", "error_linf", "error_linf_rel", "error_l2", "mean_se",
                "imag_residual", "t_rule", "t_applied"]
        writer.writerow(cols)
        for r in rows:
            writer.writerow([r[c] if r[c] is not None else "" for c in cols])
    manifest.add_file(csv_path)
    fit_path = os.path.join(out_dir, "fits.json")
    with open(fit_path, "w") as fh:
        json.dump(fits, fh, indent=2)
    manifest.add_file(fit_path)
    return manifest.write()


# ---------------------------------------------------------------------------
# selftest
# ---------------------------------------------------------------------------

def _selftest_checks(flip_kernel_sign=False):
    """Yield (name, measured, tolerance, passed) for the fast invariant suite."""
    from .kernel import helmholtz_green, poly_green, split_roots as _roots
    from .direct import VolumeConvolver, apply_Kk, apply_Kk_direct
    from .probes import cgo_pair, plane_wave_pair

    rng = np.random.default_rng(99)

    p2 = ModelParams(n=2, k=3.0, R=2.0)
    roots = _roots(p2).roots
    val = float(np.max(np.abs(roots ** (2 * p2.n) - p2.k ** (2 * p2.n))))
    yield ("root-power identity kappa_j^2n = k^2n", val, 1e-9, val <= 1e-9)

    x, y = rng.standard_normal(3), rng.standard_normal(3) + 2.0
    p1 = ModelParams(n=1, k=2.5, R=2.0)
    a = poly_green(x, y, p1)
    b = helmholtz_green(x, y, 2.5)
    if flip_kernel_sign:
        b = -b
    val = abs(a - b) / abs(b)
    yield ("splitting consistency n=1 (relative)", val, 1e-14, val <= 1e-14)

    ga = helmholtz_green(x, y, 1.5)
    gb = helmholtz_green(y, x, 1.5)
    val = abs(ga - gb)
    yield ("kernel reciprocity G(x,y) = G(y,x)", val, 0.0, val == 0.0)

    quad = build_sphere_quadrature(2.0, 16, 16)
    val = abs(float(np.sum(quad.weights)) - 4 * np.pi * 4.0)
    yield ("sphere quadrature weight sum = 4 pi R^2", val, 1e-10, val <= 1e-10)
    xi = np.array([1.2, -0.4, 0.9])
    zr = np.linalg.norm(xi) * 2.0
    closed = 4 * np.pi * 4.0 * np.sin(zr) / zr
    val = abs(complex(quad.integrate(np.exp(1j * quad.nodes @ xi))) - closed) / abs(closed)
    yield ("plane-wave surface integral vs closed form", val, 1e-8, val <= 1e-8)

    for kind, pair in (("plane", plane_wave_pair(np.array([1.0, 0.5, 0.2]), p2)),
                       ("cgo", cgo_pair(np.array([1.0, 0.5, 0.2]), 3.0, p2))):
        val = float(np.max(np.abs(pair.xi1 + pair.xi2 + pair.gamma)))
        yield (f"{kind} pair sum = -gamma", val, 1e-12, val <= 1e-12)
        target = p2.k**2 if kind == "plane" else 0.0
        val = abs(complex(pair.xi1 @ pair.xi1) - target)
        yield (f"{kind} pair xi.xi", val, 1e-10, val <= 1e-10)

    grid = make_grid(1.0, 8)
    conv = VolumeConvolver(grid, p2)
    q = sample_potential("smooth_bump", grid, amplitude=0.5, radius=0.8)
    u = rng.standard_normal(grid.num_cells) + 1j * rng.standard_normal(grid.num_cells)
    fast, slow = apply_Kk(conv, u, q), apply_Kk_direct(conv, u, q)
    val = float(np.max(np.abs(fast - slow)) / np.max(np.abs(slow)))
    yield ("FFT vs direct-sum convolution (relative)", val, 1e-10, val <= 1e-10)

    nz1 = sample_white_noise(grid, 7, 3).increments
    nz2 = sample_white_noise(grid, 7, 3).increments
    val = float(np.max(np.abs(nz1 - nz2)))
    yield ("noise reproducibility (same seed)", val, 0.0, val == 0.0)


def cmd_selftest(flip_kernel_sign=False, stream=None):
    """Run the invariant suite; returns the number of failures."""
    stream = stream or sys.stdout
    failures = 0
    for name, measured, tol, ok in _selftest_checks(flip_kernel_sign):
        status = "PASS" if ok else "FAIL"
        if not ok:
            failures += 1
        print(f"[{status}] {name}: measured {measured:.3e} (tolerance {tol:.1e})",
              file=stream)
    print(("selftest OK" if failures == 0 else f"selftest: {failures} FAILURES"), file=stream)
    return failures


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _build_parser():
    ap = argparse.ArgumentParser(prog="polywave",
                                 description="random-source polyharmonic wave laboratory")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("direct", "reconstruct", "sweep"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", default=None, help="JSON config file")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override master seed")
        sp.add_argument("--threads", type=int, default=None,
                        help="worker threads (default $POLYWAVE_THREADS or 1)")
        sp.add_argument("--reproducible", action="store_true",
                        help="force deterministic ordering")
        if name == "reconstruct":
            sp.add_argument("--archive", default=None, help="existing trace archive")
    sub.add_parser("selftest")
    return ap


def main(argv=None):
    args = _build_parser().parse_args(argv)
    if args.command == "selftest":
        return 1 if cmd_selftest() else 0
    try:
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg.data["monte_carlo"]["master_seed"] = args.seed
        if args.reproducible:
            cfg.data["monte_carlo"]["reproducible"] = True
        out_dir = args.out or os.path.join(cfg.data["outputs"]["directory"],
                                           f"{args.command}-{cfg.hash[:12]}")
        threads = _num_threads(args)
        if args.command == "direct":
            path = cmd_direct(cfg, out_dir, threads)
        elif args.command == "reconstruct":
            path = cmd_reconstruct(cfg, out_dir, archive=args.archive, threads=threads)
        else:
            path = cmd_sweep(cfg, out_dir, threads)
        print(f"manifest: {path}")
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (SolverDivergenceError, NonContractionError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
