"""Volume grids, source-strength/potential profiles, and white-noise sampling.

The random source is f = sqrt(sigma) * dW with spatial white noise dW. On a
cell-centered grid the noise is discretized by independent cell increments
DW_c ~ Normal(0, cell_volume), which makes the discrete Ito isometry

    E[<f,U> <f,V>] = sum_c sigma(x_c) U(x_c) V(x_c) * cell_volume

exact in the discrete model. Noise streams are keyed by
(master_seed, realization_index) through a counter-based Philox generator so
realizations can be drawn in any order, in parallel, with bit-reproducible
results; within one realization cells fill a fixed C-order layout.
"""

import csv
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class VolumeGrid:
    """Uniform cell-centered grid on the cube [-extent, extent]^3."""

    extent: float
    N: int
    axis: np.ndarray = field(repr=False)          # (N,) cell-center coords, shared per axis
    cell_volume: float = 0.0

    @property
    def h(self):
        return 2.0 * self.extent / self.N

    @property
    def num_cells(self):
        return self.N ** 3

    @property
    def nodes(self):
        """Cell centers as an (N^3, 3) array in C order (x fastest-varying last)."""
        X, Y, Z = np.meshgrid(self.axis, self.axis, self.axis, indexing="ij")
        return np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=-1)

    def radii(self):
        """|x| at every cell center, flat C order."""
        X, Y, Z = np.meshgrid(self.axis, self.axis, self.axis, indexing="ij")
        return np.sqrt(X**2 + Y**2 + Z**2).ravel()


def make_grid(extent: float, N: int) -> VolumeGrid:
    """Build the uniform cell-centered grid; extent >= 1 so B_1 is covered."""
    if not extent >= 1:
        raise ValueError(f"grid extent must be >= 1, got {extent}")
    if not (isinstance(N, (int, np.integer)) and N >= 2):
        raise ValueError(f"cells per axis must be an integer >= 2, got {N}")
    h = 2.0 * extent / N
    axis = -extent + h * (np.arange(N) + 0.5)
    return VolumeGrid(extent=float(extent), N=int(N), axis=axis, cell_volume=h**3)


# ---------------------------------------------------------------------------
# profiles
# ---------------------------------------------------------------------------

def _bump(r, amplitude, radius):
    """C^inf bump a*exp(1 - 1/(1-(r/radius)^2)) on r < radius, 0 outside."""
    out = np.zeros_like(r)
    u2 = (r / radius) ** 2
    inside = u2 < 1.0
    out[inside] = amplitude * np.exp(1.0 - 1.0 / (1.0 - u2[inside]))
    return out


def profile_values(name, points, amplitude=1.0, radius=0.8, **extra):
    """Evaluate a named source profile at an (M, 3) point array.

    Profiles: smooth_bump (infinitely smooth, compact support), gaussian_bump
    (truncated at |x| = radius), two_bumps (two offset smooth bumps), and
    indicator (ball indicator; non-smooth, for decay diagnostics only).
    """
    points = np.asarray(points, dtype=np.float64)
    r = np.sqrt(np.sum(points**2, axis=-1))
    if radius > 1.0:
        raise ValueError(f"profile radius must be <= 1 to keep support in B_1, got {radius}")
    if name == "smooth_bump":
        return _bump(r, amplitude, radius)
    if name == "gaussian_bump":
        width = extra.get("width", radius / 3.0)
        out = amplitude * np.exp(-(r**2) / (2.0 * width**2))
        out[r >= radius] = 0.0
        return out
    if name == "two_bumps":
        half = radius / 2.0
        c = np.array([half, 0.0, 0.0])
        r1 = np.sqrt(np.sum((points - c) ** 2, axis=-1))
        r2 = np.sqrt(np.sum((points + c) ** 2, axis=-1))
        return _bump(r1, amplitude, half) + _bump(r2, 0.6 * amplitude, half)
    if name == "indicator":
        return np.where(r < radius, amplitude, 0.0)
    raise ValueError(f"unknown profile {name!r}")


_SMOOTHNESS_HINT = {"smooth_bump": 6.0, "gaussian_bump": 6.0, "two_bumps": 6.0, "indicator": 0.5}


@dataclass(frozen=True)
class StrengthField:
    """Nonnegative source strength sigma sampled at cell centers (support in B_1)."""

    grid: VolumeGrid
    values: np.ndarray = field(repr=False)        # (N^3,) flat C order
    sqrt_values: np.ndarray = field(repr=False)
    profile_meta: dict = field(default_factory=dict)

    @property
    def values3d(self):
        N = self.grid.N
        return self.values.reshape(N, N, N)

    @property
    def active(self):
        """Flat indices of cells where sigma > 0 (everything else never couples)."""
        return np.nonzero(self.values > 0.0)[0]

    def total_integral(self):
        """Midpoint quadrature of integral(sigma)."""
        return float(np.sum(self.values) * self.grid.cell_volume)


@dataclass(frozen=True)
class PotentialField:
    """Bounded potential q at cell centers, supported in B_1; may be complex."""

    grid: VolumeGrid
    values: np.ndarray = field(repr=False)
    sup_norm: float = 0.0
    profile_meta: dict = field(default_factory=dict)

    @property
    def values3d(self):
        N = self.grid.N
        return self.values.reshape(N, N, N)

    @property
    def active(self):
        return np.nonzero(self.values != 0.0)[0]

    def is_zero(self):
        return self.sup_norm == 0.0


def sample_strength(profile, grid: VolumeGrid, **params) -> StrengthField:
    """Sample a named profile as the strength field; enforces sigma >= 0 and support in B_1."""
    vals = profile_values(profile, grid.nodes, **params)
    if np.any(vals < 0):
        raise ValueError("strength profile produced negative values")
    vals[grid.radii() >= 1.0] = 0.0
    meta = {"name": profile, "s_nominal": _SMOOTHNESS_HINT.get(profile, 4.0), **params}
    return StrengthField(grid=grid, values=vals, sqrt_values=np.sqrt(vals), profile_meta=meta)


def sample_potential(profile, grid: VolumeGrid, **params) -> PotentialField:
    """Sample a named profile as the potential; support clipped to B_1."""
    vals = profile_values(profile, grid.nodes, **params).astype(np.complex128)
    vals[grid.radii() >= 1.0] = 0.0
    if np.isrealobj(params.get("amplitude", 1.0)) and np.allclose(vals.imag, 0.0):
        vals = vals.real
    return PotentialField(grid=grid, values=vals, sup_norm=float(np.max(np.abs(vals))),
                          profile_meta={"name": profile, **params})


def zero_potential(grid: VolumeGrid) -> PotentialField:
    return PotentialField(grid=grid, values=np.zeros(grid.num_cells), sup_norm=0.0,
                          profile_meta={"name": None})


# ---------------------------------------------------------------------------
# white noise
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseRealization:
    """One draw of the discretized white noise: DW_c ~ N(0, cell_volume) per cell."""

    grid: VolumeGrid
    increments: np.ndarray = field(repr=False)    # (N^3,) flat C order
    seed: tuple = (0, 0)                          # (master_seed, realization_index)


def _stream(master_seed, realization_index):
    # documented splitting rule: 128-bit Philox key = master_seed * 2^64 + index
    key = (int(master_seed) % (1 << 64)) * (1 << 64) + (int(realization_index) % (1 << 64))
    return np.random.Generator(np.random.Philox(key=key))


def sample_white_noise(grid: VolumeGrid, seed, realization_index=0) -> NoiseRealization:
    """Draw one reproducible noise realization keyed by (seed, realization_index)."""
    rng = _stream(seed, realization_index)
    dw = rng.standard_normal(grid.num_cells) * np.sqrt(grid.cell_volume)
    return NoiseRealization(grid=grid, increments=dw, seed=(int(seed), int(realization_index)))


def sample_white_noise_batch(grid: VolumeGrid, seed, start, count, cells=None):
    """Increments for realizations start..start+count-1 as an (n_cells, count) matrix.

    `cells` optionally restricts the output rows to a subset of flat cell
    indices (each realization still consumes its full stream, so the values
    agree bit-for-bit with sample_white_noise).
    """
    n_rows = grid.num_cells if cells is None else len(cells)
    out = np.empty((n_rows, count))
    root_vol = np.sqrt(grid.cell_volume)
    for b in range(count):
        dw = _stream(seed, start + b).standard_normal(grid.num_cells)
        out[:, b] = dw if cells is None else dw[cells]
    out *= root_vol
    return out


def volume_pairing(sigma: StrengthField, noise: NoiseRealization, u_samples) -> complex:
    """Discrete stochastic pairing <f, U> = sum_c sqrt(sigma)(x_c) U(x_c) DW_c."""
    u_samples = np.asarray(u_samples)
    if u_samples.shape != sigma.values.shape:
        raise ValueError(
            f"U samples shape {u_samples.shape} does not match field shape {sigma.values.shape}"
        )
    if noise.increments.shape != sigma.values.shape:
        raise ValueError("noise realization lives on a different grid than the field")
    act = sigma.active
    return complex(np.sum(sigma.sqrt_values[act] * u_samples[act] * noise.increments[act]))


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def export_field_csv(field_values, grid: VolumeGrid, path):
    """Write (x, y, z, value) rows for inspection."""
    nodes = grid.nodes
    vals = np.asarray(field_values).ravel()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "z", "value"])
        for p, v in zip(nodes, vals):
            writer.writerow([f"{p[0]:.9g}", f"{p[1]:.9g}", f"{p[2]:.9g}", f"{v:.12g}"])


def export_field_binary(field_values, grid: VolumeGrid, path):
    """Flat binary field format: magic 'PWF1', int32 N, float64 extent, raw float64/complex128 data."""
    vals = np.asarray(field_values).ravel()
    dtype_code = b"c" if np.iscomplexobj(vals) else b"f"
    with open(path, "wb") as fh:
        fh.write(b"PWF1" + dtype_code)
        fh.write(np.int32(grid.N).tobytes())
        fh.write(np.float64(grid.extent).tobytes())
        fh.write(vals.astype(np.complex128 if dtype_code == b"c" else np.float64).tobytes())


def load_field_binary(path):
    """Inverse of export_field_binary; returns (values, N, extent)."""
    with open(path, "rb") as fh:
        magic = fh.read(5)
        if magic[:4] != b"PWF1":
            raise ValueError(f"not a polywave field file: bad magic {magic[:4]!r}")
        dtype = np.complex128 if magic[4:5] == b"c" else np.float64
        N = int(np.frombuffer(fh.read(4), dtype=np.int32)[0])
        extent = float(np.frombuffer(fh.read(8), dtype=np.float64)[0])
        vals = np.frombuffer(fh.read(), dtype=dtype)
    return vals, N, extent
