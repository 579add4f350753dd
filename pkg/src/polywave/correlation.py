"""Monte Carlo estimation of boundary-trace correlation tensors.

For trace data D^i = Delta^i u and N^i = dnu Delta^i u at the quadrature
nodes, the four tensors over the index set {0 <= i <= j < n} are

    F1_ij(x,y) = E[D^i(x) D^j(y)]     F2_ij = E[N^i(x) D^j(y)]
    F3_ij(x,y) = E[D^i(x) N^j(y)]     F4_ij = E[N^i(x) N^j(y)]

estimated by plain (unconjugated) product averages: the white noise is real
and the probe identities pair analytic products, not sesquilinear ones. The
accumulator is one-pass with Kahan-compensated sums (realization count up to
1e5 must not require storing traces), keeps entrywise second moments for
standard errors, and merges associatively for sharded accумulation.
"""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .direct import BoundaryTrace, BoundaryTraceBatch, SphereQuadrature

ALPHAS = ("F1", "F2", "F3", "F4")


class _Kahan:
    """Elementwise compensated accumulator for complex arrays."""

    def __init__(self, shape):
        self.sum = np.zeros(shape, dtype=np.complex128)
        self._comp = np.zeros(shape, dtype=np.complex128)

    def add(self, x):
        y = x - self._comp
        t = self.sum + y
        self._comp = (t - self.sum) - y
        self.sum = t

    def merge(self, other):
        self.add(other.sum)
        self.add(-other._comp)


def index_pairs(n):
    """The set Sigma = {(i, j): 0 <= i <= j < n} in row-major order."""
    return [(i, j) for i in range(n) for j in range(i, n)]


class CorrelationTensor:
    """Streaming estimator of all F^alpha_{i,j} slabs at node pairs."""

    def __init__(self, n, num_nodes):
        self.n = n
        self.num_nodes = num_nodes
        self.pairs = index_pairs(n)
        self.count = 0
        shape = (num_nodes, num_nodes)
        self._acc = {(a, ij): _Kahan(shape) for a in ALPHAS for ij in self.pairs}
        self._sq = {(a, ij): _Kahan(shape) for a in ALPHAS for ij in self.pairs}

    @staticmethod
    def _factors(D, Nm, i, j):
        return (("F1", D[i], D[j]), ("F2", Nm[i], D[j]),
                ("F3", D[i], Nm[j]), ("F4", Nm[i], Nm[j]))

    def accumulate(self, trace: BoundaryTrace):
        """Streaming update with one realization."""
        self._check(trace)
        for (i, j) in self.pairs:
            for a, left, right in self._factors(trace.dirichlet, trace.neumann, i, j):
                prod = np.outer(left, right)
                self._acc[a, (i, j)].add(prod)
                self._sq[a, (i, j)].add(np.abs(prod) ** 2)
        self.count += 1
        return self

    def accumulate_batch(self, batch: BoundaryTraceBatch):
        """Update with a whole batch at once (matrix products instead of outer sums)."""
        self._check(batch)
        for (i, j) in self.pairs:
            for a, left, right in self._factors(batch.dirichlet, batch.neumann, i, j):
                self._acc[a, (i, j)].add(left @ right.T)
                # sum_b |L_pb R_qb|^2 = (|L|^2) @ (|R|^2)^T
                self._sq[a, (i, j)].add((np.abs(left) ** 2) @ (np.abs(right) ** 2).T)
        self.count += batch.count
        return self

    def _check(self, t):
        if t.dirichlet.shape[0] != self.n or t.dirichlet.shape[1] != self.num_nodes:
            raise ValueError(
                f"trace shape {t.dirichlet.shape[:2]} does not match tensor "
                f"({self.n}, {self.num_nodes})"
            )

    def mean(self, alpha, i, j):
        """Current estimate of F^alpha_{i,j} as a (P, P) matrix."""
        if self.count < 1:
            raise ValueError("empty tensor: no realizations accumulated")
        return self._acc[alpha, (i, j)].sum / self.count

    def standard_error(self, alpha=None, i=None, j=None):
        """Entrywise sample standard deviation of the mean (needs count >= 2)."""
        if self.count < 2:
            raise ValueError(f"standard errors need at least 2 realizations, have {self.count}")
        if alpha is None:
            return {key: self.standard_error(key[0], *key[1]) for key in self._acc}
        P = self.count
        m = self.mean(alpha, i, j)
        msq = self._sq[alpha, (i, j)].sum.real / P
        var = np.maximum(msq - np.abs(m) ** 2, 0.0) * P / (P - 1)
        return np.sqrt(var / P)

    def merge(self, other: "CorrelationTensor"):
        """Combine a shard into this tensor (associative up to rounding)."""
        if other.n != self.n or other.num_nodes != self.num_nodes:
            raise ValueError("cannot merge tensors of different shapes")
        for key in self._acc:
            self._acc[key].merge(other._acc[key])
            self._sq[key].merge(other._sq[key])
        self.count += other.count
        return self


@dataclass(frozen=True)
class DataStatistic:
    """M = max over (alpha, (i,j)) of the discrete L^2(boundary x boundary) norms."""

    M: float
    norms: dict = field(default_factory=dict)


def compute_M(tensor: CorrelationTensor, quad: SphereQuadrature) -> DataStatistic:
    """Plug-in data statistic from the estimated correlation slabs."""
    if tensor.count < 1:
        raise ValueError("empty tensor: no realizations accumulated")
    if quad.num_nodes != tensor.num_nodes:
        raise ValueError("quadrature does not match tensor nodes")
    w = quad.weights
    norms = {}
    for a in ALPHAS:
        for (i, j) in tensor.pairs:
            F = tensor.mean(a, i, j)
            norms[(a, i, j)] = float(np.sqrt(np.sum(w[:, None] * w[None, :] * np.abs(F) ** 2)))
    return DataStatistic(M=max(norms.values()), norms=norms)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"PWCT1\n"


def save_checkpoint(tensor: CorrelationTensor, path, params_hash=""):
    """Binary snapshot: header (params hash, count, shape) + raw accumulator payload."""
    meta = {"n": tensor.n, "nodes": tensor.num_nodes, "count": tensor.count,
            "params_hash": params_hash}
    hdr = json.dumps(meta).encode()
    payload = bytearray()
    for key in sorted(tensor._acc, key=str):
        payload += tensor._acc[key].sum.tobytes()
        payload += tensor._acc[key]._comp.tobytes()
        payload += tensor._sq[key].sum.tobytes()
        payload += tensor._sq[key]._comp.tobytes()
    digest = hashlib.sha256(payload).hexdigest().encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(len(hdr).to_bytes(8, "little"))
        fh.write(hdr)
        fh.write(bytes(payload))
        fh.write(digest)


def load_checkpoint(path):
    """Restore a tensor snapshot; verifies the payload checksum. Returns (tensor, params_hash)."""
    with open(path, "rb") as fh:
        if fh.read(len(_CKPT_MAGIC)) != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a polywave correlation checkpoint")
        hlen = int.from_bytes(fh.read(8), "little")
        meta = json.loads(fh.read(hlen).decode())
        tensor = CorrelationTensor(meta["n"], meta["nodes"])
        P2 = meta["nodes"] ** 2
        nbytes = P2 * 16
        payload = fh.read(len(tensor._acc) * 4 * nbytes)
        digest = fh.read(64).decode()
    if hashlib.sha256(payload).hexdigest() != digest:
        raise ValueError(f"{path}: checkpoint payload checksum mismatch")
    shape = (meta["nodes"], meta["nodes"])
    off = 0
    buf = np.frombuffer(payload, dtype=np.complex128)
    for key in sorted(tensor._acc, key=str):
        for arr in (tensor._acc[key], tensor._sq[key]):
            arr.sum = buf[off:off + P2].reshape(shape).copy(); off += P2
            arr._comp = buf[off:off + P2].reshape(shape).copy(); off += P2
    tensor.count = meta["count"]
    return tensor, meta.get("params_hash", "")
