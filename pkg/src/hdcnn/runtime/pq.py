"""Product quantization of parameter matrices.

A matrix W (m x n) is cut into column segments of width s; within each
segment the m row pieces are clustered with k-means into k centers.  Storage
is an 8-bit index per (row, segment) and k*n single-precision center values.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from hdcnn import kernels
from hdcnn.engine.kmeans import extend_centers, kmeans
from hdcnn.engine.network import Network
from hdcnn.engine.rng import make_rng
from hdcnn.errors import FormatError, InvalidInputError

MAGIC = b"HDQ1"
HEADER_BYTES = len(MAGIC) + 4 * 4
MAX_CENTERS = 256


@dataclass(frozen=True, eq=False)
class QuantizedMatrix:
    m: int
    n: int
    s: int
    k: int
    indices: np.ndarray   # (m, n // s) uint8
    centers: np.ndarray   # (k, n) float32; segment g owns columns [g*s, (g+1)*s)

    def __post_init__(self):
        _check_hyper(self.m, self.n, self.s, self.k)
        if self.indices.shape != (self.m, self.n // self.s) or self.indices.dtype != np.uint8:
            raise InvalidInputError("index table must be uint8 of shape (m, n/s)")
        if self.centers.shape != (self.k, self.n) or self.centers.dtype != np.float32:
            raise InvalidInputError("center table must be float32 of shape (k, n)")
        if self.indices.size and int(self.indices.max()) >= self.k:
            raise InvalidInputError("index out of range of the center table")

    @property
    def segments(self) -> int:
        return self.n // self.s

    def copy(self) -> QuantizedMatrix:
        return self  # immutable

    def reconstruct(self) -> np.ndarray:
        out = np.empty((self.m, self.n))
        c = self.centers.astype(np.float64)
        for g in range(self.segments):
            cols = slice(g * self.s, (g + 1) * self.s)
            out[:, cols] = c[self.indices[:, g], cols]
        return out

    def stored_bytes(self) -> int:
        return stored_bytes(self.m, self.n, self.s, self.k)


def _check_hyper(m, n, s, k):
    if min(m, n, s, k) < 1:
        raise InvalidInputError("m, n, s, k must all be positive")
    if n % s:
        raise InvalidInputError(f"segment width {s} does not divide n={n}")
    if k > MAX_CENTERS:
        raise InvalidInputError(f"k={k} exceeds the 8-bit index range ({MAX_CENTERS})")


def compression_factor(m, n, s, k) -> float:
    """Ratio of 32-bit dense storage to index + center storage."""
    return (32.0 * m * n) / (32.0 * k * n + 8.0 * m * n / s)


def stored_bytes(m, n, s, k) -> int:
    return HEADER_BYTES + m * (n // s) + 4 * k * n


def pq_compress(w, s: int, k: int, rng) -> QuantizedMatrix:
    """Quantize ``w`` segment by segment; deterministic given ``rng``."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise InvalidInputError("pq_compress expects a 2-D matrix")
    m, n = w.shape
    _check_hyper(m, n, s, k)
    if k > m:
        raise InvalidInputError(f"k={k} exceeds the number of rows m={m}")
    nseg = n // s
    indices = np.empty((m, nseg), np.uint8)
    centers = np.empty((k, n), np.float32)
    for g in range(nseg):
        cols = slice(g * s, (g + 1) * s)
        res = kmeans(w[:, cols], k, rng)
        indices[:, g] = res.assignments
        centers[:, cols] = res.centers
    return QuantizedMatrix(m, n, s, k, indices, centers)


def pq_compress_ladder(w, s: int, ks, rng) -> list[QuantizedMatrix]:
    """Quantizations for increasing ``ks`` where each k starts from the previous solution.

    Every segment's run for k+1 is initialised with the converged k centers plus
    one D^2-sampled point, so Lloyd's non-increasing SSE makes the per-segment
    error (and hence the total) non-increasing in k.
    """
    w = np.asarray(w, dtype=np.float64)
    ks = sorted(int(k) for k in ks)
    m, n = w.shape
    for k in ks:
        _check_hyper(m, n, s, k)
        if k > m:
            raise InvalidInputError(f"k={k} exceeds the number of rows m={m}")
    nseg = n // s
    prev: list[np.ndarray | None] = [None] * nseg
    out = []
    for k in ks:
        indices = np.empty((m, nseg), np.uint8)
        centers = np.empty((k, n), np.float32)
        for g in range(nseg):
            cols = slice(g * s, (g + 1) * s)
            init = prev[g]
            while init is not None and len(init) < k:
                init = extend_centers(w[:, cols], init, rng)
            res = kmeans(w[:, cols], k, rng, init=init)
            prev[g] = res.centers
            indices[:, g] = res.assignments
            centers[:, cols] = res.centers
        out.append(QuantizedMatrix(m, n, s, k, indices, centers))
    return out


def segment_sse(w, q: QuantizedMatrix) -> float:
    """Squared reconstruction error of ``w`` under ``q``."""
    return float(np.sum((np.asarray(w, dtype=np.float64) - q.reconstruct()) ** 2))


def pq_forward(q: QuantizedMatrix, x, path: str = "lookup") -> np.ndarray:
    """``W_hat @ x`` for x of shape (n,) or (n, B)."""
    x = np.asarray(x, dtype=np.float64)
    vec = x.ndim == 1
    xs = x[:, None] if vec else x
    if xs.ndim != 2 or xs.shape[0] != q.n:
        raise InvalidInputError(f"input has leading size {xs.shape[0] if xs.ndim else 0}, expected {q.n}")
    if path == "lookup":
        y = kernels.pq_lookup(q.indices, q.centers, np.ascontiguousarray(xs))
    elif path == "dense":
        y = q.reconstruct() @ xs
    else:
        raise InvalidInputError(f"unknown path {path!r}")
    return y[:, 0] if vec else y


# ---- HDQ1 files -----------------------------------------------------------

def dump_quantized(q: QuantizedMatrix) -> bytes:
    head = MAGIC + struct.pack("<4I", q.m, q.n, q.s, q.k)
    return head + q.indices.tobytes(order="C") + q.centers.astype("<f4").tobytes(order="C")


def parse_quantized(data: bytes) -> QuantizedMatrix:
    if data[:4] != MAGIC:
        raise FormatError("bad magic, expected HDQ1", 0)
    if len(data) < HEADER_BYTES:
        raise FormatError("truncated header", len(data))
    m, n, s, k = struct.unpack_from("<4I", data, 4)
    if s == 0 or n % s:
        raise FormatError("segment width does not divide n", 12)
    pos = HEADER_BYTES
    idx_len = m * (n // s)
    cen_len = 4 * k * n
    if len(data) < pos + idx_len + cen_len:
        raise FormatError("truncated payload", len(data))
    if len(data) > pos + idx_len + cen_len:
        raise FormatError("trailing bytes", pos + idx_len + cen_len)
    indices = np.frombuffer(data, np.uint8, idx_len, pos).reshape(m, n // s).copy()
    centers = np.frombuffer(data, "<f4", k * n, pos + idx_len).reshape(k, n).astype(np.float32)
    if indices.size and int(indices.max()) >= k:
        bad = int(np.argmax(indices.reshape(-1) >= k))
        raise FormatError("index out of range", pos + bad)
    return QuantizedMatrix(m, n, s, k, indices, centers)


def save_quantized(path, q: QuantizedMatrix) -> None:
    Path(path).write_bytes(dump_quantized(q))


def load_quantized(path) -> QuantizedMatrix:
    return parse_quantized(Path(path).read_bytes())


# ---- applying quantization to networks -------------------------------------

@dataclass(frozen=True)
class PqDescriptor:
    """``pq layer=L<index> s=<int> k=<int> seed=<int>``; the index counts block layers."""
    layer: int
    s: int
    k: int
    seed: int

    def to_text(self) -> str:
        return f"pq layer=L{self.layer} s={self.s} k={self.k} seed={self.seed}"

    @classmethod
    def from_text(cls, text: str) -> PqDescriptor:
        m = re.fullmatch(r"\s*pq\s+layer=L(\d+)\s+s=(\d+)\s+k=(\d+)\s+seed=(\d+)\s*", text)
        if not m:
            raise FormatError(f"malformed quantization descriptor {text!r}", 0)
        return cls(*(int(g) for g in m.groups()))


def weight_matrix(w: np.ndarray) -> np.ndarray:
    """Conv (out, in, kh, kw) or fc (out, in) weights as an (m, n) matrix."""
    return w.reshape(w.shape[0], -1)


def largest_rear_layers(net: Network, offset: int, count: int = 2) -> list[int]:
    """Block-level indices of the ``count`` largest weight matrices of ``net``."""
    sizes = [(p["W"].size, offset + i) for i, p in enumerate(net.params) if "W" in p]
    sizes.sort(key=lambda t: (-t[0], t[1]))
    return sorted(i for _, i in sizes[:count])


def default_segment_width(n: int, target: int = 4) -> int:
    """Largest divisor of ``n`` not above ``target``."""
    return max(d for d in range(1, min(target, n) + 1) if n % d == 0)


def quantize_network(net: Network, descriptors, offset: int, tag: str = "") -> tuple[Network, dict[int, QuantizedMatrix]]:
    """Copy of ``net`` with the described layers replaced by quantized weights.

    ``offset`` maps the network's local layer index to the block index used in
    descriptors.  ``k`` is capped by the matrix's row count.
    """
    params = [dict(p) for p in net.params]
    done = {}
    for d in descriptors:
        i = d.layer - offset
        if not 0 <= i < len(params) or "W" not in params[i]:
            continue
        mat = weight_matrix(params[i]["W"])
        s = d.s if mat.shape[1] % d.s == 0 else default_segment_width(mat.shape[1], d.s)
        q = pq_compress(mat, s, min(d.k, mat.shape[0]), make_rng(d.seed, "pq", d.layer, tag))
        params[i] = {name: a for name, a in params[i].items() if name != "W"}
        params[i]["Wq"] = q
        done[d.layer] = q
    return Network(net.spec, params), done


def network_storage_bytes(net: Network) -> tuple[int, int]:
    """(dense float64 bytes, stored bytes with quantized weights) for one network."""
    dense = stored = 0
    for p in net.params:
        for name, a in p.items():
            if name == "Wq":
                dense += 8 * a.m * a.n
                stored += a.stored_bytes()
            else:
                dense += a.nbytes
                stored += a.nbytes
    return dense, stored


def quantize_model(model, descriptors):
    """Quantize the rear layers of the coarse and every fine component.

    Shared layers are left dense.  Returns the new model and a mapping from
    component name to its quantized matrices.
    """
    from hdcnn.model import FineComponent, HdcnnModel

    offset = model.split_index
    coarse, qc = quantize_network(model.coarse, descriptors, offset, "coarse")
    tables = {"coarse": qc}
    fine = []
    for comp in model.fine:
        net, qf = quantize_network(comp.net, descriptors, offset, f"fine{comp.k}")
        tables[f"fine{comp.k}"] = qf
        fine.append(FineComponent(comp.k, comp.partial_set, net))
    return HdcnnModel(model.block_spec, model.split_index, model.shared, coarse, fine, model.hierarchy), tables


def model_storage_bytes(model) -> tuple[int, int]:
    nets = [model.shared, model.coarse] + [c.net for c in model.fine]
    totals = [network_storage_bytes(n) for n in nets]
    return sum(t[0] for t in totals), sum(t[1] for t in totals)
