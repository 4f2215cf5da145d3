"""Binary parameter checkpoints.

Layout: magic ``HDW1`` then, per tensor, ``rank`` (u32 LE), ``rank`` dims
(u32 LE each) and the payload as little-endian float64, row-major.  Tensors
follow each other until end of file.
"""

import struct
from pathlib import Path

import numpy as np

from hdcnn.errors import FormatError

MAGIC = b"HDW1"


def dump_tensors(arrays) -> bytes:
    out = [MAGIC]
    for a in arrays:
        a = np.asarray(a, dtype="<f8")
        out.append(struct.pack("<I", a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(np.ascontiguousarray(a).tobytes())
    return b"".join(out)


def parse_tensors(data: bytes) -> list[np.ndarray]:
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}", 0)
    pos = 4
    tensors = []
    while pos < len(data):
        if pos + 4 > len(data):
            raise FormatError("truncated tensor rank", pos)
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + 4 * rank > len(data):
            raise FormatError("truncated tensor dims", pos)
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        nbytes = 8 * int(np.prod(dims, dtype=np.int64))
        if pos + nbytes > len(data):
            raise FormatError("truncated tensor payload", pos)
        tensors.append(np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=pos)
                       .reshape(dims).astype(np.float64))
        pos += nbytes
    return tensors


def save_tensors(path, arrays) -> None:
    Path(path).write_bytes(dump_tensors(arrays))


def load_tensors(path) -> list[np.ndarray]:
    return parse_tensors(Path(path).read_bytes())


def save_network(net, spec_path, weights_path) -> None:
    Path(spec_path).write_text(net.spec.to_text())
    save_tensors(weights_path, net.param_arrays())


def load_network(spec_path, weights_path):
    from hdcnn.engine.network import NetworkSpec

    spec = NetworkSpec.from_text(Path(spec_path).read_text())
    return network_from_arrays(spec, load_tensors(weights_path))


def network_from_arrays(spec, arrays, quantized=None):
    """Rebuild a network from its canonical tensor list.

    ``quantized`` maps a layer index to a quantized weight object that stands
    in for that layer's ``W`` (which is then absent from ``arrays``).
    """
    from hdcnn.engine.network import Network, param_shapes

    quantized = quantized or {}
    arrays = list(arrays)
    params = []
    pos = 0
    for i, layer in enumerate(spec.layers):
        p = {}
        if i in quantized:
            p["Wq"] = quantized[i]
        for name, shape in param_shapes(layer).items():
            if name == "W" and i in quantized:
                continue
            if pos >= len(arrays):
                raise FormatError("checkpoint has fewer tensors than the network needs")
            if arrays[pos].shape != shape:
                raise FormatError(f"{layer.kind}.{name}: checkpoint shape {arrays[pos].shape} != {shape}")
            p[name] = arrays[pos]
            pos += 1
        params.append(p)
    if pos != len(arrays):
        raise FormatError("checkpoint has more tensors than the network needs")
    return Network(spec, params)
