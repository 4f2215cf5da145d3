"""Layer chains: layer descriptions, parameters, forward and backward passes.

Activations are float64 arrays in NCHW layout for spatial layers and (N, D)
for vector layers.  A network is a linear chain of layers; the HD-CNN model
splits one chain into a shared prefix and per-component rear chains.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from hdcnn import kernels
from hdcnn.errors import FormatError, InvalidInputError, StateError

# Hyperparameter names per layer kind, with defaults (None = required).
LAYER_KINDS: dict[str, dict[str, int | None]] = {
    "conv2d": {"in": None, "out": None, "kernel": None, "stride": 1, "pad": 0},
    "maxpool": {"size": None, "stride": None},
    "avgpool": {"size": None, "stride": None},
    "relu": {},
    "fc": {"in": None, "out": None},
    "softmax": {},
    "flatten": {},
}
_ALIASES = {"fully-connected": "fc", "conv": "conv2d"}
PARAM_KINDS = ("conv2d", "fc")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    params: tuple[tuple[str, int], ...] = ()

    def __init__(self, kind: str, params: Mapping[str, int] | None = None):
        kind = _ALIASES.get(kind, kind)
        if kind not in LAYER_KINDS:
            raise InvalidInputError(f"unknown layer kind {kind!r}")
        schema = LAYER_KINDS[kind]
        given = dict(params or {})
        unknown = set(given) - set(schema)
        if unknown:
            raise InvalidInputError(f"{kind}: unknown hyperparameters {sorted(unknown)}")
        full = {}
        for name, default in schema.items():
            if name in given:
                full[name] = int(given[name])
            elif default is not None:
                full[name] = default
            elif kind in ("maxpool", "avgpool") and name == "stride" and "size" in given:
                full[name] = int(given["size"])
            else:
                raise InvalidInputError(f"{kind}: missing hyperparameter {name!r}")
        for name, value in full.items():
            if name == "pad":
                if value < 0:
                    raise InvalidInputError(f"{kind}: pad must be >= 0")
            elif value <= 0:
                raise InvalidInputError(f"{kind}: {name} must be positive, got {value}")
        if kind == "conv2d" and full["pad"] >= full["kernel"]:
            raise InvalidInputError("conv2d: pad must be smaller than kernel")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "params", tuple(full.items()))

    def __getitem__(self, name: str) -> int:
        return dict(self.params)[name]

    def replace(self, **changes: int) -> LayerSpec:
        merged = dict(self.params)
        merged.update(changes)
        return LayerSpec(self.kind, merged)

    @property
    def has_params(self) -> bool:
        return self.kind in PARAM_KINDS

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        k = self.kind
        if k in ("conv2d", "maxpool", "avgpool"):
            if len(shape) != 3:
                raise InvalidInputError(f"{k} expects a (C, H, W) input, got {shape}")
            c, h, w = shape
            if k == "conv2d":
                if c != self["in"]:
                    raise InvalidInputError(f"conv2d expects {self['in']} channels, got {c}")
                kk, s, p = self["kernel"], self["stride"], self["pad"]
                oh = kernels.conv_output_size(h, kk, s, p)
                ow = kernels.conv_output_size(w, kk, s, p)
                c = self["out"]
            else:
                kk, s = self["size"], self["stride"]
                oh = (h - kk) // s + 1
                ow = (w - kk) // s + 1
            if oh < 1 or ow < 1:
                raise InvalidInputError(f"{k} output would be empty for input {shape}")
            return (c, oh, ow)
        if k == "relu":
            return shape
        if k == "flatten":
            return (int(np.prod(shape)),)
        if k in ("fc", "softmax"):
            if len(shape) != 1:
                raise InvalidInputError(f"{k} expects a flat input, got {shape}")
            if k == "fc":
                if shape[0] != self["in"]:
                    raise InvalidInputError(f"fc expects {self['in']} inputs, got {shape[0]}")
                return (self["out"],)
            return shape
        raise AssertionError(k)

    def to_text(self) -> str:
        return " ".join([self.kind] + [f"{k}={v}" for k, v in self.params])


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]
    split_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if not all(d > 0 for d in self.input_shape):
            raise InvalidInputError(f"input shape must be positive, got {self.input_shape}")
        if not 0 <= self.split_index <= len(self.layers):
            raise InvalidInputError(f"split_index {self.split_index} outside [0, {len(self.layers)}]")
        self.shapes()

    def shapes(self) -> list[tuple[int, ...]]:
        """Activation shapes (without batch axis): input first, then one per layer."""
        out = [self.input_shape]
        for layer in self.layers:
            out.append(layer.output_shape(out[-1]))
        return out

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes()[-1]

    @property
    def label_count(self) -> int:
        if not self.layers or self.layers[-1].kind != "softmax":
            raise InvalidInputError("network does not end in softmax")
        return self.output_shape[0]

    def prefix(self, index: int) -> NetworkSpec:
        return NetworkSpec(self.input_shape, self.layers[:index], index)

    def suffix(self, index: int) -> NetworkSpec:
        return NetworkSpec(self.shapes()[index], self.layers[index:], 0)

    def classifier_index(self) -> int:
        """Index of the last parametric layer (the final classifier)."""
        for i in range(len(self.layers) - 1, -1, -1):
            if self.layers[i].has_params:
                return i
        raise InvalidInputError("network has no parametric layer")

    def with_classifier_width(self, width: int) -> NetworkSpec:
        idx = self.classifier_index()
        layers = list(self.layers)
        layers[idx] = layers[idx].replace(out=width)
        return NetworkSpec(self.input_shape, tuple(layers), self.split_index)

    def with_input_shape(self, shape: tuple[int, ...]) -> NetworkSpec:
        """Same layers on a different input size; fc widths are re-derived."""
        return NetworkSpec.chained(shape, self.layers, self.split_index)

    @classmethod
    def chained(cls, shape: tuple[int, ...], layers, split_index: int = 0) -> NetworkSpec:
        """Spec whose fully connected input widths are derived from ``shape``."""
        out: list[LayerSpec] = []
        cur = tuple(shape)
        for layer in layers:
            if layer.kind == "fc":
                layer = layer.replace(**{"in": cur[0]})
            out.append(layer)
            cur = layer.output_shape(cur)
        return cls(tuple(shape), tuple(out), split_index)

    def to_text(self) -> str:
        lines = ["input shape=" + "x".join(str(d) for d in self.input_shape),
                 f"split index={self.split_index}"]
        lines += [layer.to_text() for layer in self.layers]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> NetworkSpec:
        input_shape = None
        split = 0
        layers = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            kind, *pairs = line.split()
            kv = {}
            for pair in pairs:
                if "=" not in pair:
                    raise FormatError(f"line {lineno}: expected key=value, got {pair!r}")
                key, value = pair.split("=", 1)
                kv[key] = value
            try:
                if kind == "input":
                    input_shape = tuple(int(d) for d in kv["shape"].split("x"))
                elif kind == "split":
                    split = int(kv["index"])
                else:
                    layers.append(LayerSpec(kind, {k: int(v) for k, v in kv.items()}))
            except (KeyError, ValueError) as exc:
                raise FormatError(f"line {lineno}: {exc}") from exc
        if input_shape is None:
            raise FormatError("missing 'input shape=...' line")
        return cls(input_shape, tuple(layers), split)


@dataclass
class Network:
    spec: NetworkSpec
    params: list[dict[str, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        if len(self.params) != len(self.spec.layers):
            raise InvalidInputError("one parameter dict per layer is required")
        for layer, p in zip(self.spec.layers, self.params):
            expected = param_shapes(layer)
            for name, shape in expected.items():
                if name == "W" and "Wq" in p:
                    continue
                if name not in p or p[name].shape != shape:
                    got = None if name not in p else p[name].shape
                    raise InvalidInputError(f"{layer.kind}.{name}: expected shape {shape}, got {got}")

    @property
    def label_count(self) -> int:
        return self.spec.label_count

    def param_arrays(self) -> list[np.ndarray]:
        """Parameter arrays in canonical order (layer order, W before b).

        Quantized weights (``Wq``) are not arrays and are skipped.
        """
        return [p[name] for layer, p in zip(self.spec.layers, self.params)
                for name in param_shapes(layer) if name in p]

    def copy(self) -> Network:
        return Network(self.spec, [{k: v.copy() for k, v in p.items()} for p in self.params])

    def slice(self, start: int, stop: int | None = None) -> Network:
        """Sub-chain sharing (not copying) this network's parameter arrays."""
        stop = len(self.spec.layers) if stop is None else stop
        shapes = self.spec.shapes()
        spec = NetworkSpec(shapes[start], self.spec.layers[start:stop], 0)
        return Network(spec, self.params[start:stop])

    def n_params(self) -> int:
        return sum(a.size for a in self.param_arrays())


def param_shapes(layer: LayerSpec) -> dict[str, tuple[int, ...]]:
    if layer.kind == "conv2d":
        k = layer["kernel"]
        return {"W": (layer["out"], layer["in"], k, k), "b": (layer["out"],)}
    if layer.kind == "fc":
        return {"W": (layer["out"], layer["in"]), "b": (layer["out"],)}
    return {}


def init_layer(layer: LayerSpec, rng: np.random.Generator, classifier: bool = False) -> dict[str, np.ndarray]:
    """He-uniform weights for hidden layers, variance 1/fan_in for classifiers; zero biases."""
    shapes = param_shapes(layer)
    if not shapes:
        return {}
    wshape = shapes["W"]
    fan_in = int(np.prod(wshape[1:]))
    limit = math.sqrt((3.0 if classifier else 6.0) / fan_in)
    return {"W": rng.uniform(-limit, limit, size=wshape), "b": np.zeros(shapes["b"])}


def init_network(spec: NetworkSpec, rng: np.random.Generator) -> Network:
    cls_idx = spec.classifier_index() if any(l.has_params for l in spec.layers) else -1
    params = [init_layer(layer, rng, classifier=(i == cls_idx)) for i, layer in enumerate(spec.layers)]
    return Network(spec, params)


@dataclass
class Trace:
    """Per-layer activations (``acts[0]`` is the input) and backward caches."""

    acts: list[np.ndarray]
    caches: list[object]

    @property
    def output(self) -> np.ndarray:
        return self.acts[-1]


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _conv_forward(layer, p, x):
    k, s, pad = layer["kernel"], layer["stride"], layer["pad"]
    n = x.shape[0]
    cols = kernels.im2col(np.ascontiguousarray(x), k, k, s, pad)
    oh = kernels.conv_output_size(x.shape[2], k, s, pad)
    ow = kernels.conv_output_size(x.shape[3], k, s, pad)
    if "Wq" in p:
        q = p["Wq"]
        flat = np.ascontiguousarray(cols.transpose(1, 0, 2).reshape(cols.shape[1], -1))
        y = kernels.pq_lookup(q.indices, q.centers, flat)
        y = y.reshape(q.m, n, -1).transpose(1, 0, 2)
        cols = None
    else:
        w2 = p["W"].reshape(p["W"].shape[0], -1)
        y = np.matmul(w2, cols)
    y = y + p["b"][None, :, None]
    return y.reshape(n, -1, oh, ow), (cols, x.shape)


def _conv_backward(layer, p, cache, dy, need_dx):
    cols, x_shape = cache
    if cols is None:
        raise StateError("quantized layers are inference-only")
    k, s, pad = layer["kernel"], layer["stride"], layer["pad"]
    n, o = dy.shape[:2]
    dy2 = dy.reshape(n, o, -1)
    w2 = p["W"].reshape(o, -1)
    grads = {"W": np.tensordot(dy2, cols, axes=([0, 2], [0, 2])).reshape(p["W"].shape),
             "b": dy2.sum(axis=(0, 2))}
    dx = None
    if need_dx:
        dx = kernels.col2im(np.matmul(w2.T, dy2), x_shape, k, k, s, pad)
    return grads, dx


def _fc_forward(layer, p, x):
    if "Wq" in p:
        q = p["Wq"]
        y = kernels.pq_lookup(q.indices, q.centers, np.ascontiguousarray(x.T)).T
        return y + p["b"], None
    return x @ p["W"].T + p["b"], x


def _fc_backward(layer, p, x, dy, need_dx):
    if x is None:
        raise StateError("quantized layers are inference-only")
    grads = {"W": dy.T @ x, "b": dy.sum(axis=0)}
    return grads, (dy @ p["W"] if need_dx else None)


def _avgpool_forward(layer, x):
    size, s = layer["size"], layer["stride"]
    n, c, h, w = x.shape
    oh, ow = (h - size) // s + 1, (w - size) // s + 1
    out = np.zeros((n, c, oh, ow))
    for di in range(size):
        for dj in range(size):
            out += x[:, :, di:di + s * oh:s, dj:dj + s * ow:s]
    return out / (size * size)


def _avgpool_backward(layer, x_shape, dy):
    size, s = layer["size"], layer["stride"]
    oh, ow = dy.shape[2], dy.shape[3]
    dx = np.zeros(x_shape)
    share = dy / (size * size)
    for di in range(size):
        for dj in range(size):
            dx[:, :, di:di + s * oh:s, dj:dj + s * ow:s] += share
    return dx


def _layer_forward(layer: LayerSpec, p, x):
    k = layer.kind
    if k == "conv2d":
        return _conv_forward(layer, p, x)
    if k == "fc":
        return _fc_forward(layer, p, x)
    if k == "relu":
        return np.maximum(x, 0.0), x > 0
    if k == "maxpool":
        out, arg = kernels.maxpool_forward(np.ascontiguousarray(x), layer["size"], layer["stride"])
        return out, (arg, x.shape)
    if k == "avgpool":
        return _avgpool_forward(layer, x), x.shape
    if k == "flatten":
        return x.reshape(x.shape[0], -1), x.shape
    if k == "softmax":
        y = softmax(x)
        return y, y
    raise AssertionError(k)


def _layer_backward(layer: LayerSpec, p, cache, dy, need_dx):
    k = layer.kind
    if k == "conv2d":
        return _conv_backward(layer, p, cache, dy, need_dx)
    if k == "fc":
        return _fc_backward(layer, p, cache, dy, need_dx)
    if k == "relu":
        return {}, dy * cache
    if k == "maxpool":
        arg, shape = cache
        return {}, kernels.maxpool_backward(np.ascontiguousarray(dy), arg, shape, layer["size"], layer["stride"])
    if k == "avgpool":
        return {}, _avgpool_backward(layer, cache, dy)
    if k == "flatten":
        return {}, dy.reshape(cache)
    if k == "softmax":
        y = cache
        return {}, y * (dy - np.sum(dy * y, axis=1, keepdims=True))
    raise AssertionError(k)


def forward(net: Network, batch: np.ndarray) -> Trace:
    """Run the chain on ``batch`` (N, *input_shape); returns every activation."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != len(net.spec.input_shape) + 1 or batch.shape[1:] != net.spec.input_shape:
        raise InvalidInputError(f"batch shape {batch.shape} does not match input {net.spec.input_shape}")
    acts = [batch]
    caches = []
    x = batch
    for layer, p in zip(net.spec.layers, net.params):
        x, cache = _layer_forward(layer, p, x)
        acts.append(x)
        caches.append(cache)
    return Trace(acts, caches)


def predict(net: Network, batch: np.ndarray) -> np.ndarray:
    return forward(net, batch).output


def backward(net: Network, trace: Trace | None, grad_out: np.ndarray,
             input_grad: bool = True) -> tuple[list[dict[str, np.ndarray]], np.ndarray | None]:
    """Backpropagate ``grad_out`` (gradient w.r.t. the final activation).

    Returns per-layer parameter gradients (same structure as ``net.params``)
    and the gradient w.r.t. the network input (None if ``input_grad`` is off).
    """
    if trace is None or len(trace.caches) != len(net.spec.layers):
        raise StateError("backward requires the trace of a forward pass on this network")
    if grad_out.shape != trace.output.shape:
        raise InvalidInputError(f"gradient shape {grad_out.shape} != output shape {trace.output.shape}")
    grads: list[dict[str, np.ndarray]] = [{} for _ in net.spec.layers]
    dy = grad_out
    for i in range(len(net.spec.layers) - 1, -1, -1):
        need = input_grad or i > 0
        g, dy = _layer_backward(net.spec.layers[i], net.params[i], trace.caches[i], dy, need)
        grads[i] = g
    return grads, dy


def flatten_grads(net: Network, grads: Sequence[Mapping[str, np.ndarray]]) -> list[np.ndarray]:
    """Gradients in the same order as :meth:`Network.param_arrays`."""
    return [g[name] for layer, g in zip(net.spec.layers, grads) for name in param_shapes(layer)]


def build_spec(input_shape: Iterable[int], lines: Sequence[str], split_index: int) -> NetworkSpec:
    """Convenience builder from ``kind key=value`` strings."""
    body = "input shape=" + "x".join(str(d) for d in input_shape) + f"\nsplit index={split_index}\n"
    return NetworkSpec.from_text(body + "\n".join(lines))
