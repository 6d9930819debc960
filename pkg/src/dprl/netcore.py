"""Feed-forward classifiers: topology, flat parameters, forward and reverse mode.

Parameters live in a single float32 vector. Forward and backward passes run
in float64 and round to float32 only where a result leaves the module, which
keeps finite-difference gradient checks tight.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import ClassVar

import numpy as np

from . import kernels
from .errors import DimensionError, DomainError, ParseError
from .numcore import FLOAT, SeededRng, chunked_map, gaussian_sample

# ---------------------------------------------------------------------------
# layers


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    kind: ClassVar[str] = "dense"

    def output_shape(self, shape):
        if math.prod(shape) != self.in_features:
            raise DimensionError(f"dense layer expects {self.in_features} inputs, got shape {shape}")
        return (self.out_features,)

    def param_shapes(self):
        return [("weight", (self.out_features, self.in_features)), ("bias", (self.out_features,))]

    def fan_in(self):
        return self.in_features

    def forward(self, a, p):
        a2 = a.reshape(a.shape[0], -1)
        return a2 @ p["weight"].T + p["bias"], (a2, a.shape)

    def backward(self, d, cache, p):
        return (d @ p["weight"]).reshape(cache[1])

    def grads(self, cache, d):
        a2 = cache[0]
        return [d.T @ a2, d.sum(axis=0)]

    def grads_per_example(self, cache, d):
        a2 = cache[0]
        return [np.einsum("no,ni->noi", d, a2), d]

    def sq_norms(self, cache, d):
        a2 = cache[0]
        dd = np.sum(d * d, axis=1)
        return dd * np.sum(a2 * a2, axis=1) + dd

    def to_dict(self):
        return {"type": self.kind, "in": self.in_features, "out": self.out_features}


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel: int = 5
    stride: int = 1
    kind: ClassVar[str] = "conv2d"

    def __post_init__(self):
        if self.stride != 1:
            raise DomainError("only stride 1 convolutions are supported")
        if self.kernel < 1:
            raise DomainError("kernel must be positive")

    def output_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.in_channels:
            raise DimensionError(f"conv2d expects ({self.in_channels}, H, W), got {shape}")
        _, h, w = shape
        if h < self.kernel or w < self.kernel:
            raise DimensionError(f"input {shape} smaller than kernel {self.kernel}")
        return (self.out_channels, h - self.kernel + 1, w - self.kernel + 1)

    def param_shapes(self):
        k = self.kernel
        return [("weight", (self.out_channels, self.in_channels, k, k)), ("bias", (self.out_channels,))]

    def fan_in(self):
        return self.in_channels * self.kernel * self.kernel

    def forward(self, a, p):
        return kernels.conv2d_forward(a, p["weight"], p["bias"]), a

    def backward(self, d, cache, p):
        return kernels.conv2d_backward_input(d, p["weight"])

    def grads(self, cache, d):
        return [kernels.conv2d_weight_grad(cache, d), d.sum(axis=(0, 2, 3))]

    def grads_per_example(self, cache, d):
        return [kernels.conv2d_weight_grad_per_example(cache, d), d.sum(axis=(2, 3))]

    def sq_norms(self, cache, d):
        gw, gb = self.grads_per_example(cache, d)
        n = d.shape[0]
        return np.sum(gw.reshape(n, -1) ** 2, axis=1) + np.sum(gb * gb, axis=1)

    def to_dict(self):
        return {"type": self.kind, "in_channels": self.in_channels, "out_channels": self.out_channels,
                "kernel": self.kernel, "stride": self.stride}


@dataclass(frozen=True)
class MaxPool:
    window: int = 2
    kind: ClassVar[str] = "maxpool"

    def __post_init__(self):
        if self.window != 2:
            raise DomainError("only 2x2 / stride 2 max pooling is supported")

    def output_shape(self, shape):
        if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
            raise DimensionError(f"maxpool expects (C, H>=2, W>=2), got {shape}")
        return (shape[0], shape[1] // 2, shape[2] // 2)

    def param_shapes(self):
        return []

    def forward(self, a, p):
        out, idx = kernels.maxpool_forward(a)
        return out, (idx, a.shape)

    def backward(self, d, cache, p):
        return kernels.maxpool_backward(np.ascontiguousarray(d), cache[0], cache[1])

    def to_dict(self):
        return {"type": self.kind, "window": self.window}


@dataclass(frozen=True)
class Relu:
    kind: ClassVar[str] = "relu"

    def output_shape(self, shape):
        return tuple(shape)

    def param_shapes(self):
        return []

    def forward(self, a, p):
        mask = a > 0
        return np.where(mask, a, 0.0), mask

    def backward(self, d, cache, p):
        return np.where(cache, d, 0.0)

    def to_dict(self):
        return {"type": self.kind}


_LAYER_TYPES = {"dense": Dense, "conv2d": Conv2d, "maxpool": MaxPool, "relu": Relu}


def layer_from_dict(d):
    kind = d.get("type")
    if kind == "dense":
        return Dense(int(d["in"]), int(d["out"]))
    if kind == "conv2d":
        return Conv2d(int(d["in_channels"]), int(d["out_channels"]), int(d.get("kernel", 5)), int(d.get("stride", 1)))
    if kind == "maxpool":
        return MaxPool(int(d.get("window", 2)))
    if kind == "relu":
        return Relu()
    raise DomainError(f"unknown layer type {kind!r}")


# ---------------------------------------------------------------------------
# topology and parameters


@dataclass(frozen=True)
class Slot:
    layer: int
    name: str
    offset: int
    shape: tuple

    @property
    def size(self):
        return math.prod(self.shape)


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple
    layers: tuple
    class_count: int = 10
    _shapes: tuple = field(init=False, repr=False, compare=False)
    _slots: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        shape = self.input_shape
        shapes = [shape]
        for layer in self.layers:
            shape = layer.output_shape(shape)
            shapes.append(shape)
        if shape != (self.class_count,):
            raise DimensionError(f"network ends in shape {shape}, expected ({self.class_count},)")
        slots = []
        offset = 0
        for i, layer in enumerate(self.layers):
            for name, pshape in layer.param_shapes():
                slots.append(Slot(i, name, offset, pshape))
                offset += math.prod(pshape)
        object.__setattr__(self, "_shapes", tuple(shapes))
        object.__setattr__(self, "_slots", tuple(slots))

    @property
    def shapes(self):
        return self._shapes

    @property
    def slots(self):
        return self._slots

    @property
    def num_parameters(self):
        return sum(s.size for s in self._slots)

    @property
    def input_size(self):
        return math.prod(self.input_shape)

    def to_dict(self):
        return {"input_shape": list(self.input_shape), "class_count": self.class_count,
                "layers": [layer.to_dict() for layer in self.layers]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["input_shape"]), tuple(layer_from_dict(x) for x in d["layers"]),
                   int(d.get("class_count", 10)))


@dataclass
class Parameters:
    """Flat float32 parameter vector with per-layer views."""

    spec: NetworkSpec
    flat: np.ndarray

    def __post_init__(self):
        self.flat = np.ascontiguousarray(self.flat, dtype=FLOAT)
        if self.flat.shape != (self.spec.num_parameters,):
            raise DimensionError(f"expected {self.spec.num_parameters} parameters, got {self.flat.shape}")

    def layer_views(self):
        return _views(self.spec, self.flat)

    @classmethod
    def from_layers(cls, spec, layer_params):
        flat = np.empty(spec.num_parameters, dtype=FLOAT)
        for slot in spec.slots:
            arr = np.asarray(layer_params[slot.layer][slot.name])
            if arr.shape != slot.shape:
                raise DimensionError(f"layer {slot.layer} {slot.name}: expected {slot.shape}, got {arr.shape}")
            flat[slot.offset: slot.offset + slot.size] = arr.ravel()
        return cls(spec, flat)

    def copy(self):
        return Parameters(self.spec, self.flat.copy())


def _views(spec, flat):
    views = [dict() for _ in spec.layers]
    for slot in spec.slots:
        views[slot.layer][slot.name] = flat[slot.offset: slot.offset + slot.size].reshape(slot.shape)
    return views


def _flat(theta):
    return theta.flat if isinstance(theta, Parameters) else np.asarray(theta)


def init_parameters(spec: NetworkSpec, rng: SeededRng) -> Parameters:
    """He-style init: weights ~ N(0, 2/fan_in), biases zero."""
    flat = np.zeros(spec.num_parameters, dtype=FLOAT)
    for slot in spec.slots:
        if slot.name == "weight":
            std = math.sqrt(2.0 / spec.layers[slot.layer].fan_in())
            flat[slot.offset: slot.offset + slot.size] = gaussian_sample(rng, slot.size, std)
    return Parameters(spec, flat)


# ---------------------------------------------------------------------------
# presets


def mlp_mnist():
    return NetworkSpec((784,), (Dense(784, 200), Relu(), Dense(200, 200), Relu(), Dense(200, 10)), 10)


def mlp_synthetic(dim=64, classes=10, hidden=64):
    return NetworkSpec((dim,), (Dense(dim, hidden), Relu(), Dense(hidden, classes)), classes)


def lenet_small():
    layers = (Conv2d(1, 8, 5), Relu(), MaxPool(), Conv2d(8, 16, 5), Relu(), MaxPool(),
              Dense(256, 128), Relu(), Dense(128, 10))
    return NetworkSpec((1, 28, 28), layers, 10)


def lenet_paper():
    layers = (Conv2d(1, 20, 5), Relu(), MaxPool(), Conv2d(20, 50, 5), Relu(), MaxPool(),
              Dense(800, 500), Relu(), Dense(500, 500), Relu(), Dense(500, 10))
    return NetworkSpec((1, 28, 28), layers, 10)


PRESETS = {
    "mlp_mnist": mlp_mnist,
    "mlp_synthetic": mlp_synthetic,
    "lenet_small": lenet_small,
    "lenet_paper": lenet_paper,
}


def preset(name, **kwargs):
    try:
        return PRESETS[name](**kwargs)
    except KeyError:
        raise DomainError(f"unknown architecture preset {name!r}") from None


# ---------------------------------------------------------------------------
# passes


def as_batch(spec, x):
    """Reshape ``x`` to (n, *input_shape) float64. Returns (batch, was_single)."""
    x = np.asarray(x, dtype=np.float64)
    size = spec.input_size
    batched = x.ndim >= 1 and math.prod(x.shape[1:]) == size
    if x.shape == spec.input_shape:
        return x.reshape((1,) + spec.input_shape), True
    if batched and x.ndim == len(spec.input_shape) + 1:
        return x.reshape((x.shape[0],) + spec.input_shape), False
    if x.size == size:
        return x.reshape((1,) + spec.input_shape), True
    if batched:
        return x.reshape((x.shape[0],) + spec.input_shape), False
    raise DimensionError(f"input of shape {x.shape} does not match network input {spec.input_shape}")


def _forward(spec, theta, xb):
    views = _views(spec, _flat(theta).astype(np.float64))
    a = xb
    caches = []
    for layer, p in zip(spec.layers, views):
        a, cache = layer.forward(a, p)
        caches.append(cache)
    return a, caches, views


def _backward(spec, views, caches, dout, need_input=True):
    """Returns (input gradient or None, per-layer output deltas)."""
    deltas = [None] * len(spec.layers)
    d = dout
    for i in range(len(spec.layers) - 1, -1, -1):
        deltas[i] = d
        if i == 0 and not need_input:
            return None, deltas
        d = spec.layers[i].backward(d, caches[i], views[i])
    return d, deltas


def _softmax_xent(logits, y):
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=1))
    rows = np.arange(len(y))
    losses = lse - z[rows, y]
    probs = np.exp(z - lse[:, None])
    dlogits = probs.copy()
    dlogits[rows, y] -= 1.0
    return losses, dlogits, probs


def _labels(spec, y, n):
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if y.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {y.shape}")
    if n and (y.min() < 0 or y.max() >= spec.class_count):
        raise DomainError(f"labels must lie in [0, {spec.class_count})")
    return y


def logits64(spec, theta, x):
    xb, _ = as_batch(spec, x)
    out, _, _ = _forward(spec, theta, xb)
    return out


def forward_logits(spec, theta, x) -> np.ndarray:
    """Logits for one sample, or a batch when ``x`` carries a leading batch axis."""
    xb, single = as_batch(spec, x)
    out = _forward(spec, theta, xb)[0].astype(FLOAT)
    return out[0] if single else out


def predict(spec, theta, x) -> np.ndarray:
    """Argmax class per sample; ties go to the lowest index."""
    xb, single = as_batch(spec, x)
    pred = np.argmax(_forward(spec, theta, xb)[0].astype(FLOAT), axis=1)
    return int(pred[0]) if single else pred


def losses(spec, theta, x, y) -> np.ndarray:
    xb, _ = as_batch(spec, x)
    y = _labels(spec, y, xb.shape[0])
    out, _, _ = _forward(spec, theta, xb)
    return _softmax_xent(out, y)[0]


def loss(spec, theta, x, y) -> float:
    """Softmax cross-entropy (natural log) of a single sample."""
    return float(losses(spec, theta, x, y)[0])


def input_gradients64(spec, theta, x, y):
    """Float64 input gradients of the loss for a batch; also returns losses."""
    xb, _ = as_batch(spec, x)
    y = _labels(spec, y, xb.shape[0])
    out, caches, views = _forward(spec, theta, xb)
    ls, dlogits, _ = _softmax_xent(out, y)
    dx, _ = _backward(spec, views, caches, dlogits)
    return dx, ls


def backward_input(spec, theta, x, y) -> np.ndarray:
    """Gradient of the loss with respect to the input, same shape as ``x``."""
    x = np.asarray(x)
    dx, _ = input_gradients64(spec, theta, x, y)
    return dx.reshape(x.shape).astype(FLOAT)


def logit_jacobian64(spec, theta, x):
    """Float64 logits (n, K) and logit gradients (n, K, *input_shape)."""
    xb, _ = as_batch(spec, x)
    out, caches, views = _forward(spec, theta, xb)
    n, k = out.shape
    jac = np.empty((n, k) + spec.input_shape)
    for c in range(k):
        seed = np.zeros((n, k))
        seed[:, c] = 1.0
        jac[:, c] = _backward(spec, views, caches, seed)[0]
    return out, jac


def logit_input_gradient(spec, theta, x, k) -> np.ndarray:
    """Gradient of logit ``k`` with respect to the input."""
    if not 0 <= k < spec.class_count:
        raise DomainError(f"class index {k} out of range")
    x = np.asarray(x)
    xb, _ = as_batch(spec, x)
    out, caches, views = _forward(spec, theta, xb)
    seed = np.zeros_like(out)
    seed[:, k] = 1.0
    dx = _backward(spec, views, caches, seed)[0]
    return dx.reshape(x.shape).astype(FLOAT)


@dataclass
class PerExampleGradients:
    rows: np.ndarray  # (b, |theta|) float32
    norms: np.ndarray  # (b,) float64

    def __len__(self):
        return self.rows.shape[0]


def _per_example64(spec, theta, xb, y):
    out, caches, views = _forward(spec, theta, xb)
    ls, dlogits, _ = _softmax_xent(out, y)
    _, deltas = _backward(spec, views, caches, dlogits, need_input=False)
    n = xb.shape[0]
    parts = [None] * len(spec.slots)
    by_layer = {}
    for j, slot in enumerate(spec.slots):
        if slot.layer not in by_layer:
            layer = spec.layers[slot.layer]
            by_layer[slot.layer] = layer.grads_per_example(caches[slot.layer], deltas[slot.layer])
        names = [nm for nm, _ in spec.layers[slot.layer].param_shapes()]
        parts[j] = by_layer[slot.layer][names.index(slot.name)].reshape(n, -1)
    return np.concatenate(parts, axis=1) if parts else np.zeros((n, 0)), ls


def backward_params(spec, theta, x, y) -> PerExampleGradients:
    """Exact per-example parameter gradients, one row per sample in batch order."""
    xb, _ = as_batch(spec, x)
    if xb.shape[0] == 0:
        raise DimensionError("batch must be non-empty")
    y = _labels(spec, y, xb.shape[0])
    rows, _ = _per_example64(spec, theta, xb, y)
    return PerExampleGradients(rows.astype(FLOAT), np.sqrt(np.sum(rows * rows, axis=1)))


def param_gradient64(spec, theta, x, y):
    """Gradient of the summed batch loss, float64 flat vector."""
    total, _, _ = clipped_gradient_sum(spec, theta, x, y, clip=None)
    return total


def _chunk_grad(spec, theta, xb, y, clip):
    out, caches, views = _forward(spec, theta, xb)
    ls, dlogits, _ = _softmax_xent(out, y)
    _, deltas = _backward(spec, views, caches, dlogits, need_input=False)
    n = xb.shape[0]
    param_layers = sorted({s.layer for s in spec.slots})
    if clip is None:
        norms = None
        scale = np.ones(n)
    else:
        sq = np.zeros(n)
        for li in param_layers:
            sq += spec.layers[li].sq_norms(caches[li], deltas[li])
        norms = np.sqrt(sq)
        scale = 1.0 / np.maximum(1.0, norms / clip)
    flat = np.empty(spec.num_parameters)
    for li in param_layers:
        layer = spec.layers[li]
        d = deltas[li]
        d = d * scale.reshape((n,) + (1,) * (d.ndim - 1))
        grads = layer.grads(caches[li], d)
        for slot, g in zip([s for s in spec.slots if s.layer == li], grads):
            flat[slot.offset: slot.offset + slot.size] = g.ravel()
    return flat, ls, norms


def clipped_gradient_sum(spec, theta, x, y, clip=None, chunk=64, threads=None):
    """Sum over the batch of per-example gradients, each clipped to ``clip`` in l2.

    ``clip=None`` skips clipping (scale factors are exactly 1). The batch is
    processed in fixed-size chunks reduced in order, so the result does not
    depend on ``threads``. Returns (sum float64, per-sample losses, norms or None).
    """
    xb, _ = as_batch(spec, x)
    y = _labels(spec, y, xb.shape[0])
    parts = chunked_map(lambda s, e: _chunk_grad(spec, theta, xb[s:e], y[s:e], clip),
                        xb.shape[0], chunk=chunk, threads=threads)
    total = np.zeros(spec.num_parameters)
    for flat, _, _ in parts:
        total += flat
    ls = np.concatenate([p[1] for p in parts])
    norms = None if clip is None else np.concatenate([p[2] for p in parts])
    return total, ls, norms


# ---------------------------------------------------------------------------
# checkpoint container

MAGIC = b"DPRL"
FORMAT_VERSION = 1


def checkpoint_bytes(params: Parameters) -> bytes:
    spec_json = json.dumps(params.spec.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    head = MAGIC + struct.pack("<II", FORMAT_VERSION, len(spec_json)) + spec_json
    return head + struct.pack("<Q", params.flat.size) + params.flat.astype("<f4").tobytes()


def save_checkpoint(params: Parameters, path):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params))


def parse_checkpoint(buf: bytes) -> Parameters:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise ParseError("unexpected magic", field="magic", offset=0)
    if len(buf) < 12:
        raise ParseError("truncated header", field="version", offset=4)
    version, spec_len = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported format version {version}", field="version", offset=4)
    end = 12 + spec_len
    if len(buf) < end + 8:
        raise ParseError("truncated network spec", field="spec", offset=12)
    try:
        spec = NetworkSpec.from_dict(json.loads(buf[12:end].decode()))
    except (ValueError, KeyError, TypeError) as exc:
        raise ParseError(f"bad network spec: {exc}", field="spec", offset=12) from exc
    (count,) = struct.unpack_from("<Q", buf, end)
    if count != spec.num_parameters:
        raise ParseError(f"parameter count {count} != {spec.num_parameters}", field="count", offset=end)
    start = end + 8
    if len(buf) != start + 4 * count:
        raise ParseError("parameter block length mismatch", field="theta", offset=start)
    theta = np.frombuffer(buf, dtype="<f4", count=count, offset=start).astype(FLOAT)
    return Parameters(spec, theta)


def load_checkpoint(path) -> Parameters:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
