"""Minimal differentiable feed-forward runtime.

Small fixed layer menu (dense, 3x3-style valid convolution, max pooling,
relu) over d x d x 3 images in 8-bit pixel units [0, 255], with exact
analytic gradients of a scalar ensemble loss with respect to the input.
Everything runs in float64; convolution and pooling go through the
selected kernel backend (compiled extension or NumPy fallback).

Networks are immutable by convention after construction or training:
nothing here mutates parameters in place except the training loop on its
own private copy.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import _kernels

MAGIC = b"EPGDNET1"


class ShapeError(ValueError):
    """Input or layer shapes do not chain."""


def _as_image(x):
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.ndim != 3 or a.shape[0] != a.shape[1] or a.shape[2] != 3:
        raise ShapeError(f"expected a d x d x 3 image, got shape {a.shape}")
    return a


# ---------------------------------------------------------------------------
# layers


class Conv2D:
    """Valid (unpadded) stride-1 cross-correlation with bias."""

    kind = "conv2d"

    def __init__(self, weights, bias):
        self.weights = np.ascontiguousarray(weights, dtype=np.float64)
        self.bias = np.ascontiguousarray(bias, dtype=np.float64)
        if self.weights.ndim != 4 or self.bias.shape != (self.weights.shape[3],):
            raise ShapeError("conv2d expects (kh, kw, cin, cout) weights and (cout,) bias")

    def params(self):
        return [self.weights, self.bias]

    def out_shape(self, shape):
        h, w, c = shape
        kh, kw, cin, cout = self.weights.shape
        if c != cin or h < kh or w < kw:
            raise ShapeError(f"conv2d {self.weights.shape} cannot take input {shape}")
        return (h - kh + 1, w - kw + 1, cout)

    def forward(self, x):
        return _kernels.conv2d_forward(x, self.weights, self.bias), x

    def backward(self, cache, dy):
        dy = np.ascontiguousarray(dy)
        dx, dw, db = _kernels.conv2d_backward(cache, self.weights, dy)
        return dx, [dw, db]

    def header(self):
        return {"type": self.kind, "weights": list(self.weights.shape),
                "bias": list(self.bias.shape)}


class ReLU:
    kind = "relu"

    def params(self):
        return []

    def out_shape(self, shape):
        return shape

    def forward(self, x):
        return np.maximum(x, 0.0), x

    def backward(self, cache, dy):
        return np.where(cache > 0.0, dy, 0.0), []

    def header(self):
        return {"type": self.kind}


class MaxPool2D:
    """Non-overlapping max pooling; window and stride share one size."""

    kind = "maxpool2d"

    def __init__(self, size=2):
        if size < 1:
            raise ShapeError("pool size must be >= 1")
        self.size = int(size)

    def params(self):
        return []

    def out_shape(self, shape):
        h, w, c = shape
        if h < self.size or w < self.size:
            raise ShapeError(f"pool size {self.size} too large for input {shape}")
        return (h // self.size, w // self.size, c)

    def forward(self, x):
        x = np.ascontiguousarray(x)
        y, arg = _kernels.maxpool_forward(x, self.size)
        return y, (arg, x.shape)

    def backward(self, cache, dy):
        arg, shape = cache
        dy = np.ascontiguousarray(dy)
        return _kernels.maxpool_backward(arg, dy, shape[0], shape[1], self.size), []

    def header(self):
        return {"type": self.kind, "size": self.size}


class Dense:
    """Affine map on the flattened (C-order) input."""

    kind = "dense"

    def __init__(self, weights, bias):
        self.weights = np.ascontiguousarray(weights, dtype=np.float64)
        self.bias = np.ascontiguousarray(bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ShapeError("dense expects (n_in, n_out) weights and (n_out,) bias")

    def params(self):
        return [self.weights, self.bias]

    def out_shape(self, shape):
        n = int(np.prod(shape))
        if n != self.weights.shape[0]:
            raise ShapeError(f"dense expects {self.weights.shape[0]} inputs, got {n}")
        return (self.weights.shape[1],)

    def forward(self, x):
        v = x.reshape(-1)
        return v @ self.weights + self.bias, (v, x.shape)

    def backward(self, cache, dy):
        v, shape = cache
        dx = (self.weights @ dy).reshape(shape)
        return dx, [np.outer(v, dy), dy.copy()]

    def header(self):
        return {"type": self.kind, "weights": list(self.weights.shape),
                "bias": list(self.bias.shape)}


_LAYER_KINDS = {c.kind: c for c in (Conv2D, ReLU, MaxPool2D, Dense)}


# ---------------------------------------------------------------------------
# network


class Network:
    """Ordered layer stack mapping a d x d x 3 image to M logits."""

    def __init__(self, layers, input_side, num_classes):
        self.layers = list(layers)
        self.input_side = int(input_side)
        self.num_classes = int(num_classes)
        shape = (self.input_side, self.input_side, 3)
        for layer in self.layers:
            shape = layer.out_shape(shape)
        if shape != (self.num_classes,):
            raise ShapeError(f"network output shape {shape} != ({self.num_classes},)")
        for layer in self.layers:
            for p in layer.params():
                if not np.all(np.isfinite(p)):
                    raise ValueError("network parameters must be finite")

    def parameter_arrays(self):
        return [p for layer in self.layers for p in layer.params()]

    def copy(self):
        layers = []
        for layer in self.layers:
            if isinstance(layer, Conv2D):
                layers.append(Conv2D(layer.weights.copy(), layer.bias.copy()))
            elif isinstance(layer, Dense):
                layers.append(Dense(layer.weights.copy(), layer.bias.copy()))
            elif isinstance(layer, MaxPool2D):
                layers.append(MaxPool2D(layer.size))
            else:
                layers.append(ReLU())
        return Network(layers, self.input_side, self.num_classes)

    def forward(self, x):
        return forward_logits(self, x)


@dataclass
class GradientResult:
    """Scalar ensemble loss and its exact gradient with respect to the input."""

    loss: float
    grad_input: np.ndarray


def forward_logits(net, x):
    """Logits f(x) for one image. Deterministic for fixed (net, x)."""
    x = _as_image(x)
    if x.shape[0] != net.input_side:
        raise ShapeError(f"network expects side {net.input_side}, got {x.shape[0]}")
    y = x
    for layer in net.layers:
        y, _ = layer.forward(y)
    return y


def forward_with_cache(net, x):
    """Logits plus the per-layer caches needed for a backward pass."""
    x = _as_image(x)
    if x.shape[0] != net.input_side:
        raise ShapeError(f"network expects side {net.input_side}, got {x.shape[0]}")
    caches = []
    y = x
    for layer in net.layers:
        y, cache = layer.forward(y)
        caches.append(cache)
    return y, caches


def backward_input(net, caches, dlogits):
    """Propagate a logits cotangent back to an input-image gradient."""
    dy = np.asarray(dlogits, dtype=np.float64)
    for layer, cache in zip(reversed(net.layers), reversed(caches)):
        dy, _ = layer.backward(cache, dy)
    return dy


def backward_params(net, caches, dlogits):
    """Gradients for every parameter array, in declaration order."""
    dy = np.asarray(dlogits, dtype=np.float64)
    grads = []
    for layer, cache in zip(reversed(net.layers), reversed(caches)):
        dy, g = layer.backward(cache, dy)
        grads.append(g)
    grads.reverse()
    return [arr for g in grads for arr in g]


def softmax(z):
    """Stable softmax: positive entries summing to 1."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def log_softmax(z):
    z = np.asarray(z, dtype=np.float64)
    m = z.max()
    return z - m - np.log(np.exp(z - m).sum())


def probability(net, x, y):
    """Softmax probability of label y, p(x, y) in (0, 1)."""
    logits = forward_logits(net, x)
    if not 0 <= y < net.num_classes:
        raise ValueError(f"label {y} out of range [0, {net.num_classes})")
    return float(softmax(logits)[y])


def _check_ensemble(nets, weights):
    if len(nets) == 0:
        raise ValueError("empty model list")
    side, m = nets[0].input_side, nets[0].num_classes
    for net in nets[1:]:
        if net.input_side != side or net.num_classes != m:
            raise ShapeError("ensemble models must share input side and class count")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(nets),):
        raise ValueError(f"expected {len(nets)} weights, got shape {w.shape}")
    if np.any(w < 0.0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("weights must be nonnegative and sum to 1")
    return w


def fused_logits(nets, weights, x):
    """Weighted sum of member logits, z(x) = sum_i w_i f_i(x)."""
    w = _check_ensemble(nets, weights)
    z = w[0] * forward_logits(nets[0], x)
    for wi, net in zip(w[1:], nets[1:]):
        z += wi * forward_logits(net, x)
    return z


def input_gradient(nets, weights, x, y):
    """Ensemble target cross-entropy and its exact input gradient.

    The loss is -log softmax_y(sum_i w_i f_i(x)): cross-entropy of the
    label y under the logit-fused ensemble. The gradient is accumulated
    by reverse mode through each member, scaled by its weight.
    """
    w = _check_ensemble(nets, weights)
    if not 0 <= y < nets[0].num_classes:
        raise ValueError(f"label {y} out of range [0, {nets[0].num_classes})")
    states = [forward_with_cache(net, x) for net in nets]
    z = w[0] * states[0][0]
    for wi, (logits, _) in zip(w[1:], states[1:]):
        z = z + wi * logits
    loss = -float(log_softmax(z)[y])
    dz = softmax(z)
    dz[y] -= 1.0
    grad = None
    for wi, net, (_, caches) in zip(w, nets, states):
        piece = backward_input(net, caches, wi * dz)
        grad = piece if grad is None else grad + piece
    return GradientResult(loss=loss, grad_input=grad)


# ---------------------------------------------------------------------------
# fixtures and training


def build_fixture_models(seed, count, side=8, classes=4):
    """Deterministic small conv nets for tests and benchmarks.

    Architecture: conv 3x3 (8 channels) -> relu -> max-pool 2x2 -> dense.
    Weights are uniform in [-0.5, 0.5] scaled by 1/sqrt(fan_in), drawn
    from numpy's PCG64 seeded with SeedSequence([seed, index]), so the
    same (seed, index) reproduces bit-identical parameters on any
    platform. Biases start at zero.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    conv_out = side - 2
    if conv_out < 2:
        raise ValueError(f"side {side} too small for the fixture architecture")
    pooled = conv_out // 2
    nets = []
    for index in range(count):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index])))
        fan_conv = 3 * 3 * 3
        conv_w = (rng.random((3, 3, 3, 8)) - 0.5) / np.sqrt(fan_conv)
        fan_dense = pooled * pooled * 8
        dense_w = (rng.random((fan_dense, classes)) - 0.5) / np.sqrt(fan_dense)
        layers = [
            Conv2D(conv_w, np.zeros(8)),
            ReLU(),
            MaxPool2D(2),
            Dense(dense_w, np.zeros(classes)),
        ]
        nets.append(Network(layers, side, classes))
    return nets


def train_fixture(net, images, labels, epochs, lr):
    """Full-batch gradient descent on mean cross-entropy.

    Returns a new trained network; the input network is left untouched.
    Deterministic for a fixed dataset ordering.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if images.ndim != 4 or len(images) == 0:
        raise ValueError("expected a nonempty (n, d, d, 3) image array")
    if len(labels) != len(images):
        raise ValueError("images and labels must have equal length")
    if np.any(labels < 0) or np.any(labels >= net.num_classes):
        raise ValueError("labels must lie in [0, num_classes)")
    out = net.copy()
    params = out.parameter_arrays()
    n = len(images)
    for _ in range(int(epochs)):
        grads = [np.zeros_like(p) for p in params]
        for x, y in zip(images, labels):
            logits, caches = forward_with_cache(out, x)
            dz = softmax(logits)
            dz[int(y)] -= 1.0
            for acc, g in zip(grads, backward_params(out, caches, dz)):
                acc += g
        for p, g in zip(params, grads):
            p -= (lr / n) * g
    return out


def accuracy(net, images, labels):
    """Fraction of images whose argmax logit matches the label."""
    hits = sum(
        int(np.argmax(forward_logits(net, x)) == y) for x, y in zip(images, labels)
    )
    return hits / len(images)


# ---------------------------------------------------------------------------
# serialization


def save_network(net, path):
    """Write the EPGDNET1 flat format: magic, JSON header, raw float64."""
    header = {
        "input_side": net.input_side,
        "num_classes": net.num_classes,
        "layers": [layer.header() for layer in net.layers],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in net.parameter_arrays():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_network(path):
    """Read an EPGDNET1 file back into a Network, bit-exactly."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not an EPGDNET1 model file")
    (hlen,) = struct.unpack_from("<I", data, len(MAGIC))
    start = len(MAGIC) + 4
    header = json.loads(data[start:start + hlen].decode("utf-8"))
    offset = start + hlen
    layers = []
    for entry in header["layers"]:
        kind = entry["type"]
        if kind not in _LAYER_KINDS:
            raise ValueError(f"{path}: unknown layer type {kind!r}")
        if kind == "relu":
            layers.append(ReLU())
            continue
        if kind == "maxpool2d":
            layers.append(MaxPool2D(entry["size"]))
            continue
        arrays = []
        for field in ("weights", "bias"):
            shape = tuple(entry[field])
            count = int(np.prod(shape))
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
            arrays.append(arr.reshape(shape).copy())
            offset += count * 8
        layers.append(_LAYER_KINDS[kind](*arrays))
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes after parameter payload")
    return Network(layers, header["input_side"], header["num_classes"])
