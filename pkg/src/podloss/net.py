"""Minimal differentiable backbone: dense/conv stacks with manual backprop.

Layers implement ``forward(x) -> (out, cache)`` and
``backward(cache, grad_out) -> (grad_in, param_grads)``; caches are passed
explicitly so forward passes over distinct batches can run concurrently
against a read-only parameter snapshot. All math is float64 so analytic
gradients can be checked against central finite differences tightly.

Layer specs are tuples (also parseable from a compact string):

    ("dense", in_dim, out_dim)
    ("relu",)
    ("conv3x3", in_ch, out_ch, stride)     # padding 1
    ("maxpool2x2",)                        # stride 2, floor on odd sizes
    ("flatten",)

The final layer of a backbone is a dense layer onto the latent dimension
with no activation after it; the classification layer is never part of the
network — class decisions come from the fixed centroid set.
"""

from __future__ import annotations

import struct

import numpy as np

CHECKPOINT_MAGIC = b"PODN"
CHECKPOINT_VERSION = 1

_KIND_CODES = {"dense": 1, "relu": 2, "conv3x3": 3, "maxpool2x2": 4, "flatten": 5}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


class StaleCacheError(RuntimeError):
    """Backward called with caches that do not match the network."""


class Dense:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None):
        self.in_dim = in_dim
        self.out_dim = out_dim
        if rng is None:
            self.weight = np.zeros((in_dim, out_dim))
        else:
            self.weight = rng.normal(scale=np.sqrt(2.0 / in_dim), size=(in_dim, out_dim))
        self.bias = np.zeros(out_dim)

    @property
    def spec(self):
        return ("dense", self.in_dim, self.out_dim)

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"dense layer expects (B, {self.in_dim}), got {x.shape}")
        return x @ self.weight + self.bias, x

    def backward(self, cache, grad_out):
        x = cache
        if grad_out.shape != (x.shape[0], self.out_dim):
            raise StaleCacheError("gradient shape does not match cached activation")
        grad_w = x.T @ grad_out
        grad_b = grad_out.sum(axis=0)
        return grad_out @ self.weight.T, [grad_w, grad_b]


class ReLU:
    spec = ("relu",)

    def params(self):
        return []

    def forward(self, x):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, cache, grad_out):
        if cache.shape != grad_out.shape:
            raise StaleCacheError("gradient shape does not match cached mask")
        return grad_out * cache, []


class Conv3x3:
    """3x3 convolution with padding 1, channels-first (B, C, H, W) layout."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1, rng=None):
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.stride = stride
        fan_in = in_ch * 9
        if rng is None:
            self.weight = np.zeros((out_ch, in_ch, 3, 3))
        else:
            self.weight = rng.normal(scale=np.sqrt(2.0 / fan_in), size=(out_ch, in_ch, 3, 3))
        self.bias = np.zeros(out_ch)

    @property
    def spec(self):
        return ("conv3x3", self.in_ch, self.out_ch, self.stride)

    def params(self):
        return [self.weight, self.bias]

    def _out_hw(self, h, w):
        return (h + 2 - 3) // self.stride + 1, (w + 2 - 3) // self.stride + 1

    def _im2col(self, x):
        b, c, h, w = x.shape
        ho, wo = self._out_hw(h, w)
        padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        cols = np.empty((b, c, 3, 3, ho, wo))
        s = self.stride
        for i in range(3):
            for j in range(3):
                cols[:, :, i, j] = padded[:, :, i : i + s * ho : s, j : j + s * wo : s]
        return cols.reshape(b, c * 9, ho * wo)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ValueError(f"conv layer expects (B, {self.in_ch}, H, W), got {x.shape}")
        b, _, h, w = x.shape
        ho, wo = self._out_hw(h, w)
        cols = self._im2col(x)
        wmat = self.weight.reshape(self.out_ch, -1)
        out = np.einsum("oc,bcp->bop", wmat, cols) + self.bias[None, :, None]
        return out.reshape(b, self.out_ch, ho, wo), (cols, x.shape)

    def backward(self, cache, grad_out):
        cols, x_shape = cache
        b, c, h, w = x_shape
        ho, wo = self._out_hw(h, w)
        if grad_out.shape != (b, self.out_ch, ho, wo):
            raise StaleCacheError("gradient shape does not match cached convolution")
        gflat = grad_out.reshape(b, self.out_ch, ho * wo)
        wmat = self.weight.reshape(self.out_ch, -1)
        grad_w = np.einsum("bop,bcp->oc", gflat, cols).reshape(self.weight.shape)
        grad_b = gflat.sum(axis=(0, 2))
        gcols = np.einsum("oc,bop->bcp", wmat, gflat).reshape(b, c, 3, 3, ho, wo)
        gpad = np.zeros((b, c, h + 2, w + 2))
        s = self.stride
        for i in range(3):
            for j in range(3):
                gpad[:, :, i : i + s * ho : s, j : j + s * wo : s] += gcols[:, :, i, j]
        return gpad[:, :, 1 : 1 + h, 1 : 1 + w], [grad_w, grad_b]


class MaxPool2x2:
    spec = ("maxpool2x2",)

    def params(self):
        return []

    def forward(self, x):
        if x.ndim != 4:
            raise ValueError(f"maxpool expects (B, C, H, W), got {x.shape}")
        b, c, h, w = x.shape
        ho, wo = h // 2, w // 2
        windows = (
            x[:, :, : 2 * ho, : 2 * wo]
            .reshape(b, c, ho, 2, wo, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(b, c, ho, wo, 4)
        )
        argmax = windows.argmax(axis=-1)  # first max wins ties
        out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]
        return out, (argmax, x.shape)

    def backward(self, cache, grad_out):
        argmax, x_shape = cache
        b, c, h, w = x_shape
        ho, wo = h // 2, w // 2
        if grad_out.shape != (b, c, ho, wo):
            raise StaleCacheError("gradient shape does not match cached pooling")
        gwin = np.zeros((b, c, ho, wo, 4))
        np.put_along_axis(gwin, argmax[..., None], grad_out[..., None], axis=-1)
        grad_in = np.zeros(x_shape)
        grad_in[:, :, : 2 * ho, : 2 * wo] = (
            gwin.reshape(b, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * ho, 2 * wo)
        )
        return grad_in, []


class Flatten:
    spec = ("flatten",)

    def params(self):
        return []

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache, grad_out):
        if grad_out.shape[0] != cache[0]:
            raise StaleCacheError("gradient batch size does not match cached shape")
        return grad_out.reshape(cache), []


_LAYER_ARITY = {"dense": 2, "relu": 0, "conv3x3": 3, "maxpool2x2": 0, "flatten": 0}


def parse_layer_specs(text: str) -> list[tuple]:
    """Parse the compact spec string, e.g. "dense:784:256,relu,dense:256:64"."""
    specs = []
    for token in text.split(","):
        parts = token.strip().split(":")
        kind = parts[0]
        if kind not in _LAYER_ARITY:
            raise ValueError(f"unknown layer kind {kind!r}")
        args = [int(p) for p in parts[1:]]
        if kind == "conv3x3" and len(args) == 2:
            args.append(1)  # default stride
        if len(args) != _LAYER_ARITY[kind]:
            raise ValueError(f"layer {kind!r} expects {_LAYER_ARITY[kind]} arguments, got {args}")
        specs.append((kind, *args))
    return specs


def format_layer_specs(specs) -> str:
    return ",".join(":".join(str(p) for p in spec) for spec in specs)


class Network:
    """Ordered layer stack with per-parameter momentum buffers."""

    def __init__(self, layers):
        self.layers = list(layers)
        self.velocities = [np.zeros_like(p) for p in self.parameters()]

    @property
    def specs(self):
        return [layer.spec for layer in self.layers]

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def forward(self, x):
        """Full forward pass; returns the latent output and per-layer caches."""
        x = np.asarray(x, dtype=np.float64)
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def latent(self, x, skip_last: int = 0):
        """Inference-only forward through all but the last ``skip_last`` layers."""
        x = np.asarray(x, dtype=np.float64)
        stop = len(self.layers) - skip_last
        for layer in self.layers[:stop]:
            x, _ = layer.forward(x)
        return x

    def backward(self, caches, grad_latent):
        """Backpropagate; returns (param_grads, grad_input).

        ``param_grads`` aligns with :meth:`parameters`. Gradients are summed
        over the batch; any 1/B normalization belongs to the loss.
        """
        if len(caches) != len(self.layers):
            raise StaleCacheError("cache list does not match the layer stack")
        grad = np.asarray(grad_latent, dtype=np.float64)
        param_grads = []
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            grad, grads = layer.backward(cache, grad)
            param_grads[:0] = grads
        return param_grads, grad

    def sgd_step(self, param_grads, lr, momentum=0.9, weight_decay=0.0):
        sgd_step(self.parameters(), self.velocities, param_grads, lr, momentum, weight_decay)


def sgd_step(params, velocities, grads, lr, momentum=0.9, weight_decay=0.0):
    """In-place SGD with momentum and L2 decay folded into the gradient:

        g' = g + wd * w;  v = momentum * v + g';  w = w - lr * v
    """
    if not (len(params) == len(velocities) == len(grads)):
        raise ValueError("parameter, velocity and gradient lists must align")
    for w, v, g in zip(params, velocities, grads):
        if w.shape != g.shape or w.shape != v.shape:
            raise ValueError("parameter/gradient shape mismatch")
        g_eff = g + weight_decay * w
        v *= momentum
        v += g_eff
        w -= lr * v


def build_network(specs, seed: int = 0) -> Network:
    """Instantiate a network from layer specs with He-normal initialization."""
    if isinstance(specs, str):
        specs = parse_layer_specs(specs)
    rng = np.random.default_rng(seed)
    layers = []
    for spec in specs:
        kind = spec[0]
        if kind == "dense":
            layers.append(Dense(spec[1], spec[2], rng=rng))
        elif kind == "relu":
            layers.append(ReLU())
        elif kind == "conv3x3":
            layers.append(Conv3x3(spec[1], spec[2], spec[3], rng=rng))
        elif kind == "maxpool2x2":
            layers.append(MaxPool2x2())
        elif kind == "flatten":
            layers.append(Flatten())
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    return Network(layers)


def grad_check(
    net: Network,
    loss_fn,
    x,
    num_params: int = 200,
    step: float = 1e-5,
    rng=None,
    corrupt: bool = False,
) -> float:
    """Max relative error between analytic and central-FD parameter gradients.

    ``loss_fn`` maps the latent output to (value, grad_latent). A random
    subset of at least ``num_params`` parameters is probed (all of them if
    the network is smaller). ``corrupt=True`` flips the sign of the
    analytic gradients — a negative control that must report a large error.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    latent, caches = net.forward(x)
    _, grad_latent = loss_fn(latent)
    param_grads, _ = net.backward(caches, grad_latent)
    if corrupt:
        param_grads = [-g for g in param_grads]
    params = net.parameters()
    sizes = [p.size for p in params]
    total = sum(sizes)
    chosen = rng.permutation(total)[: min(num_params, total)]
    bounds = np.cumsum([0] + sizes)
    worst = 0.0
    for flat_idx in chosen:
        which = int(np.searchsorted(bounds, flat_idx, side="right") - 1)
        local = int(flat_idx - bounds[which])
        p = params[which]
        orig = p.flat[local]
        p.flat[local] = orig + step
        plus, _ = loss_fn(net.forward(x)[0])
        p.flat[local] = orig - step
        minus, _ = loss_fn(net.forward(x)[0])
        p.flat[local] = orig
        fd = (plus - minus) / (2.0 * step)
        analytic = param_grads[which].flat[local]
        rel = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-8)
        worst = max(worst, rel)
    return worst


def save_checkpoint(net: Network, path, include_momentum: bool = False) -> None:
    """Binary checkpoint: header, per-layer spec + parameter blobs.

    Layout: magic "PODN", version u32, layer count u32; per layer a kind
    code u32 and four u32 config slots; then every parameter array as
    ndim u32, dims u32..., raw little-endian float64. A trailing u8 flags
    an optional momentum section with blobs in the same order.
    """
    blob = bytearray()
    blob += struct.pack("<4sII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(net.layers))
    for layer in net.layers:
        spec = layer.spec
        config = list(spec[1:]) + [0] * (4 - (len(spec) - 1))
        blob += struct.pack("<IIIII", _KIND_CODES[spec[0]], *config)
    def pack_arrays(arrays):
        out = bytearray()
        for arr in arrays:
            out += struct.pack("<I", arr.ndim)
            out += struct.pack(f"<{arr.ndim}I", *arr.shape)
            out += arr.astype("<f8").tobytes(order="C")
        return out

    blob += pack_arrays(net.parameters())
    blob += struct.pack("<B", 1 if include_momentum else 0)
    if include_momentum:
        blob += pack_arrays(net.velocities)
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path) -> Network:
    with open(path, "rb") as fh:
        raw = fh.read()
    offset = 0
    magic, version, n_layers = struct.unpack_from("<4sII", raw, offset)
    offset += struct.calcsize("<4sII")
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"bad magic {magic!r} at offset 0, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    specs = []
    for _ in range(n_layers):
        code, *config = struct.unpack_from("<IIIII", raw, offset)
        offset += struct.calcsize("<IIIII")
        kind = _CODE_KINDS.get(code)
        if kind is None:
            raise ValueError(f"unknown layer code {code} at offset {offset}")
        arity = _LAYER_ARITY[kind]
        specs.append((kind, *config[:arity]))
    net = build_network(specs, seed=0)

    def unpack_arrays(arrays, offset):
        for arr in arrays:
            (ndim,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            shape = struct.unpack_from(f"<{ndim}I", raw, offset)
            offset += 4 * ndim
            if shape != arr.shape:
                raise ValueError(f"checkpoint shape {shape} does not match layer shape {arr.shape}")
            count = int(np.prod(shape))
            arr[...] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
            offset += 8 * count
        return offset

    offset = unpack_arrays(net.parameters(), offset)
    if offset >= len(raw):
        raise ValueError("truncated checkpoint: missing momentum flag")
    (has_momentum,) = struct.unpack_from("<B", raw, offset)
    offset += 1
    if has_momentum:
        offset = unpack_arrays(net.velocities, offset)
    if offset != len(raw):
        raise ValueError(f"trailing bytes in checkpoint at offset {offset}")
    return net
