"""
Minimal numpy network engine.

Networks are sequential stacks of Dense / Conv2D / BatchNorm / ReLU / Flatten /
AvgPool layers. Every parameter, including batch-norm running statistics, lives
in one flat vector owned by the network; layers hold views into it, so weight
averaging is just arithmetic on ``net.params``.

Dense weights are stored ``(out, in)`` and conv weights ``(out, in, k, k)``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

# Roles that are statistics rather than trainable parameters.
STAT_ROLES = ("running_mean", "running_var")


# ---------------------------------------------------------------------------
# Layer specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    name: Optional[str] = None


@dataclass(frozen=True)
class Conv2D:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    pad: int = 0
    name: Optional[str] = None


@dataclass(frozen=True)
class BatchNorm:
    channels: int
    name: Optional[str] = None


@dataclass(frozen=True)
class ReLU:
    name: Optional[str] = None


@dataclass(frozen=True)
class Flatten:
    name: Optional[str] = None


@dataclass(frozen=True)
class AvgPool:
    k: int
    name: Optional[str] = None


LayerSpec = Union[Dense, Conv2D, BatchNorm, ReLU, Flatten, AvgPool]
PREACTIVATION_KINDS = (Dense, Conv2D)


@dataclass(frozen=True)
class ParamEntry:
    layer: str
    role: str
    shape: tuple
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def trainable(self) -> bool:
        return self.role not in STAT_ROLES


class ShapeError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Observers (temporary batch-norm used by REPAIR)
# ---------------------------------------------------------------------------


class Observer:
    """Per-channel statistics recorder attached after a preactivation layer.

    A passive observer only records statistics. An active observer behaves
    like a batch-norm layer: it normalizes and applies its own affine
    ``weight`` / ``bias``.
    """

    def __init__(self, layer: str, channels: int, mode: str = "passive", dtype=np.float32):
        if mode not in ("active", "passive"):
            raise ValueError(f"observer mode must be 'active' or 'passive', got {mode!r}")
        self.layer = layer
        self.channels = channels
        self.mode = mode
        self.weight = np.ones(channels, dtype=dtype)
        self.bias = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def reset(self):
        self.running_mean[...] = 0
        self.running_var[...] = 1

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.running_var.astype(np.float64), 0.0))


# ---------------------------------------------------------------------------
# Layer implementations
# ---------------------------------------------------------------------------


def _channel_axes(x):
    return (0,) if x.ndim == 2 else (0, 2, 3)


def _bshape(x):
    return (1, -1) if x.ndim == 2 else (1, -1, 1, 1)


def _batch_moments(x):
    """Per-channel mean and biased variance, accumulated in float64."""
    axes = _channel_axes(x)
    mean = x.mean(axis=axes, dtype=np.float64)
    centered = x.astype(np.float64) - mean.reshape(_bshape(x))
    var = (centered * centered).mean(axis=axes)
    count = x.size // x.shape[1]
    return mean, var, count


def _update_running(running_mean, running_var, mean, var, count, stat_mode, n_seen):
    unbiased = var * count / max(count - 1, 1)
    if stat_mode == "cumulative":
        # running := average over all batches seen since reset
        w = 1.0 / (n_seen + 1)
    else:
        w = BN_MOMENTUM
    running_mean[...] = (1 - w) * running_mean.astype(np.float64) + w * mean
    running_var[...] = (1 - w) * running_var.astype(np.float64) + w * unbiased


class _Layer:
    spec: LayerSpec
    name: str
    roles: tuple = ()

    def param_shapes(self):
        return []

    def bind(self, views):
        for role, view in views.items():
            setattr(self, role, view)

    def out_shape(self, in_shape):
        return in_shape


class _DenseLayer(_Layer):
    roles = ("weight", "bias")

    def param_shapes(self):
        s = self.spec
        return [("weight", (s.out_features, s.in_features)), ("bias", (s.out_features,))]

    def out_shape(self, in_shape):
        if in_shape is not None and in_shape != (self.spec.in_features,):
            raise ShapeError(f"{self.name}: expects input ({self.spec.in_features},), got {in_shape}")
        return (self.spec.out_features,)

    def init(self, rng, dtype):
        bound = np.sqrt(6.0 / self.spec.in_features)
        self.weight[...] = rng.uniform(-bound, bound, self.weight.shape).astype(dtype)
        self.bias[...] = 0

    def forward(self, x, train, net):
        if x.ndim != 2 or x.shape[1] != self.spec.in_features:
            raise ShapeError(f"{self.name}: expects (N, {self.spec.in_features}), got {x.shape}")
        return x @ self.weight.T + self.bias, x

    def backward(self, dy, ctx, grads):
        x = ctx
        grads["weight"][...] = dy.T @ x
        grads["bias"][...] = dy.sum(axis=0)
        return dy @ self.weight


def _im2col(x, k, stride, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (N, C, Ho, Wo, k, k)
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


class _ConvLayer(_Layer):
    roles = ("weight", "bias")

    def param_shapes(self):
        s = self.spec
        return [("weight", (s.out_channels, s.in_channels, s.kernel, s.kernel)), ("bias", (s.out_channels,))]

    def out_shape(self, in_shape):
        s = self.spec
        if in_shape is None:
            return None
        if len(in_shape) != 3 or in_shape[0] != s.in_channels:
            raise ShapeError(f"{self.name}: expects ({s.in_channels}, H, W), got {in_shape}")
        h = (in_shape[1] + 2 * s.pad - s.kernel) // s.stride + 1
        w = (in_shape[2] + 2 * s.pad - s.kernel) // s.stride + 1
        if h < 1 or w < 1:
            raise ShapeError(f"{self.name}: kernel larger than padded input {in_shape}")
        return (s.out_channels, h, w)

    def init(self, rng, dtype):
        s = self.spec
        bound = np.sqrt(6.0 / (s.in_channels * s.kernel * s.kernel))
        self.weight[...] = rng.uniform(-bound, bound, self.weight.shape).astype(dtype)
        self.bias[...] = 0

    def forward(self, x, train, net):
        s = self.spec
        if x.ndim != 4 or x.shape[1] != s.in_channels:
            raise ShapeError(f"{self.name}: expects (N, {s.in_channels}, H, W), got {x.shape}")
        cols, ho, wo = _im2col(x, s.kernel, s.stride, s.pad)
        wmat = self.weight.reshape(s.out_channels, -1)
        y = cols @ wmat.T + self.bias
        y = y.reshape(x.shape[0], ho, wo, s.out_channels).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(y), (x.shape, cols, ho, wo)

    def backward(self, dy, ctx, grads):
        s = self.spec
        x_shape, cols, ho, wo = ctx
        n, c, h, w = x_shape
        dy_col = dy.transpose(0, 2, 3, 1).reshape(-1, s.out_channels)
        grads["weight"][...] = (dy_col.T @ cols).reshape(self.weight.shape)
        grads["bias"][...] = dy_col.sum(axis=0)
        dcols = dy_col @ self.weight.reshape(s.out_channels, -1)
        dcols = dcols.reshape(n, ho, wo, c, s.kernel, s.kernel)
        hp, wp = h + 2 * s.pad, w + 2 * s.pad
        dx = np.zeros((n, c, hp, wp), dtype=dy.dtype)
        for i in range(s.kernel):
            for j in range(s.kernel):
                dx[:, :, i : i + s.stride * ho : s.stride, j : j + s.stride * wo : s.stride] += dcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        if s.pad:
            dx = dx[:, :, s.pad : s.pad + h, s.pad : s.pad + w]
        return dx


class _BatchNormLayer(_Layer):
    roles = ("weight", "bias", "running_mean", "running_var")

    def param_shapes(self):
        c = self.spec.channels
        return [(r, (c,)) for r in self.roles]

    def out_shape(self, in_shape):
        if in_shape is not None and in_shape[0] != self.spec.channels:
            raise ShapeError(f"{self.name}: expects {self.spec.channels} channels, got {in_shape}")
        return in_shape

    def init(self, rng, dtype):
        self.weight[...] = 1
        self.bias[...] = 0
        self.running_mean[...] = 0
        self.running_var[...] = 1

    def reset_stats(self):
        self.running_mean[...] = 0
        self.running_var[...] = 1

    def forward(self, x, train, net):
        if x.ndim not in (2, 4) or x.shape[1] != self.spec.channels:
            raise ShapeError(f"{self.name}: expects {self.spec.channels} channels, got {x.shape}")
        bs = _bshape(x)
        if train:
            mean, var, count = _batch_moments(x)
            _update_running(
                self.running_mean, self.running_var, mean, var, count, net.stat_mode, net.stat_batches
            )
        else:
            mean = self.running_mean.astype(np.float64)
            var = self.running_var.astype(np.float64)
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = ((x - mean.reshape(bs)) * inv_std.reshape(bs)).astype(x.dtype)
        y = xhat * self.weight.reshape(bs) + self.bias.reshape(bs)
        return y, (xhat, inv_std.astype(x.dtype), train)

    def backward(self, dy, ctx, grads):
        xhat, inv_std, train = ctx
        axes = _channel_axes(dy)
        bs = _bshape(dy)
        grads["weight"][...] = (dy * xhat).sum(axis=axes)
        grads["bias"][...] = dy.sum(axis=axes)
        dxhat = dy * self.weight.reshape(bs)
        if not train:
            return dxhat * inv_std.reshape(bs)
        m = dy.size // dy.shape[1]
        sum_dxhat = dxhat.sum(axis=axes).reshape(bs)
        sum_dxhat_xhat = (dxhat * xhat).sum(axis=axes).reshape(bs)
        return (inv_std.reshape(bs) / m) * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)


class _ReLULayer(_Layer):
    def forward(self, x, train, net):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, ctx, grads):
        return dy * ctx


class _FlattenLayer(_Layer):
    def out_shape(self, in_shape):
        if in_shape is None:
            return None
        return (int(np.prod(in_shape)),)

    def forward(self, x, train, net):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, ctx, grads):
        return dy.reshape(ctx)


class _AvgPoolLayer(_Layer):
    def out_shape(self, in_shape):
        k = self.spec.k
        if in_shape is None:
            return None
        if len(in_shape) != 3 or in_shape[1] % k or in_shape[2] % k:
            raise ShapeError(f"{self.name}: spatial dims {in_shape} not divisible by {k}")
        return (in_shape[0], in_shape[1] // k, in_shape[2] // k)

    def forward(self, x, train, net):
        k = self.spec.k
        n, c, h, w = x.shape
        if h % k or w % k:
            raise ShapeError(f"{self.name}: spatial dims {(h, w)} not divisible by {k}")
        y = x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))
        return y, x.shape

    def backward(self, dy, ctx, grads):
        k = self.spec.k
        dx = np.repeat(np.repeat(dy, k, axis=2), k, axis=3) / (k * k)
        return dx.astype(dy.dtype)


_IMPLS = {
    Dense: _DenseLayer,
    Conv2D: _ConvLayer,
    BatchNorm: _BatchNormLayer,
    ReLU: _ReLULayer,
    Flatten: _FlattenLayer,
    AvgPool: _AvgPoolLayer,
}

_PREFIX = {Dense: "dense", Conv2D: "conv", BatchNorm: "bn", ReLU: "relu", Flatten: "flatten", AvgPool: "pool"}


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


class ForwardCache:
    """Per-layer contexts from one forward pass, plus named activations."""

    def __init__(self, net, train, version):
        self.net = net
        self.train = train
        self.version = version
        self.contexts = []
        self.preacts = {}
        self.outputs = {}


class Network:
    def __init__(self, specs: Sequence[LayerSpec], dtype=np.float32, input_shape=None):
        if not specs:
            raise ShapeError("network spec is empty")
        self.specs = list(specs)
        self.dtype = np.dtype(dtype)
        self.input_shape = tuple(input_shape) if input_shape is not None else None
        self.layers: list[_Layer] = []
        self.manifest: list[ParamEntry] = []
        self.observers: dict[str, Observer] = {}
        self.stat_mode = "momentum"
        self.stat_batches = 0
        self._version = 0

        names = set()
        offset = 0
        shape = self.input_shape
        counts: dict[type, int] = {}
        for spec in self.specs:
            impl_cls = _IMPLS.get(type(spec))
            if impl_cls is None:
                raise TypeError(f"unknown layer spec {spec!r}")
            idx = counts.get(type(spec), 0)
            counts[type(spec)] = idx + 1
            name = spec.name or f"{_PREFIX[type(spec)]}{idx}"
            if name in names:
                raise ValueError(f"duplicate layer name {name!r}")
            names.add(name)
            layer = impl_cls()
            layer.spec = spec
            layer.name = name
            shape = self._compose(layer, shape)
            for role, pshape in layer.param_shapes():
                self.manifest.append(ParamEntry(name, role, tuple(pshape), offset))
                offset += int(np.prod(pshape))
            self.layers.append(layer)

        self.params = np.zeros(offset, dtype=self.dtype)
        self._bind(self.params)
        self.trainable_mask = np.ones(offset, dtype=bool)
        for e in self.manifest:
            if not e.trainable:
                self.trainable_mask[e.offset : e.offset + e.size] = False

    def _compose(self, layer, shape):
        # Dense-to-Dense channel mismatches are detectable without an input shape.
        prev = self.layers[-1] if self.layers else None
        spec = layer.spec
        if shape is None and prev is not None:
            if isinstance(spec, Dense):
                last = _last_width(self.layers)
                if last is not None and last[0] == "flat" and last[1] != spec.in_features:
                    raise ShapeError(f"{layer.name}: expects {spec.in_features} inputs, previous width {last[1]}")
            elif isinstance(spec, BatchNorm):
                last = _last_width(self.layers)
                if last is not None and last[1] != spec.channels:
                    raise ShapeError(f"{layer.name}: expects {spec.channels} channels, previous width {last[1]}")
            elif isinstance(spec, Conv2D):
                last = _last_width(self.layers)
                if last is not None and (last[0] == "flat" or last[1] != spec.in_channels):
                    raise ShapeError(f"{layer.name}: expects {spec.in_channels} input channels")
            return None
        return layer.out_shape(shape)

    def _bind(self, vec):
        self._layer_by_name = {}
        for layer in self.layers:
            self._layer_by_name[layer.name] = layer
        for e in self.manifest:
            view = vec[e.offset : e.offset + e.size].reshape(e.shape)
            setattr(self._layer_by_name[e.layer], e.role, view)

    # -- bookkeeping -------------------------------------------------------

    @property
    def n_params(self) -> int:
        """Length of the flat vector, batch-norm running statistics included."""
        return self.params.size

    @property
    def n_trainable(self) -> int:
        return int(sum(e.size for e in self.manifest if e.trainable))

    @property
    def layer_names(self) -> list[str]:
        return [l.name for l in self.layers]

    def layer(self, name):
        try:
            return self._layer_by_name[name]
        except KeyError:
            raise KeyError(f"unknown layer {name!r}") from None

    def preactivation_layers(self):
        return [l for l in self.layers if isinstance(l.spec, PREACTIVATION_KINDS)]

    def batchnorm_layers(self):
        return [l for l in self.layers if isinstance(l.spec, BatchNorm)]

    def touch(self):
        """Mark parameters as modified; invalidates outstanding caches."""
        self._version += 1

    def copy(self) -> "Network":
        new = copy.copy(self)
        new.layers = [copy.copy(l) for l in self.layers]
        new.params = self.params.copy()
        new.observers = {k: copy.deepcopy(v) for k, v in self.observers.items()}
        new._bind(new.params)
        return new

    def same_architecture(self, other: "Network") -> bool:
        return self.manifest == other.manifest and self.specs == other.specs

    def __repr__(self):
        return f"Network({', '.join(self.layer_names)}; {self.n_params} params)"


def _last_width(layers):
    for l in reversed(layers):
        s = l.spec
        if isinstance(s, Dense):
            return ("flat", s.out_features)
        if isinstance(s, Conv2D):
            return ("chan", s.out_channels)
        if isinstance(s, (Flatten, AvgPool)):
            return None
    return None


def build_network(spec: Sequence[LayerSpec], init_seed: int, dtype=np.float32, input_shape=None) -> Network:
    """Build a network with He-uniform weights, zero biases and identity batch-norm."""
    net = Network(spec, dtype=dtype, input_shape=input_shape)
    rng = np.random.default_rng(init_seed)
    for layer in net.layers:
        if hasattr(layer, "init"):
            layer.init(rng, net.dtype)
    return net


# ---------------------------------------------------------------------------
# Forward / loss / backward
# ---------------------------------------------------------------------------


def forward(net: Network, x: np.ndarray, mode: str = "eval"):
    """Run the network; returns ``(logits, cache)``.

    In train mode batch-norm uses batch statistics and updates its running
    statistics; attached observers always record statistics in train mode.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x)
    if x.dtype != net.dtype:
        x = x.astype(net.dtype)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")
    train = mode == "train"
    cache = ForwardCache(net, train, net._version)
    for layer in net.layers:
        x, ctx = layer.forward(x, train, net)
        cache.contexts.append(ctx)
        obs = net.observers.get(layer.name)
        if obs is not None:
            cache.preacts[layer.name] = x
            x = _observe(obs, x, train, net)
        cache.outputs[layer.name] = x
    if train:
        net.stat_batches += 1
    return x, cache


def _observe(obs: Observer, z, train, net):
    if train:
        mean, var, count = _batch_moments(z)
        _update_running(obs.running_mean, obs.running_var, mean, var, count, net.stat_mode, net.stat_batches)
    if obs.mode == "passive":
        return z
    if not train:
        mean = obs.running_mean.astype(np.float64)
        var = obs.running_var.astype(np.float64)
    bs = _bshape(z)
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    zhat = (z - mean.reshape(bs)) * inv_std.reshape(bs)
    return (zhat * obs.weight.reshape(bs) + obs.bias.reshape(bs)).astype(z.dtype)


def loss_softmax_ce(logits: np.ndarray, soft_targets: np.ndarray):
    """Mean soft-target cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits)
    t = np.asarray(soft_targets)
    if logits.shape != t.shape or logits.ndim != 2:
        raise ShapeError(f"logits {logits.shape} and targets {t.shape} must be matching (N, K)")
    if np.any(np.abs(t.sum(axis=1, dtype=np.float64) - 1.0) > 1e-5):
        raise ValueError("target rows must sum to 1")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - logsumexp
    n = logits.shape[0]
    loss = float(-(t * log_p).sum() / n)
    dlogits = ((np.exp(log_p) - t) / n).astype(logits.dtype)
    return loss, dlogits


def backward(net: Network, cache: Optional[ForwardCache], dlogits: np.ndarray) -> np.ndarray:
    """Reverse-mode gradients in manifest layout (zeros for running statistics)."""
    if cache is None:
        raise StaleCacheError("no forward cache")
    if cache.net is not net or cache.version != net._version:
        raise StaleCacheError("forward cache does not belong to the current network state")
    if not cache.train:
        raise StaleCacheError("backward requires a train-mode forward cache")
    if any(o.mode == "active" for o in net.observers.values()):
        raise RuntimeError("backward through active observers is not supported")
    grad = np.zeros_like(net.params)
    views = {}
    for e in net.manifest:
        views.setdefault(e.layer, {})[e.role] = grad[e.offset : e.offset + e.size].reshape(e.shape)
    dy = np.asarray(dlogits, dtype=net.dtype)
    for layer, ctx in zip(reversed(net.layers), reversed(cache.contexts)):
        dy = layer.backward(dy, ctx, views.get(layer.name, {}))
    return grad


# ---------------------------------------------------------------------------
# Parameter vector access
# ---------------------------------------------------------------------------


def get_params(net: Network) -> np.ndarray:
    return net.params.copy()


def set_params(net: Network, vector: np.ndarray) -> None:
    vector = np.asarray(vector)
    if vector.shape != net.params.shape:
        raise ValueError(f"parameter vector has length {vector.size}, network expects {net.n_params}")
    net.params[...] = vector
    net.touch()


def extract_activations(net: Network, x: np.ndarray, layer_name: str) -> np.ndarray:
    """Eval-mode output of ``layer_name`` for input ``x``."""
    if layer_name not in net.layer_names:
        raise KeyError(f"unknown layer {layer_name!r}")
    _, cache = forward(net, x, "eval")
    return cache.outputs[layer_name]


def predict(net: Network, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    """Eval-mode logits, computed in chunks."""
    out = [forward(net, x[i : i + batch_size], "eval")[0] for i in range(0, len(x), batch_size)]
    return np.concatenate(out, axis=0)
