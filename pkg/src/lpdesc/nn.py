"""Small differentiable layer set with hand-written backward passes.

Tensors are numpy arrays in (batch, channels, height, width) order.  Every
layer caches what its backward pass needs during ``forward`` and must be
called as forward -> backward pairs.  float32 is the working precision;
``astype(np.float64)`` switches a layer (or whole network) to 64-bit for
gradient verification.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided


class ShapeError(ValueError):
    pass


class StatisticsError(RuntimeError):
    """Inference requested from a batchnorm layer that never saw a batch."""


class DegenerateDescriptor(ValueError):
    pass


@dataclass
class Param:
    """A learnable array with its gradient and momentum buffers."""

    value: np.ndarray
    decay: bool = True
    grad: np.ndarray = field(init=False)
    momentum: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value)
        self.grad = np.zeros_like(self.value)
        self.momentum = np.zeros_like(self.value)

    def astype(self, dtype):
        self.value = self.value.astype(dtype, order="C")
        self.grad = self.grad.astype(dtype, order="C")
        self.momentum = self.momentum.astype(dtype, order="C")


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, Param] = {}

    def forward(self, x: np.ndarray, train: bool = False, rng=None) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def astype(self, dtype):
        for p in self.params.values():
            p.astype(dtype)
        return self

    def zero_grad(self):
        for p in self.params.values():
            p.grad[...] = 0


def orthogonal(shape, rng: np.random.Generator, gain: float = 1.0) -> np.ndarray:
    rows = shape[0]
    cols = int(np.prod(shape[1:]))
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return (gain * q[:rows, :cols]).reshape(shape)


class Conv2d(Layer):
    """Cross-correlation with zero padding and integer stride."""

    kind = "conv2d"

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1,
                 pad: int = 0, rng: np.random.Generator | None = None,
                 gain: float = 0.6, dtype=np.float32):
        super().__init__()
        if stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {stride}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.stride, self.pad = stride, pad
        w = orthogonal((out_ch, in_ch, kernel, kernel), rng, gain)
        self.params["weight"] = Param(w.astype(dtype))
        self.params["bias"] = Param(np.zeros(out_ch, dtype=dtype))
        self._cache = None
        # column buffers are reused between calls; fresh 100+ MB allocations
        # cost more in page faults than the copy itself
        self._buffers: dict[tuple, np.ndarray] = {}

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel, self.stride, self.pad
        if h + 2 * p < k or w + 2 * p < k:
            raise ShapeError(f"kernel {k} does not fit padded input {h + 2 * p}x{w + 2 * p}")
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def _buffer(self, tag, shape, dtype):
        key = (tag, shape, np.dtype(dtype))
        buf = self._buffers.get(key)
        if buf is None:
            self._buffers = {k: v for k, v in self._buffers.items() if k[0] != tag}
            buf = self._buffers[key] = np.empty(shape, dtype=dtype)
        return buf

    def _columns(self, tag, xp, k, s, ho, wo):
        """(N, Ho, Wo, k, k, C) patches of a padded channels-last array."""
        n, _, _, c = xp.shape
        sn, sh, sw, sc = xp.strides
        view = as_strided(xp, (n, ho, wo, k, k, c), (sn, s * sh, s * sw, sh, sw, sc))
        buf = self._buffer(tag, (n, ho, wo, k, k, c), xp.dtype)
        np.copyto(buf, view)
        return buf.reshape(n * ho * wo, k * k * c)

    def forward(self, x, train=False, rng=None):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeError(f"conv2d expected (N, {self.in_ch}, H, W), got {x.shape}")
        n, c, h, w = x.shape
        k, s, p = self.kernel, self.stride, self.pad
        ho, wo = self.output_size(h, w)
        xp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=x.dtype)
        xp[:, p:p + h, p:p + w, :] = x.transpose(0, 2, 3, 1)
        cols = self._columns("fwd", xp, k, s, ho, wo)
        wm = self.params["weight"].value.transpose(0, 2, 3, 1).reshape(self.out_ch, -1)
        out = cols @ wm.T
        out += self.params["bias"].value
        self._cache = (cols, x.shape, ho, wo)
        return out.reshape(n, ho, wo, self.out_ch).transpose(0, 3, 1, 2)

    def backward(self, dy):
        cols, (n, c, h, w), ho, wo = self._cache
        k, s, p = self.kernel, self.stride, self.pad
        dy_nhwc = dy.transpose(0, 2, 3, 1)
        dyr = dy_nhwc.reshape(-1, self.out_ch)
        wgt = self.params["weight"]
        wgt.grad += (cols.T @ dyr).T.reshape(self.out_ch, k, k, c).transpose(0, 3, 1, 2)
        self.params["bias"].grad += dyr.sum(axis=0)
        q = k - 1 - p
        if s == 1 and (ho, wo) == (h, w) and q >= 0:
            # same-size layers: input gradient = correlation of the padded
            # output gradient with the flipped, channel-transposed kernel
            dyp = np.zeros((n, ho + 2 * q, wo + 2 * q, self.out_ch), dtype=dy.dtype)
            dyp[:, q:q + ho, q:q + wo, :] = dy_nhwc
            dcols = self._columns("bwd", dyp, k, 1, h, w)
            wf = wgt.value[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(-1, c)
            return (dcols @ wf).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        wm = wgt.value.transpose(0, 2, 3, 1).reshape(self.out_ch, -1)
        dcols = (dyr @ wm).reshape(n, ho, wo, k, k, c)
        dxp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + s * ho:s, j:j + s * wo:s, :] += dcols[:, :, :, i, j, :]
        return dxp[:, p:p + h, p:p + w, :].transpose(0, 3, 1, 2)


class BatchNorm2d(Layer):
    """Per-channel normalization over (batch, H, W) with running statistics.

    Running estimates follow an exponential moving average; the variance
    estimate stored is the unbiased one.
    """

    kind = "batchnorm"

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1,
                 dtype=np.float32):
        super().__init__()
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.params["scale"] = Param(np.ones(channels, dtype=dtype), decay=False)
        self.params["shift"] = Param(np.zeros(channels, dtype=dtype), decay=False)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.tracked = 0
        self._cache = None

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def astype(self, dtype):
        super().astype(dtype)
        self.running_mean = self.running_mean.astype(dtype)
        self.running_var = self.running_var.astype(dtype)
        return self

    def forward(self, x, train=False, rng=None):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"batchnorm expected (N, {self.channels}, H, W), got {x.shape}")
        # work on a (N*H*W, C) view; conv outputs are channels-last in memory
        xt = x.transpose(0, 2, 3, 1)
        x2 = xt.reshape(-1, self.channels)
        g = self.params["scale"].value
        b = self.params["shift"].value
        if train:
            count = x2.shape[0]
            mean = x2.mean(axis=0)
            xc = x2 - mean
            var = np.einsum("ij,ij->j", xc, xc) / count
            inv = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
            xhat = xc * inv
            m = self.momentum
            unbiased = var * (count / max(count - 1, 1))
            self.running_mean = ((1 - m) * self.running_mean + m * mean).astype(x.dtype)
            self.running_var = ((1 - m) * self.running_var + m * unbiased).astype(x.dtype)
            self.tracked += 1
            mode = "train"
        else:
            if self.tracked == 0:
                raise StatisticsError("batchnorm running statistics are undefined before training")
            inv = (1.0 / np.sqrt(self.running_var + self.eps)).astype(x.dtype)
            xhat = (x2 - self.running_mean) * inv
            mode = "infer"
        self._cache = (mode, xhat, inv, xt.shape)
        out = xhat * g + b
        return out.reshape(xt.shape).transpose(0, 3, 1, 2)

    def backward(self, dy):
        mode, xhat, inv, shape = self._cache
        d2 = dy.transpose(0, 2, 3, 1).reshape(-1, self.channels)
        g = self.params["scale"]
        g.grad += np.einsum("ij,ij->j", d2, xhat)
        self.params["shift"].grad += d2.sum(axis=0)
        dxhat = d2 * g.value
        if mode == "infer":
            dx = dxhat * inv
        else:
            n = d2.shape[0]
            mean_d = dxhat.sum(axis=0) / n
            mean_dx = np.einsum("ij,ij->j", dxhat, xhat) / n
            dx = (dxhat - mean_d - xhat * mean_dx) * inv
        return dx.reshape(shape).transpose(0, 3, 1, 2)


class InstanceNorm2d(Layer):
    """Per-sample, per-channel standardization with fixed unit scale, zero shift.

    Computed in float64 regardless of input precision so that affine
    intensity changes of the input leave the output unchanged.
    """

    kind = "instancenorm"

    def __init__(self, eps: float = 1e-10):
        super().__init__()
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.eps = eps
        self._cache = None

    def forward(self, x, train=False, rng=None):
        x64 = x.astype(np.float64)
        mean = x64.mean(axis=(2, 3), keepdims=True)
        xc = x64 - mean
        # a constant plane must map to exact zeros, whatever the rounding in mean
        flat = (x64.max(axis=(2, 3), keepdims=True) == x64.min(axis=(2, 3), keepdims=True))
        xc = np.where(flat, 0.0, xc)
        var = (xc * xc).mean(axis=(2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * inv
        self._cache = (xhat, inv)
        return xhat.astype(x.dtype)

    def backward(self, dy):
        xhat, inv = self._cache
        d = dy.astype(np.float64)
        mean_d = d.mean(axis=(2, 3), keepdims=True)
        mean_dx = (d * xhat).mean(axis=(2, 3), keepdims=True)
        return ((d - mean_d - xhat * mean_dx) * inv).astype(dy.dtype)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False, rng=None):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        return dy * self._mask


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by 1/(1-rate) in train mode."""

    kind = "dropout"

    def __init__(self, rate: float):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.rate = rate
        self._scale = None

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0:
            self._scale = None
            return x
        if rng is None:
            raise ValueError("train-mode dropout needs an rng")
        keep = rng.random(x.shape) >= self.rate
        self._scale = keep.astype(x.dtype) / x.dtype.type(1 - self.rate)
        return x * self._scale

    def backward(self, dy):
        return dy if self._scale is None else dy * self._scale


def relu_dropout(x, rate, train, rng):
    """Functional ReLU followed by inverted dropout (forward only)."""
    y = ReLU().forward(x)
    return Dropout(rate).forward(y, train=train, rng=rng)


class L2Normalize(Layer):
    """Scale each sample (all non-batch axes flattened) to unit Euclidean norm."""

    kind = "l2norm"

    def __init__(self, floor: float = 1e-8):
        super().__init__()
        self.floor = floor
        self._cache = None

    def forward(self, x, train=False, rng=None):
        flat = x.reshape(x.shape[0], -1)
        norm = np.sqrt((flat.astype(np.float64) ** 2).sum(axis=1, keepdims=True))
        if np.any(norm <= self.floor):
            bad = int(np.argmax(norm[:, 0] <= self.floor))
            raise DegenerateDescriptor(f"sample {bad} has norm {norm[bad, 0]:.3g} below floor")
        y = (flat / norm).astype(x.dtype)
        self._cache = (y, norm.astype(x.dtype), x.shape)
        return y.reshape(x.shape)

    def backward(self, dy):
        y, norm, shape = self._cache
        d = dy.reshape(shape[0], -1)
        dx = (d - y * (y * d).sum(axis=1, keepdims=True)) / norm
        return dx.reshape(shape)


def l2_normalize(v, floor: float = 1e-8) -> np.ndarray:
    v = np.asarray(v)
    return L2Normalize(floor).forward(v.reshape(1, -1)).reshape(v.shape)


class Sequential:
    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)

    def forward(self, x, train=False, rng=None):
        for layer in self.layers:
            x = layer.forward(x, train=train, rng=rng)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def parameters(self) -> list[Param]:
        return [p for layer in self.layers for p in layer.params.values()]

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        return self


@dataclass
class OptimConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    total_epochs: int = 20

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be a positive integer")

    def lr_at(self, epoch: int) -> float:
        if not 0 <= epoch < self.total_epochs:
            raise ValueError(f"epoch {epoch} outside [0, {self.total_epochs})")
        return self.learning_rate * (1.0 - epoch / self.total_epochs)


def sgd_step(params: Iterable[Param], config: OptimConfig, epoch: int):
    """One momentum SGD update with a linearly decaying learning rate.

    v <- m*v + g + wd*theta   (wd skipped for normalization scale/shift)
    theta <- theta - lr(epoch)*v
    """
    lr = config.lr_at(epoch)
    for p in params:
        g = p.grad
        if p.decay and config.weight_decay:
            g = g + config.weight_decay * p.value
        p.momentum *= config.momentum
        p.momentum += g
        p.value -= p.value.dtype.type(lr) * p.momentum


# -- gradient verification ---------------------------------------------------

def finite_diff_check(objective: Callable[[], float], targets: Sequence[np.ndarray],
                      grads: Sequence[np.ndarray], rng: np.random.Generator,
                      n_samples: int = 200, h: float = 1e-5, floor: float = 1e-6,
                      signature: Callable[[], object] | None = None) -> float:
    """Worst relative error between analytic gradients and central differences.

    ``targets`` are perturbed in place (and restored).  Entries are drawn at
    random across all targets, at least ``n_samples`` of them (or all, if
    fewer exist).  When ``signature`` is given, an entry whose +h and -h
    evaluations produce different signatures straddles a kink and is
    replaced by another draw.
    """
    for t in targets:
        if not t.flags.c_contiguous:
            raise ValueError("finite_diff_check perturbs targets in place; they must be C-contiguous")
    sizes = np.array([t.size for t in targets])
    total = int(sizes.sum())
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    if total <= n_samples:
        order = np.arange(total)
    else:
        order = rng.permutation(total)
    worst = 0.0
    checked = 0
    for flat in order:
        if checked >= n_samples:
            break
        ti = int(np.searchsorted(offsets, flat, side="right") - 1)
        t = targets[ti].reshape(-1)
        i = int(flat - offsets[ti])
        orig = t[i]
        t[i] = orig + h
        fp = objective()
        sp = signature() if signature else None
        t[i] = orig - h
        fm = objective()
        sm = signature() if signature else None
        t[i] = orig
        if signature is not None and not _same(sp, sm):
            continue
        num = (fp - fm) / (2 * h)
        ana = float(grads[ti].reshape(-1)[i])
        err = abs(ana - num) / max(abs(ana), abs(num), floor)
        worst = max(worst, err)
        checked += 1
    return worst


def _same(a, b):
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        return np.array_equal(a, b)
    if isinstance(a, (tuple, list)):
        return len(a) == len(b) and all(_same(x, y) for x, y in zip(a, b))
    return a == b


def check_layer(layer: Layer, x: np.ndarray, rng: np.random.Generator,
                train: bool = True, n_samples: int = 200, h: float = 1e-5,
                dropout_seed: int = 0) -> float:
    """Finite-difference check of one layer under a random linear readout."""
    layer.astype(np.float64)
    x = x.astype(np.float64)
    probe = layer.forward(x, train=train, rng=np.random.default_rng(dropout_seed))
    weights = rng.standard_normal(probe.shape)

    def objective():
        y = layer.forward(x, train=train, rng=np.random.default_rng(dropout_seed))
        return float((weights * y).sum())

    layer.zero_grad()
    objective()
    dx = layer.backward(weights)
    names = list(layer.params)
    targets = [x] + [layer.params[k].value for k in names]
    grads = [dx] + [layer.params[k].grad.copy() for k in names]
    return finite_diff_check(objective, targets, grads, rng, n_samples=n_samples, h=h)


# -- checkpoints ---------------------------------------------------------------

MAGIC = b"LPNET1"
KIND_TAGS = {"conv2d": 1, "batchnorm": 2, "instancenorm": 3, "relu": 4,
             "dropout": 5, "l2norm": 6}
TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}


def _write_array(f: BinaryIO, a: np.ndarray):
    a = np.asarray(a)
    f.write(struct.pack("<I", a.ndim))
    f.write(struct.pack(f"<{a.ndim}I", *a.shape))
    f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def _read_exact(f: BinaryIO, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise ValueError(f"checkpoint truncated at byte {f.tell()}")
    return b


def _read_u32(f: BinaryIO, count: int = 1):
    vals = struct.unpack(f"<{count}I", _read_exact(f, 4 * count))
    return vals[0] if count == 1 else vals


def _read_array(f: BinaryIO) -> np.ndarray:
    rank = _read_u32(f)
    dims = _read_u32(f, rank) if rank > 1 else ((_read_u32(f),) if rank == 1 else ())
    n = int(np.prod(dims)) if dims else 1
    return np.frombuffer(_read_exact(f, 4 * n), dtype="<f4").reshape(dims).astype(np.float32)


def _layer_arrays(layer: Layer) -> list[np.ndarray]:
    arrays = [p.value for p in layer.params.values()]
    if isinstance(layer, BatchNorm2d):
        arrays += [layer.running_mean, layer.running_var]
    return arrays


def _layer_meta(layer: Layer) -> list[float]:
    if isinstance(layer, Conv2d):
        return [layer.in_ch, layer.out_ch, layer.kernel, layer.stride, layer.pad]
    if isinstance(layer, BatchNorm2d):
        return [layer.channels, layer.eps, layer.momentum, layer.tracked]
    if isinstance(layer, InstanceNorm2d):
        return [layer.eps]
    if isinstance(layer, Dropout):
        return [layer.rate]
    if isinstance(layer, L2Normalize):
        return [layer.floor]
    return []


def save_checkpoint(model: Sequential, f: BinaryIO, extra: dict[str, float] | None = None):
    """Serialize layers, parameters and momentum buffers.

    Layout (little-endian): magic, u32 layer count; per layer u32 kind tag,
    a f64 metadata vector (u32 length + values) and u32 array count followed
    by arrays (u32 rank, u32 dims, f32 payload); then u32 momentum-array count
    and the momentum arrays in parameter order; then u32 count of f64
    key/value extras (u32 key length + utf-8 key + f64 value).
    """
    f.write(MAGIC)
    f.write(struct.pack("<I", len(model.layers)))
    for layer in model.layers:
        f.write(struct.pack("<I", KIND_TAGS[layer.kind]))
        meta = _layer_meta(layer)
        f.write(struct.pack("<I", len(meta)))
        f.write(struct.pack(f"<{len(meta)}d", *meta))
        arrays = _layer_arrays(layer)
        f.write(struct.pack("<I", len(arrays)))
        for a in arrays:
            _write_array(f, a)
    params = model.parameters()
    f.write(struct.pack("<I", len(params)))
    for p in params:
        _write_array(f, p.momentum)
    extra = extra or {}
    f.write(struct.pack("<I", len(extra)))
    for key, val in extra.items():
        kb = key.encode()
        f.write(struct.pack("<I", len(kb)) + kb + struct.pack("<d", float(val)))


def load_checkpoint(f: BinaryIO) -> tuple[Sequential, dict[str, float]]:
    if _read_exact(f, len(MAGIC)) != MAGIC:
        raise ValueError("not an LPNET1 checkpoint")
    layers = []
    for _ in range(_read_u32(f)):
        tag = _read_u32(f)
        if tag not in TAG_KINDS:
            raise ValueError(f"unknown layer kind tag {tag} at byte {f.tell() - 4}")
        kind = TAG_KINDS[tag]
        nmeta = _read_u32(f)
        meta = struct.unpack(f"<{nmeta}d", _read_exact(f, 8 * nmeta))
        arrays = [_read_array(f) for _ in range(_read_u32(f))]
        if kind == "conv2d":
            in_ch, out_ch, k, s, p = (int(v) for v in meta)
            layer = Conv2d(in_ch, out_ch, k, s, p)
            layer.params["weight"] = Param(arrays[0])
            layer.params["bias"] = Param(arrays[1])
        elif kind == "batchnorm":
            layer = BatchNorm2d(int(meta[0]), eps=meta[1], momentum=meta[2])
            layer.tracked = int(meta[3])
            layer.params["scale"] = Param(arrays[0], decay=False)
            layer.params["shift"] = Param(arrays[1], decay=False)
            layer.running_mean, layer.running_var = arrays[2], arrays[3]
        elif kind == "instancenorm":
            layer = InstanceNorm2d(meta[0])
        elif kind == "relu":
            layer = ReLU()
        elif kind == "dropout":
            layer = Dropout(meta[0])
        else:
            layer = L2Normalize(meta[0])
        layers.append(layer)
    model = Sequential(layers)
    params = model.parameters()
    if _read_u32(f) != len(params):
        raise ValueError("optimizer state does not match parameter count")
    for p in params:
        p.momentum = _read_array(f)
    extra = {}
    for _ in range(_read_u32(f)):
        key = _read_exact(f, _read_u32(f)).decode()
        extra[key] = struct.unpack("<d", _read_exact(f, 8))[0]
    return model, extra
