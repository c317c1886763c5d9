"""The 7-convolution patch descriptor network and its training epoch."""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from . import nn
from .imagecore import Patch
from .triplet import batch_hard_loss

PATCH_SIZE = 32
DESCRIPTOR_DIM = 128
# (out channels, stride) for the 3x3 layers; the 8x8 head maps 8x8 -> 1x1
CONV_PLAN = ((32, 1), (32, 1), (64, 2), (64, 1), (128, 2), (128, 1))


class BatchError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, batch_index: int, loss: float):
        super().__init__(f"non-finite loss {loss} at batch {batch_index}")
        self.batch_index = batch_index


@dataclass
class LossConfig:
    margin: float = 1.0
    power: int = 2


class DescriptorNet:
    """Instance norm -> 6 x (3x3 conv, batchnorm, ReLU) -> dropout -> 8x8 conv,
    batchnorm, l2 normalization."""

    def __init__(self, model: nn.Sequential):
        convs = [layer for layer in model.layers if isinstance(layer, nn.Conv2d)]
        if len(convs) != 7:
            raise ValueError(f"descriptor network needs 7 convolutions, found {len(convs)}")
        if convs[-1].out_ch != DESCRIPTOR_DIM:
            raise ValueError("final convolution must produce 128 channels")
        self.model = model

    @property
    def layers(self):
        return self.model.layers

    def parameters(self):
        return self.model.parameters()

    def forward(self, x: np.ndarray, train: bool = False, rng=None) -> np.ndarray:
        return self.model.forward(x, train=train, rng=rng).reshape(x.shape[0], -1)

    def backward(self, d_desc: np.ndarray) -> np.ndarray:
        return self.model.backward(d_desc.reshape(d_desc.shape[0], -1, 1, 1))

    def zero_grad(self):
        self.model.zero_grad()

    def astype(self, dtype):
        self.model.astype(dtype)
        return self

    def spatial_trace(self, size: int = PATCH_SIZE) -> list[int]:
        """Spatial side after each convolution for a size x size input."""
        out = []
        for layer in self.layers:
            if isinstance(layer, nn.Conv2d):
                size = layer.output_size(size, size)[0]
                out.append(size)
        return out

    def calibrate(self, patches: np.ndarray, rng=None):
        """Populate batchnorm running statistics from a train-mode pass, no update."""
        x = _as_input(patches)
        self.forward(x, train=True, rng=rng if rng is not None else np.random.default_rng(0))

    def save(self, f: BinaryIO, extra=None):
        nn.save_checkpoint(self.model, f, extra)

    @classmethod
    def load(cls, f: BinaryIO):
        model, extra = nn.load_checkpoint(f)
        return cls(model), extra

    def to_bytes(self, extra=None) -> bytes:
        buf = io.BytesIO()
        self.save(buf, extra)
        return buf.getvalue()


def build_network(seed: int, dropout: float = 0.1, bn_eps: float = 1e-5,
                  in_eps: float = 1e-10) -> DescriptorNet:
    rng = np.random.default_rng(seed)
    layers: list[nn.Layer] = [nn.InstanceNorm2d(in_eps)]
    in_ch = 1
    for out_ch, stride in CONV_PLAN:
        layers += [nn.Conv2d(in_ch, out_ch, 3, stride, 1, rng=rng),
                   nn.BatchNorm2d(out_ch, eps=bn_eps), nn.ReLU()]
        in_ch = out_ch
    layers += [nn.Dropout(dropout), nn.Conv2d(in_ch, DESCRIPTOR_DIM, 8, 1, 0, rng=rng),
               nn.BatchNorm2d(DESCRIPTOR_DIM, eps=bn_eps), nn.L2Normalize()]
    return DescriptorNet(nn.Sequential(layers))


def _as_input(patches) -> np.ndarray:
    a = np.asarray(patches, dtype=np.float32)
    if a.ndim == 3:
        a = a[:, None]
    return a


def describe(net: DescriptorNet, patches: Sequence[Patch], batch_size: int = 256) -> np.ndarray:
    """Inference-mode descriptors, one row per patch, in input order."""
    if len(patches) == 0:
        return np.zeros((0, DESCRIPTOR_DIM), dtype=np.float32)
    kinds = {p.grid_kind for p in patches}
    if len(kinds) > 1:
        raise BatchError(f"patch batch mixes grid kinds {sorted(kinds)}")
    for i, p in enumerate(patches):
        if p.size != PATCH_SIZE:
            raise BatchError(f"patch {i} is {p.size}x{p.size}, network expects {PATCH_SIZE}")
    arr = np.stack([p.data for p in patches])
    return describe_array(net, arr, batch_size)


def describe_array(net: DescriptorNet, arr: np.ndarray, batch_size: int = 256) -> np.ndarray:
    x = _as_input(arr)
    if x.shape[0] == 0:
        return np.zeros((0, DESCRIPTOR_DIM), dtype=np.float32)
    # batchnorm in inference mode is per-sample, so chunking does not change results
    out = [net.forward(x[i:i + batch_size], train=False) for i in range(0, len(x), batch_size)]
    return np.concatenate(out).astype(np.float32)


@dataclass
class EpochStats:
    mean_loss: float
    batches: int
    active_fraction: float


def train_step(net: DescriptorNet, patches_a: np.ndarray, patches_b: np.ndarray,
               optim: nn.OptimConfig, loss_cfg: LossConfig, epoch: int, rng) -> tuple[float, float]:
    """Forward both sides as one batch, mine, backpropagate, update.

    Returns the summed loss and the fraction of active hinge terms.
    """
    k = len(patches_a)
    x = np.concatenate([_as_input(patches_a), _as_input(patches_b)])
    net.zero_grad()
    desc = net.forward(x, train=True, rng=rng)
    fa, fb = desc[:k].astype(np.float64), desc[k:].astype(np.float64)
    loss, ga, gb, _, active = batch_hard_loss(fa, fb, loss_cfg.margin, loss_cfg.power)
    if not math.isfinite(loss):
        return loss, float("nan")
    grad = np.concatenate([ga, gb]).astype(desc.dtype)
    net.backward(grad)
    nn.sgd_step(net.parameters(), optim, epoch)
    return loss, float(active.mean())


def train_epoch(net: DescriptorNet, batches: Iterable, optim: nn.OptimConfig,
                loss_cfg: LossConfig, epoch: int, rng: np.random.Generator) -> EpochStats:
    """One pass over a stream of patch-pair batches.

    Each batch must expose ``patches_a``, ``patches_b`` (K x L x L) and
    ``keys`` (K hashable 3D-point identities); batches with repeated keys
    are rejected.
    """
    total, seen, active = 0.0, 0, 0.0
    for i, batch in enumerate(batches):
        k = len(batch.keys)
        if len(set(batch.keys)) != k:
            raise BatchError(f"batch {i} repeats a 3D point; pairs must be unique per batch")
        if k < 2:
            raise BatchError(f"batch {i} has {k} pairs; mining needs at least 2")
        loss, frac = train_step(net, batch.patches_a, batch.patches_b, optim, loss_cfg, epoch, rng)
        if not math.isfinite(loss):
            raise TrainingDiverged(i, loss)
        total += loss / k
        active += frac
        seen += 1
    if seen == 0:
        raise BatchError("epoch produced no batches")
    return EpochStats(total / seen, seen, active / seen)


# -- descriptor files ---------------------------------------------------------------

DESC_MAGIC = b"LPDESC1"


def write_descriptors(f: BinaryIO, desc: np.ndarray):
    desc = np.asarray(desc, dtype="<f4").reshape(-1, DESCRIPTOR_DIM)
    f.write(DESC_MAGIC)
    f.write(struct.pack("<II", desc.shape[0], DESCRIPTOR_DIM))
    f.write(desc.tobytes())


def read_descriptors(f: BinaryIO) -> np.ndarray:
    head = f.read(len(DESC_MAGIC) + 8)
    if len(head) < len(DESC_MAGIC) + 8 or head[:len(DESC_MAGIC)] != DESC_MAGIC:
        raise ValueError("not an LPDESC1 descriptor file")
    count, dim = struct.unpack("<II", head[len(DESC_MAGIC):])
    payload = f.read(4 * count * dim)
    if len(payload) != 4 * count * dim:
        raise ValueError(f"descriptor file truncated: expected {count}x{dim} floats")
    return np.frombuffer(payload, dtype="<f4").reshape(count, dim).astype(np.float32)
