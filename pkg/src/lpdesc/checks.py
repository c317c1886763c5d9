"""Runtime self-checks: gradient verification and core invariants."""

from __future__ import annotations

import math

import numpy as np

from . import nn
from .datagen import SimilarityTransform, build_correspondences, synth_pair, synth_texture
from .evalsuite import fpr_at_recall
from .geometry import GridSpec, Keypoint, logpolar_grid
from .imagecore import Image
from .network import build_network
from .triplet import batch_hard_loss, distance_matrix, mine_hardest_in_batch

GRAD_TOL = 1e-4


class SignFlip(nn.Layer):
    """Wraps a layer and negates its input gradient (fault injection)."""

    def __init__(self, inner: nn.Layer):
        super().__init__()
        self.inner = inner
        self.params = inner.params

    def forward(self, x, train=False, rng=None):
        return self.inner.forward(x, train, rng)

    def backward(self, dy):
        return -self.inner.backward(dy)

    def astype(self, dtype):
        self.inner.astype(dtype)


def layer_gradients(rng: np.random.Generator, n_samples: int = 200) -> dict[str, float]:
    x4 = rng.standard_normal((4, 3, 6, 6))
    cases = {
        "conv3x3": (nn.Conv2d(3, 4, 3, 1, 1, rng=rng), x4, True),
        "conv3x3_stride2": (nn.Conv2d(3, 4, 3, 2, 1, rng=rng), x4, True),
        "conv_head": (nn.Conv2d(3, 5, 6, 1, 0, rng=rng), x4, True),
        "batchnorm_train": (nn.BatchNorm2d(3), x4, True),
        "instancenorm": (nn.InstanceNorm2d(), rng.standard_normal((3, 1, 5, 5)), True),
        # keep inputs away from the kink at 0
        "relu": (nn.ReLU(), x4 + np.sign(x4) * 0.05, True),
        "dropout": (nn.Dropout(0.3), x4, True),
        "l2norm": (nn.L2Normalize(), rng.standard_normal((4, 7, 1, 1)), True),
    }
    return {name: nn.check_layer(layer, x, rng, train, n_samples)
            for name, (layer, x, train) in cases.items()}


def network_gradient(rng: np.random.Generator, k: int = 4, fault: bool = False,
                     n_samples: int = 200) -> float:
    """Finite-difference check of the full network plus triplet loss in float64."""
    net = build_network(int(rng.integers(2 ** 31))).astype(np.float64)
    if fault:
        layers = net.model.layers
        i = max(j for j, layer in enumerate(layers) if isinstance(layer, nn.Conv2d))
        layers[i] = SignFlip(layers[i])
    x = rng.random((2 * k, 1, 32, 32))
    state = {}

    def objective():
        desc = net.forward(x, train=True, rng=np.random.default_rng(7))
        loss, ga, gb, sel, active = batch_hard_loss(desc[:k], desc[k:])
        # kinks: mining choice, hinge activity and every ReLU mask
        masks = tuple(layer._mask.copy() for layer in net.layers if isinstance(layer, nn.ReLU))
        state.update(grad=np.concatenate([ga, gb]),
                     sig=(sel.anchor_is_a.copy(), sel.negative.copy(), active.copy()) + masks)
        return loss

    net.zero_grad()
    objective()
    net.backward(state["grad"])
    params = net.parameters()
    targets = [p.value for p in params]
    grads = [p.grad.copy() for p in params]
    return nn.finite_diff_check(objective, targets, grads, rng, n_samples=n_samples,
                                signature=lambda: state["sig"])


def gradcheck(seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    out = layer_gradients(rng)
    out["network+triplet"] = network_gradient(rng)
    return out


def _row_shift(rng) -> bool:
    spec = GridSpec(32, 96.0, "logpolar")
    for _ in range(20):
        kp = Keypoint(*rng.uniform(0, 200, 2), rng.uniform(1, 4), rng.uniform(0, 2 * math.pi))
        k = int(rng.integers(1, 32))
        g0 = logpolar_grid(kp, spec)
        g1 = logpolar_grid(Keypoint(kp.x, kp.y, kp.sigma, kp.theta + 2 * math.pi * k / 32), spec)
        if not (np.array_equal(np.roll(g0.src_x, -k, 0), g1.src_x)
                and np.array_equal(np.roll(g0.src_y, -k, 0), g1.src_y)):
            return False
    return True


def _mining(rng) -> bool:
    for _ in range(20):
        k = int(rng.integers(2, 16))
        fa, fb = rng.standard_normal((2, k, 8))
        d = distance_matrix(fa, fb)
        sel = mine_hardest_in_batch(d)
        for i in range(k):
            if sel.neg_dist[i] != min(d[i].min(), d[:, i].min()):
                return False
    return True


def _fpr(rng) -> bool:
    for _ in range(20):
        pos, neg = rng.random(int(rng.integers(1, 50))), rng.random(int(rng.integers(1, 50)))
        need = math.ceil(0.95 * len(pos) - 1e-9)
        t = min(v for v in pos if np.sum(pos <= v) >= need)
        if fpr_at_recall(pos, neg) != np.mean(neg <= t):
            return False
    return True


def _correspondences(rng) -> bool:
    base = Image(synth_texture(96, 96, rng))
    for _ in range(3):
        pair = synth_pair(base, SimilarityTransform(rng.uniform(0.7, 1.5), rng.uniform(-20, 20)),
                          0.0, rng, 30, n_distractors=5)
        got = {(c.idx_a, c.idx_b) for c in build_correspondences(pair)}
        if got != set(pair.planted):
            return False
    return True


def _descriptor_norm(rng) -> bool:
    net = build_network(int(rng.integers(2 ** 31)))
    x = rng.random((8, 1, 32, 32)).astype(np.float32)
    net.calibrate(x)
    d = net.forward(x)
    d2 = net.forward(2.5 * x + 0.3)
    return bool(np.all(np.abs(np.linalg.norm(d, axis=1) - 1) < 1e-5) and np.abs(d - d2).max() < 1e-5)


def selfcheck(seed: int = 0) -> dict[str, bool]:
    rng = np.random.default_rng(seed)
    grads = gradcheck(seed)
    return {
        "log-polar row shift": _row_shift(rng),
        "hardest-in-batch mining": _mining(rng),
        "fpr95 threshold": _fpr(rng),
        "planted correspondences": _correspondences(rng),
        "descriptor norm and intensity invariance": _descriptor_norm(rng),
        "gradients": max(grads.values()) < GRAD_TOL,
        "sign-flip fault detected": network_gradient(rng, fault=True) > 0.1,
    }
