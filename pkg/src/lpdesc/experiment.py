"""Desk-scale synthetic dataset, training runs and scoring of trained models."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import datagen as dg
from . import nn
from .config import RunConfig, format_config
from .evalsuite import MatchScores, fpr95, scale_band_fpr95
from .geometry import GridSpec
from .imagecore import Image
from .network import DescriptorNet, LossConfig, build_network, describe_array, train_epoch

log = logging.getLogger(__name__)

MAX_ROTATION_DEG = 25.0


def run_seeds(seed: int) -> dict[str, np.random.Generator]:
    """Independent streams for data synthesis, weight init and training."""
    data, init, train = np.random.SeedSequence(seed).spawn(3)
    return {"data": np.random.default_rng(data), "init": np.random.default_rng(init),
            "train": np.random.default_rng(train)}


def random_pair(base: Image, cfg: RunConfig, rng: np.random.Generator, name: str = "") -> dg.ViewPair:
    """One view pair with zoom log-uniform in [1/4, 4].

    With probability ``keep_scale_fraction`` view b's keypoints keep view a's
    scale, planting a scale ratio equal to the zoom; otherwise scales are
    warped with small detector noise.
    """
    for _ in range(20):
        s = math.exp(rng.uniform(math.log(0.25), math.log(4.0)))
        tr = dg.SimilarityTransform(s, rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG),
                                    *rng.uniform(-0.1, 0.1, 2) * cfg.image_size)
        detector = dg.DetectorNoise(loc_std=0.3, log_scale_std=0.1, orient_std_deg=5.0,
                                    keep_scale=bool(rng.random() < cfg.keep_scale_fraction))
        try:
            pair = dg.synth_pair(base, tr, cfg.noise_level, rng, cfg.keypoints_per_pair,
                                 detector=detector, n_occluders=cfg.occluders, name=name)
        except ValueError:
            continue
        if len(pair.planted) >= 2:
            return pair
    raise RuntimeError("could not place a usable view pair")


def make_sources(cfg: RunConfig, rng: np.random.Generator, n_sources: int, pairs_per_source: int,
                 prefix: str) -> list[dg.Source]:
    sources = []
    for si in range(n_sources):
        base = Image(dg.synth_texture(cfg.image_size, cfg.image_size, rng))
        name = f"{prefix}{si}"
        pairs = []
        for pi in range(pairs_per_source):
            pair = random_pair(base, cfg, rng, f"{name}_{pi}")
            pairs.append(dg.PreparedPair(pair, dg.build_correspondences(pair), name, pi))
        sources.append(dg.Source(name, pairs))
    return sources


@dataclass
class DeskDataset:
    train: list
    test: list

    @property
    def n_train_pairs(self) -> int:
        return sum(s.size for s in self.train)


def build_desk_dataset(cfg: RunConfig) -> DeskDataset:
    rng = run_seeds(cfg.seed)["data"]
    train = make_sources(cfg, rng, cfg.n_sources, cfg.pairs_per_source, "train")
    test = make_sources(cfg, rng, cfg.test_sources, cfg.test_pairs_per_source, "test")
    return DeskDataset(train, test)


def load_sources(directory) -> list[dg.Source]:
    """Sources written by ``write_sources`` (one subdirectory per source)."""
    sources = []
    for sub in sorted(p for p in Path(directory).iterdir() if p.is_dir()):
        pairs = []
        for i, manifest in enumerate(sorted(sub.glob("*.pair"))):
            pair, corr = dg.read_viewpair(manifest)
            if corr is None:
                corr = dg.build_correspondences(pair)
            pairs.append(dg.PreparedPair(pair, corr, sub.name, i))
        sources.append(dg.Source(sub.name, pairs))
    return sources


def write_sources(directory, sources: list):
    for src in sources:
        for pp in src.pairs:
            dg.write_viewpair(Path(directory) / src.name, pp.pair.name or f"pair{pp.index}",
                              pp.pair, pp.corr)


def grid_spec(cfg: RunConfig) -> GridSpec:
    return GridSpec(cfg.L, cfg.lam, cfg.grid_kind)


def optim_config(cfg: RunConfig) -> nn.OptimConfig:
    return nn.OptimConfig(cfg.learning_rate, cfg.momentum, cfg.weight_decay, cfg.epochs)


def batches_per_epoch(sources: list, k: int) -> int:
    return max(1, sum(s.size for s in sources) // k)


def train_model(cfg: RunConfig, sources: list,
                on_epoch: Callable[[int, DescriptorNet, object], None] | None = None) -> tuple[DescriptorNet, list]:
    """Train from scratch; returns the network and per-epoch statistics.

    Batch composition depends only on ``cfg.seed``, so models that differ in
    grid kind or lambda see the same correspondences in the same order.
    """
    streams = run_seeds(cfg.seed)
    net = build_network(int(streams["init"].integers(2 ** 31)), dropout=cfg.dropout)
    spec = grid_spec(cfg)
    optim = optim_config(cfg)
    loss_cfg = LossConfig(cfg.margin, cfg.distance_power)
    batch_rng, dropout_rng = streams["train"].spawn(2)
    n_batches = batches_per_epoch(sources, cfg.K)
    history = []
    for epoch in range(cfg.epochs):
        stream = (dg.assemble_batch(sources, cfg.K, batch_rng, spec, cfg.jitter_std_deg)
                  for _ in range(n_batches))
        stats = train_epoch(net, stream, optim, loss_cfg, epoch, dropout_rng)
        history.append(stats)
        log.info("epoch %d/%d loss %.4f active %.3f", epoch + 1, cfg.epochs,
                 stats.mean_loss, stats.active_fraction)
        if on_epoch is not None:
            on_epoch(epoch, net, stats)
    return net, history


def pair_descriptors(net: DescriptorNet, pp: dg.PreparedPair, spec: GridSpec):
    recs = pp.corr.records
    ka = [pp.pair.keypoints_a[r.idx_a] for r in recs]
    kb = [pp.pair.keypoints_b[r.idx_b] for r in recs]
    return (describe_array(net, pp.patches("a", ka, spec)),
            describe_array(net, pp.patches("b", kb, spec)))


def score_sources(net: DescriptorNet, sources: list, spec: GridSpec, neg_shifts: int = 10) -> MatchScores:
    """Positive distance for each correspondence; negatives pair a_k with
    b_{k+s} of the same image pair for the first ``neg_shifts`` offsets."""
    pos, neg, sr, orr = [], [], [], []
    for src in sources:
        for pp in src.pairs:
            n = len(pp.corr)
            if n < 2:
                continue
            da, db = pair_descriptors(net, pp, spec)
            pos.append(np.linalg.norm(da - db, axis=1))
            for s in range(1, min(neg_shifts, n - 1) + 1):
                neg.append(np.linalg.norm(da - np.roll(db, -s, axis=0), axis=1))
            sr += [r.scale_ratio for r in pp.corr.records]
            orr += [r.orientation_residual for r in pp.corr.records]
    return MatchScores(np.concatenate(pos), np.concatenate(neg), np.array(sr), np.array(orr))


# -- grid kind / lambda comparison -----------------------------------------------------

TREND_MODELS = (("logpolar", 16.0), ("logpolar", 96.0), ("cartesian", 16.0), ("cartesian", 96.0))
# modules whose behaviour determines trained weights and scores
_TRAINING_SOURCES = ("nn.py", "network.py", "triplet.py", "datagen.py", "geometry.py",
                     "imagecore.py", "experiment.py", "evalsuite.py", "config.py")


def code_fingerprint() -> str:
    h = hashlib.sha256()
    here = Path(__file__).parent
    for name in _TRAINING_SOURCES:
        h.update((here / name).read_bytes())
    return h.hexdigest()[:16]


def evaluate_model(net: DescriptorNet, cfg: RunConfig, test: list) -> dict:
    scores = score_sources(net, test, grid_spec(cfg))
    return {"fpr95": fpr95(scores),
            "fpr95_r_1_1.33": scale_band_fpr95(scores, 1.0, 1.33),
            "fpr95_r_2_4": scale_band_fpr95(scores, 2.0, 4.0),
            "positives": int(scores.positive.size),
            "positives_r_2_4": int(np.sum((scores.scale_ratio >= 2) & (scores.scale_ratio <= 4))),
            "negatives": int(scores.negative.size)}


def run_trend(cfg: RunConfig, cache_dir=None, models=TREND_MODELS) -> dict:
    """Train and score one model per (grid kind, lambda) on a shared dataset.

    Results are cached as JSON under ``cache_dir`` keyed by the resolved
    config and a fingerprint of the training code, so a cached result is
    only reused when it would be reproduced exactly.
    """
    key = {"config": format_config(cfg), "code": code_fingerprint(),
           "models": [list(m) for m in models]}
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / "trend_results.json"
        if path.exists():
            cached = json.loads(path.read_text())
            if cached.get("key") == key:
                return cached["results"]
            log.warning("cached trend results do not match the current config/code; retraining")
    ds = build_desk_dataset(cfg)
    results = {"train_pairs": ds.n_train_pairs}
    for kind, lam in models:
        mcfg = RunConfig(**{**cfg.__dict__, "grid_kind": kind, "lam": lam})
        net, history = train_model(mcfg, ds.train)
        res = evaluate_model(net, mcfg, ds.test)
        res["loss_history"] = [h.mean_loss for h in history]
        results[f"{kind}-{lam:g}"] = res
        log.info("%s lambda=%g: %s", kind, lam, {k: v for k, v in res.items() if k != "loss_history"})
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"key": key, "results": results}, indent=1))
    return results
