"""FPR95 (global and binned by detector error) and rank-based retrieval."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DEFAULT_SCALE_EDGES = (1.0, 1.33, 1.66, 2.0, 4.0)
DEFAULT_ORIENT_EDGES = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0)
LOW_CONFIDENCE = 20


@dataclass
class MatchScores:
    """Positive distances with their pair annotations, and negative distances."""

    positive: np.ndarray
    negative: np.ndarray
    scale_ratio: np.ndarray | None = None
    orientation_residual: np.ndarray | None = None

    def __post_init__(self):
        self.positive = np.asarray(self.positive, dtype=np.float64).ravel()
        self.negative = np.asarray(self.negative, dtype=np.float64).ravel()
        for name in ("positive", "negative"):
            v = getattr(self, name)
            if v.size == 0:
                raise ValueError(f"no {name} distances")
            if not np.all(np.isfinite(v)) or np.any(v < 0):
                raise ValueError(f"{name} distances must be finite and non-negative")
        for name in ("scale_ratio", "orientation_residual"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=np.float64).ravel()
                if v.shape != self.positive.shape:
                    raise ValueError(f"{name} needs one value per positive")
                setattr(self, name, v)


def threshold_index(n_pos: int, recall: int = 95) -> int:
    """0-based index of the ceil(recall% * P)-th smallest positive."""
    return (recall * n_pos + 99) // 100 - 1


def fpr_at_recall(positive, negative, recall: int = 95) -> float:
    pos = np.sort(np.asarray(positive, dtype=np.float64))
    neg = np.asarray(negative, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("fpr95 needs at least one positive and one negative")
    t = pos[threshold_index(pos.size, recall)]
    return float(np.count_nonzero(neg <= t)) / neg.size


def fpr95(scores: MatchScores) -> float:
    return fpr_at_recall(scores.positive, scores.negative)


@dataclass
class BinCell:
    scale_lo: float
    scale_hi: float
    orient_lo: float
    orient_hi: float
    count: int
    fpr95: float | None  # None marks an empty cell

    @property
    def low_confidence(self) -> bool:
        return 0 < self.count < LOW_CONFIDENCE


@dataclass
class BinGrid:
    scale_edges: Sequence[float] = DEFAULT_SCALE_EDGES
    orient_edges: Sequence[float] = DEFAULT_ORIENT_EDGES
    cells: list = field(default_factory=list)

    def __post_init__(self):
        for name in ("scale_edges", "orient_edges"):
            e = np.asarray(getattr(self, name), dtype=np.float64)
            if e.size < 2 or np.any(np.diff(e) <= 0):
                raise ValueError(f"{name} must be strictly increasing with >= 2 edges")
            setattr(self, name, tuple(float(v) for v in e))

    def cell(self, i: int, j: int) -> BinCell:
        return self.cells[i * (len(self.orient_edges) - 1) + j]


def _bin_index(values: np.ndarray, edges: Sequence[float]) -> np.ndarray:
    """Half-open bins [lo, hi), except the last bin which also takes its upper edge.
    Values outside the edges get -1."""
    e = np.asarray(edges)
    idx = np.searchsorted(e, values, side="right") - 1
    idx[values == e[-1]] = len(e) - 2
    idx[(values < e[0]) | (values > e[-1])] = -1
    return idx


def binned_fpr95(scores: MatchScores, grid: BinGrid | None = None) -> BinGrid:
    """FPR95 per (scale ratio, orientation residual) cell against the global negatives."""
    grid = BinGrid(grid.scale_edges, grid.orient_edges) if grid else BinGrid()
    if scores.scale_ratio is None or scores.orientation_residual is None:
        raise ValueError("binned evaluation needs scale ratio and orientation annotations")
    si = _bin_index(scores.scale_ratio, grid.scale_edges)
    oi = _bin_index(scores.orientation_residual, grid.orient_edges)
    for i in range(len(grid.scale_edges) - 1):
        for j in range(len(grid.orient_edges) - 1):
            sel = (si == i) & (oi == j)
            n = int(sel.sum())
            rate = fpr_at_recall(scores.positive[sel], scores.negative) if n else None
            grid.cells.append(BinCell(grid.scale_edges[i], grid.scale_edges[i + 1],
                                      grid.orient_edges[j], grid.orient_edges[j + 1], n, rate))
    return grid


def scale_band_fpr95(scores: MatchScores, lo: float, hi: float) -> float:
    """FPR95 over positives whose scale ratio lies in [lo, hi], any orientation."""
    sel = (scores.scale_ratio >= lo) & (scores.scale_ratio <= hi)
    if not sel.any():
        raise ValueError(f"no positives with scale ratio in [{lo}, {hi}]")
    return fpr_at_recall(scores.positive[sel], scores.negative)


# -- retrieval -----------------------------------------------------------------

@dataclass
class RetrievalConfig:
    n_matches: int = 500
    n_distractors: int = 3000
    exclusion_radius: float = 3.0

    def __post_init__(self):
        if self.n_matches < 1 or self.n_distractors < 0:
            raise ValueError("need n_matches >= 1 and n_distractors >= 0")


@dataclass
class RetrievalResult:
    ranks: np.ndarray
    n_candidates: int

    def cdf(self, max_rank: int | None = None) -> np.ndarray:
        """cdf[k-1] = fraction of queries with rank <= k."""
        m = max_rank or self.n_candidates
        counts = np.bincount(np.minimum(self.ranks, m + 1), minlength=m + 2)[1:m + 1]
        return np.cumsum(counts) / self.ranks.size

    @property
    def rank1(self) -> float:
        return float(np.mean(self.ranks == 1))


def retrieval_ranks(queries: np.ndarray, matches: np.ndarray,
                    distractors: np.ndarray | None = None) -> RetrievalResult:
    """Rank of each query's true match among all matches plus distractors.

    Query i's candidates are every row of ``matches`` (row i is its true
    match) followed by the distractors.  A candidate at a distance equal to
    the true match counts as closer.
    """
    q = np.asarray(queries, dtype=np.float64)
    m = np.asarray(matches, dtype=np.float64)
    if q.shape != m.shape:
        raise ValueError("queries and matches must align one to one")
    cand = m if distractors is None or len(distractors) == 0 else \
        np.concatenate([m, np.asarray(distractors, dtype=np.float64)])
    d = np.sqrt(np.maximum((q * q).sum(1)[:, None] + (cand * cand).sum(1)[None, :]
                           - 2.0 * q @ cand.T, 0.0))
    idx = np.arange(len(q))
    true = d[idx, idx]
    closer = (d <= true[:, None]).sum(1) - 1  # minus the true match itself
    return RetrievalResult(1 + closer, cand.shape[0])


def merge_results(results: Sequence[RetrievalResult]) -> RetrievalResult:
    """Accumulate ranks over several image pairs."""
    return RetrievalResult(np.concatenate([r.ranks for r in results]),
                           max(r.n_candidates for r in results))


# -- CSV output ---------------------------------------------------------------------

GLOBAL_FIELDS = ("method", "lambda", "grid_kind", "fpr95", "rank1", "positives", "negatives")
BIN_FIELDS = ("scale_lo", "scale_hi", "orient_lo", "orient_hi", "fpr95", "count", "flag")


def write_global_csv(path, rows: Sequence[dict]):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, GLOBAL_FIELDS, restval="")
        w.writeheader()
        for row in rows:
            w.writerow(row)


def write_bins_csv(path, grid: BinGrid):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(BIN_FIELDS)
        for c in grid.cells:
            flag = "empty" if c.fpr95 is None else ("low_confidence" if c.low_confidence else "")
            w.writerow([c.scale_lo, c.scale_hi, c.orient_lo, c.orient_hi,
                        "" if c.fpr95 is None else repr(c.fpr95), c.count, flag])


def read_scores_csv(path) -> MatchScores:
    """``label,distance`` rows (label 1 = positive, 0 = negative); optional
    ``scale_ratio`` and ``orientation_residual`` columns annotate positives."""
    pos, neg, sr, orr = [], [], [], []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            label = row["label"].strip()
            dist = float(row["distance"])
            if label in ("1", "pos", "positive"):
                pos.append(dist)
                if row.get("scale_ratio"):
                    sr.append(float(row["scale_ratio"]))
                    orr.append(float(row.get("orientation_residual") or 0.0))
            elif label in ("0", "neg", "negative"):
                neg.append(dist)
            else:
                raise ValueError(f"unknown label {label!r}")
    annotated = len(sr) == len(pos) and pos
    return MatchScores(pos, neg, sr if annotated else None, orr if annotated else None)


def relative_change(new: float, old: float) -> float:
    if old == 0:
        return math.inf if new > 0 else 0.0
    return (new - old) / old
