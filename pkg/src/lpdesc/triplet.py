"""Hardest-in-batch triplet mining and the margin loss over descriptor pairs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# any two unit vectors are at most 2 apart
SENTINEL = 10.0


def distance_matrix(fa: np.ndarray, fb: np.ndarray) -> np.ndarray:
    """D[i, j] = ||fa_i - fb_j||, with the diagonal replaced by ``SENTINEL``."""
    fa = np.asarray(fa, dtype=np.float64)
    fb = np.asarray(fb, dtype=np.float64)
    if fa.shape != fb.shape:
        raise ValueError(f"descriptor sets differ in shape: {fa.shape} vs {fb.shape}")
    sq = (fa * fa).sum(1)[:, None] + (fb * fb).sum(1)[None, :] - 2.0 * fa @ fb.T
    d = np.sqrt(np.maximum(sq, 0.0))
    np.fill_diagonal(d, SENTINEL)
    return d


@dataclass
class TripletSelection:
    """Per positive pair k: which side anchors the triplet and its negative.

    ``anchor_is_a[k]`` True means triplet (a_k, b_k, b_neg[k]); False means
    (b_k, a_k, a_neg[k]).  ``negative`` holds the chosen negative index on the
    side opposite the anchor, ``neg_dist`` its distance from the matrix.
    """

    anchor_is_a: np.ndarray
    negative: np.ndarray
    neg_dist: np.ndarray


def mine_hardest_in_batch(d: np.ndarray) -> TripletSelection:
    k = d.shape[0]
    if k < 2:
        raise ValueError("hardest-in-batch mining needs at least two pairs")
    b_min = np.argmin(d, axis=1)  # row k: negatives b_j for anchor a_k
    a_min = np.argmin(d, axis=0)  # column k: negatives a_i for anchor b_k
    idx = np.arange(k)
    row_d = d[idx, b_min]
    col_d = d[a_min, idx]
    anchor_a = row_d <= col_d
    return TripletSelection(anchor_a, np.where(anchor_a, b_min, a_min),
                            np.where(anchor_a, row_d, col_d))


def triplet_margin_loss(fa: np.ndarray, fb: np.ndarray, sel: TripletSelection,
                        margin: float = 1.0, power: int = 2):
    """Sum over k of max(0, margin + d_pos^p - d_neg^p).

    Distances are recomputed from the descriptors.  Returns the loss, the
    gradients with respect to ``fa`` and ``fb`` and the boolean mask of
    active hinge terms.
    """
    if power not in (1, 2):
        raise ValueError("distance power must be 1 or 2")
    anchor = np.where(sel.anchor_is_a[:, None], fa, fb)
    positive = np.where(sel.anchor_is_a[:, None], fb, fa)
    negative = np.where(sel.anchor_is_a[:, None], fb[sel.negative], fa[sel.negative])
    dp_vec = anchor - positive
    dn_vec = anchor - negative
    dp2 = (dp_vec * dp_vec).sum(1)
    dn2 = (dn_vec * dn_vec).sum(1)
    if power == 2:
        terms = margin + dp2 - dn2
    else:
        terms = margin + np.sqrt(dp2) - np.sqrt(dn2)
    active = terms > 0
    loss = float(terms[active].sum())

    # d(d^2)/d anchor = 2 (anchor - other); d(d)/d anchor = (anchor - other) / d
    if power == 2:
        gp = 2.0 * dp_vec
        gn = 2.0 * dn_vec
    else:
        with np.errstate(invalid="ignore", divide="ignore"):
            gp = np.where(dp2[:, None] > 0, dp_vec / np.sqrt(dp2)[:, None], 0.0)
            gn = np.where(dn2[:, None] > 0, dn_vec / np.sqrt(dn2)[:, None], 0.0)
    gp = gp * active[:, None]
    gn = gn * active[:, None]
    g_anchor = gp - gn
    g_positive = -gp
    g_negative = gn
    ga = np.zeros_like(fa)
    gb = np.zeros_like(fb)
    a_side = sel.anchor_is_a
    ga[a_side] += g_anchor[a_side]
    gb[a_side] += g_positive[a_side]
    np.add.at(gb, sel.negative[a_side], g_negative[a_side])
    gb[~a_side] += g_anchor[~a_side]
    ga[~a_side] += g_positive[~a_side]
    np.add.at(ga, sel.negative[~a_side], g_negative[~a_side])
    return loss, ga, gb, active


def batch_hard_loss(fa: np.ndarray, fb: np.ndarray, margin: float = 1.0, power: int = 2):
    """Mine on the distance matrix, then evaluate the loss (convenience wrapper)."""
    sel = mine_hardest_in_batch(distance_matrix(fa, fb))
    loss, ga, gb, active = triplet_margin_loss(fa, fb, sel, margin, power)
    return loss, ga, gb, sel, active


def hinge_term(d_pos: float, d_neg: float, margin: float = 1.0, power: int = 2) -> float:
    """max(0, margin + d_pos^p - d_neg^p) for a single triplet."""
    return max(0.0, margin + d_pos ** power - d_neg ** power)
