"""Ground-truth correspondences, synthetic view pairs and training batches.

A view pair maps image a to image b either through a 3x3 plane homography or
through per-view depth maps with intrinsics and a relative pose
(X_b = R X_a + t, camera coordinates).  Occlusion masks are boolean arrays,
True where a pixel does not show the shared scene.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial import cKDTree

from .geometry import (Correspondence, GridSpec, Keypoint, make_grid, orientation_residual,
                       read_keypoints, scale_ratio, wrap_angle, write_keypoints)
from .imagecore import Image, mirror_pad, read_image, sample, write_image

log = logging.getLogger(__name__)


@dataclass
class FilterConfig:
    projection_tol: float = 1.5
    orientation_tol: float = 25.0
    min_separation: float = 7.0
    distractor_exclusion: float = 3.0
    depth_tol: float = 0.05

    def __post_init__(self):
        for name in ("projection_tol", "orientation_tol", "min_separation",
                     "distractor_exclusion", "depth_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class ViewPair:
    image_a: Image
    image_b: Image
    keypoints_a: list
    keypoints_b: list
    homography: np.ndarray | None = None
    depth_a: np.ndarray | None = None
    depth_b: np.ndarray | None = None
    intrinsics_a: np.ndarray | None = None
    intrinsics_b: np.ndarray | None = None
    rotation: np.ndarray | None = None
    translation: np.ndarray | None = None
    mask_a: np.ndarray | None = None
    mask_b: np.ndarray | None = None
    planted: list = field(default_factory=list)
    name: str = ""

    def __post_init__(self):
        has_h = self.homography is not None
        has_d = self.depth_a is not None
        if has_h == has_d:
            raise ValueError("a view pair needs exactly one of: homography, depth maps + pose")
        if has_h:
            self.homography = np.asarray(self.homography, dtype=np.float64).reshape(3, 3)
            if abs(np.linalg.det(self.homography)) < 1e-12:
                raise ValueError("homography is singular")
        else:
            for name in ("depth_b", "intrinsics_a", "intrinsics_b", "rotation", "translation"):
                if getattr(self, name) is None:
                    raise ValueError(f"depth mode needs {name}")

    @property
    def mode(self) -> str:
        return "homography" if self.homography is not None else "depth"


@dataclass
class Projection:
    x: float | None
    y: float | None
    sigma: float | None
    theta: float | None
    rotation: float | None
    status: str  # "ok", "occluded", "out_of_range"


def _in_bounds(img: Image, x: float, y: float) -> bool:
    return 0 <= x <= img.width - 1 and 0 <= y <= img.height - 1


def _hidden(mask, x: float, y: float) -> bool:
    if mask is None:
        return False
    h, w = mask.shape
    xi = min(max(int(round(x)), 0), w - 1)
    yi = min(max(int(round(y)), 0), h - 1)
    return bool(mask[yi, xi])


def _apply_h(h: np.ndarray, x: float, y: float):
    p = h @ np.array([x, y, 1.0])
    xb, yb = p[0] / p[2], p[1] / p[2]
    # Jacobian of the perspective division at (x, y)
    jac = (h[:2, :2] - np.outer([xb, yb], h[2, :2])) / p[2]
    return xb, yb, jac


def _depth_at(depth: np.ndarray, x: float, y: float) -> float:
    h, w = depth.shape
    xi = min(max(int(round(x)), 0), w - 1)
    yi = min(max(int(round(y)), 0), h - 1)
    return float(depth[yi, xi])


def project_keypoint(kp: Keypoint, pair: ViewPair, direction: str = "a->b",
                     depth_tol: float = 0.05) -> Projection:
    """Map a keypoint's location, scale and orientation into the other view.

    In depth mode the destination is occluded when its stored depth differs
    from the transported depth by more than ``depth_tol`` (relative).
    """
    if direction not in ("a->b", "b->a"):
        raise ValueError("direction must be 'a->b' or 'b->a'")
    forward = direction == "a->b"
    src_img, dst_img = (pair.image_a, pair.image_b) if forward else (pair.image_b, pair.image_a)
    src_mask, dst_mask = (pair.mask_a, pair.mask_b) if forward else (pair.mask_b, pair.mask_a)
    if not _in_bounds(src_img, kp.x, kp.y):
        raise ValueError(f"keypoint ({kp.x}, {kp.y}) lies outside the source image")
    d = np.array([math.cos(kp.theta), math.sin(kp.theta)])

    if pair.mode == "homography":
        h = pair.homography if forward else np.linalg.inv(pair.homography)
        xb, yb, jac = _apply_h(h, kp.x, kp.y)
        s_hat = kp.sigma * math.sqrt(abs(np.linalg.det(jac)))
        dd = jac @ d
        occluded = _hidden(src_mask, kp.x, kp.y)
    else:
        ka, kb = (pair.intrinsics_a, pair.intrinsics_b) if forward else (pair.intrinsics_b, pair.intrinsics_a)
        da, db = (pair.depth_a, pair.depth_b) if forward else (pair.depth_b, pair.depth_a)
        rot, tr = np.asarray(pair.rotation, float), np.asarray(pair.translation, float)
        if not forward:
            rot, tr = rot.T, -rot.T @ tr
        z = _depth_at(da, kp.x, kp.y)
        if not z > 0:
            return Projection(None, None, None, None, None, "occluded")
        kinv = np.linalg.inv(ka)

        def to_dst(x, y):
            xc = rot @ (z * (kinv @ np.array([x, y, 1.0]))) + tr
            p = kb @ xc
            return p[0] / p[2], p[1] / p[2], xc[2]

        xb, yb, zb = to_dst(kp.x, kp.y)
        if not zb > 0:
            return Projection(None, None, None, None, None, "out_of_range")
        x2, y2, _ = to_dst(kp.x + d[0], kp.y + d[1])
        dd = np.array([x2 - xb, y2 - yb])
        f_src = 0.5 * (ka[0, 0] + ka[1, 1])
        f_dst = 0.5 * (kb[0, 0] + kb[1, 1])
        s_hat = kp.sigma * (z / zb) * (f_dst / f_src)
        occluded = _hidden(src_mask, kp.x, kp.y)
        if _in_bounds(dst_img, xb, yb):
            zd = _depth_at(db, xb, yb)
            if not zd > 0 or abs(zd - zb) / zb > depth_tol:
                occluded = True

    theta_b = math.atan2(dd[1], dd[0])
    rel = theta_b - kp.theta
    if not _in_bounds(dst_img, xb, yb):
        return Projection(xb, yb, s_hat, wrap_angle(theta_b), rel, "out_of_range")
    if occluded or _hidden(dst_mask, xb, yb):
        return Projection(xb, yb, s_hat, wrap_angle(theta_b), rel, "occluded")
    return Projection(xb, yb, s_hat, wrap_angle(theta_b), rel, "ok")


@dataclass
class CorrespondenceSet:
    records: list
    provenance: str
    rejected: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


FILTER_STAGES = ("projection", "bijective", "cycle", "occlusion", "orientation", "separation")


def build_correspondences(pair: ViewPair, cfg: FilterConfig | None = None) -> CorrespondenceSet:
    """Verified one-to-one keypoint correspondences between the two views.

    Stages: nearest b keypoint within the projection tolerance; bijective
    check keeping the smallest residual; a->b->a cycle check; occlusion;
    orientation compatibility; greedy suppression of pairs closer than the
    minimum separation to an already retained pair (lowest residual first).
    ``rejected`` counts the candidates dropped at each stage.
    """
    cfg = cfg or FilterConfig()
    rejected = {k: 0 for k in FILTER_STAGES}
    kps_a, kps_b = pair.keypoints_a, pair.keypoints_b
    provenance = "synthetic" if pair.mode == "homography" else "depth-projected"
    if not kps_a or not kps_b:
        return CorrespondenceSet([], provenance, rejected)
    tree = cKDTree(np.array([[k.x, k.y] for k in kps_b]))

    cands = []  # (residual, ia, ib, projection)
    for ia, kp in enumerate(kps_a):
        proj = project_keypoint(kp, pair, "a->b", cfg.depth_tol)
        if proj.x is None or proj.status == "out_of_range":
            if proj.status == "occluded":
                rejected["occlusion"] += 1
            else:
                rejected["projection"] += 1
            continue
        dist, ib = tree.query([proj.x, proj.y])
        if dist > cfg.projection_tol:
            rejected["projection"] += 1
            continue
        cands.append((float(dist), ia, int(ib), proj))

    best: dict[int, tuple] = {}
    for c in sorted(cands, key=lambda c: (c[0], c[1])):
        if c[2] in best:
            rejected["bijective"] += 1
        else:
            best[c[2]] = c
    survivors = sorted(best.values(), key=lambda c: (c[0], c[1]))

    kept = []
    for res, ia, ib, proj in survivors:
        back = project_keypoint(kps_b[ib], pair, "b->a", cfg.depth_tol)
        if back.x is None:
            rejected["occlusion"] += 1
            continue
        ka = kps_a[ia]
        if math.hypot(back.x - ka.x, back.y - ka.y) > cfg.projection_tol:
            rejected["cycle"] += 1
            continue
        if proj.status == "occluded" or back.status == "occluded":
            rejected["occlusion"] += 1
            continue
        resid = orientation_residual(kps_a[ia].theta, kps_b[ib].theta, proj.rotation)
        if resid > cfg.orientation_tol:
            rejected["orientation"] += 1
            continue
        kept.append((res, ia, ib, proj, resid))

    records = []
    pts_a, pts_b = [], []
    sep2 = cfg.min_separation ** 2
    for res, ia, ib, proj, resid in kept:
        pa = (kps_a[ia].x, kps_a[ia].y)
        pb = (kps_b[ib].x, kps_b[ib].y)
        if any((pa[0] - q[0]) ** 2 + (pa[1] - q[1]) ** 2 < sep2 for q in pts_a) or \
                any((pb[0] - q[0]) ** 2 + (pb[1] - q[1]) ** 2 < sep2 for q in pts_b):
            rejected["separation"] += 1
            continue
        pts_a.append(pa)
        pts_b.append(pb)
        r = scale_ratio(proj.sigma, kps_b[ib].sigma)
        records.append(Correspondence(ia, ib, r, resid))
    records.sort(key=lambda c: c.idx_a)
    return CorrespondenceSet(records, provenance, rejected)


def audit_correspondences(cs: CorrespondenceSet, pair: ViewPair,
                          cfg: FilterConfig | None = None) -> list[str]:
    """Independent re-check of a correspondence set; returns violations."""
    cfg = cfg or FilterConfig()
    problems = []
    seen_a, seen_b = set(), set()
    for c in cs.records:
        if c.idx_a in seen_a or c.idx_b in seen_b:
            problems.append(f"index reused in ({c.idx_a}, {c.idx_b})")
        seen_a.add(c.idx_a)
        seen_b.add(c.idx_b)
        if c.scale_ratio < 1:
            problems.append(f"scale ratio {c.scale_ratio} < 1")
        if c.orientation_residual > cfg.orientation_tol:
            problems.append(f"orientation residual {c.orientation_residual} above tolerance")
        ka, kb = pair.keypoints_a[c.idx_a], pair.keypoints_b[c.idx_b]
        fwd = project_keypoint(ka, pair, "a->b", cfg.depth_tol)
        back = project_keypoint(kb, pair, "b->a", cfg.depth_tol)
        if fwd.x is None or math.hypot(fwd.x - kb.x, fwd.y - kb.y) > cfg.projection_tol:
            problems.append(f"projection of a{c.idx_a} misses b{c.idx_b}")
        if back.x is None or math.hypot(back.x - ka.x, back.y - ka.y) > cfg.projection_tol:
            problems.append(f"cycle a{c.idx_a}->b{c.idx_b}->a fails")
    return problems


# -- synthetic scenes -----------------------------------------------------------------

def synth_texture(height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """Multi-scale procedural texture in [0, 1]: smooth noise octaves plus
    random filled ellipses and rectangles for edges and corners."""
    img = np.zeros((height, width))
    for octave in range(6):
        sigma = 1.0 * 2 ** octave
        layer = gaussian_filter(rng.standard_normal((height, width)), sigma, mode="wrap")
        layer /= layer.std() + 1e-12
        img += layer * (0.6 ** (5 - octave) + 0.3)
    img = (img - img.mean()) / (img.std() + 1e-12)
    yy, xx = np.mgrid[0:height, 0:width]
    n_shapes = int(height * width / 900)
    for _ in range(n_shapes):
        cx, cy = rng.uniform(0, width), rng.uniform(0, height)
        a, b = np.exp(rng.uniform(np.log(2), np.log(max(4, width / 8)), 2))
        ang = rng.uniform(0, np.pi)
        val = rng.normal(0, 1.2)
        dx, dy = xx - cx, yy - cy
        u = dx * np.cos(ang) + dy * np.sin(ang)
        v = -dx * np.sin(ang) + dy * np.cos(ang)
        if rng.random() < 0.5:
            inside = (u / a) ** 2 + (v / b) ** 2 <= 1
        else:
            inside = (np.abs(u) <= a) & (np.abs(v) <= b)
        img[inside] = 0.5 * img[inside] + val
    img = gaussian_filter(img, 0.7)
    lo, hi = np.percentile(img, [1, 99])
    return np.clip((img - lo) / (hi - lo + 1e-12), 0, 1).astype(np.float32)


def smooth_blobs(height: int, width: int, rng: np.random.Generator, n: int = 40) -> np.ndarray:
    """Sum of random isotropic Gaussians, rescaled into [0, 1]."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    img = np.zeros((height, width))
    for _ in range(n):
        cx, cy = rng.uniform(0, width), rng.uniform(0, height)
        s = rng.uniform(3, max(4, min(height, width) / 6))
        img += rng.uniform(-1, 1) * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))
    img -= img.min()
    return img / (img.max() + 1e-12)


@dataclass
class SimilarityTransform:
    scale: float = 1.0
    rotation_deg: float = 0.0
    tx: float = 0.0
    ty: float = 0.0

    def homography(self, height: int, width: int) -> np.ndarray:
        """a -> b map rotating/scaling about the image center, then translating."""
        c = np.array([(width - 1) / 2.0, (height - 1) / 2.0])
        th = math.radians(self.rotation_deg)
        m = self.scale * np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
        h = np.eye(3)
        h[:2, :2] = m
        h[:2, 2] = c + np.array([self.tx, self.ty]) - m @ c
        return h


@dataclass
class DetectorNoise:
    """How detections in view b deviate from the warped a keypoints.

    ``keep_scale`` / ``keep_orientation`` copy sigma / theta from view a
    instead of warping them, which plants a scale mismatch equal to the
    transform's zoom (resp. an orientation residual equal to its rotation).
    """

    loc_std: float = 0.0
    log_scale_std: float = 0.0
    orient_std_deg: float = 0.0
    keep_scale: bool = False
    keep_orientation: bool = False


def _reflect(v: np.ndarray, n: int) -> np.ndarray:
    if n == 1:
        return np.zeros_like(v)
    period = 2 * (n - 1)
    v = np.mod(v, period)
    return np.where(v > n - 1, period - v, v)


def render_view(base: Image, h: np.ndarray, shape=None) -> tuple[np.ndarray, np.ndarray]:
    """Resample ``base`` through the a->b homography ``h``.

    Returns the view and a mask of pixels whose source lies outside the base
    (filled by reflection).
    """
    hh, ww = shape or base.data.shape
    src = base.data.astype(np.float64)
    lin = h[:2, :2]
    zoom = math.sqrt(abs(np.linalg.det(lin)))
    if zoom < 1:
        # anti-alias before shrinking
        src = gaussian_filter(src, 0.5 * math.sqrt(1 / zoom ** 2 - 1))
    hinv = np.linalg.inv(h)
    yy, xx = np.mgrid[0:hh, 0:ww].astype(np.float64)
    pts = hinv @ np.stack([xx.ravel(), yy.ravel(), np.ones(xx.size)])
    sx = (pts[0] / pts[2]).reshape(hh, ww)
    sy = (pts[1] / pts[2]).reshape(hh, ww)
    outside = (sx < 0) | (sx > base.width - 1) | (sy < 0) | (sy > base.height - 1)
    vals = sample(Image(src), _reflect(sx, base.width), _reflect(sy, base.height))
    return vals, outside


def _thin(points: np.ndarray, min_dist: float, order: np.ndarray) -> list[int]:
    kept: list[int] = []
    for i in order:
        p = points[i]
        if all(np.hypot(*(p - points[j])) >= min_dist for j in kept):
            kept.append(int(i))
    return kept


def synth_pair(base: Image, transform: SimilarityTransform, noise_level: float,
               rng: np.random.Generator, n_keypoints: int = 80,
               sigma_range: tuple[float, float] = (1.6, 3.2),
               detector: DetectorNoise | None = None, n_distractors: int = 0,
               n_occluders: int = 0, margin: float = 4.0, min_separation: float = 8.0,
               keypoints_a: Sequence[Keypoint] | None = None, name: str = "") -> ViewPair:
    """View b = base under a similarity transform, plus Gaussian noise.

    Keypoints in a are planted at random (or taken from ``keypoints_a``); b
    receives their transformed copies perturbed by ``detector``.  Planted
    keypoints are kept at least ``min_separation`` apart in both views and
    away from occluders, so the planted list is exactly the set of pairs the
    correspondence builder must recover on noise-free input.
    """
    detector = detector or DetectorNoise()
    if not 0.25 - 1e-9 <= transform.scale <= 4 + 1e-9:
        raise ValueError("transform scale must lie in [1/4, 4]")
    hgt, wid = base.height, base.width
    hom = transform.homography(hgt, wid)
    view_b, outside = render_view(base, hom)
    if outside.all():
        raise ValueError("transform moves the scene entirely out of view b")

    mask_b = outside.copy()
    if n_occluders:
        occ_tex = smooth_blobs(hgt, wid, rng, 30)
        yy, xx = np.mgrid[0:hgt, 0:wid]
        for _ in range(n_occluders):
            cx, cy = rng.uniform(0, wid), rng.uniform(0, hgt)
            ra, rb = rng.uniform(0.04, 0.12, 2) * min(hgt, wid)
            ang = rng.uniform(0, np.pi)
            dx, dy = xx - cx, yy - cy
            u = dx * np.cos(ang) + dy * np.sin(ang)
            v = -dx * np.sin(ang) + dy * np.cos(ang)
            blob = (u / ra) ** 2 + (v / rb) ** 2 <= 1
            view_b[blob] = occ_tex[blob]
            mask_b |= blob
    if noise_level > 0:
        view_b = view_b + rng.normal(0, noise_level, view_b.shape)
    view_b = np.clip(view_b, 0, 1).astype(base.data.dtype)

    if keypoints_a is None:
        cand = np.column_stack([rng.uniform(margin, wid - 1 - margin, 4 * n_keypoints),
                                rng.uniform(margin, hgt - 1 - margin, 4 * n_keypoints)])
        lo, hi = np.log(sigma_range[0]), np.log(sigma_range[1])
        sig = np.exp(rng.uniform(lo, hi, len(cand)))
        th = rng.uniform(0, 2 * np.pi, len(cand))
        keypoints_a = [Keypoint(float(x), float(y), float(s), float(t))
                       for (x, y), s, t in zip(cand, sig, th)]
    keypoints_a = list(keypoints_a)

    pts_a = np.array([[k.x, k.y] for k in keypoints_a]).reshape(-1, 2)
    homog = np.column_stack([pts_a, np.ones(len(pts_a))]) @ hom.T
    pts_b = homog[:, :2] / homog[:, 2:]
    ok = ((pts_b[:, 0] >= margin) & (pts_b[:, 0] <= wid - 1 - margin) &
          (pts_b[:, 1] >= margin) & (pts_b[:, 1] <= hgt - 1 - margin))
    for i in np.flatnonzero(ok):
        if _hidden(mask_b, *pts_b[i]):
            ok[i] = False
    idx = np.flatnonzero(ok)
    kept_a = set(_thin(pts_a, min_separation, idx))
    idx = np.array([i for i in idx if i in kept_a], dtype=int)
    kept = _thin(pts_b, min_separation, idx)[:n_keypoints]
    kept.sort()

    pair_a = [keypoints_a[i] for i in kept]
    zoom = transform.scale
    delta = math.radians(transform.rotation_deg)
    pair_b = []
    for i in kept:
        k = keypoints_a[i]
        x, y = pts_b[i]
        if detector.loc_std:
            x, y = x + rng.normal(0, detector.loc_std), y + rng.normal(0, detector.loc_std)
        s = k.sigma if detector.keep_scale else k.sigma * zoom
        if detector.log_scale_std:
            s *= math.exp(rng.normal(0, detector.log_scale_std))
        t = k.theta if detector.keep_orientation else k.theta + delta
        if detector.orient_std_deg:
            t += math.radians(rng.normal(0, detector.orient_std_deg))
        pair_b.append(Keypoint(float(x), float(y), float(s), float(t)))

    # unmatched detections, kept clear of every planted endpoint in both views
    extra_a, extra_b = [], []
    if n_distractors:
        excl = 2 * FilterConfig.distractor_exclusion
        hinv = np.linalg.inv(hom)
        occupied_a = [(k.x, k.y) for k in pair_a]
        occupied_b = [(k.x, k.y) for k in pair_b]

        def clear(p, occupied):
            return all(math.hypot(p[0] - q[0], p[1] - q[1]) >= excl for q in occupied)

        tries = 0
        while (len(extra_a) < n_distractors or len(extra_b) < n_distractors) and tries < 50 * n_distractors:
            tries += 1
            side_a = len(extra_a) < n_distractors and (len(extra_b) >= n_distractors or rng.random() < 0.5)
            x, y = rng.uniform(margin, wid - 1 - margin), rng.uniform(margin, hgt - 1 - margin)
            other = (hom if side_a else hinv) @ np.array([x, y, 1.0])
            ox, oy = other[0] / other[2], other[1] / other[2]
            if side_a:
                if not (clear((x, y), occupied_a) and clear((ox, oy), occupied_b)):
                    continue
                extra_a.append(Keypoint(x, y, float(np.exp(rng.uniform(*np.log(sigma_range)))),
                                        rng.uniform(0, 2 * np.pi)))
            else:
                if not (clear((x, y), occupied_b) and clear((ox, oy), occupied_a)):
                    continue
                extra_b.append(Keypoint(x, y, float(np.exp(rng.uniform(*np.log(sigma_range)))),
                                        rng.uniform(0, 2 * np.pi)))
            occupied_a.append((x, y) if side_a else (ox, oy))
            occupied_b.append((ox, oy) if side_a else (x, y))

    kps_a = pair_a + extra_a
    order_b = rng.permutation(len(pair_b) + len(extra_b))
    all_b = pair_b + extra_b
    kps_b = [all_b[j] for j in order_b]
    where_b = np.empty(len(order_b), dtype=int)
    where_b[order_b] = np.arange(len(order_b))
    planted = [(i, int(where_b[i])) for i in range(len(pair_a))]
    return ViewPair(base, Image(view_b), kps_a, kps_b, homography=hom,
                    mask_a=np.zeros((hgt, wid), dtype=bool), mask_b=mask_b,
                    planted=planted, name=name)


def jitter_orientation(kp: Keypoint, rng: np.random.Generator, std_degrees: float = 5.0) -> Keypoint:
    if std_degrees == 0:
        return kp
    return Keypoint(kp.x, kp.y, kp.sigma, kp.theta + math.radians(rng.normal(0, std_degrees)))


# -- training batches ---------------------------------------------------------------------

MAX_PER_PAIR = 1000


class PreparedPair:
    """A view pair with its verified correspondences and cached padded views."""

    def __init__(self, pair: ViewPair, corr: CorrespondenceSet, source: str = "", index: int = 0):
        self.pair = pair
        self.corr = CorrespondenceSet(list(corr.records)[:MAX_PER_PAIR], corr.provenance, corr.rejected)
        self.source = source
        self.index = index
        self._padded: dict = {}

    def padded(self, side: str, lam: float) -> tuple[Image, int]:
        """Mirror-padded view wide enough for every keypoint's support on that side
        (capped at what reflection allows; samples beyond clamp to the edge)."""
        key = (side, lam)
        if key not in self._padded:
            img = self.pair.image_a if side == "a" else self.pair.image_b
            kps = self.pair.keypoints_a if side == "a" else self.pair.keypoints_b
            self._padded[key] = pad_for_support(img, kps, lam)
        return self._padded[key]

    def patches(self, side: str, keypoints: Sequence[Keypoint], spec: GridSpec) -> np.ndarray:
        if not keypoints:
            return np.zeros((0, spec.L, spec.L), dtype=np.float32)
        img, pad = self.padded(side, spec.lam)
        return extract_patches(img, keypoints, spec, offset=pad)


def pad_for_support(img: Image, keypoints: Sequence[Keypoint], lam: float) -> tuple[Image, int]:
    """Mirror-pad ``img`` so every keypoint's rotated support fits (as far
    as reflection allows); returns the padded image and the pad width."""
    radius = max((k.support_radius(lam) for k in keypoints), default=0.0)
    pad = min(int(math.ceil(radius * math.sqrt(2))) + 1, min(img.height, img.width) - 1)
    return mirror_pad(img, pad), pad


def image_patches(img: Image, keypoints: Sequence[Keypoint], spec: GridSpec) -> np.ndarray:
    padded, pad = pad_for_support(img, keypoints, spec.lam)
    return extract_patches(padded, keypoints, spec, offset=pad)


def extract_patches(img: Image, keypoints: Sequence[Keypoint], spec: GridSpec,
                    offset: float = 0.0) -> np.ndarray:
    """Sample one L x L patch per keypoint; ``offset`` shifts keypoint
    coordinates into a padded image."""
    if not keypoints:
        return np.zeros((0, spec.L, spec.L), dtype=np.float32)
    xs, ys = [], []
    for kp in keypoints:
        g = make_grid(kp, spec)
        xs.append(g.src_x + offset)
        ys.append(g.src_y + offset)
    return sample(img, np.stack(xs), np.stack(ys)).astype(np.float32)


@dataclass
class PatchBatch:
    patches_a: np.ndarray
    patches_b: np.ndarray
    keys: list
    grid_kind: str
    lam: float


@dataclass
class Source:
    name: str
    pairs: list  # of PreparedPair

    @property
    def size(self) -> int:
        return sum(len(p.corr) for p in self.pairs)


def batch_shares(k: int, n_sources: int) -> list[int]:
    base, rem = divmod(k, n_sources)
    return [base + (1 if i < rem else 0) for i in range(n_sources)]


def assemble_batch(sources: Sequence[Source], k: int, rng: np.random.Generator,
                   spec: GridSpec, jitter_std: float = 0.0) -> PatchBatch:
    """Fill a batch in equal shares from each source, one image pair per source.

    A source whose chosen pair cannot cover its share passes the shortfall
    round-robin to the following sources.  Orientation jitter, when enabled,
    applies to the a-side (anchor) keypoints only.
    """
    if k < 2:
        raise ValueError("batch size must be >= 2")
    live = []
    for s in sources:
        if s.size == 0:
            log.warning("source %s has no correspondences; skipped", s.name)
        else:
            live.append(s)
    if not live:
        raise ValueError("all sources are empty")
    shares = batch_shares(k, len(live))
    picks: list[tuple[PreparedPair, list]] = []
    used_pairs: dict[str, set] = {s.name: set() for s in live}
    deficit = 0
    for turn in range(2 * len(live)):
        i = turn % len(live)
        src = live[i]
        want = shares[i] if turn < len(live) else 0
        if turn >= len(live):
            if deficit == 0:
                break
            want = deficit
            deficit = 0
        if want == 0:
            continue
        free = [p for p in src.pairs if len(p.corr) and p.index not in used_pairs[src.name]]
        if turn >= len(live):
            # top-ups must not reuse a pair already drawn from this source
            free = [p for p in free if not any(pp is p for pp, _ in picks)]
        if not free:
            deficit += want
            continue
        big = [p for p in free if len(p.corr) >= want]
        pp = big[rng.integers(len(big))] if big else max(free, key=lambda p: len(p.corr))
        used_pairs[src.name].add(pp.index)
        take = min(want, len(pp.corr))
        chosen = rng.choice(len(pp.corr), size=take, replace=False)
        picks.append((pp, sorted(int(c) for c in chosen)))
        deficit += want - take
    if deficit:
        log.warning("batch short by %d pairs", deficit)

    pa, pb, keys = [], [], []
    for pp, chosen in picks:
        recs = [pp.corr.records[c] for c in chosen]
        ka = [pp.pair.keypoints_a[r.idx_a] for r in recs]
        if jitter_std:
            ka = [jitter_orientation(kp, rng, jitter_std) for kp in ka]
        kb = [pp.pair.keypoints_b[r.idx_b] for r in recs]
        pa.append(pp.patches("a", ka, spec))
        pb.append(pp.patches("b", kb, spec))
        keys += [(pp.source, pp.index, r.idx_a) for r in recs]
    if len(set(keys)) != len(keys):
        raise AssertionError("assembled batch repeats a correspondence")
    return PatchBatch(np.concatenate(pa), np.concatenate(pb), keys, spec.kind, spec.lam)


# -- text formats --------------------------------------------------------------------

def format_correspondences(cs: CorrespondenceSet) -> str:
    lines = [f"# provenance={cs.provenance}", "# idx_a idx_b r orientation_residual_deg"]
    lines += [f"{c.idx_a} {c.idx_b} {c.scale_ratio!r} {c.orientation_residual!r}" for c in cs.records]
    return "\n".join(lines) + "\n"


def parse_correspondences(text: str) -> CorrespondenceSet:
    provenance = "synthetic"
    recs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if line.startswith("# provenance="):
            provenance = line.split("=", 1)[1].strip()
            continue
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"line {lineno}: expected 'idx_a idx_b r residual', got {line!r}")
        recs.append(Correspondence(int(parts[0]), int(parts[1]), float(parts[2]), float(parts[3])))
    return CorrespondenceSet(recs, provenance)


# -- view pair manifests -----------------------------------------------------------

def _floats(raw: str, n: int, key: str) -> np.ndarray:
    vals = [float(v) for v in raw.split()]
    if len(vals) != n:
        raise ValueError(f"manifest key {key} needs {n} numbers, got {len(vals)}")
    return np.array(vals)


def write_viewpair(directory, name: str, pair: ViewPair, corr: CorrespondenceSet | None = None):
    """Write images (rawf32), keypoints, masks and a ``key = value`` manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = {}
    for side in ("a", "b"):
        write_image(d / f"{name}_{side}.raw", getattr(pair, f"image_{side}"), "rawf32")
        write_keypoints(d / f"{name}_{side}.kp", getattr(pair, f"keypoints_{side}"))
        entries[f"image_{side}"] = f"{name}_{side}.raw"
        entries[f"keypoints_{side}"] = f"{name}_{side}.kp"
        mask = getattr(pair, f"mask_{side}")
        if mask is not None:
            write_image(d / f"{name}_{side}.mask.raw", mask.astype(np.float32), "rawf32")
            entries[f"mask_{side}"] = f"{name}_{side}.mask.raw"
    if pair.mode == "homography":
        entries["homography"] = " ".join(repr(float(v)) for v in pair.homography.ravel())
    else:
        for side in ("a", "b"):
            write_image(d / f"{name}_{side}.depth.raw", getattr(pair, f"depth_{side}"), "rawf32")
            entries[f"depth_{side}"] = f"{name}_{side}.depth.raw"
            entries[f"intrinsics_{side}"] = " ".join(repr(float(v)) for v in
                                                     np.ravel(getattr(pair, f"intrinsics_{side}")))
        entries["rotation"] = " ".join(repr(float(v)) for v in np.ravel(pair.rotation))
        entries["translation"] = " ".join(repr(float(v)) for v in np.ravel(pair.translation))
    if corr is not None:
        (d / f"{name}.corr").write_text(format_correspondences(corr))
        entries["correspondences"] = f"{name}.corr"
    with open(d / f"{name}.pair", "w") as f:
        for k, v in entries.items():
            f.write(f"{k} = {v}\n")


def read_viewpair(path) -> tuple[ViewPair, CorrespondenceSet | None]:
    path = Path(path)
    entries = {}
    for line in path.read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            key, val = (p.strip() for p in line.split("=", 1))
            entries[key] = val
    for key in ("image_a", "image_b", "keypoints_a", "keypoints_b"):
        if key not in entries:
            raise ValueError(f"manifest {path} lacks {key}")
    d = path.parent
    kw = dict(image_a=read_image(d / entries["image_a"]), image_b=read_image(d / entries["image_b"]),
              keypoints_a=read_keypoints(d / entries["keypoints_a"]),
              keypoints_b=read_keypoints(d / entries["keypoints_b"]), name=path.stem)
    for side in ("a", "b"):
        if f"mask_{side}" in entries:
            kw[f"mask_{side}"] = read_image(d / entries[f"mask_{side}"]).data > 0.5
    if "homography" in entries:
        kw["homography"] = _floats(entries["homography"], 9, "homography").reshape(3, 3)
    else:
        for side in ("a", "b"):
            kw[f"depth_{side}"] = read_image(d / entries[f"depth_{side}"]).data
            kw[f"intrinsics_{side}"] = _floats(entries[f"intrinsics_{side}"], 9,
                                               f"intrinsics_{side}").reshape(3, 3)
        kw["rotation"] = _floats(entries["rotation"], 9, "rotation").reshape(3, 3)
        kw["translation"] = _floats(entries["translation"], 3, "translation")
    corr = None
    if "correspondences" in entries:
        corr = parse_correspondences((d / entries["correspondences"]).read_text())
    return ViewPair(**kw), corr
