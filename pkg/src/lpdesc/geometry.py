"""Keypoints and the two patch sampling grids.

Log-polar grid (target column x_t, row y_t, patch side L):

    rho = exp(ln(r) * x_t / L),  phi = theta + 2*pi*y_t / L,  r = lam * sigma / 2
    src = center + rho * (cos phi, sin phi)

Cartesian grid: a rotated square of half-width r,

    (u, v) = (2*x_t - (L-1), 2*y_t - (L-1)) / (L-1)
    src = center + r * R(theta) @ (u, v)
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .imagecore import GRID_KINDS

TWO_PI = 2.0 * math.pi
# orientation is carried as whole rows plus a fraction snapped to this many
# bits, so that a rotation by a multiple of 2*pi/L is an exact row shift
_ROW_FRACTION_BITS = 32


def wrap_angle(theta: float) -> float:
    t = math.fmod(theta, TWO_PI)
    if t < 0:
        t += TWO_PI
    return 0.0 if t >= TWO_PI else t


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    sigma: float
    theta: float = 0.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"keypoint scale must be positive, got {self.sigma}")
        if not all(math.isfinite(v) for v in (self.x, self.y, self.sigma, self.theta)):
            raise ValueError("keypoint fields must be finite")
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def support_radius(self, lam: float) -> float:
        return 0.5 * lam * self.sigma


@dataclass(frozen=True)
class GridSpec:
    L: int
    lam: float
    kind: str

    def __post_init__(self):
        if self.L < 2:
            raise ValueError("patch side L must be >= 2")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if self.kind not in GRID_KINDS:
            raise ValueError(f"unknown grid kind {self.kind!r}")


@dataclass(frozen=True)
class SamplingGrid:
    L: int
    kind: str
    lam: float
    src_x: np.ndarray
    src_y: np.ndarray


def _orientation_rows(theta: float, L: int) -> tuple[int, float]:
    """Split theta into whole rows and a snapped fractional row offset."""
    t = theta * L / TWO_PI
    q = math.floor(t)
    scale = float(1 << _ROW_FRACTION_BITS)
    frac = round((t - q) * scale) / scale
    if frac >= 1.0:
        q, frac = q + 1, 0.0
    return q % L, frac


def logpolar_grid(kp: Keypoint, spec: GridSpec) -> SamplingGrid:
    if spec.kind != "logpolar":
        raise ValueError("logpolar_grid needs a logpolar GridSpec")
    L = spec.L
    r = kp.support_radius(spec.lam)
    if r <= 1:
        raise ValueError(f"support radius {r:.3g} <= 1 px leaves no log range")
    log_r = math.log(r)
    # scalar libm calls keep radii/angles identical across grids that share
    # exponents or row phases, independent of array length or alignment
    rho = np.array([math.exp(log_r * (x_t / L)) for x_t in range(L)])
    q, frac = _orientation_rows(kp.theta, L)
    phi = [TWO_PI * (frac + (y_t + q) % L) / L for y_t in range(L)]
    cos = np.array([math.cos(p) for p in phi])
    sin = np.array([math.sin(p) for p in phi])
    src_x = kp.x + cos[:, None] * rho[None, :]
    src_y = kp.y + sin[:, None] * rho[None, :]
    return SamplingGrid(L, "logpolar", spec.lam, src_x, src_y)


def cartesian_grid(kp: Keypoint, spec: GridSpec) -> SamplingGrid:
    if spec.kind != "cartesian":
        raise ValueError("cartesian_grid needs a cartesian GridSpec")
    L = spec.L
    r = kp.support_radius(spec.lam)
    t = np.arange(L, dtype=np.float64)
    off = r * (2.0 * t - (L - 1)) / (L - 1)
    c, s = math.cos(kp.theta), math.sin(kp.theta)
    u = off[None, :]
    v = off[:, None]
    src_x = kp.x + (c * u - s * v)
    src_y = kp.y + (s * u + c * v)
    return SamplingGrid(L, "cartesian", spec.lam, src_x, src_y)


def make_grid(kp: Keypoint, spec: GridSpec) -> SamplingGrid:
    if spec.kind == "logpolar":
        return logpolar_grid(kp, spec)
    return cartesian_grid(kp, spec)


def scale_ratio(s_warped: float, s_other: float) -> float:
    if not (s_warped > 0 and s_other > 0):
        raise ValueError("scales must be positive")
    return max(s_warped, s_other) / min(s_warped, s_other)


def orientation_residual(theta_a: float, theta_b: float, relative_rotation: float) -> float:
    """Absolute angle between (theta_a + relative_rotation) and theta_b, in degrees [0, 180]."""
    d = wrap_angle(theta_a + relative_rotation - theta_b)
    if d > math.pi:
        d = TWO_PI - d
    return math.degrees(d)


@dataclass(frozen=True)
class Correspondence:
    idx_a: int
    idx_b: int
    scale_ratio: float
    orientation_residual: float

    def __post_init__(self):
        if self.scale_ratio < 1:
            raise ValueError("scale ratio must be >= 1")
        if not 0 <= self.orientation_residual <= 180:
            raise ValueError("orientation residual must lie in [0, 180] degrees")


# -- keypoint text files -----------------------------------------------------------

def parse_keypoints(text: str) -> list[Keypoint]:
    kps = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"line {lineno}: expected 'x y sigma theta', got {line!r}")
        x, y, sigma, theta = (float(p) for p in parts)
        kps.append(Keypoint(x, y, sigma, theta))
    return kps


def format_keypoints(kps) -> str:
    return "".join(f"{k.x!r} {k.y!r} {k.sigma!r} {k.theta!r}\n" for k in kps)


def read_keypoints(path) -> list[Keypoint]:
    with open(path) as f:
        return parse_keypoints(f.read())


def write_keypoints(path, kps):
    with open(path, "w") as f:
        f.write("# x y sigma theta\n")
        f.write(format_keypoints(kps))
