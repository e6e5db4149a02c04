"""Synthetic distribution shifts applied to single-channel images, plus a Gaussian KDE.

All shifts take and return ``[H, W]`` (or ``[1, H, W]``) float arrays and are
bit-exact identities at level 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

KINDS = ("none", "blur", "noise", "rotate", "occlude", "intensity_remap")


@dataclass(frozen=True)
class ShiftSpec:
    kind: str = "none"
    level: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown shift kind {self.kind!r}; expected one of {KINDS}")
        if self.level < 0:
            raise ValidationError("shift level must be >= 0")
        if self.kind == "none" and self.level != 0:
            raise ValidationError("shift kind 'none' requires level 0")

    @property
    def label(self) -> str:
        return "clean" if self.level == 0 else f"{self.kind}_{self.level:g}"

    def to_json(self) -> dict:
        return {"kind": self.kind, "level": self.level, "seed": self.seed}


def _squeeze(image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[0] == 1:
        return image[0], lambda out: out[None]
    if image.ndim != 2:
        raise ValidationError(f"expected an [H, W] or [1, H, W] image, got shape {image.shape}")
    return image, lambda out: out


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = max(int(math.ceil(3.0 * sigma)), 1)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _reflect_index(i: np.ndarray, n: int) -> np.ndarray:
    # half-sample symmetric reflection (edge pixel repeated), periodic in 2n
    if n == 1:
        return np.zeros_like(i)
    i = np.mod(i, 2 * n)
    return np.where(i < n, i, 2 * n - 1 - i)


def _convolve_axis(img: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = kernel.size // 2
    n = img.shape[axis]
    out = np.zeros_like(img)
    for j, w in enumerate(kernel):
        idx = _reflect_index(np.arange(n) + j - radius, n)
        out += w * np.take(img, idx, axis=axis)
    return out


def gaussian_blur(image, sigma: float):
    """Separable Gaussian blur, radius ``ceil(3*sigma)``, reflect padding."""
    if sigma < 0:
        raise ValidationError("sigma must be >= 0")
    img, restore = _squeeze(image)
    if sigma == 0:
        return np.array(image, dtype=np.float64, copy=True)
    k = gaussian_kernel1d(sigma)
    return restore(_convolve_axis(_convolve_axis(img, k, 0), k, 1))


def gaussian_noise(image, sigma: float, seed: int = 0):
    """Additive white Gaussian noise; the literal reading of 'adding Gaussian noise'."""
    if sigma < 0:
        raise ValidationError("sigma must be >= 0")
    image = np.asarray(image, dtype=np.float64)
    if sigma == 0:
        return image.copy()
    return image + np.random.default_rng(seed).normal(0.0, sigma, size=image.shape)


def rotate(image, angle_deg: float):
    """Rotate about the image centre with bilinear interpolation; outside is 0."""
    if not 0 <= angle_deg < 360:
        raise ValidationError("angle must lie in [0, 360)")
    img, restore = _squeeze(image)
    if angle_deg == 0:
        return np.array(image, dtype=np.float64, copy=True)
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = math.radians(angle_deg)
    c, s = math.cos(theta), math.sin(theta)
    # snap exact quarter turns so 90/180/270 are exact permutations
    c, s = round(c, 12) + 0.0, round(s, 12) + 0.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    # inverse map: output pixel -> source location (counter-clockwise rotation)
    sx = c * dx - s * dy + cx
    sy = s * dx + c * dy + cy
    x0, y0 = np.floor(sx).astype(int), np.floor(sy).astype(int)
    fx, fy = sx - x0, sy - y0
    out = np.zeros_like(img)
    for oy, ox, wgt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                        (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yi, xi = y0 + oy, x0 + ox
        ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w) & (wgt != 0)
        out[ok] += wgt[ok] * img[yi[ok], xi[ok]]
    return restore(out)


def rotate_labels(labels, angle_deg: float):
    """Nearest-neighbour rotation for label fields; outside becomes background."""
    labels = np.asarray(labels)
    if angle_deg == 0:
        return labels.copy()
    onehot = np.stack([(labels == c).astype(np.float64) for c in range(int(labels.max()) + 1)])
    rotated = np.stack([rotate(ch, angle_deg) for ch in onehot])
    out = rotated.argmax(axis=0).astype(labels.dtype)
    out[rotated.max(axis=0) < 0.5] = 0
    return out


def occlude(image, num_rects: int, size_range=(4, 8), seed: int = 0):
    """Zero out ``num_rects`` seeded axis-aligned rectangles; returns (image, mask)."""
    img, restore = _squeeze(image)
    h, w = img.shape
    lo, hi = int(size_range[0]), int(size_range[1])
    if num_rects < 0 or lo < 1 or hi < lo:
        raise ValidationError("need num_rects >= 0 and 1 <= min size <= max size")
    if num_rects and (hi > h or hi > w):
        raise ValidationError(f"rectangle size up to {hi} does not fit a {h}x{w} image")
    mask = np.zeros((h, w), dtype=bool)
    rng = np.random.default_rng(seed)
    for _ in range(num_rects):
        rh, rw = rng.integers(lo, hi + 1, size=2)
        top = rng.integers(0, h - rh + 1)
        left = rng.integers(0, w - rw + 1)
        mask[top:top + rh, left:left + rw] = True
    out = img.copy()
    out[mask] = 0.0
    return restore(out), mask


def intensity_remap(image, strength: float, gamma: float = 0.4):
    """Blend ``v`` with a gamma curve and, at full strength, an intensity inversion.

    Values are handled on the image's own [min, max] range. For ``s < 1`` the
    map is strictly increasing; ``s = 1`` adds an inverted component that
    swaps bright and dark structures, imitating a modality change.
    """
    if strength < 0:
        raise ValidationError("strength must be >= 0")
    image = np.asarray(image, dtype=np.float64)
    if strength == 0:
        return image.copy()
    s = min(float(strength), 1.0)
    lo, hi = float(image.min()), float(image.max())
    span = hi - lo if hi > lo else 1.0
    u = (image - lo) / span
    curved = (1 - s) * u + s * u**gamma
    if strength >= 1:
        curved = 0.5 * curved + 0.5 * (1.0 - u)
    return lo + span * curved


def apply_shift(image, spec: ShiftSpec):
    """Apply one shift to one image; always returns a fresh array."""
    if spec.level == 0 or spec.kind == "none":
        return np.array(image, dtype=np.float64, copy=True)
    if spec.kind == "blur":
        return gaussian_blur(image, spec.level)
    if spec.kind == "noise":
        return gaussian_noise(image, spec.level, spec.seed)
    if spec.kind == "rotate":
        return rotate(image, spec.level % 360)
    if spec.kind == "occlude":
        return occlude(image, int(round(spec.level)), seed=spec.seed)[0]
    if spec.kind == "intensity_remap":
        return intensity_remap(image, spec.level)
    raise ValidationError(f"unhandled shift kind {spec.kind!r}")


def shift_labels(labels, spec: ShiftSpec):
    """Ground truth under a shift: only geometric shifts move labels."""
    if spec.kind == "rotate" and spec.level != 0:
        return rotate_labels(labels, spec.level % 360)
    return np.asarray(labels).copy()


# -- KDE ------------------------------------------------------------------

@dataclass
class KdeCurve:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float

    def to_csv(self) -> str:
        lines = ["grid,density"] + [f"{g:.6f},{d:.6f}" for g, d in zip(self.grid, self.density)]
        return "\n".join(lines) + "\n"


MIN_BANDWIDTH = 1e-6


def scott_bandwidth(values) -> float:
    values = np.asarray(values, dtype=np.float64).ravel()
    return max(values.size ** (-0.2) * float(values.std(ddof=1)), MIN_BANDWIDTH)


def kde(values, grid=None, bandwidth: float | None = None, num_points: int = 256) -> KdeCurve:
    """Gaussian-kernel density estimate evaluated on ``grid``."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size < 2:
        raise ValidationError("kde needs at least 2 values")
    h = scott_bandwidth(values) if bandwidth is None else max(float(bandwidth), MIN_BANDWIDTH)
    if grid is None:
        lo, hi = values.min() - 4 * h, values.max() + 4 * h
        grid = np.linspace(lo, hi, num_points)
    grid = np.asarray(grid, dtype=np.float64)
    density = np.zeros_like(grid)
    # chunk over values to bound memory
    for start in range(0, values.size, 4096):
        z = (grid[:, None] - values[None, start:start + 4096]) / h
        density += np.exp(-0.5 * z * z).sum(axis=1)
    density /= values.size * h * math.sqrt(2 * math.pi)
    return KdeCurve(grid, density, h)


def kde_l1_distance(a: KdeCurve, b: KdeCurve) -> float:
    """L1 distance between two curves sharing a grid (trapezoidal rule)."""
    if a.grid.shape != b.grid.shape or not np.allclose(a.grid, b.grid):
        raise ValidationError("curves must share a grid")
    return float(np.trapezoid(np.abs(a.density - b.density), a.grid))
