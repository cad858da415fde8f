"""Axis-aligned box algebra.

Boxes use continuous corner coordinates ``(r_s, c_s, r_e, c_e)``: rows first,
upper-left corner then lower-right corner, area ``(r_e - r_s) * (c_e - c_s)``.
There is no "+1" pixel convention; integer pixel annotations are converted at
ingestion time (see :mod:`regiongeo.proposals`).

Vectorized helpers accept ``(N, 4)`` arrays in the same corner order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class EmptyBoxError(ValueError):
    """Raised when a box has no area left after clipping."""


@dataclass(frozen=True)
class Box:
    r_s: float
    c_s: float
    r_e: float
    c_e: float

    def __post_init__(self):
        coords = (self.r_s, self.c_s, self.r_e, self.c_e)
        if not all(math.isfinite(v) for v in coords):
            raise ValueError(f"box coordinates must be finite: {coords}")
        if not (self.r_e > self.r_s and self.c_e > self.c_s):
            raise ValueError(f"box must have positive area: {coords}")

    @classmethod
    def from_array(cls, a) -> "Box":
        r_s, c_s, r_e, c_e = (float(v) for v in a)
        return cls(r_s, c_s, r_e, c_e)

    def to_array(self) -> np.ndarray:
        return np.array([self.r_s, self.c_s, self.r_e, self.c_e], dtype=np.float64)

    def to_list(self) -> list[float]:
        return [self.r_s, self.c_s, self.r_e, self.c_e]

    @property
    def height(self) -> float:
        return self.r_e - self.r_s

    @property
    def width(self) -> float:
        return self.c_e - self.c_s

    @property
    def area(self) -> float:
        return self.height * self.width

    def contains(self, other: "Box") -> bool:
        return (self.r_s <= other.r_s and self.c_s <= other.c_s
                and other.r_e <= self.r_e and other.c_e <= self.c_e)

    def centered(self) -> "CenteredBox":
        return CenteredBox(
            x=(self.c_s + self.c_e) / 2,
            y=(self.r_s + self.r_e) / 2,
            w=self.c_e - self.c_s,
            h=self.r_e - self.r_s,
        )

    def scaled(self, row_factor: float, col_factor: float) -> "Box":
        return Box(self.r_s * row_factor, self.c_s * col_factor,
                   self.r_e * row_factor, self.c_e * col_factor)


@dataclass(frozen=True)
class CenteredBox:
    """Box as centre ``(x, y)`` (column, row) with width ``w`` and height ``h``."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"width and height must be positive: w={self.w}, h={self.h}")

    def to_box(self) -> Box:
        return Box(self.y - self.h / 2, self.x - self.w / 2,
                   self.y + self.h / 2, self.x + self.w / 2)


@dataclass(frozen=True)
class NormalizedBoxStats:
    w: float
    h: float
    s: float
    c_mag: float
    # centre in normalized coordinates, handy for (x, y) histograms
    x: float = 0.5
    y: float = 0.5

    def get(self, name: str) -> float:
        if name in ("cmag", "c"):
            name = "c_mag"
        return getattr(self, name)


@dataclass(frozen=True)
class Adjustment:
    d_x: float = 0.0
    d_y: float = 0.0
    d_w: float = 0.0
    d_h: float = 0.0

    def to_array(self) -> np.ndarray:
        return np.array([self.d_x, self.d_y, self.d_w, self.d_h], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "Adjustment":
        d_x, d_y, d_w, d_h = (float(v) for v in a)
        return cls(d_x, d_y, d_w, d_h)


def iou(a: Box, b: Box) -> float:
    """Intersection-over-union of two boxes, in [0, 1]."""
    ih = min(a.r_e, b.r_e) - max(a.r_s, b.r_s)
    iw = min(a.c_e, b.c_e) - max(a.c_s, b.c_s)
    if ih <= 0 or iw <= 0:
        return 0.0
    inter = ih * iw
    union = a.area + b.area - inter
    return min(1.0, inter / union)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` corner arrays.

    Returns:
        ``(N, M)`` array.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ih = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iw = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ih, 0, None) * np.clip(iw, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.minimum(1.0, inter / union)


def normalize_box(b: Box, image_height: float, image_width: float) -> NormalizedBoxStats:
    """Normalized width, height, scale and distance from the image centre."""
    if not (image_height > 0 and image_width > 0):
        raise ValueError(f"image dimensions must be positive: {image_height}x{image_width}")
    w = (b.c_e - b.c_s) / image_width
    h = (b.r_e - b.r_s) / image_height
    x = (b.c_s + b.c_e) / (2 * image_width)
    y = (b.r_s + b.r_e) / (2 * image_height)
    c_mag = math.hypot(x - 0.5, y - 0.5)
    return NormalizedBoxStats(w=w, h=h, s=math.sqrt(w * h), c_mag=c_mag, x=x, y=y)


def box_statistics(boxes: np.ndarray, heights, widths) -> dict[str, np.ndarray]:
    """Vectorized :func:`normalize_box` over ``(N, 4)`` boxes.

    ``heights`` and ``widths`` broadcast against the box count.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    H = np.asarray(heights, dtype=np.float64)
    W = np.asarray(widths, dtype=np.float64)
    w = (boxes[:, 3] - boxes[:, 1]) / W
    h = (boxes[:, 2] - boxes[:, 0]) / H
    x = (boxes[:, 1] + boxes[:, 3]) / (2 * W)
    y = (boxes[:, 0] + boxes[:, 2]) / (2 * H)
    return {
        "x": x, "y": y, "w": w, "h": h,
        "s": np.sqrt(w * h),
        "c_mag": np.hypot(x - 0.5, y - 0.5),
    }


def apply_adjustment(r: CenteredBox, d: Adjustment) -> CenteredBox:
    """Refine ``r`` by ``d``: ``(w*d_x + x, h*d_y + y, w*exp(d_w), h*exp(d_h))``."""
    return CenteredBox(
        x=r.w * d.d_x + r.x,
        y=r.h * d.d_y + r.y,
        w=r.w * math.exp(d.d_w),
        h=r.h * math.exp(d.d_h),
    )


def compute_adjustment(r: CenteredBox, r_star: CenteredBox) -> Adjustment:
    """The adjustment that maps ``r`` onto ``r_star`` (exact inverse of :func:`apply_adjustment`)."""
    return Adjustment(
        d_x=(r_star.x - r.x) / r.w,
        d_y=(r_star.y - r.y) / r.h,
        d_w=math.log(r_star.w / r.w),
        d_h=math.log(r_star.h / r.h),
    )


def apply_adjustments(boxes: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Vectorized adjustment of ``(N, 4)`` corner boxes by ``(N, 4)`` deltas ``(d_x, d_y, d_w, d_h)``."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    w = boxes[:, 3] - boxes[:, 1]
    h = boxes[:, 2] - boxes[:, 0]
    x = (boxes[:, 1] + boxes[:, 3]) / 2
    y = (boxes[:, 0] + boxes[:, 2]) / 2
    nx = w * deltas[:, 0] + x
    ny = h * deltas[:, 1] + y
    nw = w * np.exp(deltas[:, 2])
    nh = h * np.exp(deltas[:, 3])
    return np.stack([ny - nh / 2, nx - nw / 2, ny + nh / 2, nx + nw / 2], axis=1)


def compute_adjustments(boxes: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Vectorized :func:`compute_adjustment` for ``(N, 4)`` corner arrays."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    w = boxes[:, 3] - boxes[:, 1]
    h = boxes[:, 2] - boxes[:, 0]
    tw = targets[:, 3] - targets[:, 1]
    th = targets[:, 2] - targets[:, 0]
    dx = ((targets[:, 1] + targets[:, 3]) - (boxes[:, 1] + boxes[:, 3])) / 2 / w
    dy = ((targets[:, 0] + targets[:, 2]) - (boxes[:, 0] + boxes[:, 2])) / 2 / h
    return np.stack([dx, dy, np.log(tw / w), np.log(th / h)], axis=1)


def clip_box(b: Box, image_height: float, image_width: float) -> Box:
    """Intersect ``b`` with the image rectangle ``[0, H] x [0, W]``.

    Raises:
        EmptyBoxError: if nothing of the box remains inside the image.
    """
    r_s, r_e = max(b.r_s, 0.0), min(b.r_e, float(image_height))
    c_s, c_e = max(b.c_s, 0.0), min(b.c_e, float(image_width))
    if r_e <= r_s or c_e <= c_s:
        raise EmptyBoxError(f"empty after clip: {b.to_list()} in {image_height}x{image_width}")
    return Box(r_s, c_s, r_e, c_e)


def clip_boxes(boxes: np.ndarray, image_height: float, image_width: float):
    """Vectorized clip. Returns ``(clipped, keep)`` where ``keep`` flags non-empty results."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    out = np.empty_like(boxes)
    out[:, 0] = np.clip(boxes[:, 0], 0, image_height)
    out[:, 2] = np.clip(boxes[:, 2], 0, image_height)
    out[:, 1] = np.clip(boxes[:, 1], 0, image_width)
    out[:, 3] = np.clip(boxes[:, 3], 0, image_width)
    keep = (out[:, 2] > out[:, 0]) & (out[:, 3] > out[:, 1]) & np.isfinite(out).all(axis=1)
    return out, keep
