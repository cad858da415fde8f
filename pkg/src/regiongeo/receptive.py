"""Receptive-field coordinate calculus.

Every layer stack maps a 1-based feature index ``i`` back to the image pixel
at the centre of its receptive field through an affine map
``alpha * (i - 1) + beta``. The scale ``alpha`` is the product of all
strides. The offset ``beta`` starts at 1 and accumulates, per layer, half the
filter extent minus the padding, weighted by the total stride of the layers
below it.

Pixel positions are 1-based too: pixel ``p`` has its centre at coordinate
``p`` in this pixel-centre frame. Boxes in the 0-based continuous image frame
used everywhere else convert with :func:`to_pixel_frame` (pixel ``p`` spans
``[p - 1, p]`` continuously, so its centre ``p - 0.5`` becomes ``p``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .boxes import Box


@dataclass(frozen=True)
class LayerGeom:
    filter_size: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.filter_size < 1 or self.stride < 1 or self.padding < 0:
            raise ValueError(f"invalid layer geometry filter_size={self.filter_size} stride={self.stride} padding={self.padding}")

    def output_size(self, n: int) -> int:
        return (n + 2 * self.padding - self.filter_size) // self.stride + 1


ArchitectureSpec = Sequence[LayerGeom]


@dataclass(frozen=True)
class CoordMap:
    """Affine feature-to-image map, one ``(alpha, beta)`` pair per spatial axis."""

    alpha_row: float
    beta_row: float
    alpha_col: float
    beta_col: float

    @classmethod
    def isotropic(cls, alpha: float, beta: float) -> "CoordMap":
        return cls(alpha, beta, alpha, beta)

    @classmethod
    def identity(cls) -> "CoordMap":
        return cls.isotropic(1, 1)

    @property
    def alpha(self) -> float:
        return self.alpha_row

    @property
    def beta(self) -> float:
        return self.beta_row

    def image_row(self, i):
        return self.alpha_row * (i - 1) + self.beta_row

    def image_col(self, j):
        return self.alpha_col * (j - 1) + self.beta_col

    def row_centers(self, n: int) -> np.ndarray:
        """``image_row(i)`` for ``i = 1..n``."""
        return self.alpha_row * np.arange(n, dtype=np.float64) + self.beta_row

    def col_centers(self, n: int) -> np.ndarray:
        return self.alpha_col * np.arange(n, dtype=np.float64) + self.beta_col

    def then(self, inner: "CoordMap") -> "CoordMap":
        """Map for a network made of ``self``'s layers followed by ``inner``'s layers."""
        return CoordMap(
            self.alpha_row * inner.alpha_row,
            self.beta_row + self.alpha_row * (inner.beta_row - 1),
            self.alpha_col * inner.alpha_col,
            self.beta_col + self.alpha_col * (inner.beta_col - 1),
        )


def _axis_map(layers: Sequence[LayerGeom]) -> tuple[float, float]:
    alpha = 1
    beta = 1.0
    for layer in layers:
        beta += alpha * ((layer.filter_size - 1) / 2 - layer.padding)
        alpha *= layer.stride
    return float(alpha), beta


def coord_map(arch: ArchitectureSpec, col_arch: ArchitectureSpec | None = None) -> CoordMap:
    """Evaluate ``alpha`` and ``beta`` for an architecture.

    ``col_arch`` gives a separate column-axis geometry; by default both axes
    share ``arch``.
    """
    if len(arch) == 0:
        raise ValueError("architecture must have at least one layer")
    a_r, b_r = _axis_map(arch)
    a_c, b_c = _axis_map(col_arch if col_arch is not None else arch)
    return CoordMap(a_r, b_r, a_c, b_c)


def receptive_field_size(arch: ArchitectureSpec) -> int:
    size, jump = 1, 1
    for layer in arch:
        size += (layer.filter_size - 1) * jump
        jump *= layer.stride
    return size


def layer_sizes(arch: ArchitectureSpec, n: int) -> list[int]:
    """Spatial size after each layer, starting with the input size ``n``."""
    sizes = [n]
    for layer in arch:
        sizes.append(layer.output_size(sizes[-1]))
    return sizes


def is_interior(arch: ArchitectureSpec, index: int, input_size: int) -> bool:
    """True if feature ``index`` never reads padding at any layer (one axis)."""
    sizes = layer_sizes(arch, input_size)
    if not 1 <= index <= sizes[-1]:
        return False
    lo = hi = index
    for p in range(len(arch) - 1, -1, -1):
        layer = arch[p]
        lo = layer.stride * (lo - 1) + 1 - layer.padding
        hi = layer.stride * (hi - 1) + layer.filter_size - layer.padding
        if lo < 1 or hi > sizes[p]:
            return False
    return True


def to_pixel_frame(box: Box) -> Box:
    """Shift a continuous 0-based image box into the 1-based pixel-centre frame."""
    return Box(box.r_s + 0.5, box.c_s + 0.5, box.r_e + 0.5, box.c_e + 0.5)


def _axis_range(centers: np.ndarray, lo: float, hi: float) -> tuple[int, int]:
    # centers are increasing; returns a half-open 0-based index range
    start = int(np.searchsorted(centers, lo, side="left"))
    stop = int(np.searchsorted(centers, hi, side="right"))
    return start, max(start, stop)


def cell_ranges(cmap: CoordMap, region: Box, field_height: int, field_width: int):
    """Half-open 0-based ``(row_start, row_stop, col_start, col_stop)`` of contained cells.

    ``region`` is in the pixel-centre frame; containment is closed on all sides.
    """
    r0, r1 = _axis_range(cmap.row_centers(field_height), region.r_s, region.r_e)
    c0, c1 = _axis_range(cmap.col_centers(field_width), region.c_s, region.c_e)
    return r0, r1, c0, c1


def feature_cells_in_region(cmap: CoordMap, region: Box, field_height: int,
                            field_width: int) -> set[tuple[int, int]]:
    """All 1-based feature cells ``(i, j)`` whose image centre lies in ``region``."""
    r0, r1, c0, c1 = cell_ranges(cmap, region, field_height, field_width)
    return {(i + 1, j + 1) for i in range(r0, r1) for j in range(c0, c1)}


@dataclass(frozen=True)
class ReceptiveField:
    """Observed support of one feature, as inclusive 1-based pixel ranges."""

    rows: tuple[int, int]
    cols: tuple[int, int]

    @property
    def center(self) -> tuple[float, float]:
        return ((self.rows[0] + self.rows[1]) / 2, (self.cols[0] + self.cols[1]) / 2)

    @property
    def box(self) -> Box:
        """Support as a continuous 0-based box."""
        return Box(self.rows[0] - 1, self.cols[0] - 1, self.rows[1], self.cols[1])


def empirical_receptive_field(net, feature_index: tuple[int, int],
                              image_shape: tuple[int, int]) -> ReceptiveField:
    """Measure a feature's support by perturbing input pixels.

    ``net`` must be linear with non-negative filters (e.g.
    :func:`regiongeo.features.probe_net`) so that any perturbation inside the
    support changes the feature. Whole bands of rows (columns) are perturbed
    and the first and last affecting row (column) are located by bisection
    over prefixes and suffixes of the image.
    """
    H, W = image_shape
    C = net.in_channels
    base = np.zeros((H, W, C))
    out = net.forward(base)
    i, j = feature_index
    if not (1 <= i <= out.shape[0] and 1 <= j <= out.shape[1]):
        raise IndexError(f"feature {feature_index} outside field {out.shape[:2]}")
    ref = out[i - 1, j - 1].copy()

    def changed(axis: int, start: int, stop: int) -> bool:
        img = base.copy()
        if axis == 0:
            img[start - 1:stop] = 1.0
        else:
            img[:, start - 1:stop] = 1.0
        return bool(np.any(net.forward(img)[i - 1, j - 1] != ref))

    def first(axis: int, n: int) -> int:
        lo, hi = 1, n
        if not changed(axis, 1, n):
            raise ValueError("feature does not depend on the image")
        while lo < hi:
            mid = (lo + hi) // 2
            if changed(axis, 1, mid):
                hi = mid
            else:
                lo = mid + 1
        return lo

    def last(axis: int, n: int) -> int:
        lo, hi = 1, n
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if changed(axis, mid, n):
                lo = mid
            else:
                hi = mid - 1
        return lo

    return ReceptiveField(rows=(first(0, H), last(0, H)), cols=(first(1, W), last(1, W)))


def load_architecture(path) -> list[LayerGeom]:
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = data["layers"]
    return [LayerGeom(int(d["F"]), int(d.get("S", 1)), int(d.get("P", 0))) for d in data]


def dump_architecture(arch: ArchitectureSpec) -> str:
    return json.dumps([{"F": l.filter_size, "S": l.stride, "P": l.padding} for l in arch])
