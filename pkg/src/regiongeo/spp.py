"""Spatial pooling (SP) and spatial pyramid pooling (SPP) over feature fields.

Regions are given in the 1-based pixel-centre frame of :mod:`regiongeo.receptive`
(use :func:`regiongeo.receptive.to_pixel_frame` for continuous image boxes).
A feature cell belongs to a region when its mapped centre lies inside the
closed rectangle. Each pyramid bin covers one cell of a uniform
``grid x grid`` split of the region in image coordinates.

Bins that contain no cell snap to the single cell whose centre is nearest to
the bin centre (first in row-major order on ties). With ``strict=True`` a
region containing no cell at all raises :class:`EmptyRegionError` instead.
"""

from __future__ import annotations

import numpy as np

from .boxes import Box
from .receptive import CoordMap


class EmptyRegionError(ValueError):
    """No feature cell maps inside the pooling region."""


def _as_box_array(regions) -> np.ndarray:
    if isinstance(regions, Box):
        return regions.to_array()[None, :]
    if len(regions) and isinstance(regions[0], Box):
        return np.array([r.to_array() for r in regions])
    return np.asarray(regions, dtype=np.float64).reshape(-1, 4)


def _bin_edges(lo, hi, grid: int) -> np.ndarray:
    """``(..., grid + 1)`` uniform split points; the end points are kept exact."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    u = np.arange(grid + 1) / grid
    edges = lo[..., None] + (hi - lo)[..., None] * u
    edges[..., 0] = lo
    edges[..., grid] = hi
    return edges


def _nearest(centers: np.ndarray, points: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(centers, points, side="left")
    left = np.clip(idx - 1, 0, len(centers) - 1)
    right = np.clip(idx, 0, len(centers) - 1)
    take_left = np.abs(centers[left] - points) <= np.abs(centers[right] - points)
    return np.where(take_left, left, right)


def _bin_ranges(centers: np.ndarray, edges: np.ndarray):
    """Per-bin half-open index ranges plus the nearest index to each bin centre."""
    start = np.searchsorted(centers, edges[..., :-1], side="left")
    stop = np.searchsorted(centers, edges[..., 1:], side="right")
    stop = np.maximum(start, stop)
    snap = _nearest(centers, (edges[..., :-1] + edges[..., 1:]) / 2)
    return start, stop, snap


def pyramid_cells(field_shape, regions, cmap: CoordMap, grid: int, strict: bool = False):
    """Resolve every bin of every region to a half-open rectangle of cells.

    Returns:
        ``(r0, r1, c0, c1)`` integer arrays of shape ``(n, grid, grid)``, 0-based.
    """
    if grid < 1:
        raise ValueError(f"pyramid size must be >= 1, got {grid}")
    H, W = field_shape[:2]
    boxes = _as_box_array(regions)
    rows, cols = cmap.row_centers(H), cmap.col_centers(W)
    rs, re_, rsnap = _bin_ranges(rows, _bin_edges(boxes[:, 0], boxes[:, 2], grid))
    cs, ce, csnap = _bin_ranges(cols, _bin_edges(boxes[:, 1], boxes[:, 3], grid))

    if strict:
        whole_r = np.searchsorted(rows, boxes[:, 2], "right") > np.searchsorted(rows, boxes[:, 0], "left")
        whole_c = np.searchsorted(cols, boxes[:, 3], "right") > np.searchsorted(cols, boxes[:, 1], "left")
        bad = np.flatnonzero(~(whole_r & whole_c))
        if bad.size:
            raise EmptyRegionError(f"empty pooling region at index {int(bad[0])}: "
                                   f"{boxes[bad[0]].tolist()}")

    r0 = np.broadcast_to(rs[:, :, None], (len(boxes), grid, grid))
    r1 = np.broadcast_to(re_[:, :, None], r0.shape)
    c0 = np.broadcast_to(cs[:, None, :], r0.shape)
    c1 = np.broadcast_to(ce[:, None, :], r0.shape)
    empty = (r1 <= r0) | (c1 <= c0)
    sr = np.broadcast_to(rsnap[:, :, None], r0.shape)
    sc = np.broadcast_to(csnap[:, None, :], r0.shape)
    r0 = np.where(empty, sr, r0)
    r1 = np.where(empty, sr + 1, r1)
    c0 = np.where(empty, sc, c0)
    c1 = np.where(empty, sc + 1, c1)
    return r0, r1, c0, c1


def spatial_pyramid_pool(field: np.ndarray, region: Box, cmap: CoordMap, grid: int = 1,
                         strict: bool = False) -> np.ndarray:
    """Max-pool each of the ``grid x grid`` bins of ``region``.

    Returns:
        ``(grid, grid, D)`` descriptor; flattening gives bin-major, channel-minor order.
    """
    r0, r1, c0, c1 = (a[0] for a in pyramid_cells(field.shape, region, cmap, grid, strict))
    out = np.empty((grid, grid, field.shape[2]), dtype=field.dtype)
    for u in range(grid):
        for v in range(grid):
            out[u, v] = field[r0[u, v]:r1[u, v], c0[u, v]:c1[u, v]].max(axis=(0, 1))
    return out


def spatial_pool(field: np.ndarray, region: Box, cmap: CoordMap, strict: bool = False) -> np.ndarray:
    """Per-channel max over the cells whose centres fall in ``region``; a ``(D,)`` vector."""
    return spatial_pyramid_pool(field, region, cmap, 1, strict)[0, 0]


class RangeMax:
    """2-D sparse table answering rectangle max queries in constant time."""

    def __init__(self, field: np.ndarray):
        H, W, _ = field.shape
        self.log = np.zeros(max(H, W) + 1, dtype=np.int64)
        for n in range(2, len(self.log)):
            self.log[n] = self.log[n // 2] + 1
        la, lb = int(self.log[H]) + 1, int(self.log[W]) + 1
        table = np.full((la, lb) + field.shape, -np.inf, dtype=field.dtype)
        table[0, 0] = field
        for b in range(1, lb):
            h = 1 << (b - 1)
            table[0, b, :, :W - h] = np.maximum(table[0, b - 1, :, :W - h], table[0, b - 1, :, h:])
        for a in range(1, la):
            h = 1 << (a - 1)
            table[a, :, :H - h] = np.maximum(table[a - 1, :, :H - h], table[a - 1, :, h:])
        self.table = table

    def query(self, r0, r1, c0, c1) -> np.ndarray:
        a = self.log[r1 - r0]
        b = self.log[c1 - c0]
        ra = r1 - (1 << a)
        cb = c1 - (1 << b)
        t = self.table
        return np.maximum(np.maximum(t[a, b, r0, c0], t[a, b, ra, c0]),
                          np.maximum(t[a, b, r0, cb], t[a, b, ra, cb]))


def batch_pool(field: np.ndarray, regions, cmap: CoordMap, grid: int = 1, strict: bool = False,
               table: RangeMax | None = None) -> np.ndarray:
    """SPP for many regions of one field at once.

    ``regions`` is a list of :class:`Box` or an ``(n, 4)`` array in the pixel-centre
    frame. Pass a prebuilt ``table`` to reuse it across calls on one field.

    Returns:
        ``(n, grid, grid, D)`` array; row ``i`` equals
        ``spatial_pyramid_pool(field, regions[i], cmap, grid)``.
    """
    boxes = _as_box_array(regions)
    if len(boxes) == 0:
        raise ValueError("batch_pool needs at least one region")
    r0, r1, c0, c1 = pyramid_cells(field.shape, boxes, cmap, grid, strict)
    if table is None:
        table = RangeMax(field)
    return table.query(r0, r1, c0, c1)


def region_cell_counts(cmap: CoordMap, regions, field_height: int, field_width: int) -> np.ndarray:
    """Number of feature cells inside each region (no snapping)."""
    boxes = _as_box_array(regions)
    rows, cols = cmap.row_centers(field_height), cmap.col_centers(field_width)
    nr = np.searchsorted(rows, boxes[:, 2], "right") - np.searchsorted(rows, boxes[:, 0], "left")
    nc = np.searchsorted(cols, boxes[:, 3], "right") - np.searchsorted(cols, boxes[:, 1], "left")
    return np.clip(nr, 0, None) * np.clip(nc, 0, None)


def spatial_pyramid_pool_backward(field: np.ndarray, region: Box, cmap: CoordMap, grid: int,
                                  upstream_grad, strict: bool = False) -> np.ndarray:
    """Gradient of :func:`spatial_pyramid_pool` with respect to ``field``.

    Each bin routes its upstream gradient to the per-channel argmax cell, ties
    going to the first cell in row-major order.
    """
    D = field.shape[2]
    upstream = np.asarray(upstream_grad, dtype=np.float64).reshape(grid, grid, D)
    r0, r1, c0, c1 = (a[0] for a in pyramid_cells(field.shape, region, cmap, grid, strict))
    grad = np.zeros(field.shape, dtype=np.float64)
    channels = np.arange(D)
    for u in range(grid):
        for v in range(grid):
            window = field[r0[u, v]:r1[u, v], c0[u, v]:c1[u, v]]
            nc = window.shape[1]
            flat = np.argmax(window.reshape(-1, D), axis=0)
            np.add.at(grad, (r0[u, v] + flat // nc, c0[u, v] + flat % nc, channels), upstream[u, v])
    return grad


def spatial_pool_backward(field: np.ndarray, region: Box, cmap: CoordMap, upstream_grad,
                          strict: bool = False) -> np.ndarray:
    return spatial_pyramid_pool_backward(field, region, cmap, 1, upstream_grad, strict)
