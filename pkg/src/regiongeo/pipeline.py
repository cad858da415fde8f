"""End-to-end detection and stage timing.

proposals -> feature fields (one per scale) -> SPP descriptors -> class scores
-> per-class box regression -> clipping -> per-class NMS.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .boxes import Box, apply_adjustments, clip_boxes, iou_matrix
from .features import ConvNet, as_image, resize_image, scaled_size
from .proposals import ProposalSet
from .receptive import CoordMap, coord_map
from .spp import RangeMax, batch_pool, region_cell_counts
from .training import SCORERS, BoxRegressor, LinearScorer

STAGES = ("preprocess", "conv", "spp", "fc", "bbr", "nms")


@dataclass(frozen=True)
class Detection:
    image: str
    cls: int
    box: Box
    score: float

    def to_json(self) -> dict:
        return {"image": self.image, "class": self.cls, "box": self.box.to_list(), "score": self.score}

    @classmethod
    def from_json(cls, d: dict) -> "Detection":
        return cls(str(d["image"]), int(d["class"]), Box.from_array(d["box"]), float(d["score"]))


@dataclass
class PipelineConfig:
    scales: tuple[float, ...] = (1.0,)
    scorer: str = "modified-softmax"
    use_regression: bool = True
    nms_threshold: float = 0.3
    grid: int = 4
    top_k: int = 100
    score_floor: float = -np.inf

    def __post_init__(self):
        self.scales = tuple(float(s) for s in self.scales)
        if not self.scales:
            raise ValueError("need at least one scale")
        if self.scorer not in SCORERS:
            raise ValueError(f"unknown scorer {self.scorer!r}; expected one of {sorted(SCORERS)}")
        if not 0 <= self.nms_threshold <= 1:
            raise ValueError("nms_threshold must lie in [0, 1]")

    def unique_scales(self) -> tuple[float, ...]:
        return tuple(dict.fromkeys(self.scales))


@dataclass
class Detector:
    """The learned and fixed parts the pipeline needs."""

    net: ConvNet
    scorer: LinearScorer | None = None
    regressor: BoxRegressor | None = None
    cmap: CoordMap | None = None

    def __post_init__(self):
        if self.cmap is None:
            self.cmap = coord_map(self.net.architecture())


def nms_indices(boxes, scores, threshold: float = 0.3) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending score order.

    A box is kept iff its IoU with every previously kept box is at most
    ``threshold``. Equal scores keep their input order.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(boxes) == 0:
        return np.empty(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    ov = iou_matrix(boxes[order], boxes[order])
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for k in range(len(order)):
        if not alive[k]:
            continue
        keep.append(order[k])
        alive[k + 1:] &= ov[k, k + 1:] <= threshold
    return np.array(keep, dtype=np.int64)


def nms(dets: Sequence[Detection], threshold: float = 0.3) -> list[Detection]:
    if not dets:
        return []
    idx = nms_indices([d.box.to_array() for d in dets], [d.score for d in dets], threshold)
    return [dets[i] for i in idx]


class StageClock:
    """Charges wall time between consecutive laps to named stages."""

    def __init__(self):
        self.times = dict.fromkeys(STAGES, 0.0)
        self.start = self._last = time.perf_counter()

    def lap(self, stage: str) -> None:
        now = time.perf_counter()
        self.times[stage] += now - self._last
        self._last = now

    @property
    def total(self) -> float:
        return self._last - self.start


class _NullClock:
    def lap(self, stage: str) -> None:
        pass


def _proposal_boxes(proposals, height: int, width: int) -> np.ndarray:
    if isinstance(proposals, ProposalSet):
        return proposals.denormalize(height, width)
    return np.asarray(proposals, dtype=np.float64).reshape(-1, 4)


def _describe(image: np.ndarray, boxes: np.ndarray, config: PipelineConfig, det: Detector, clock):
    """SPP descriptors for pixel boxes, each pooled at its best-matching scale."""
    H, W = image.shape[:2]
    scales = config.unique_scales()
    scaled = []
    for s in scales:
        th, tw = scaled_size(H, W, s)
        scaled.append(image if (th, tw) == (H, W) else resize_image(image, th, tw))
    clock.lap("preprocess")
    fields = [det.net.forward(img) for img in scaled]
    clock.lap("conv")

    n = len(boxes)
    grid = config.grid
    D = fields[0].shape[2]
    out = np.empty((n, grid * grid * D))
    if n == 0:
        clock.lap("spp")
        return out
    frames = []
    target = grid * grid
    best = np.zeros(n, dtype=np.int64)
    best_gap = np.full(n, np.inf)
    for k, (img, fld) in enumerate(zip(scaled, fields)):
        fr, fc = img.shape[0] / H, img.shape[1] / W
        g = boxes * np.array([fr, fc, fr, fc]) + 0.5
        frames.append(g)
        if len(scales) > 1:
            gap = np.abs(region_cell_counts(det.cmap, g, fld.shape[0], fld.shape[1]) - target)
            better = gap < best_gap
            best[better] = k
            best_gap[better] = gap[better]
    for k, fld in enumerate(fields):
        sel = np.flatnonzero(best == k)
        if len(sel):
            out[sel] = batch_pool(fld, frames[k][sel], det.cmap, grid, table=RangeMax(fld)).reshape(len(sel), -1)
    clock.lap("spp")
    return out


def describe_regions(image, boxes, config: PipelineConfig, det: Detector) -> np.ndarray:
    """``(n, grid*grid*D)`` descriptors for pixel-coordinate boxes of one image."""
    return _describe(as_image(image), np.asarray(boxes, float).reshape(-1, 4), config, det, _NullClock())


def _detect(image, config: PipelineConfig, det: Detector, proposals, image_id: str, clock):
    img = as_image(image)
    H, W = img.shape[:2]
    boxes = _proposal_boxes(proposals, H, W)
    boxes, valid = clip_boxes(boxes, H, W)
    boxes = boxes[valid]
    clock.lap("preprocess")
    if det.scorer is None:
        raise ValueError("scoring stage: detector has no scorer")
    desc = _describe(img, boxes, config, det, clock)
    if len(boxes) == 0:
        return []
    if desc.shape[1] != det.scorer.dim:
        raise ValueError(f"scoring stage: descriptor size {desc.shape[1]} != scorer input {det.scorer.dim}")
    scores = SCORERS[config.scorer](det.scorer, desc)
    clock.lap("fc")

    per_class = []
    for c in range(1, det.scorer.num_classes + 1):
        s = scores[:, c - 1]
        idx = np.argsort(-s, kind="stable")[:config.top_k]
        idx = idx[s[idx] > config.score_floor]
        cand = boxes[idx]
        if config.use_regression and det.regressor is not None and len(idx):
            cand = apply_adjustments(cand, det.regressor.predict(c, desc[idx]))
        cand, ok = clip_boxes(cand, H, W)
        per_class.append((c, cand[ok], s[idx][ok]))
    clock.lap("bbr")

    dets = []
    for c, cand, sc in per_class:
        for i in nms_indices(cand, sc, config.nms_threshold):
            dets.append(Detection(image_id, c, Box.from_array(cand[i]), float(sc[i])))
    clock.lap("nms")
    return dets


def detect_image(image, config: PipelineConfig, det: Detector, proposals, image_id: str = "") -> list[Detection]:
    """Run the full detector on one ``(H, W, C)`` image.

    ``proposals`` is a normalized :class:`ProposalSet` (scaled to the image)
    or an ``(n, 4)`` array of pixel boxes.
    """
    return _detect(image, config, det, proposals, image_id, _NullClock())


@dataclass
class StageTiming:
    """Per-image stage wall times in seconds, ``(n_images, n_stages)``."""

    stages: tuple[str, ...]
    per_image: np.ndarray
    totals: np.ndarray
    repeats: int = 1

    @property
    def mean(self) -> dict[str, float]:
        return dict(zip(self.stages, self.per_image.mean(axis=0)))

    @property
    def std(self) -> dict[str, float]:
        return dict(zip(self.stages, self.per_image.std(axis=0)))

    @property
    def total_mean(self) -> float:
        return float(self.totals.mean())

    @property
    def total_std(self) -> float:
        return float(self.totals.std())

    def to_csv(self) -> str:
        lines = ["stage,mean_ms,std_ms"]
        for s in self.stages:
            lines.append(f"{s},{self.mean[s] * 1e3:.4f},{self.std[s] * 1e3:.4f}")
        lines.append(f"total,{self.total_mean * 1e3:.4f},{self.total_std * 1e3:.4f}")
        return "\n".join(lines) + "\n"


def run_timing(images: Sequence, config: PipelineConfig, det: Detector, proposals,
               repeats: int = 5, warmup: int = 1) -> StageTiming:
    """Time every stage of :func:`detect_image`, sequentially.

    Each image is run ``warmup`` times (discarded) and then ``repeats`` times;
    per-image numbers are the mean over repeats. ``proposals`` is shared by all
    images or given as a list with one entry per image.
    """
    if len(images) == 0:
        raise ValueError("no images to time")
    if warmup < 1 or repeats < 1:
        raise ValueError("need at least one warmup run and one timed repeat")
    per_image = np.zeros((len(images), len(STAGES)))
    totals = np.zeros(len(images))
    for i, img in enumerate(images):
        props = proposals[i] if isinstance(proposals, (list, tuple)) else proposals
        for _ in range(warmup):
            _detect(img, config, det, props, str(i), _NullClock())
        for _ in range(repeats):
            clock = StageClock()
            _detect(img, config, det, props, str(i), clock)
            per_image[i] += [clock.times[s] for s in STAGES]
            totals[i] += clock.total
        per_image[i] /= repeats
        totals[i] /= repeats
    return StageTiming(STAGES, per_image, totals, repeats)
