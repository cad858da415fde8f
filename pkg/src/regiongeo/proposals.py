"""Image-agnostic candidate regions.

Covers ground-truth box statistics, the fixed cluster proposal set (k-means
over normalized box corners), sliding-window enumeration, and ingestion of
externally computed proposals such as selective search output.
"""

from __future__ import annotations

import json
import logging
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .boxes import Box, box_statistics, iou_matrix

log = logging.getLogger(__name__)

STAT_RANGES = {
    "x": (0.0, 1.0), "y": (0.0, 1.0), "w": (0.0, 1.0), "h": (0.0, 1.0),
    "s": (0.0, 1.0), "c_mag": (0.0, math.sqrt(2) / 2),
}

VOC_CLASSES = (
    "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat", "chair", "cow",
    "diningtable", "dog", "horse", "motorbike", "person", "pottedplant", "sheep", "sofa",
    "train", "tvmonitor",
)


@dataclass
class GTObject:
    cls: int
    box: Box
    difficult: bool = False


@dataclass
class ImageAnnotation:
    id: str
    height: int
    width: int
    objects: list[GTObject] = field(default_factory=list)

    def boxes(self, cls: int | None = None, include_difficult: bool = True) -> np.ndarray:
        sel = [o.box.to_array() for o in self.objects
               if (cls is None or o.cls == cls) and (include_difficult or not o.difficult)]
        return np.array(sel).reshape(-1, 4)

    def classes(self) -> np.ndarray:
        return np.array([o.cls for o in self.objects], dtype=np.int64)


@dataclass
class AnnotationSet:
    images: list[ImageAnnotation]
    num_classes: int | None = None

    def __post_init__(self):
        if self.num_classes is None:
            self.num_classes = max((o.cls for im in self.images for o in im.objects), default=0)
        for im in self.images:
            frame = Box(0, 0, im.height, im.width)
            for o in im.objects:
                if not 1 <= o.cls <= self.num_classes:
                    raise ValueError(f"image {im.id}: class {o.cls} outside 1..{self.num_classes}")
                if not frame.contains(o.box):
                    raise ValueError(f"image {im.id}: box {o.box.to_list()} outside the image")

    def __len__(self) -> int:
        return len(self.images)

    def by_id(self) -> dict[str, ImageAnnotation]:
        return {im.id: im for im in self.images}

    def all_boxes(self):
        """All GT boxes with their image heights and widths, as parallel arrays."""
        boxes, hs, ws = [], [], []
        for im in self.images:
            for o in im.objects:
                boxes.append(o.box.to_array())
                hs.append(im.height)
                ws.append(im.width)
        return np.array(boxes).reshape(-1, 4), np.array(hs, float), np.array(ws, float)

    def normalized_boxes(self) -> np.ndarray:
        boxes, hs, ws = self.all_boxes()
        return boxes / np.stack([hs, ws, hs, ws], axis=1)

    def to_json(self) -> dict:
        return {"images": [
            {"id": im.id, "height": im.height, "width": im.width,
             "objects": [{"class": o.cls, "box": o.box.to_list(),
                          **({"difficult": True} if o.difficult else {})} for o in im.objects]}
            for im in self.images]}

    @classmethod
    def from_json(cls, data: dict, num_classes: int | None = None) -> "AnnotationSet":
        images = []
        for im in data["images"]:
            objs = [GTObject(int(o["class"]), Box.from_array(o["box"]), bool(o.get("difficult", False)))
                    for o in im.get("objects", [])]
            images.append(ImageAnnotation(str(im["id"]), int(im["height"]), int(im["width"]), objs))
        return cls(images, num_classes or data.get("num_classes"))


def load_annotations(path) -> AnnotationSet:
    return AnnotationSet.from_json(json.loads(Path(path).read_text()))


def save_annotations(ann: AnnotationSet, path) -> None:
    Path(path).write_text(json.dumps(ann.to_json()))


def parse_voc_xml(path, classes: Sequence[str] = VOC_CLASSES) -> ImageAnnotation:
    """Read one PASCAL-VOC annotation file.

    VOC boxes are 1-based inclusive pixel indices; pixel ``p`` covers the
    continuous interval ``[p - 1, p]``.
    """
    root = ET.parse(path).getroot()
    size = root.find("size")
    height = int(size.findtext("height"))
    width = int(size.findtext("width"))
    name = root.findtext("filename") or Path(path).stem
    objects = []
    for obj in root.iter("object"):
        bb = obj.find("bndbox")
        xmin, ymin = float(bb.findtext("xmin")), float(bb.findtext("ymin"))
        xmax, ymax = float(bb.findtext("xmax")), float(bb.findtext("ymax"))
        objects.append(GTObject(
            cls=classes.index(obj.findtext("name").strip()) + 1,
            box=Box(ymin - 1, xmin - 1, ymax, xmax),
            difficult=obj.findtext("difficult", "0").strip() == "1",
        ))
    return ImageAnnotation(Path(name).stem, height, width, objects)


def load_voc_directory(directory, classes: Sequence[str] = VOC_CLASSES) -> AnnotationSet:
    images = [parse_voc_xml(p, classes) for p in sorted(Path(directory).glob("*.xml"))]
    return AnnotationSet(images, len(classes))


@dataclass
class ProposalSet:
    """Candidate boxes in normalized corner coordinates (``[0, 1]`` per axis)."""

    boxes: np.ndarray
    image_independent: bool = True

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        if np.any(self.boxes < 0) or np.any(self.boxes > 1):
            raise ValueError("normalized proposals must lie in [0, 1]")
        if np.any(self.boxes[:, 2] <= self.boxes[:, 0]) or np.any(self.boxes[:, 3] <= self.boxes[:, 1]):
            raise ValueError("proposals must have positive area")

    def __len__(self) -> int:
        return len(self.boxes)

    def denormalize(self, height: float, width: float) -> np.ndarray:
        return self.boxes * np.array([height, width, height, width], dtype=np.float64)

    def to_json(self) -> dict:
        return {"image_independent": self.image_independent, "normalized": True,
                "boxes": self.boxes.tolist()}

    @classmethod
    def from_json(cls, data: dict) -> "ProposalSet":
        return cls(np.array(data["boxes"], dtype=np.float64), bool(data.get("image_independent", True)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "ProposalSet":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class BoxHistogram:
    axes: tuple[str, str]
    counts: np.ndarray
    edges: tuple[np.ndarray, np.ndarray]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self) -> str:
        lines = ["bin_row,bin_col,count"]
        for (i, j), c in np.ndenumerate(self.counts):
            lines.append(f"{i},{j},{int(c)}")
        return "\n".join(lines) + "\n"


def _canonical_axis(name: str) -> str:
    name = {"cmag": "c_mag", "c": "c_mag", "|c|": "c_mag"}.get(name, name)
    if name not in STAT_RANGES:
        raise ValueError(f"unknown statistic {name!r}; expected one of {sorted(STAT_RANGES)}")
    return name


def histogram_from_stats(stats: dict, axes: tuple[str, str], bins: int) -> BoxHistogram:
    a0, a1 = (_canonical_axis(a) for a in axes)
    e0 = np.linspace(*STAT_RANGES[a0], bins + 1)
    e1 = np.linspace(*STAT_RANGES[a1], bins + 1)
    # clip so that values on the closing edge land in the last bin
    v0 = np.clip(stats[a0], e0[0], e0[-1])
    v1 = np.clip(stats[a1], e1[0], e1[-1])
    counts, _, _ = np.histogram2d(v0, v1, bins=(e0, e1))
    return BoxHistogram((a0, a1), counts.astype(np.int64), (e0, e1))


def collect_box_statistics(ann: AnnotationSet, axes=("s", "c_mag"), bins: int = 20) -> BoxHistogram:
    """2-D histogram of normalized GT box statistics, one count per GT box."""
    boxes, hs, ws = ann.all_boxes()
    if len(boxes) == 0:
        raise ValueError("annotation set has no boxes")
    return histogram_from_stats(box_statistics(boxes, hs, ws), tuple(axes), bins)


def proposal_histogram(proposals: ProposalSet, axes=("s", "c_mag"), bins: int = 20) -> BoxHistogram:
    return histogram_from_stats(box_statistics(proposals.boxes, 1.0, 1.0), tuple(axes), bins)


def chi2_distance(h1: BoxHistogram, h2: BoxHistogram) -> float:
    """Symmetric chi-squared distance between the normalized histograms, in [0, 1]."""
    p = h1.counts / h1.counts.sum()
    q = h2.counts / h2.counts.sum()
    den = p + q
    mask = den > 0
    return float(0.5 * np.sum((p[mask] - q[mask]) ** 2 / den[mask]))


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return np.maximum((x * x).sum(1)[:, None] - 2 * x @ c.T + (c * c).sum(1)[None, :], 0.0)


def _assign(x: np.ndarray, c: np.ndarray, chunk: int = 2048):
    labels = np.empty(len(x), dtype=np.int64)
    dist = np.empty(len(x))
    for s in range(0, len(x), chunk):
        d = _sq_dists(x[s:s + chunk], c)
        labels[s:s + chunk] = d.argmin(1)
        dist[s:s + chunk] = d[np.arange(len(d)), labels[s:s + chunk]]
    return labels, dist


def _kmeans_pp(x: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    centers = np.empty((n, x.shape[1]))
    centers[0] = x[rng.integers(len(x))]
    closest = ((x - centers[0]) ** 2).sum(1)
    for k in range(1, n):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(len(x))
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, len(x) - 1)
        centers[k] = x[idx]
        np.minimum(closest, ((x - centers[k]) ** 2).sum(1), out=closest)
    return centers


@dataclass
class KMeansResult:
    centers: np.ndarray
    labels: np.ndarray
    distortion_history: list[float]
    iterations: int


def lloyd_kmeans(x: np.ndarray, n: int, seed: int = 0, max_iter: int = 100) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding (Euclidean distance).

    A cluster that loses all its points is moved onto the point currently
    farthest from its centre, which never increases the distortion.
    """
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, n, rng)
    labels, dist = _assign(x, centers)
    history = [float(dist.sum())]
    it = 0
    for it in range(1, max_iter + 1):
        counts = np.bincount(labels, minlength=n)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        for k in np.flatnonzero(~nonempty):
            far = int(dist.argmax())
            centers[k] = x[far]
            dist[far] = 0.0
        new_labels, dist = _assign(x, centers)
        history.append(float(dist.sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return KMeansResult(centers, labels, history, it)


def kmeans_cluster_boxes(ann: AnnotationSet, n: int, seed: int = 0, max_iter: int = 100) -> ProposalSet:
    """Cluster normalized GT corners ``(r_s, c_s, r_e, c_e)`` into ``n`` fixed proposals."""
    if n < 1:
        raise ValueError("need at least one cluster")
    x = ann.normalized_boxes()
    distinct = len(np.unique(x, axis=0))
    if distinct < n:
        raise ValueError(f"only {distinct} distinct GT boxes for {n} clusters")
    result = lloyd_kmeans(x, n, seed, max_iter)
    return ProposalSet(np.clip(result.centers, 0.0, 1.0), image_independent=True)


DEFAULT_LEVELS = tuple(np.arange(0, 4.0001, 0.5))
DEFAULT_ASPECTS = tuple(2.0 ** np.arange(-1, 1.0001, 0.25))


def _axis_centers(extent: float, side: float, stride: float) -> np.ndarray:
    if side >= extent:
        return np.array([extent / 2])
    n = int(math.floor((extent - side) / stride + 1e-9)) + 1
    offset = (extent - side - (n - 1) * stride) / 2
    return side / 2 + offset + stride * np.arange(n)


def _window_grid(min_width, levels, aspects, shape, factor):
    H, W = shape
    out = []
    for l in levels:
        w = min_width * 2.0 ** l
        for a in aspects:
            h = w / a
            ys = _axis_centers(H, h, factor * h)
            xs = _axis_centers(W, w, factor * w)
            cy, cx = np.meshgrid(ys, xs, indexing="ij")
            cy, cx = cy.ravel(), cx.ravel()
            out.append(np.stack([cy - h / 2, cx - w / 2, cy + h / 2, cx + w / 2], axis=1))
    return np.concatenate(out)


def _grid_count(min_width, levels, aspects, shape, factor) -> int:
    H, W = shape
    total = 0
    for l in levels:
        w = min_width * 2.0 ** l
        for a in aspects:
            h = w / a
            total += len(_axis_centers(H, h, factor * h)) * len(_axis_centers(W, w, factor * w))
    return total


def sliding_window_boxes(min_width: float = 40.0, levels: Sequence[float] = DEFAULT_LEVELS,
                         aspect_ratios: Sequence[float] = DEFAULT_ASPECTS, target_count: int = 7000,
                         image_shape_prior: tuple[int, int] = (375, 500),
                         stride_factor: float | None = None) -> ProposalSet:
    """Sliding-window boxes of width ``min_width * 2**l`` and height ``width / aspect``.

    Window centres sit on a uniform grid per (level, aspect) whose stride is
    ``stride_factor`` times the window side. Without an explicit factor, the
    densest factor (searched from large strides downwards) whose box count
    stays within ``target_count`` is used. Boxes are clipped to the prior image
    shape and normalized by it.
    """
    n_combos = len(levels) * len(aspect_ratios)
    if n_combos == 0:
        raise ValueError("need at least one level and one aspect ratio")
    if target_count < n_combos:
        raise ValueError(f"target_count {target_count} below the {n_combos} scale/aspect combinations")
    H, W = image_shape_prior
    if stride_factor is None:
        hi = 2.0 * max(H, W) / min_width
        if _grid_count(min_width, levels, aspect_ratios, (H, W), hi) > target_count:
            raise ValueError(f"target_count {target_count} unreachable")
        lo = 1e-3
        # count is non-increasing in the factor: bisect for the smallest feasible factor
        for _ in range(200):
            mid = math.sqrt(lo * hi)
            if _grid_count(min_width, levels, aspect_ratios, (H, W), mid) <= target_count:
                hi = mid
            else:
                lo = mid
            if hi / lo < 1 + 1e-12:
                break
        stride_factor = hi
    boxes = _window_grid(min_width, levels, aspect_ratios, (H, W), stride_factor)
    boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, H)
    boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, W)
    return ProposalSet(boxes / np.array([H, W, H, W], dtype=np.float64), image_independent=True)


def load_external_proposals(path) -> dict[str, np.ndarray]:
    """Per-image proposals in pixel coordinates.

    Accepts ``{"proposals": [{"image": id, "boxes": [[r_s, c_s, r_e, c_e], ...]}]}``
    or a plain ``{id: [[...], ...]}`` mapping.
    """
    data = json.loads(Path(path).read_text())
    if "proposals" in data:
        items = [(str(e["image"]), e["boxes"]) for e in data["proposals"]]
    else:
        items = [(str(k), v) for k, v in data.items()]
    out = {}
    for image_id, boxes in items:
        arr = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        if not np.isfinite(arr).all():
            raise ValueError(f"non-finite proposal for image {image_id}")
        out[image_id] = arr
    return out


def restrict_by_overlap(proposals: dict[str, np.ndarray], ann: AnnotationSet,
                        min_overlap: float = 0.5) -> dict[str, np.ndarray]:
    """Keep proposals whose best IoU with any GT box of their image is at least ``min_overlap``."""
    if not 0 <= min_overlap <= 1:
        raise ValueError(f"min_overlap must be in [0, 1], got {min_overlap}")
    index = ann.by_id()
    out = {}
    for image_id, boxes in proposals.items():
        if image_id not in index:
            raise KeyError(f"unknown image id {image_id!r}")
        gt = index[image_id].boxes()
        if min_overlap == 0:
            out[image_id] = boxes.copy()
            continue
        best = iou_matrix(boxes, gt).max(axis=1) if len(gt) else np.zeros(len(boxes))
        out[image_id] = boxes[best >= min_overlap]
    return out


def mean_best_iou(proposals: ProposalSet, ann: AnnotationSet) -> float:
    """Average over GT boxes of the best IoU against the proposals scaled to that image."""
    scores = []
    for im in ann.images:
        gt = im.boxes()
        if len(gt) == 0:
            continue
        scores.append(iou_matrix(gt, proposals.denormalize(im.height, im.width)).max(axis=1))
    if not scores:
        raise ValueError("annotation set has no boxes")
    return float(np.concatenate(scores).mean())
