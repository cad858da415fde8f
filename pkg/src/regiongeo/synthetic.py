"""Synthetic corpora for desk-scale experiments.

Two generators: a box-only annotation corpus whose boxes favour large,
centred objects (for proposal statistics), and a small rendered detection
benchmark of bright rectangles on a noisy background, with a hand-built
feature extractor that responds to colour and edges.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .boxes import Box
from .evaluation import SweepRow, sweep_proposal_budget
from .features import Conv, ConvNet, MaxPool, ReLU
from .pipeline import Detector, PipelineConfig, describe_regions, detect_image
from .proposals import AnnotationSet, GTObject, ImageAnnotation, kmeans_cluster_boxes, sliding_window_boxes
from .training import (collect_regression_pairs, finetune_labels, sample_minibatch,
                       train_box_regressor, train_linear_scorer)

IMAGE_SHAPES = ((375, 500), (500, 375), (333, 500), (500, 500))


def _centred_box(rng: np.random.Generator, H: int, W: int) -> Box:
    s = 0.08 + 0.9 * rng.beta(2.2, 1.4)
    aspect = np.exp(rng.normal(0.0, 0.45))
    w = min(1.0, s * np.sqrt(aspect))
    h = min(1.0, s / np.sqrt(aspect))
    cx = np.clip(rng.normal(0.5, 0.13), w / 2, 1 - w / 2)
    cy = np.clip(rng.normal(0.5, 0.13), h / 2, 1 - h / 2)
    box = Box((cy - h / 2) * H, (cx - w / 2) * W, (cy + h / 2) * H, (cx + w / 2) * W)
    return Box(max(0.0, box.r_s), max(0.0, box.c_s), min(float(H), box.r_e), min(float(W), box.c_e))


def box_corpus(n_images: int, seed: int = 0, num_classes: int = 3, max_objects: int = 3) -> AnnotationSet:
    """Annotation-only corpus with centre-biased, mostly large boxes."""
    rng = np.random.default_rng(seed)
    images = []
    for k in range(n_images):
        H, W = IMAGE_SHAPES[rng.integers(len(IMAGE_SHAPES))]
        objs = [GTObject(int(rng.integers(1, num_classes + 1)), _centred_box(rng, H, W))
                for _ in range(rng.integers(1, max_objects + 1))]
        images.append(ImageAnnotation(f"img{k:05d}", int(H), int(W), objs))
    return AnnotationSet(images, num_classes)


@dataclass
class DetectionBenchmark:
    size: int
    num_classes: int
    train: AnnotationSet        # large, annotation-only (used for clustering)
    fit: AnnotationSet          # rendered subset for scorer/regressor training
    test: AnnotationSet
    seed: int = 0

    def image(self, im: ImageAnnotation) -> np.ndarray:
        return render(im, self.num_classes, seed=zlib.crc32(f"{self.seed}:{im.id}".encode()))

    def images(self, ann: AnnotationSet) -> dict[str, np.ndarray]:
        return {im.id: self.image(im) for im in ann.images}


def _object_box(rng: np.random.Generator, size: int) -> Box:
    side = rng.uniform(0.25, 0.7) * size
    aspect = np.exp(rng.normal(0.0, 0.3))
    w = min(size * 0.9, side * np.sqrt(aspect))
    h = min(size * 0.9, side / np.sqrt(aspect))
    cx = np.clip(rng.normal(size / 2, size / 7), w / 2, size - w / 2)
    cy = np.clip(rng.normal(size / 2, size / 7), h / 2, size - h / 2)
    # integer corners keep rendering exact
    r_s, c_s = int(round(cy - h / 2)), int(round(cx - w / 2))
    r_e, c_e = max(r_s + 4, int(round(cy + h / 2))), max(c_s + 4, int(round(cx + w / 2)))
    return Box(r_s, c_s, min(r_e, size), min(c_e, size))


def _annotations(rng, n: int, size: int, num_classes: int, prefix: str) -> AnnotationSet:
    images = []
    for k in range(n):
        objs = [GTObject(int(rng.integers(1, num_classes + 1)), _object_box(rng, size))]
        images.append(ImageAnnotation(f"{prefix}{k:05d}", size, size, objs))
    return AnnotationSet(images, num_classes)


def detection_benchmark(n_train: int = 4000, n_fit: int = 200, n_test: int = 60, size: int = 64,
                        num_classes: int = 2, seed: int = 0) -> DetectionBenchmark:
    """One object per image; class ``c`` lights up colour channel ``c - 1``."""
    rng = np.random.default_rng(seed)
    train = _annotations(rng, n_train, size, num_classes, "train")
    fit = AnnotationSet(train.images[:n_fit], num_classes)
    test = _annotations(rng, n_test, size, num_classes, "test")
    return DetectionBenchmark(size, num_classes, train, fit, test, seed)


def render(im: ImageAnnotation, num_classes: int, seed: int = 0, noise: float = 0.08) -> np.ndarray:
    rng = np.random.default_rng(seed)
    img = rng.normal(0.0, noise, size=(im.height, im.width, num_classes))
    for o in im.objects:
        b = o.box
        img[int(b.r_s):int(b.r_e), int(b.c_s):int(b.c_e), o.cls - 1] += rng.uniform(0.7, 1.0)
    return img


def toy_net(in_channels: int = 2) -> ConvNet:
    """3x3 colour + oriented-edge filters, ReLU, then two 2x2 max-pools (stride 4 overall)."""
    filters = []
    for c in range(in_channels):
        f = np.zeros((3, 3, in_channels))
        f[:, :, c] = 1.0 / 9
        filters.append(f)
    dx = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=float) / 4
    for k in (dx, -dx, dx.T, -dx.T):
        filters.append(np.repeat(k[:, :, None], in_channels, axis=2))
    w = np.stack(filters, axis=3)
    return ConvNet([Conv(w, np.zeros(w.shape[3]), stride=1, padding=1), ReLU(), MaxPool(2, 2), MaxPool(2, 2)])


def train_detector(bench: DetectionBenchmark, proposals, config: PipelineConfig | None = None,
                   n_samples: int = 20000, ridge_cls: float = 1e-2, ridge_reg: float | None = None,
                   seed: int = 0) -> Detector:
    """Fit the scorer and box regressor on the rendered training subset.

    ``proposals`` is the (normalized) candidate set used to harvest training
    regions; GT boxes are added as positives.
    """
    config = config or PipelineConfig()
    det = Detector(toy_net(bench.num_classes))
    images = bench.images(bench.fit)
    cache = {}

    def describe(image_id, boxes):
        return describe_regions(images[image_id], boxes, config, det)

    labeled, per_image = [], {}
    for im in bench.fit.images:
        boxes = np.concatenate([proposals.denormalize(im.height, im.width), im.boxes()])
        per_image[im.id] = boxes
        labels = finetune_labels(boxes, im)
        cache[im.id] = describe(im.id, boxes)
        labeled += [((im.id, i), int(l)) for i, l in enumerate(labels) if l >= 0]
    batch = sample_minibatch(labeled, n_samples, 0.25, seed)
    X = np.array([cache[key[0]][key[1]] for key, _ in batch])
    y = np.array([lab for _, lab in batch])
    det.scorer = train_linear_scorer(X, y, ridge_cls, bench.num_classes)

    props = {im.id: proposals.denormalize(im.height, im.width) for im in bench.fit.images}
    pairs = collect_regression_pairs(bench.fit, props, describe, 0.5)
    det.regressor = train_box_regressor(pairs, ridge_reg)
    return det


def benchmark_sweep(budgets=(100, 500, 1000, 3000), methods=("cluster", "slidewin"), seed: int = 0,
                    n_test: int = 150, min_width: float = 40.0, n_train_clusters: int = 1000) -> list[SweepRow]:
    """mAP against proposal budget on the rendered benchmark.

    The detector is trained once on ``n_train_clusters`` cluster proposals;
    each budget then gets freshly generated proposals (clusters use a
    different seed from training). ``min_width`` is the smallest window width for a
    500 pixel wide image and is rescaled to the benchmark size.
    """
    bench = detection_benchmark(n_test=n_test, seed=seed)
    det = train_detector(bench, kmeans_cluster_boxes(bench.train, n_train_clusters, seed=seed), seed=seed)
    images = bench.images(bench.test)
    size = bench.size
    available = {
        "cluster": lambda n: kmeans_cluster_boxes(bench.train, n, seed=seed + 1),
        "slidewin": lambda n: sliding_window_boxes(min_width=min_width * size / 500, target_count=n,
                                                   image_shape_prior=(size, size)),
    }
    unknown = set(methods) - set(available)
    if unknown:
        raise ValueError(f"unknown proposal methods {sorted(unknown)}")

    def detect(props, use_regression):
        config = PipelineConfig(use_regression=use_regression)
        return [d for im in bench.test.images for d in detect_image(images[im.id], config, det, props, im.id)]

    return sweep_proposal_budget(sorted(budgets), {m: available[m] for m in methods}, detect, bench.test)
