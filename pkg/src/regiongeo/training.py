"""Label assignment, sampling, linear scoring heads and box regression.

CNN fine-tuning and SVM solvers are out of scope: :func:`train_linear_scorer`
fits a ridge least-squares classifier as a stand-in, and scorers can also be
built directly from externally trained weights.
"""

from __future__ import annotations

import enum
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .boxes import Box, compute_adjustment, compute_adjustments, iou, iou_matrix
from .proposals import AnnotationSet, ImageAnnotation
from .tensorio import read_tensor, write_tensor

AMBIGUOUS = -1


class SvmLabel(enum.Enum):
    POSITIVE = 1
    NEGATIVE = 0
    AMBIGUOUS = -1


class Source(enum.Enum):
    GROUND_TRUTH = "ground-truth"
    CANDIDATE = "candidate"


@dataclass(frozen=True)
class LabeledRegion:
    box: Box
    label: int | SvmLabel
    source: Source = Source.CANDIDATE


def assign_svm_labels(region: Box, image: ImageAnnotation, cls: int, overlap_threshold: float = 0.3,
                      source: Source = Source.CANDIDATE) -> SvmLabel:
    """Per-class SVM label: class-``cls`` GT boxes are positive, candidates
    overlapping one by at least ``overlap_threshold`` are ambiguous, the rest negative."""
    if not 0 <= overlap_threshold <= 1:
        raise ValueError(f"overlap_threshold must be in [0, 1], got {overlap_threshold}")
    if source is Source.GROUND_TRUTH and any(o.cls == cls and o.box == region for o in image.objects):
        return SvmLabel.POSITIVE
    best = max((iou(region, o.box) for o in image.objects if o.cls == cls), default=0.0)
    return SvmLabel.AMBIGUOUS if best >= overlap_threshold else SvmLabel.NEGATIVE


def assign_finetune_label(region: Box, image: ImageAnnotation, fg_threshold: float = 0.5,
                          bg_threshold: float = 0.5) -> int:
    """Class of the best-overlapping GT box if IoU >= ``fg_threshold``, 0 if below
    ``bg_threshold``, otherwise :data:`AMBIGUOUS`."""
    if bg_threshold > fg_threshold:
        raise ValueError("bg_threshold must not exceed fg_threshold")
    if not image.objects:
        return 0
    overlaps = [iou(region, o.box) for o in image.objects]
    best = int(np.argmax(overlaps))
    if overlaps[best] >= fg_threshold:
        return image.objects[best].cls
    if overlaps[best] < bg_threshold:
        return 0
    return AMBIGUOUS


def finetune_labels(boxes: np.ndarray, image: ImageAnnotation, fg_threshold: float = 0.5,
                    bg_threshold: float = 0.5) -> np.ndarray:
    """Vectorized :func:`assign_finetune_label` for ``(N, 4)`` boxes."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if not image.objects:
        return np.zeros(len(boxes), dtype=np.int64)
    ov = iou_matrix(boxes, image.boxes())
    best = ov.argmax(axis=1)
    top = ov[np.arange(len(boxes)), best]
    labels = np.full(len(boxes), AMBIGUOUS, dtype=np.int64)
    labels[top >= fg_threshold] = image.classes()[best[top >= fg_threshold]]
    labels[top < bg_threshold] = 0
    return labels


def sample_minibatch(labeled: Sequence, size: int, fg_fraction: float = 0.25, seed=None) -> list:
    """Draw ``size`` items; each slot is foreground with probability ``fg_fraction``.

    ``labeled`` holds :class:`LabeledRegion` objects or ``(item, label)`` pairs.
    Foreground means label > 0; ambiguous items are never drawn. Within a
    stratum items are drawn uniformly with replacement.
    """
    if len(labeled) == 0:
        raise ValueError("nothing to sample from")

    def label_of(x):
        lab = x.label if isinstance(x, LabeledRegion) else x[1]
        return lab.value if isinstance(lab, enum.Enum) else int(lab)

    labels = np.array([label_of(x) for x in labeled])
    fg = np.flatnonzero(labels > 0)
    bg = np.flatnonzero(labels == 0)
    if len(fg) == 0 and len(bg) == 0:
        raise ValueError("no foreground or background items")
    rng = np.random.default_rng(seed)
    if len(fg) == 0 or len(bg) == 0:
        warnings.warn("one stratum is empty; sampling only from the other", RuntimeWarning)
        pool = fg if len(fg) else bg
        return [labeled[i] for i in pool[rng.integers(len(pool), size=size)]]
    is_fg = rng.random(size) < fg_fraction
    picks = np.where(is_fg, fg[rng.integers(len(fg), size=size)], bg[rng.integers(len(bg), size=size)])
    return [labeled[i] for i in picks]


@dataclass
class LinearScorer:
    """Per-class linear predictors; row 0 is background."""

    weights: np.ndarray  # (C + 1, D)
    bias: np.ndarray     # (C + 1,)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.weights.ndim != 2 or self.weights.shape[0] != len(self.bias) or len(self.bias) < 2:
            raise ValueError("scorer needs (C+1, D) weights and C+1 biases with C >= 1")

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def logits(self, features) -> np.ndarray:
        f = np.asarray(features, dtype=np.float64)
        if f.shape[-1] != self.dim:
            raise ValueError(f"feature dimension {f.shape[-1]} does not match scorer ({self.dim})")
        return f @ self.weights.T + self.bias

    def save(self, path) -> None:
        path = Path(path)
        wname, bname = f"{path.stem}_w.bin", f"{path.stem}_b.bin"
        write_tensor(path.parent / wname, self.weights, "f64")
        write_tensor(path.parent / bname, self.bias, "f64")
        path.write_text(json.dumps({"kind": "linear", "weights": wname, "bias": bname}))

    @classmethod
    def load(cls, path) -> "LinearScorer":
        path = Path(path)
        m = json.loads(path.read_text())
        return cls(read_tensor(path.parent / m["weights"]), read_tensor(path.parent / m["bias"]))


def score_svm(scorer: LinearScorer, features) -> np.ndarray:
    """Raw linear scores of the foreground classes, ``(..., num_classes)``."""
    return scorer.logits(features)[..., 1:]


def score_softmax(scorer: LinearScorer, features) -> np.ndarray:
    """Class posteriors over background plus every foreground class."""
    z = scorer.logits(features)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def score_modified_softmax(scorer: LinearScorer, features) -> np.ndarray:
    """Ratio of each foreground posterior to the background posterior.

    Computed directly from weight and bias differences against the background
    row, so it never forms the normalizer and cannot underflow to 0/0.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.shape[-1] != scorer.dim:
        raise ValueError(f"feature dimension {f.shape[-1]} does not match scorer ({scorer.dim})")
    dw = scorer.weights[1:] - scorer.weights[0]
    db = scorer.bias[1:] - scorer.bias[0]
    return np.exp(f @ dw.T + db)


SCORERS: dict[str, Callable] = {
    "svm": score_svm,
    "softmax": lambda s, f: score_softmax(s, f)[..., 1:],
    "modified-softmax": score_modified_softmax,
}


def _ridge_fit(X: np.ndarray, Y: np.ndarray, ridge: float, sample_weight: float = 1.0):
    """Ridge fit with an unpenalized intercept; returns ``(coef, intercept)``."""
    x_mean = X.mean(axis=0)
    y_mean = Y.mean(axis=0)
    Xc = X - x_mean
    Yc = Y - y_mean
    A = sample_weight * (Xc.T @ Xc) + ridge * np.eye(X.shape[1])
    B = sample_weight * (Xc.T @ Yc)
    if ridge == 0 and np.linalg.matrix_rank(A) < A.shape[0]:
        raise np.linalg.LinAlgError("rank-deficient system with zero ridge")
    coef = np.linalg.solve(A, B)
    return coef, y_mean - x_mean @ coef


def train_linear_scorer(features, labels, ridge: float = 1e-3, num_classes: int | None = None) -> LinearScorer:
    """One-vs-rest regularized least squares on targets +1 / -1.

    The loss is averaged over examples, so duplicating the data set leaves
    the solution unchanged. Classes without examples get zero weights and
    bias -1.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y) or len(y) == 0:
        raise ValueError("features must be (N, D) with one label per row")
    if ridge <= 0:
        raise ValueError("ridge must be positive")
    C = int(y.max()) if num_classes is None else num_classes
    Y = np.where(y[:, None] == np.arange(C + 1)[None, :], 1.0, -1.0)
    W, b = _ridge_fit(X, Y, ridge, sample_weight=1.0 / len(X))
    absent = np.bincount(y, minlength=C + 1) == 0
    W[:, absent] = 0.0
    b[absent] = -1.0
    return LinearScorer(W.T, b)


@dataclass
class BoxRegressor:
    """Per-class linear maps from region descriptors to box adjustments."""

    coef: dict[int, np.ndarray] = field(default_factory=dict)       # class -> (D, 4)
    intercept: dict[int, np.ndarray] = field(default_factory=dict)  # class -> (4,)
    ridge: float = 0.0

    def predict(self, cls: int, features) -> np.ndarray:
        if cls not in self.coef:
            f = np.asarray(features)
            return np.zeros(f.shape[:-1] + (4,))
        return np.asarray(features, dtype=np.float64) @ self.coef[cls] + self.intercept[cls]

    def save(self, path) -> None:
        path = Path(path)
        classes = {}
        for c in sorted(self.coef):
            qname = f"{path.stem}_q{c}.bin"
            write_tensor(path.parent / qname, self.coef[c], "f64")
            classes[str(c)] = {"coef": qname, "intercept": self.intercept[c].tolist()}
        path.write_text(json.dumps({"ridge": self.ridge, "classes": classes}))

    @classmethod
    def load(cls, path) -> "BoxRegressor":
        path = Path(path)
        m = json.loads(path.read_text())
        reg = cls(ridge=float(m.get("ridge", 0.0)))
        for c, e in m["classes"].items():
            reg.coef[int(c)] = read_tensor(path.parent / e["coef"])
            reg.intercept[int(c)] = np.asarray(e["intercept"], dtype=np.float64)
        return reg


def default_ridge(X: np.ndarray) -> float:
    """A deliberately large ridge constant: 1000 times the mean squared feature."""
    return 1000.0 * float(np.mean(np.asarray(X, dtype=np.float64) ** 2))


def fit_ridge(X, Y, ridge: float, prune_fraction: float = 0.2):
    """Two-stage ridge fit: solve, drop the worst ``prune_fraction`` of
    examples by squared residual, solve again.

    Returns:
        ``(coef, intercept, kept)`` with ``kept`` a boolean mask over the examples.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    coef, intercept = _ridge_fit(X, Y, ridge)
    kept = np.ones(len(X), dtype=bool)
    n_drop = int(np.floor(prune_fraction * len(X)))
    if n_drop > 0:
        resid = ((X @ coef + intercept - Y) ** 2).sum(axis=1)
        worst = np.argsort(-resid, kind="stable")[:n_drop]
        kept[worst] = False
        coef, intercept = _ridge_fit(X[kept], Y[kept], ridge)
    return coef, intercept, kept


def train_box_regressor(pairs: dict[int, tuple[np.ndarray, np.ndarray]], ridge: float | None = None,
                        prune_fraction: float = 0.2, min_pairs: int = 5) -> BoxRegressor:
    """Fit one ridge regressor per class from ``{class: (features, adjustments)}``.

    ``ridge=None`` picks :func:`default_ridge` from the pooled features.
    Classes are pruned independently.
    """
    pairs = {c: (np.asarray(X, float), np.asarray(Y, float)) for c, (X, Y) in pairs.items() if len(X)}
    if not pairs:
        raise ValueError("no regression pairs")
    if ridge is None:
        ridge = default_ridge(np.concatenate([X for X, _ in pairs.values()]))
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    reg = BoxRegressor(ridge=ridge)
    for c, (X, Y) in sorted(pairs.items()):
        if len(X) < min_pairs:
            raise ValueError(f"class {c}: {len(X)} pairs, need at least {min_pairs}")
        reg.coef[c], reg.intercept[c], _ = fit_ridge(X, Y, ridge, prune_fraction)
    return reg


def collect_regression_pairs(ann: AnnotationSet, proposals: dict[str, np.ndarray], describe: Callable,
                             min_overlap: float = 0.5) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Training pairs for the box regressor.

    For every GT box and every candidate of the same image with IoU >= ``min_overlap``
    the pair is (descriptor of the candidate, adjustment from candidate to GT),
    filed under the GT class. ``describe(image_id, boxes)`` must return an
    ``(n, D)`` descriptor array for pixel-coordinate boxes.
    """
    feats: dict[int, list] = {}
    targets: dict[int, list] = {}
    for im in ann.images:
        cand = np.asarray(proposals.get(im.id, np.empty((0, 4))), dtype=np.float64).reshape(-1, 4)
        if len(cand) == 0 or not im.objects:
            continue
        ov = iou_matrix(im.boxes(), cand)
        gi, ci = np.nonzero(ov >= min_overlap)
        if len(gi) == 0:
            continue
        used = np.unique(ci)
        desc = describe(im.id, cand[used])
        row = {c: k for k, c in enumerate(used)}
        gt = im.boxes()
        adj = compute_adjustments(cand[ci], gt[gi])
        for g, c, d in zip(gi, ci, adj):
            cls = im.objects[g].cls
            feats.setdefault(cls, []).append(desc[row[c]])
            targets.setdefault(cls, []).append(d)
    return {c: (np.array(feats[c]), np.array(targets[c])) for c in sorted(feats)}


def adjustment_for(candidate: Box, target: Box):
    """Scalar convenience wrapper around :func:`compute_adjustment`."""
    return compute_adjustment(candidate.centered(), target.centered())

