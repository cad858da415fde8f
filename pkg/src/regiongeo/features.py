"""A small convolutional feature extractor.

Images and feature fields are plain ``(H, W, C)`` float arrays. Convolution is
cross-correlation (no kernel flip) with explicit zero padding, accumulated in
float64. Weights are always supplied by the caller; nothing here is trained.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .boxes import Box, EmptyBoxError
from .receptive import LayerGeom
from .tensorio import read_tensor, write_tensor


class DimensionError(ValueError):
    """Input too small for some layer of the network."""


def as_image(image) -> np.ndarray:
    a = np.asarray(image, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise ValueError(f"image must be (H, W) or (H, W, C), got shape {a.shape}")
    return a


@dataclass
class Conv:
    weights: np.ndarray  # (size, size, in_channels, out_channels)
    bias: np.ndarray     # (C_out,)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 4 or self.weights.shape[0] != self.weights.shape[1]:
            raise ValueError(f"conv weights must be (size, size, in_channels, out_channels), got {self.weights.shape}")
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(self.weights.shape[3])

    @property
    def filter_size(self) -> int:
        return self.weights.shape[0]

    def geom(self) -> LayerGeom:
        return LayerGeom(self.filter_size, self.stride, self.padding)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        k, st, p = self.filter_size, self.stride, self.padding
        if x.shape[2] != self.weights.shape[2]:
            raise DimensionError(f"conv expects {self.weights.shape[2]} channels, got {x.shape[2]}")
        xp = np.pad(x, ((p, p), (p, p), (0, 0))) if p else x
        ho = (xp.shape[0] - k) // st + 1
        wo = (xp.shape[1] - k) // st + 1
        out = np.zeros((ho, wo, self.weights.shape[3]))
        for a in range(k):
            for b in range(k):
                patch = xp[a:a + st * (ho - 1) + 1:st, b:b + st * (wo - 1) + 1:st, :]
                out += patch @ self.weights[a, b]
        return out + self.bias


@dataclass
class ReLU:
    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.maximum(x, 0.0)


@dataclass
class MaxPool:
    filter_size: int
    stride: int = 1
    padding: int = 0

    def geom(self) -> LayerGeom:
        return LayerGeom(self.filter_size, self.stride, self.padding)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        k, st, p = self.filter_size, self.stride, self.padding
        xp = np.pad(x, ((p, p), (p, p), (0, 0)), constant_values=-np.inf) if p else x
        ho = (xp.shape[0] - k) // st + 1
        wo = (xp.shape[1] - k) // st + 1
        out = np.full((ho, wo, x.shape[2]), -np.inf)
        for a in range(k):
            for b in range(k):
                np.maximum(out, xp[a:a + st * (ho - 1) + 1:st, b:b + st * (wo - 1) + 1:st, :], out=out)
        return out


class ConvNet:
    """An ordered stack of :class:`Conv`, :class:`ReLU` and :class:`MaxPool` layers."""

    def __init__(self, layers: Sequence):
        if not layers:
            raise ValueError("network needs at least one layer")
        self.layers = list(layers)

    @property
    def in_channels(self) -> int | None:
        for layer in self.layers:
            if isinstance(layer, Conv):
                return layer.weights.shape[2]
        return None

    @property
    def out_channels(self) -> int | None:
        for layer in reversed(self.layers):
            if isinstance(layer, Conv):
                return layer.weights.shape[3]
        return None

    def architecture(self) -> list[LayerGeom]:
        return [layer.geom() for layer in self.layers if isinstance(layer, (Conv, MaxPool))]

    def output_shape(self, height: int, width: int) -> tuple[int, int]:
        for k, layer in enumerate(self.layers):
            if isinstance(layer, (Conv, MaxPool)):
                g = layer.geom()
                height, width = g.output_size(height), g.output_size(width)
                if height < 1 or width < 1:
                    raise DimensionError(
                        f"layer {k} ({type(layer).__name__} filter_size={g.filter_size} stride={g.stride} padding={g.padding}) "
                        f"produces an empty output")
        return height, width

    def forward(self, image) -> np.ndarray:
        x = as_image(image)
        self.output_shape(x.shape[0], x.shape[1])
        for layer in self.layers:
            x = layer(x)
        return x

    __call__ = forward

    def save(self, path) -> None:
        """Write a JSON manifest plus one tensor file per weight array next to it."""
        path = Path(path)
        stem = path.stem
        entries = []
        for k, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                wname, bname = f"{stem}_l{k}_w.bin", f"{stem}_l{k}_b.bin"
                write_tensor(path.parent / wname, layer.weights, "f64")
                write_tensor(path.parent / bname, layer.bias, "f64")
                entries.append({"type": "conv", "F": layer.filter_size, "S": layer.stride, "P": layer.padding,
                                "weights": wname, "bias": bname})
            elif isinstance(layer, MaxPool):
                entries.append({"type": "maxpool", "F": layer.filter_size, "S": layer.stride, "P": layer.padding})
            else:
                entries.append({"type": "relu"})
        path.write_text(json.dumps({"layers": entries}, indent=1))

    @classmethod
    def load(cls, path) -> "ConvNet":
        path = Path(path)
        manifest = json.loads(path.read_text())
        layers = []
        for e in manifest["layers"]:
            kind = e["type"]
            if kind == "conv":
                w = read_tensor(path.parent / e["weights"])
                b = read_tensor(path.parent / e["bias"])
                if w.shape[0] != e.get("F", w.shape[0]):
                    raise ValueError(f"manifest filter size {e['F']} disagrees with weights {w.shape}")
                layers.append(Conv(w, b, stride=e.get("S", 1), padding=e.get("P", 0)))
            elif kind == "maxpool":
                layers.append(MaxPool(e["F"], e.get("S", 1), e.get("P", 0)))
            elif kind == "relu":
                layers.append(ReLU())
            else:
                raise ValueError(f"unknown layer type {kind!r}")
        return cls(layers)


def forward(net: ConvNet, image) -> np.ndarray:
    return net.forward(image)


def probe_net(arch: Sequence[LayerGeom], channels: int = 1) -> ConvNet:
    """Linear all-ones network with the given geometry, for receptive-field probing."""
    layers = []
    c_in = channels
    for g in arch:
        layers.append(Conv(np.ones((g.filter_size, g.filter_size, c_in, 1)), np.zeros(1), stride=g.stride, padding=g.padding))
        c_in = 1
    return ConvNet(layers)


def _sample_axis(n_out: int, start: float, length: float, lo: int, hi: int):
    # half-pixel aligned source positions, clamped to pixel index range [lo, hi]
    src = start + (np.arange(n_out) + 0.5) * (length / n_out) - 0.5
    src = np.clip(src, lo, hi)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, hi)
    frac = src - i0
    return i0, i1, frac


def _bilinear(image: np.ndarray, rows, cols) -> np.ndarray:
    r0, r1, fr = rows
    c0, c1, fc = cols
    top = image[r0][:, c0] * (1 - fc)[None, :, None] + image[r0][:, c1] * fc[None, :, None]
    bot = image[r1][:, c0] * (1 - fc)[None, :, None] + image[r1][:, c1] * fc[None, :, None]
    return top * (1 - fr)[:, None, None] + bot * fr[:, None, None]


def resize_image(image, target_height: int, target_width: int) -> np.ndarray:
    """Bilinear resize with half-pixel centre alignment."""
    img = as_image(image)
    if target_height < 1 or target_width < 1:
        raise ValueError("target size must be at least 1x1")
    H, W = img.shape[:2]
    if (H, W) == (target_height, target_width):
        return img.copy()
    rows = _sample_axis(target_height, 0.0, H, 0, H - 1)
    cols = _sample_axis(target_width, 0.0, W, 0, W - 1)
    return _bilinear(img, rows, cols)


def crop_resize(image, region: Box, target_height: int, target_width: int) -> np.ndarray:
    """Crop ``region`` (continuous coordinates) and resize it bilinearly.

    For integer-aligned regions this equals cropping the pixel block and then
    calling :func:`resize_image` on it.
    """
    img = as_image(image)
    H, W = img.shape[:2]
    r_lo, r_hi = max(0, math.floor(region.r_s)), min(H, math.ceil(region.r_e)) - 1
    c_lo, c_hi = max(0, math.floor(region.c_s)), min(W, math.ceil(region.c_e)) - 1
    if r_hi < r_lo or c_hi < c_lo:
        raise EmptyBoxError(f"region {region.to_list()} has no pixels in a {H}x{W} image")
    rows = _sample_axis(target_height, region.r_s, region.height, r_lo, r_hi)
    cols = _sample_axis(target_width, region.c_s, region.width, c_lo, c_hi)
    return _bilinear(img, rows, cols)


def crop_region_forward(net: ConvNet, image, region: Box, canonical_size: int) -> np.ndarray:
    """Per-region feature path: crop, warp to ``canonical_size`` squared, run the net."""
    return net.forward(crop_resize(image, region, canonical_size, canonical_size))


def scaled_size(height: int, width: int, scale: float) -> tuple[int, int]:
    # round half up, not Python's banker's rounding
    return max(1, math.floor(scale * height + 0.5)), max(1, math.floor(scale * width + 0.5))


def multi_scale_forward(net: ConvNet, image, scales: Sequence[float]) -> list[tuple[float, np.ndarray]]:
    img = as_image(image)
    H, W = img.shape[:2]
    out = []
    for s in scales:
        if not s > 0:
            raise ValueError(f"scale must be positive, got {s}")
        th, tw = scaled_size(H, W, s)
        try:
            out.append((s, net.forward(resize_image(img, th, tw))))
        except DimensionError as exc:
            raise DimensionError(f"scale {s}: {exc}") from exc
    return out
