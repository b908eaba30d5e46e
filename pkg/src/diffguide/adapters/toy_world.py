"""Procedural image world: bright shapes on textured backgrounds.

Every sample carries its ground-truth foreground mask, class label, and
background kind, which is what makes desk-scale end-to-end checks of
guidance, masks, and counterfactuals possible.  Rendering is pure numpy
and deterministic given the RNG.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..conditioning import CaptionExtenderInterface

CLASS_NAMES = ("circle", "square", "triangle", "cross")
BG_NAMES = ("plain", "stripes", "bars", "checks")

_PERIOD = 4  # rows/cols per texture band


def _smooth_coverage(dist: np.ndarray) -> np.ndarray:
    # 1px soft edge: inside (dist<0) -> 1, outside -> 0
    return np.clip(0.5 - dist, 0.0, 1.0)


def _shape_distance(kind: int, dx: np.ndarray, dy: np.ndarray, r: float) -> np.ndarray:
    if kind == 0:  # circle
        return np.sqrt(dx * dx + dy * dy) - r
    if kind == 1:  # square
        return np.maximum(np.abs(dx), np.abs(dy)) - r
    if kind == 2:  # upward triangle via three half-planes
        a = np.array([0.0, -r])
        b = np.array([-r, 0.7 * r])
        c = np.array([r, 0.7 * r])
        d = None
        for p, q in ((a, b), (b, c), (c, a)):
            ex, ey = q[0] - p[0], q[1] - p[1]
            norm = np.hypot(ex, ey)
            # outward normal for counter-clockwise order
            plane = ((dx - p[0]) * ey - (dy - p[1]) * ex) / norm
            d = plane if d is None else np.maximum(d, plane)
        return d
    if kind == 3:  # cross: union of two rectangles
        wx = 0.35 * r
        h_rect = np.maximum(np.abs(dx) - r, np.abs(dy) - wx)
        v_rect = np.maximum(np.abs(dx) - wx, np.abs(dy) - r)
        return np.minimum(h_rect, v_rect)
    raise ValueError(f"unknown shape kind {kind}")


def _texture(kind: int, size: int, c1: np.ndarray, c2: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    rows = np.arange(size)
    cols = np.arange(size)
    if kind == 0:
        sel = np.zeros((size, size))
    elif kind == 1:  # horizontal stripes: bands across rows
        phase = rng.integers(0, 2 * _PERIOD)
        sel = (((rows + phase) // _PERIOD) % 2)[:, None] * np.ones((1, size))
    elif kind == 2:  # vertical bars
        phase = rng.integers(0, 2 * _PERIOD)
        sel = np.ones((size, 1)) * (((cols + phase) // _PERIOD) % 2)[None, :]
    elif kind == 3:  # checkerboard
        pr = rng.integers(0, 2 * _PERIOD)
        pc = rng.integers(0, 2 * _PERIOD)
        sel = ((((rows + pr) // _PERIOD)[:, None] + ((cols + pc) // _PERIOD)[None, :]) % 2)
    else:
        raise ValueError(f"unknown background kind {kind}")
    sel = sel[None, :, :]
    return c1[:, None, None] * (1 - sel) + c2[:, None, None] * sel


@dataclass
class ToyExample:
    image: np.ndarray  # (3, S, S) float32 in [0, 1]
    label: int
    shape_kind: int
    bg_kind: int
    mask: np.ndarray  # (S, S) float32 in [0, 1]

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.label]

    @property
    def shape_name(self) -> str:
        return CLASS_NAMES[self.shape_kind]

    @property
    def bg_name(self) -> str:
        return BG_NAMES[self.bg_kind]


class ToyWorld:
    """Sampler over the procedural image distribution.

    Modes control how label, drawn shape, and background relate:
      uniform          shape = label, background independent (generator use)
      correlated       shape = label, background matches label w.p. 0.95
      bg_randomized    shape = label, background uniform (shape-only training)
      bg_predicts_label  background always matches label, drawn shape matches
                         it only w.p. 0.8 (background-reliant training)
    """

    num_classes = len(CLASS_NAMES)
    class_names = CLASS_NAMES
    bg_names = BG_NAMES

    def __init__(self, seed: int = 0, image_size: int = 32):
        self.seed = seed
        self.image_size = image_size

    def render(self, shape_kind: int, bg_kind: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        s = self.image_size
        c1 = rng.uniform(0.05, 0.45, size=3)
        delta = rng.uniform(0.25, 0.45) * rng.choice([-1.0, 1.0])
        c2 = np.clip(c1 + delta, 0.0, 0.55)
        shape_color = rng.uniform(0.6, 1.0, size=3)
        bg = _texture(bg_kind, s, c1, c2, rng)

        cx, cy = rng.uniform(s * 0.34, s * 0.66, size=2)
        r = rng.uniform(s * 0.22, s * 0.34)
        ys, xs = np.mgrid[0:s, 0:s]
        cov = _smooth_coverage(_shape_distance(shape_kind, xs - cx, ys - cy, r))[None, :, :]
        image = bg * (1 - cov) + shape_color[:, None, None] * cov
        return image.astype(np.float32), cov[0].astype(np.float32)

    def sample(self, rng: np.random.Generator, mode: str = "uniform") -> ToyExample:
        label = int(rng.integers(0, self.num_classes))
        shape_kind = label
        if mode == "uniform":
            bg_kind = int(rng.integers(0, len(BG_NAMES)))
        elif mode == "correlated":
            bg_kind = label if rng.random() < 0.95 else int(rng.integers(0, len(BG_NAMES)))
        elif mode == "bg_randomized":
            bg_kind = int(rng.integers(0, len(BG_NAMES)))
        elif mode == "bg_predicts_label":
            bg_kind = label
            if rng.random() >= 0.8:
                shape_kind = int(rng.integers(0, self.num_classes))
        else:
            raise ValueError(f"unknown sampling mode {mode!r}")
        image, mask = self.render(shape_kind, bg_kind, rng)
        return ToyExample(image, label, shape_kind, bg_kind, mask)

    def make_dataset(self, n: int, mode: str, seed: int) -> list[ToyExample]:
        mode_tag = int.from_bytes(hashlib.blake2b(mode.encode(), digest_size=2).digest(), "big")
        rng = np.random.default_rng((self.seed, seed, mode_tag))
        return [self.sample(rng, mode) for _ in range(n)]

    def caption(self, example: ToyExample, rng: np.random.Generator | None = None) -> str:
        """Training caption; varies template so both task templates are in-domain."""
        shape = example.shape_name
        bg = example.bg_name
        templates = (
            f"a photograph of a {shape} on {bg}",
            f"an image of a {shape} on {bg}",
            f"a photograph of a {shape}",
            f"an image of a {shape}",
        )
        if rng is None:
            return templates[0]
        return templates[int(rng.choice(4, p=[0.375, 0.375, 0.125, 0.125]))]


def classify_background(image: np.ndarray) -> int:
    """Texture statistics: band energy along rows vs columns in the border region."""
    gray = image.mean(axis=0)
    s = gray.shape[0]
    m = max(2, s // 8)
    border = np.ones_like(gray, dtype=bool)
    border[m:-m, m:-m] = False
    dr = np.abs(np.diff(gray, axis=0))[border[1:, :]].mean()
    dc = np.abs(np.diff(gray, axis=1))[border[:, 1:]].mean()
    thresh = 0.02
    if dr < thresh and dc < thresh:
        return 0
    if dr >= thresh and dc < thresh:
        return 1
    if dc >= thresh and dr < thresh:
        return 2
    return 3


class EchoCaptionExtender(CaptionExtenderInterface):
    """Fallback extender: append a fixed suffix to the generic prompt."""

    def __init__(self, suffix: str = " hanging on a tree"):
        self.suffix = suffix

    def extend(self, image, generic_prompt: str) -> str:
        return generic_prompt + self.suffix


class BackgroundCaptionExtender(CaptionExtenderInterface):
    """Describe the background from image statistics, keeping the prefix intact."""

    def extend(self, image, generic_prompt: str) -> str:
        arr = image.detach().cpu().numpy() if hasattr(image, "detach") else np.asarray(image)
        bg = BG_NAMES[classify_background(arr)]
        return f"{generic_prompt} on {bg}"
