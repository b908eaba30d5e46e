"""Cross-attention capture, prompt-to-prompt injection, and foreground masks.

Attention layers hand every post-softmax map to an ``XAControl`` during a
denoise run.  In capture mode the maps are recorded and returned untouched,
so the sampled latent is bitwise unchanged.  In inject mode the stored maps
replace the fresh ones for a leading fraction of the denoising steps, which
pins the spatial layout of the source run onto the new conditioning.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image


class AttentionError(RuntimeError):
    pass


ROW_SUM_TOL = 1e-5


@dataclass
class XAMapSet:
    """Captured attention maps indexed by (timestep, layer).

    Each entry is a (heads, positions, tokens) tensor of post-softmax
    weights; ``resolutions`` records the spatial (h, w) of every layer.
    """

    maps: dict[int, dict[str, torch.Tensor]] = field(default_factory=dict)
    resolutions: dict[str, tuple[int, int]] = field(default_factory=dict)
    num_steps: int = 0

    def store(self, t: int, layer: str, hw: tuple[int, int], m: torch.Tensor) -> None:
        self.maps.setdefault(t, {})[layer] = m
        self.resolutions[layer] = hw

    def get(self, t: int, layer: str) -> torch.Tensor:
        try:
            return self.maps[t][layer]
        except KeyError:
            raise AttentionError(f"no stored attention map for (t={t}, layer={layer!r})")

    def check_row_stochastic(self, tol: float = ROW_SUM_TOL) -> None:
        for t, layers in self.maps.items():
            for layer, m in layers.items():
                sums = m.sum(dim=-1)
                if not bool(((sums - 1.0).abs() <= tol).all()):
                    raise AttentionError(f"rows of map (t={t}, {layer}) do not sum to 1")
                if bool((m < 0).any()) or bool((m > 1 + tol).any()):
                    raise AttentionError(f"map (t={t}, {layer}) has entries outside [0, 1]")


@dataclass
class ForegroundMask:
    """Soft object masks at latent and pixel resolution, max-normalized to 1."""

    s_vae: torch.Tensor
    s_px: torch.Tensor


class _CaptureControl:
    def __init__(self, store: XAMapSet, t: int):
        self.store = store
        self.t = t

    def process(self, layer: str, hw: tuple[int, int], m: torch.Tensor) -> torch.Tensor:
        self.store.store(self.t, layer, hw, m.detach().clone())
        return m


class _InjectControl:
    def __init__(self, hooks: "AttentionHooks", t: int):
        self.hooks = hooks
        self.t = t

    def process(self, layer: str, hw: tuple[int, int], m: torch.Tensor) -> torch.Tensor:
        stored = self.hooks.store.get(self.t, layer).to(m.dtype)
        if self.hooks.token_alignment is not None:
            A = self.hooks.token_alignment.to(m.dtype)
            stored = stored @ A.T
            stored = stored / stored.sum(dim=-1, keepdim=True).clamp_min(1e-12)
        if stored.shape != m.shape:
            raise AttentionError(
                f"stored map {tuple(stored.shape)} incompatible with live map "
                f"{tuple(m.shape)} at (t={self.t}, layer={layer!r})"
            )
        return stored


@dataclass
class AttentionHooks:
    """Per-run attention behavior handed to ``denoise_loop``.

    capture: record every conditional-branch map into ``store``.
    inject: replace maps with ``store``'s for the first ``inject_fraction``
    of the steps, resized over the token axis by ``token_alignment`` when
    the two prompts tokenize differently.
    """

    mode: str
    store: XAMapSet
    inject_fraction: float = 0.8
    token_alignment: Optional[torch.Tensor] = None
    _num_inject: int = field(default=0, repr=False)
    _T: int = field(default=0, repr=False)

    def __post_init__(self):
        if self.mode not in ("capture", "inject"):
            raise AttentionError(f"unknown hook mode {self.mode!r}")
        if not 0.0 <= self.inject_fraction <= 1.0:
            raise AttentionError("inject_fraction must lie in [0, 1]")

    def bind(self, T: int) -> None:
        self._T = T
        self._num_inject = int(self.inject_fraction * T + 0.5)
        if self.mode == "capture":
            self.store.num_steps = T

    def for_call(self, t: int):
        if self.mode == "capture":
            return _CaptureControl(self.store, t)
        # loop runs t = T..1; the first n steps are t > T - n
        if t > self._T - self._num_inject:
            return _InjectControl(self, t)
        return None


def capture_hooks() -> AttentionHooks:
    return AttentionHooks(mode="capture", store=XAMapSet())


def inject_hooks(
    store: XAMapSet,
    inject_fraction: float = 0.8,
    token_alignment: Optional[torch.Tensor] = None,
) -> AttentionHooks:
    return AttentionHooks(
        mode="inject",
        store=store,
        inject_fraction=inject_fraction,
        token_alignment=token_alignment,
    )


def _pick_mask_layer(xaset: XAMapSet, min_size: int) -> str:
    candidates = [
        (min(hw), layer) for layer, hw in xaset.resolutions.items() if min(hw) >= min_size
    ]
    if not candidates:
        raise AttentionError(
            f"no attention layer with spatial size >= {min_size}; have "
            f"{sorted(xaset.resolutions.values())}"
        )
    return min(candidates)[1]


def foreground_mask(
    xaset: XAMapSet,
    class_token_indices: list[int],
    latent_shape: tuple[int, ...],
    pixel_shape: tuple[int, ...],
    min_resolution: int = 8,
) -> ForegroundMask:
    """Average class-token attention into a soft object mask.

    Maps from the first half of the denoising steps (the high-noise end,
    where layout is decided) are averaged over heads and the listed token
    columns at the coarsest resolution of at least ``min_resolution``, then
    max-normalized and resized to latent and pixel geometry.
    """
    if not class_token_indices:
        raise AttentionError("need at least one class token index")
    if not xaset.maps:
        raise AttentionError("attention map set is empty")
    layer = _pick_mask_layer(xaset, min_resolution)
    T = xaset.num_steps or max(xaset.maps)
    steps = [t for t in xaset.maps if t > T / 2]
    if not steps:
        raise AttentionError("no maps in the first half of the denoise run")
    h, w = xaset.resolutions[layer]
    acc = torch.zeros(h * w, dtype=torch.float32)
    for t in steps:
        m = xaset.get(t, layer)  # (heads, positions, tokens)
        acc = acc + m[:, :, class_token_indices].mean(dim=(0, 2))
    base = (acc / len(steps)).reshape(1, 1, h, w)
    if float(base.max()) <= 0.0:
        raise AttentionError("class-token attention is all zero; cannot normalize mask")

    def resize(shape_hw: tuple[int, int]) -> torch.Tensor:
        out = F.interpolate(base, size=shape_hw, mode="bilinear", align_corners=False)[0, 0]
        return out / out.max()

    return ForegroundMask(s_vae=resize(latent_shape[-2:]), s_px=resize(pixel_shape[-2:]))


def save_mask_png(mask: torch.Tensor, path) -> None:
    """Write a [0, 1] mask as an 8-bit grayscale image."""
    arr = (mask.detach().clamp(0, 1).numpy() * 255.0).round().astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)
