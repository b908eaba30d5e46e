"""Task losses evaluated on decoded images, with test-time augmentation.

Every loss is a scalar to *minimize*; quantities the tasks maximize enter
negated.  Classifier terms are averaged over a batch of augmented views
(random crops plus Gaussian noise), which smooths the gradients toward
the object instead of adversarial high-frequency noise.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Optional

import torch
import torch.nn.functional as F

from .attention import ForegroundMask
from .diffusion import Latent


@dataclass
class AugmentationConfig:
    num_cutouts: int = 16
    noise_sigma: float = 0.005
    cutout_size_range: tuple[float, float] = (0.7, 1.0)

    def __post_init__(self):
        if self.num_cutouts < 1:
            raise ValueError("need at least one view")
        lo, hi = self.cutout_size_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError("cutout size range must satisfy 0 < lo <= hi <= 1")


@dataclass
class DistanceWeights:
    w_vae: float = 25.0
    w_px: float = 250.0

    def __post_init__(self):
        if self.w_vae < 0 or self.w_px < 0:
            raise ValueError("distance weights must be non-negative")
        if self.w_vae == 0 and self.w_px == 0:
            raise ValueError("at least one distance weight must be positive")


@dataclass
class EvalContext:
    """Per-evaluation state: the RNG for view sampling plus reported metrics."""

    rng: torch.Generator
    metrics: dict = field(default_factory=dict)


class GuidanceObjective(ABC):
    requires_mask: bool = False

    @abstractmethod
    def evaluate(self, decoded_image: torch.Tensor, z0: Latent, ctx: EvalContext) -> torch.Tensor:
        """Scalar loss; must be finite for finite inputs and deterministic
        given the context RNG."""


def augment_views(
    image: torch.Tensor,
    cfg: AugmentationConfig,
    rng: torch.Generator,
    out_size: int,
) -> torch.Tensor:
    """Random square crops resized to the classifier input, plus pixel noise."""
    c, h, w = image.shape
    lo, hi = cfg.cutout_size_range
    side_min = min(h, w)
    views = []
    for _ in range(cfg.num_cutouts):
        for _attempt in range(8):
            frac = lo + (hi - lo) * torch.rand((), generator=rng).item()
            s = int(round(frac * side_min))
            if s >= 1:
                break
        else:
            s = side_min
        top = int(torch.randint(0, h - s + 1, (), generator=rng))
        left = int(torch.randint(0, w - s + 1, (), generator=rng))
        crop = image[:, top : top + s, left : left + s].unsqueeze(0)
        if s != out_size:
            crop = F.interpolate(crop, size=(out_size, out_size), mode="bilinear", align_corners=False)
        views.append(crop[0])
    batch = torch.stack(views)
    if cfg.noise_sigma > 0:
        batch = batch + cfg.noise_sigma * torch.randn(batch.shape, generator=rng)
    return batch


def disagreement_loss(
    f,
    g,
    y: int,
    image: torch.Tensor,
    aug: AugmentationConfig,
    rng: torch.Generator,
) -> tuple[torch.Tensor, dict]:
    """Negated confidence gap -(p_f(y) - p_g(y)), averaged over views."""
    if not 0 <= y < min(f.num_classes, g.num_classes):
        raise ValueError(f"class index {y} out of range")
    views = augment_views(image, aug, rng, f.input_resolution)
    views_g = views
    if g.input_resolution != f.input_resolution:
        views_g = F.interpolate(views, size=(g.input_resolution,) * 2, mode="bilinear", align_corners=False)
    p_f = f.probs(views)[:, y].mean()
    p_g = g.probs(views_g)[:, y].mean()
    return -(p_f - p_g), {"p_f": p_f.item(), "p_g": p_g.item(), "gap": (p_f - p_g).item()}


def neuron_loss(
    feature_fn: Callable[[torch.Tensor], torch.Tensor],
    n: int,
    sign: str,
    image: torch.Tensor,
    aug: AugmentationConfig,
    rng: torch.Generator,
    input_resolution: int,
) -> tuple[torch.Tensor, dict]:
    """Mean activation of one penultimate neuron, negated when maximizing."""
    if sign not in ("maximize", "minimize"):
        raise ValueError(f"sign must be maximize or minimize, got {sign!r}")
    views = augment_views(image, aug, rng, input_resolution)
    feats = feature_fn(views)
    if not 0 <= n < feats.shape[1]:
        raise ValueError(f"neuron index {n} out of range for width {feats.shape[1]}")
    act = feats[:, n].mean()
    loss = -act if sign == "maximize" else act
    return loss, {"activation": act.item()}


def masked_distance(
    z0: Latent,
    x_hat: torch.Tensor,
    z_hat: Latent,
    mask: ForegroundMask,
    wts: DistanceWeights,
    decoder=None,
    decoded: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Background-only squared distances in latent and pixel space.

    d = w_vae ||(1 - S_vae) (z0 - z_hat)||^2 + w_px ||(1 - S_px) (D(z0) - x_hat)||^2
    """
    if decoded is None:
        if decoder is None:
            raise ValueError("need either the decoded image or a decoder")
        decoded = decoder.decode(z0)
    if mask.s_vae.shape != z0.values.shape[-2:]:
        raise ValueError(
            f"latent mask {tuple(mask.s_vae.shape)} does not match latent {tuple(z0.values.shape)}"
        )
    if mask.s_px.shape != x_hat.shape[-2:]:
        raise ValueError(
            f"pixel mask {tuple(mask.s_px.shape)} does not match image {tuple(x_hat.shape)}"
        )
    d_vae = ((1.0 - mask.s_vae) * (z0.values - z_hat.values)).pow(2).sum()
    d_px = ((1.0 - mask.s_px) * (decoded - x_hat)).pow(2).sum()
    return wts.w_vae * d_vae + wts.w_px * d_px


def vce_loss(
    f,
    y: int,
    z0: Latent,
    decoded: torch.Tensor,
    x_hat: torch.Tensor,
    z_hat: Latent,
    mask: ForegroundMask,
    wts: DistanceWeights,
    aug: AugmentationConfig,
    rng: torch.Generator,
    log_floor: float = -30.0,
) -> tuple[torch.Tensor, dict]:
    """Counterfactual loss: background distance minus target log-confidence."""
    d = masked_distance(z0, x_hat, z_hat, mask, wts, decoded=decoded)
    views = augment_views(decoded, aug, rng, f.input_resolution)
    p = f.probs(views)[:, y]
    clamped = int((p <= math.exp(log_floor)).sum())
    log_p = torch.log(p).clamp_min(log_floor).mean()
    loss = d - log_p
    return loss, {
        "distance": d.item(),
        "log_p": log_p.item(),
        "p_target": p.mean().item(),
        "log_clamped_views": clamped,
    }


def zero_shot_binary_logprob(
    text_feats_src: torch.Tensor,
    text_feats_tgt: torch.Tensor,
    image_feats: torch.Tensor,
) -> torch.Tensor:
    """Log-probability of the target attribute under a two-prompt softmax."""
    if not (text_feats_src.shape == text_feats_tgt.shape == image_feats.shape):
        raise ValueError(
            f"feature dimensions disagree: {tuple(text_feats_src.shape)} / "
            f"{tuple(text_feats_tgt.shape)} / {tuple(image_feats.shape)}"
        )
    logit_tgt = (text_feats_tgt * image_feats).sum()
    logit_src = (text_feats_src * image_feats).sum()
    return logit_tgt - torch.logsumexp(torch.stack([logit_tgt, logit_src]), dim=0)


class DisagreementObjective(GuidanceObjective):
    def __init__(self, f, g, y: int, aug: AugmentationConfig):
        self.f, self.g, self.y, self.aug = f, g, y, aug

    def evaluate(self, decoded_image, z0, ctx):
        loss, metrics = disagreement_loss(self.f, self.g, self.y, decoded_image, self.aug, ctx.rng)
        ctx.metrics.update(metrics)
        return loss


class NeuronObjective(GuidanceObjective):
    def __init__(self, classifier, n: int, sign: str, aug: AugmentationConfig,
                 tracked_class: Optional[int] = None):
        self.classifier, self.n, self.sign, self.aug = classifier, n, sign, aug
        self.tracked_class = tracked_class

    def evaluate(self, decoded_image, z0, ctx):
        loss, metrics = neuron_loss(
            self.classifier.features, self.n, self.sign, decoded_image, self.aug, ctx.rng,
            self.classifier.input_resolution,
        )
        if self.tracked_class is not None:
            with torch.no_grad():
                p = self.classifier.probs(decoded_image.unsqueeze(0))[0, self.tracked_class]
            metrics["tracked_class_prob"] = p.item()
        ctx.metrics.update(metrics)
        return loss


class VCEObjective(GuidanceObjective):
    requires_mask = True

    def __init__(self, f, y: int, x_hat: torch.Tensor, z_hat: Latent,
                 mask: ForegroundMask, wts: DistanceWeights, aug: AugmentationConfig):
        self.f, self.y = f, y
        self.x_hat, self.z_hat = x_hat, z_hat
        self.mask, self.wts, self.aug = mask, wts, aug
        self.clamp_warnings = 0

    def evaluate(self, decoded_image, z0, ctx):
        loss, metrics = vce_loss(
            self.f, self.y, z0, decoded_image, self.x_hat, self.z_hat,
            self.mask, self.wts, self.aug, ctx.rng,
        )
        self.clamp_warnings += metrics["log_clamped_views"]
        ctx.metrics.update(metrics)
        return loss
