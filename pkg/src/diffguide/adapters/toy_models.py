"""Small trainable backends: a cross-attention U-Net, an identity codec,
and a convnet classifier with one hand-wired texture neuron.

The U-Net conditions on the continuous signal level rather than a step
index, so one trained model serves schedules of any length.
"""

from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..attention import AttentionError
from ..conditioning import ConditioningMatrix
from ..diffusion import DenoiserInterface, Latent, NoiseSchedule
from .base import ClassifierInterface, VAEInterface


def _gn(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch // 4), ch)


class SignalLevelEmbed(nn.Module):
    """Sinusoidal features of the log signal-to-noise ratio."""

    def __init__(self, dim: int = 64, bands: int = 16):
        super().__init__()
        self.register_buffer("freqs", torch.exp(torch.linspace(0.0, 3.0, bands)))
        self.proj = nn.Sequential(nn.Linear(2 * bands, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, alpha: torch.Tensor) -> torch.Tensor:
        alpha = alpha.clamp(1e-6, 1 - 1e-6)
        u = torch.log(alpha / (1 - alpha)) / 4.0
        ang = u[:, None] * self.freqs[None, :]
        return self.proj(torch.cat([torch.sin(ang), torch.cos(ang)], dim=1))


class ResBlock(nn.Module):
    def __init__(self, ch_in: int, ch_out: int, emb_dim: int):
        super().__init__()
        self.norm1 = _gn(ch_in)
        self.conv1 = nn.Conv2d(ch_in, ch_out, 3, padding=1)
        self.emb = nn.Linear(emb_dim, ch_out)
        self.norm2 = _gn(ch_out)
        self.conv2 = nn.Conv2d(ch_out, ch_out, 3, padding=1)
        self.skip = nn.Conv2d(ch_in, ch_out, 1) if ch_in != ch_out else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttentionBlock(nn.Module):
    """Multi-head attention from spatial features onto prompt tokens.

    The post-softmax map is routed through ``xa_control`` (single-sample
    runs only) so callers can record it or swap it for a stored one.
    """

    def __init__(self, ch: int, cond_dim: int, heads: int, name: str):
        super().__init__()
        self.name = name
        self.heads = heads
        self.dim_head = ch // heads
        self.norm = _gn(ch)
        self.to_q = nn.Linear(ch, ch, bias=False)
        self.to_k = nn.Linear(cond_dim, ch, bias=False)
        self.to_v = nn.Linear(cond_dim, ch, bias=False)
        self.to_out = nn.Linear(ch, ch)

    def forward(self, x, cond, xa_control=None, attn_sink: Optional[list] = None):
        b, c, h, w = x.shape
        res = x
        q = self.to_q(self.norm(x).flatten(2).transpose(1, 2))
        k = self.to_k(cond)
        v = self.to_v(cond)

        def split(t):
            return t.reshape(b, -1, self.heads, self.dim_head).transpose(1, 2)

        q, k, v = split(q), split(k), split(v)
        sim = q @ k.transpose(-1, -2) / math.sqrt(self.dim_head)
        maps = sim.softmax(dim=-1)  # (b, heads, h*w, tokens)
        if xa_control is not None:
            if b != 1:
                raise AttentionError("attention control only supports single-sample runs")
            maps = xa_control.process(self.name, (h, w), maps[0]).unsqueeze(0)
        if attn_sink is not None:
            attn_sink.append((self.name, (h, w), maps))
        out = (maps @ v).transpose(1, 2).reshape(b, h * w, c)
        out = self.to_out(out).transpose(1, 2).reshape(b, c, h, w)
        return res + out


class ToyUNet(nn.Module):
    """3-level U-Net on 32x32 inputs with cross-attention at 16x16 and 8x8."""

    def __init__(self, in_ch: int = 3, cond_dim: int = 48, widths=(32, 48, 64), heads: int = 2):
        super().__init__()
        c0, c1, c2 = widths
        emb = 64
        self.embed = SignalLevelEmbed(emb)
        self.conv_in = nn.Conv2d(in_ch, c0, 3, padding=1)
        self.rb0 = ResBlock(c0, c0, emb)
        self.down1 = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
        self.rb1 = ResBlock(c1, c1, emb)
        self.xa16 = CrossAttentionBlock(c1, cond_dim, heads, "xa16")
        self.down2 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.rb_mid1 = ResBlock(c2, c2, emb)
        self.xa8 = CrossAttentionBlock(c2, cond_dim, heads, "xa8")
        self.rb_mid2 = ResBlock(c2, c2, emb)
        self.up1 = nn.Conv2d(c2, c1, 3, padding=1)
        self.fuse1 = ResBlock(2 * c1, c1, emb)
        self.up0 = nn.Conv2d(c1, c0, 3, padding=1)
        self.fuse0 = ResBlock(2 * c0, c0, emb)
        self.out_norm = _gn(c0)
        self.conv_out = nn.Conv2d(c0, in_ch, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, z, alpha, cond, xa_control=None, attn_sink=None):
        emb = self.embed(alpha)
        h0 = self.rb0(self.conv_in(z), emb)
        h1 = self.rb1(self.down1(h0), emb)
        h1 = self.xa16(h1, cond, xa_control, attn_sink)
        h2 = self.rb_mid1(self.down2(h1), emb)
        h2 = self.xa8(h2, cond, xa_control, attn_sink)
        h2 = self.rb_mid2(h2, emb)
        u1 = self.up1(F.interpolate(h2, scale_factor=2, mode="nearest"))
        u1 = self.fuse1(torch.cat([u1, h1], dim=1), emb)
        u0 = self.up0(F.interpolate(u1, scale_factor=2, mode="nearest"))
        u0 = self.fuse0(torch.cat([u0, h0], dim=1), emb)
        return self.conv_out(F.silu(self.out_norm(u0)))


class ToyDenoiser(DenoiserInterface):
    """Schedule-bound wrapper exposing the noise-prediction interface."""

    has_cross_attention = True
    reentrant = True

    def __init__(self, net: ToyUNet, schedule: NoiseSchedule, latent_shape=(3, 32, 32)):
        self.net = net.eval()
        self.net.requires_grad_(False)  # frozen backbone; gradients flow to inputs only
        self.schedule = schedule
        self.latent_shape = tuple(latent_shape)

    def with_schedule(self, schedule: NoiseSchedule) -> "ToyDenoiser":
        return ToyDenoiser(self.net, schedule, self.latent_shape)

    def epsilon(self, z: Latent, t: int, cond: ConditioningMatrix, xa_control=None) -> torch.Tensor:
        alpha = torch.tensor([self.schedule.alpha(t)], dtype=z.values.dtype)
        out = self.net(
            z.values.unsqueeze(0), alpha, cond.values.unsqueeze(0), xa_control=xa_control
        )
        return out[0]


class ToyIdentityVAE(VAEInterface):
    """Latent space = affinely rescaled pixel space; exact round trip."""

    reconstruction_tolerance = 0.0
    reentrant = True

    def __init__(self, image_shape=(3, 32, 32)):
        self.image_shape = tuple(image_shape)
        self.latent_shape = tuple(image_shape)

    def encode(self, image: torch.Tensor) -> Latent:
        return Latent(2.0 * image - 1.0, 0)

    def decode(self, z: Latent) -> torch.Tensor:
        return (z.values + 1.0) / 2.0


def planted_band_activation(images: torch.Tensor, scale: float = 100.0) -> torch.Tensor:
    """Fixed texture detector: horizontal-band energy minus vertical-band energy.

    Responds strongly to row-striped backgrounds, stays near zero for plain,
    checkered, and column-striped ones.  Differentiable in the input.
    """
    gray = images.mean(dim=1)
    d_rows = (gray[:, 1:, :] - gray[:, :-1, :]).pow(2).mean(dim=(1, 2))
    d_cols = (gray[:, :, 1:] - gray[:, :, :-1]).pow(2).mean(dim=(1, 2))
    return F.relu(scale * (d_rows - d_cols))


class ToyClassifierNet(nn.Module):
    def __init__(self, num_classes: int = 4, width: int = 48):
        super().__init__()
        self.features_net = nn.Sequential(
            nn.Conv2d(3, width // 2, 3, padding=1),
            _gn(width // 2),
            nn.SiLU(),
            nn.Conv2d(width // 2, width, 3, stride=2, padding=1),
            _gn(width),
            nn.SiLU(),
            nn.Conv2d(width, width, 3, stride=2, padding=1),
            _gn(width),
            nn.SiLU(),
            nn.Conv2d(width, width, 3, padding=1),
            _gn(width),
            nn.SiLU(),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )
        self.head = nn.Linear(width + 1, num_classes)
        self.feature_dim = width + 1

    def features(self, x: torch.Tensor) -> torch.Tensor:
        learned = self.features_net(x)
        planted = planted_band_activation(x)[:, None]
        return torch.cat([learned, planted], dim=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


class ToyClassifier(ClassifierInterface):
    """Eval-mode wrapper satisfying the classifier contract.

    The final feature is the planted band detector; its index is exposed
    for neuron-level experiments.
    """

    input_resolution = 32
    reentrant = True

    def __init__(self, net: ToyClassifierNet, num_classes: int = 4):
        self.net = net.eval()
        self.net.requires_grad_(False)
        self.num_classes = num_classes
        self.feature_dim = net.feature_dim
        self.planted_index = net.feature_dim - 1

    def probs(self, images: torch.Tensor) -> torch.Tensor:
        return self.net(images).softmax(dim=1)

    def features(self, images: torch.Tensor) -> torch.Tensor:
        return self.net.features(images)
