"""Training and caching for the desk-scale backends.

Trained weights are cached on disk under a content hash of everything that
influences them (world seed, architecture, optimization settings), so test
suites and CLI runs pay the training cost once.
"""

from __future__ import annotations

import hashlib
import math
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from ..diffusion import NoiseSchedule, make_schedule
from .toy_models import (
    ToyClassifier,
    ToyClassifierNet,
    ToyDenoiser,
    ToyIdentityVAE,
    ToyUNet,
)
from .toy_text import ToyTextEncoder
from .toy_world import ToyWorld

_ARCH_VERSION = 5  # bump to invalidate caches when architectures change


class TrainingError(RuntimeError):
    pass


def cache_dir() -> Path:
    d = Path(os.environ.get("DIFFGUIDE_CACHE", ".diffguide_cache"))
    d.mkdir(parents=True, exist_ok=True)
    return d


def _cache_key(kind: str, params: dict) -> Path:
    blob = json.dumps({"kind": kind, "arch": _ARCH_VERSION, **params}, sort_keys=True)
    digest = hashlib.blake2b(blob.encode(), digest_size=8).hexdigest()
    return cache_dir() / f"{kind}_{digest}.pt"


def _interp_alpha(u: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Continuous signal level over progress u in [0, 1] via the schedule grid."""
    grid = np.linspace(0.0, 1.0, sched.T + 1)
    vals = np.concatenate([[1.0], sched.alphas])
    return np.interp(u, grid, vals)


def _encode_captions(encoder: ToyTextEncoder, captions: list[str], cache: dict) -> torch.Tensor:
    rows = []
    for c in captions:
        if c not in cache:
            cache[c] = encoder.encode(c)
        rows.append(cache[c].values)
    return torch.stack(rows)


def _shape_token_columns(encoder: ToyTextEncoder, caption: str, cache: dict) -> Optional[tuple[int, int]]:
    """Token range of the shape word (always the 5th word of full captions)."""
    if not caption:
        return None
    if caption not in cache:
        cache[caption] = encoder.encode(caption)
    words = caption.split()
    # templates place the shape name right after "... of a"
    try:
        idx = words.index("a", 2) + 1
    except ValueError:
        return None
    return cache[caption].token_spans.get(idx)


def train_toy_denoiser(
    world: ToyWorld,
    sched: NoiseSchedule,
    epochs: int = 12,
    seed: int = 0,
    n_train: int = 3500,
    n_val: int = 300,
    batch_size: int = 64,
    lr: float = 2e-3,
    caption_dropout: float = 0.1,
    attn_localization_weight: float = 0.1,
    foreground_weight: float = 4.0,
    high_noise_bias: float = 0.7,
    val_loss_max: float = 0.5,
    encoder: Optional[ToyTextEncoder] = None,
    use_cache: bool = True,
    verbose: bool = False,
) -> ToyDenoiser:
    """Fit the conditional noise predictor on procedural images.

    The loss is a weighted squared error between predicted and true noise at
    a sampled signal level, with caption dropout training the unconditional
    branch.  Object pixels get extra weight and sampling leans toward high
    noise: both make the caption genuinely useful for the prediction, which
    is what keeps the cross-attention pathway alive on images this simple.
    A small auxiliary term discourages the shape tokens from attending
    outside the object, keeping attention-derived masks usable.
    """
    encoder = encoder or ToyTextEncoder(seed=seed)
    params = dict(
        world_seed=world.seed,
        image_size=world.image_size,
        sched_kind=sched.kind,
        sched_T=sched.T,
        epochs=epochs,
        seed=seed,
        n_train=n_train,
        batch_size=batch_size,
        lr=lr,
        caption_dropout=caption_dropout,
        attn_w=attn_localization_weight,
        fg_w=foreground_weight,
        noise_bias=high_noise_bias,
        enc_seed=encoder.seed,
    )
    path = _cache_key("toy_denoiser", params)
    vae = ToyIdentityVAE((3, world.image_size, world.image_size))

    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = ToyUNet(cond_dim=encoder.feature_dim)
    if use_cache and path.exists():
        payload = torch.load(path, weights_only=True)
        net.load_state_dict(payload["state_dict"])
        return ToyDenoiser(net, sched, vae.latent_shape)

    rng = np.random.default_rng((world.seed, seed, 77))
    gen = torch.Generator().manual_seed(seed + 1013)
    train = world.make_dataset(n_train, "uniform", seed=seed)
    val = world.make_dataset(n_val, "uniform", seed=seed + 1)
    enc_cache: dict = {}

    def batch_tensors(examples, with_aux: bool):
        imgs = torch.from_numpy(np.stack([e.image for e in examples]))
        z0 = vae.encode(imgs).values
        caps = []
        for e in examples:
            if rng.random() < caption_dropout:
                caps.append("")
            else:
                caps.append(world.caption(e, rng))
        cond = _encode_captions(encoder, caps, enc_cache)
        u = rng.uniform(0.0, 1.0, size=len(examples)) ** high_noise_bias
        alphas = torch.from_numpy(_interp_alpha(u, sched)).float()
        eps = torch.randn(z0.shape, generator=gen)
        zt = alphas[:, None, None, None].sqrt() * z0 + (1 - alphas[:, None, None, None]).sqrt() * eps
        masks = torch.from_numpy(np.stack([e.mask for e in examples]))[:, None]
        aux = None
        if with_aux:
            spans = [_shape_token_columns(encoder, c, enc_cache) for c in caps]
            aux = (spans, masks)
        return zt, alphas, cond, eps, masks, aux

    def weighted_mse(pred, eps, masks):
        w = 1.0 + foreground_weight * masks
        return (w * (pred - eps).pow(2)).sum() / (w.sum() * pred.shape[1])

    def attn_loss(sink, aux) -> torch.Tensor:
        spans, masks = aux
        have = [i for i, s in enumerate(spans) if s is not None]
        if not have:
            return torch.zeros(())
        total = torch.zeros(())
        for _, (h, w), maps in sink:
            mask_dn = F.adaptive_avg_pool2d(masks, (h, w)).flatten(1)  # (B, HW)
            outside = (1.0 - mask_dn).clamp(0, 1)
            for i in have:
                s0, s1 = spans[i]
                m = maps[i, :, :, s0:s1]  # (heads, HW, span)
                mass_out = (m * outside[i][None, :, None]).sum(dim=1)
                ratio = mass_out / m.sum(dim=1).clamp_min(1e-8)
                total = total + ratio.mean()
        return total / (len(have) * len(sink))

    opt = torch.optim.Adam(net.parameters(), lr=lr)
    net.train()
    order = np.arange(n_train)
    history = []
    for epoch in range(epochs):
        decay = 0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * epoch / max(epochs - 1, 1)))
        for g in opt.param_groups:
            g["lr"] = lr * decay
        rng.shuffle(order)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, n_train, batch_size):
            idx = order[start : start + batch_size]
            zt, alphas, cond, eps, masks, aux = batch_tensors([train[i] for i in idx], with_aux=True)
            sink: list = []
            pred = net(zt, alphas, cond, attn_sink=sink)
            loss = weighted_mse(pred, eps, masks)
            if attn_localization_weight > 0:
                loss = loss + attn_localization_weight * attn_loss(sink, aux)
            if not torch.isfinite(loss):
                raise TrainingError(f"denoiser loss diverged at epoch {epoch}: {history}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += loss.item()
            n_batches += 1
        history.append(epoch_loss / n_batches)
        if verbose:
            print(f"denoiser epoch {epoch}: train loss {history[-1]:.4f}")

    net.eval()
    with torch.no_grad():
        zt, alphas, cond, eps, masks, _ = batch_tensors(val, with_aux=False)
        val_loss = float(weighted_mse(net(zt, alphas, cond), eps, masks))
        zt, alphas, cond, eps, masks, _ = batch_tensors(train[:n_val], with_aux=False)
        train_loss = float(weighted_mse(net(zt, alphas, cond), eps, masks))
    if verbose:
        print(f"denoiser final: train {train_loss:.4f} val {val_loss:.4f}")
    if val_loss > val_loss_max:
        raise TrainingError(f"held-out denoising loss {val_loss:.4f} above gate {val_loss_max}")

    if use_cache:
        torch.save(
            {"state_dict": net.state_dict(), "params": params,
             "train_loss": train_loss, "val_loss": val_loss},
            path,
        )
    return ToyDenoiser(net, sched, vae.latent_shape)


def train_toy_classifier(
    world: ToyWorld,
    seed: int = 0,
    mode: str = "correlated",
    epochs: int = 6,
    n_train: int = 4000,
    n_val: int = 600,
    batch_size: int = 128,
    lr: float = 1.5e-3,
    min_val_accuracy: float = 0.9,
    use_cache: bool = True,
    verbose: bool = False,
) -> ToyClassifier:
    """Fit a classifier on the given sampling mode and gate on held-out accuracy."""
    params = dict(
        world_seed=world.seed, image_size=world.image_size, seed=seed, mode=mode,
        epochs=epochs, n_train=n_train, lr=lr,
    )
    path = _cache_key("toy_classifier", params)
    with torch.random.fork_rng():
        torch.manual_seed(seed + 31)
        net = ToyClassifierNet(num_classes=world.num_classes)
    if use_cache and path.exists():
        payload = torch.load(path, weights_only=True)
        net.load_state_dict(payload["state_dict"])
        return ToyClassifier(net, world.num_classes)

    rng = np.random.default_rng((world.seed, seed, 13))
    train = world.make_dataset(n_train, mode, seed=seed + 2)
    val = world.make_dataset(n_val, mode, seed=seed + 3)

    def tensors(examples):
        imgs = torch.from_numpy(np.stack([e.image for e in examples]))
        labels = torch.tensor([e.label for e in examples])
        return imgs, labels

    opt = torch.optim.Adam(net.parameters(), lr=lr)
    net.train()
    order = np.arange(n_train)
    for epoch in range(epochs):
        rng.shuffle(order)
        for start in range(0, n_train, batch_size):
            idx = order[start : start + batch_size]
            imgs, labels = tensors([train[i] for i in idx])
            loss = F.cross_entropy(net(imgs), labels)
            if not torch.isfinite(loss):
                raise TrainingError(f"classifier loss diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
        if verbose:
            print(f"classifier[{mode}] epoch {epoch}: loss {loss.item():.4f}")

    net.eval()
    with torch.no_grad():
        imgs, labels = tensors(val)
        acc = float((net(imgs).argmax(dim=1) == labels).float().mean())
    if verbose:
        print(f"classifier[{mode}] val accuracy {acc:.3f}")
    if acc < min_val_accuracy:
        raise TrainingError(f"val accuracy {acc:.3f} below gate {min_val_accuracy} for mode {mode!r}")

    if use_cache:
        torch.save({"state_dict": net.state_dict(), "params": params, "val_accuracy": acc}, path)
    return ToyClassifier(net, world.num_classes)


def make_toy_pair(world: ToyWorld, seed: int = 0, use_cache: bool = True, verbose: bool = False):
    """Two classifiers with an engineered disagreement region.

    The first is trained with randomized backgrounds (shape-driven); the
    second on data where the background always matches the label but the
    drawn shape only usually does (background-driven).  Images pairing a
    class shape with another class's background split the two.
    """
    f_shape = train_toy_classifier(
        world, seed=seed, mode="bg_randomized", use_cache=use_cache, verbose=verbose
    )
    g_background = train_toy_classifier(
        world, seed=seed + 1, mode="bg_predicts_label", use_cache=use_cache, verbose=verbose
    )
    return f_shape, g_background


@dataclass
class ToyStack:
    """Everything the pipelines need, trained and wired together."""

    world: ToyWorld
    encoder: ToyTextEncoder
    vae: ToyIdentityVAE
    denoiser: ToyDenoiser
    classifier_shape: ToyClassifier
    classifier_background: ToyClassifier
    schedule: NoiseSchedule


def load_toy_stack(
    seed: int = 0,
    schedule: Optional[NoiseSchedule] = None,
    use_cache: bool = True,
    verbose: bool = False,
) -> ToyStack:
    sched = schedule or make_schedule(20, "cosine", 0.01)
    world = ToyWorld(seed=seed)
    encoder = ToyTextEncoder(seed=seed)
    vae = ToyIdentityVAE((3, world.image_size, world.image_size))
    denoiser = train_toy_denoiser(
        world, sched, seed=seed, encoder=encoder, use_cache=use_cache, verbose=verbose
    )
    f_shape, g_background = make_toy_pair(world, seed=seed, use_cache=use_cache, verbose=verbose)
    return ToyStack(world, encoder, vae, denoiser, f_shape, g_background, sched)
