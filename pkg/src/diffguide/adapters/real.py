"""Full-scale backend loading and the prompt-pair zero-shot classifier.

The toy stack never touches this module; pipelines only reach for it when
explicitly configured with weight locations, and any problem surfaces as a
descriptive startup error rather than a mid-run failure.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Callable, Optional

import torch

from .base import ClassifierInterface

WEIGHTS_ENV = "DIFFGUIDE_WEIGHTS_DIR"

_REQUIRED_FILES = ("denoiser.pt", "vae.pt", "text_encoder.pt", "classifier.pt")


class RealBackendError(RuntimeError):
    pass


def expected_latent_geometry(
    resolution: int, channels: int = 4, downsample_factor: int = 8
) -> tuple[int, int, int]:
    """Latent shape implied by an image resolution under the standard codec."""
    if resolution % downsample_factor != 0:
        raise RealBackendError(
            f"resolution {resolution} is not divisible by the codec factor {downsample_factor}"
        )
    side = resolution // downsample_factor
    return (channels, side, side)


def validate_latent_geometry(declared: tuple[int, int, int], resolution: int) -> None:
    expected = expected_latent_geometry(resolution)
    if tuple(declared) != expected:
        raise RealBackendError(
            f"declared latent geometry {tuple(declared)} does not match the expected "
            f"{expected} for {resolution}x{resolution} images"
        )


def load_real_backends(weights_dir: Optional[str] = None):
    """Validate weight locations and hand back full-scale adapters.

    Runs of the toy stack never require this; the call fails with a clear
    inventory of what is missing so problems show up at startup.
    """
    root = weights_dir or os.environ.get(WEIGHTS_ENV)
    if not root:
        raise RealBackendError(
            f"no weights directory configured; set {WEIGHTS_ENV} or pass a path"
        )
    root = Path(root)
    if not root.is_dir():
        raise RealBackendError(f"weights directory {root} does not exist")
    missing = [name for name in _REQUIRED_FILES if not (root / name).exists()]
    if missing:
        raise RealBackendError(
            f"weights directory {root} is missing {missing}; expected files "
            f"{list(_REQUIRED_FILES)}"
        )
    raise RealBackendError(
        "full-scale adapters need a GPU runtime with the pretrained checkpoints "
        f"in {root}; this build ships the interface and the toy stack only"
    )


class ZeroShotBinaryClassifier(ClassifierInterface):
    """Two-prompt classifier: softmax over inner products with text features.

    Class 0 is the source prompt, class 1 the target prompt, matching the
    attribute-editing convention.
    """

    num_classes = 2
    reentrant = True

    def __init__(
        self,
        text_feats_src: torch.Tensor,
        text_feats_tgt: torch.Tensor,
        image_encoder: Callable[[torch.Tensor], torch.Tensor],
        input_resolution: int,
    ):
        if text_feats_src.shape != text_feats_tgt.shape:
            raise RealBackendError("prompt feature vectors disagree in shape")
        self.text_feats = torch.stack([text_feats_src, text_feats_tgt])
        self.image_encoder = image_encoder
        self.input_resolution = input_resolution
        self.feature_dim = int(text_feats_src.numel())

    def features(self, images: torch.Tensor) -> torch.Tensor:
        return self.image_encoder(images)

    def probs(self, images: torch.Tensor) -> torch.Tensor:
        feats = self.features(images)
        logits = feats @ self.text_feats.T
        return logits.softmax(dim=1)
