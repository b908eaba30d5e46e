"""Abstract backends the pipelines run against."""

from __future__ import annotations

from abc import ABC, abstractmethod

import torch

from ..diffusion import Latent


class ClassifierInterface(ABC):
    """Probability and penultimate-feature model over image batches."""

    input_resolution: int
    num_classes: int
    feature_dim: int
    reentrant: bool = True

    @abstractmethod
    def probs(self, images: torch.Tensor) -> torch.Tensor:
        """(B, C, H, W) in [0, 1] -> (B, num_classes) rows summing to 1."""

    @abstractmethod
    def features(self, images: torch.Tensor) -> torch.Tensor:
        """(B, C, H, W) -> (B, feature_dim) activations before the head."""


class VAEInterface(ABC):
    """Pixel <-> latent codec around the diffusion chain."""

    latent_shape: tuple[int, int, int]
    image_shape: tuple[int, int, int]
    reconstruction_tolerance: float
    reentrant: bool = True

    @abstractmethod
    def encode(self, image: torch.Tensor) -> Latent:
        """(C, H, W) image in [0, 1] -> clean latent at timestep 0."""

    @abstractmethod
    def decode(self, z: Latent) -> torch.Tensor:
        """Latent -> (C, H, W) image; differentiable."""
