import numpy as np
import pytest
import torch

from diffguide.adapters.toy_models import ToyDenoiser, ToyUNet
from diffguide.adapters.toy_text import ToyTextEncoder
from diffguide.adapters.toy_training import load_toy_stack
from diffguide.conditioning import ConditioningMatrix
from diffguide.diffusion import DenoiserInterface, Latent, make_schedule


class ConstantDenoiser(DenoiserInterface):
    """eps(z, t, C) == a fixed tensor; the degenerate case algebra tests need."""

    has_cross_attention = False

    def __init__(self, value: torch.Tensor, latent_shape=(3, 8, 8)):
        self.value = value
        self.latent_shape = latent_shape
        self.schedule = None

    def epsilon(self, z, t, cond, xa_control=None):
        return self.value.expand_as(z.values).to(z.values.dtype)


class CondMeanDenoiser(DenoiserInterface):
    """eps = scale * z + mean(cond); sensitive to conditioning, closed form."""

    has_cross_attention = False

    def __init__(self, scale: float = 0.1, latent_shape=(3, 8, 8)):
        self.scale = scale
        self.latent_shape = latent_shape
        self.schedule = None

    def epsilon(self, z, t, cond, xa_control=None):
        return self.scale * z.values + cond.values.mean()


@pytest.fixture(scope="session")
def encoder():
    return ToyTextEncoder(seed=0)


@pytest.fixture(scope="session")
def sched20():
    return make_schedule(20, "cosine", 0.01)


@pytest.fixture(scope="session")
def sched5():
    return make_schedule(5, "cosine", 0.01)


@pytest.fixture(scope="session")
def untrained_denoiser(encoder, sched5):
    with torch.random.fork_rng():
        torch.manual_seed(7)
        net = ToyUNet(cond_dim=encoder.feature_dim)
    return ToyDenoiser(net, sched5)


@pytest.fixture(scope="session")
def toy_stack():
    """The trained desk-scale stack; first call trains and caches to disk."""
    return load_toy_stack(seed=0)


@pytest.fixture()
def rng64():
    return torch.Generator().manual_seed(1234)


def random_latent(gen, shape=(3, 8, 8), dtype=torch.float64):
    return torch.randn(*shape, generator=gen, dtype=dtype)


@pytest.fixture()
def make_inputs(encoder):
    """DiffusionInputs factory over a prompt and schedule."""

    def build(sched, prompt="a photograph of a circle", seed=0, shape=(3, 32, 32)):
        from diffguide.diffusion import DiffusionInputs

        cm = encoder.encode(prompt)
        null = encoder.null_text()
        g = torch.Generator().manual_seed(seed)
        z = torch.randn(*shape, generator=g)
        return DiffusionInputs(Latent(z, sched.T), [cm] * sched.T, [null] * sched.T)

    return build
