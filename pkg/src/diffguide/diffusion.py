"""Deterministic DDIM solver with classifier-free guidance.

All sampling here is noise-free given its inputs: the final latent is a
deterministic, differentiable function of the starting latent and the
per-timestep conditioning/null matrices.  Timesteps run t = 1..T with
``alpha(0) == 1`` (clean data); ``alpha`` denotes the cumulative signal
level, i.e. the forward process is

    z_t = sqrt(alpha_t) * z_0 + sqrt(1 - alpha_t) * eps .
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .conditioning import ConditioningMatrix


class DiffusionError(RuntimeError):
    """Base error for solver-level failures."""


class NonFiniteLatentError(DiffusionError):
    """Raised when a latent stops being finite; names the offending step."""

    def __init__(self, timestep: int, what: str = "latent"):
        self.timestep = timestep
        super().__init__(f"non-finite {what} at timestep t={timestep}")


SCHEDULE_KINDS = ("linear_alpha_bar", "cosine")

_COSINE_SHIFT = 0.008
_ALPHA_FLOOR = 1e-6  # reject degenerate schedules below this


def alpha_curve(s: float, kind: str, ceiling: float) -> float:
    """Continuous signal-level curve alpha(s) on s in [0, 1], alpha(0) = 1.

    Discrete schedules sample this curve at s = t / T, so the same curve
    serves any step count.  ``ceiling`` bounds the terminal value so the
    prior at s = 1 is approximately standard normal.
    """
    if kind == "linear_alpha_bar":
        return 1.0 + (ceiling - 1.0) * s
    if kind == "cosine":
        def f(x: float) -> float:
            return math.cos((x + _COSINE_SHIFT) / (1.0 + _COSINE_SHIFT) * math.pi / 2.0) ** 2

        raw = f(s) / f(0.0)
        raw1 = f(1.0) / f(0.0)
        # affine rescale onto [ceiling, 1] so the terminal noise level stays sane
        return ceiling + (1.0 - ceiling) * (raw - raw1) / (1.0 - raw1)
    raise ValueError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")


@dataclass(frozen=True)
class NoiseSchedule:
    """Decreasing signal levels alpha_1..alpha_T, with alpha_0 defined as 1."""

    alphas: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        arr = np.asarray(self.alphas, dtype=np.float64)
        object.__setattr__(self, "alphas", arr)
        if arr.ndim != 1 or arr.size < 1:
            raise ValueError("schedule needs a 1-d array of at least one alpha")
        if np.any(arr <= 0.0) or np.any(arr > 1.0):
            raise ValueError("all alphas must lie in (0, 1]")
        full = np.concatenate([[1.0], arr])
        if np.any(np.diff(full) >= 0.0):
            raise ValueError("alphas must be strictly decreasing from alpha_0 = 1")

    @property
    def T(self) -> int:
        return int(self.alphas.size)

    def alpha(self, t: int) -> float:
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T}]")
        return float(self.alphas[t - 1])

    def __eq__(self, other):
        return (
            isinstance(other, NoiseSchedule)
            and self.alphas.shape == other.alphas.shape
            and bool(np.all(self.alphas == other.alphas))
        )


def make_schedule(T: int, kind: str = "cosine", alpha_T_ceiling: float = 0.01) -> NoiseSchedule:
    """Build a T-step schedule by sampling the continuous curve at t / T."""
    if T < 2:
        raise ValueError(f"need at least 2 steps, got T={T}")
    if not 0.0 < alpha_T_ceiling < 1.0:
        raise ValueError("alpha_T_ceiling must lie in (0, 1)")
    vals = np.array(
        [alpha_curve(t / T, kind, alpha_T_ceiling) for t in range(1, T + 1)],
        dtype=np.float64,
    )
    vals[-1] = min(vals[-1], alpha_T_ceiling)
    sched = NoiseSchedule(vals, kind=kind)
    return sched


@dataclass
class Latent:
    """A sample in VAE-latent space tagged with its noise timestep."""

    values: torch.Tensor
    timestep: int

    @property
    def shape(self):
        return tuple(self.values.shape)


@dataclass
class DiffusionInputs:
    """The full optimization state: starting latent plus per-step conditioning."""

    z_T: Latent
    cond_seq: list[ConditioningMatrix]
    null_seq: list[ConditioningMatrix]

    def validate(self, T: int) -> None:
        if len(self.cond_seq) != T or len(self.null_seq) != T:
            raise ValueError(
                f"need exactly T={T} conditioning and null matrices, got "
                f"{len(self.cond_seq)} / {len(self.null_seq)}"
            )
        shapes = {tuple(c.values.shape) for c in self.cond_seq + self.null_seq}
        if len(shapes) != 1:
            raise ValueError(f"conditioning matrices disagree on shape: {sorted(shapes)}")
        if self.z_T.timestep != T:
            raise ValueError(f"z_T is tagged t={self.z_T.timestep}, expected {T}")

    def detached_clone(self) -> "DiffusionInputs":
        return DiffusionInputs(
            z_T=Latent(self.z_T.values.detach().clone(), self.z_T.timestep),
            cond_seq=[c.clone_detached() for c in self.cond_seq],
            null_seq=[c.clone_detached() for c in self.null_seq],
        )


class DenoiserInterface(ABC):
    """Noise-prediction model epsilon(z_t, t, C).

    Implementations must be deterministic for fixed inputs and return a
    tensor shaped like the input latent.  ``xa_control``, when given,
    receives every cross-attention map of the call and may override it.
    """

    #: (channels, height, width) of the latent space this model denoises.
    latent_shape: tuple[int, int, int]
    #: whether cross-attention maps can be captured/overridden.
    has_cross_attention: bool = False
    #: safe to call from several threads/processes at once.
    reentrant: bool = True
    #: schedule this model was bound to, if it conditions on noise level.
    schedule: Optional[NoiseSchedule] = None

    @abstractmethod
    def epsilon(
        self,
        z: Latent,
        t: int,
        cond: ConditioningMatrix,
        xa_control=None,
    ) -> torch.Tensor:
        ...


def _check_shapes(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def diffuse_to(z0: Latent, t: int, noise: torch.Tensor, sched: NoiseSchedule) -> Latent:
    """Closed-form forward jump to timestep t: sqrt(a_t) z0 + sqrt(1-a_t) eps."""
    if not 1 <= t <= sched.T:
        raise ValueError(f"timestep {t} outside [1, {sched.T}]")
    _check_shapes(z0.values, noise, "diffuse_to")
    a = sched.alpha(t)
    return Latent(math.sqrt(a) * z0.values + math.sqrt(1.0 - a) * noise, t)


def cfg_noise(
    denoiser: DenoiserInterface,
    z: Latent,
    t: int,
    cond: ConditioningMatrix,
    null: ConditioningMatrix,
    w: float,
    xa_control=None,
) -> torch.Tensor:
    """Classifier-free combination eps_c + w * (eps_c - eps_n).

    Always issues exactly two denoiser calls; w = 0 therefore reproduces the
    conditional prediction bitwise.  Attention control is applied to the
    conditional branch only, where the prompt tokens live.
    """
    if w < 0:
        raise ValueError(f"guidance weight must be >= 0, got {w}")
    eps_c = denoiser.epsilon(z, t, cond, xa_control=xa_control)
    eps_n = denoiser.epsilon(z, t, null)
    return eps_c + w * (eps_c - eps_n)


def ddim_step(z_t: Latent, t: int, eps_hat: torch.Tensor, sched: NoiseSchedule) -> Latent:
    """One deterministic update from timestep t to t - 1.

    z_{t-1} = sqrt(a_{t-1}) (z_t - sqrt(1-a_t) eps) / sqrt(a_t)
              + sqrt(1-a_{t-1}) eps
    """
    if not 1 <= t <= sched.T:
        raise ValueError(f"timestep {t} outside [1, {sched.T}]")
    _check_shapes(z_t.values, eps_hat, "ddim_step")
    a_t = sched.alpha(t)
    a_prev = sched.alpha(t - 1)
    x0_coef = math.sqrt(a_prev) / math.sqrt(a_t)
    out = x0_coef * (z_t.values - math.sqrt(1.0 - a_t) * eps_hat) + math.sqrt(1.0 - a_prev) * eps_hat
    return Latent(out, t - 1)


def ddim_step_residual(z_t: Latent, t: int, eps_hat: torch.Tensor, sched: NoiseSchedule) -> Latent:
    """The same update written as a residual map z_{t-1} = r z_t + F(eps).

    With r = sqrt(a_{t-1}/a_t), the exact noise coefficient is
    sqrt(1-a_{t-1}) - r sqrt(1-a_t).  Used as an independent evaluation
    path for cross-checking ddim_step.
    """
    if not 1 <= t <= sched.T:
        raise ValueError(f"timestep {t} outside [1, {sched.T}]")
    _check_shapes(z_t.values, eps_hat, "ddim_step_residual")
    a_t = sched.alpha(t)
    a_prev = sched.alpha(t - 1)
    r = math.sqrt(a_prev / a_t)
    f_coef = math.sqrt(1.0 - a_prev) - r * math.sqrt(1.0 - a_t)
    return Latent(r * z_t.values + f_coef * eps_hat, t - 1)


def predict_z0(
    z_t: Latent,
    t: int,
    eps_hat: torch.Tensor,
    sched: NoiseSchedule,
    alpha_floor: float = 1e-8,
) -> Latent:
    """Jump straight to the clean latent: (z_t - sqrt(1-a_t) eps) / sqrt(a_t)."""
    if not 1 <= t <= sched.T:
        raise ValueError(f"timestep {t} outside [1, {sched.T}]")
    _check_shapes(z_t.values, eps_hat, "predict_z0")
    a_t = sched.alpha(t)
    if a_t < alpha_floor:
        raise DiffusionError(
            f"alpha_{t} = {a_t:.3e} below floor {alpha_floor:.1e}; z0 prediction is degenerate"
        )
    return Latent((z_t.values - math.sqrt(1.0 - a_t) * eps_hat) / math.sqrt(a_t), 0)


def ddim_invert_step(z_prev: Latent, t: int, eps: torch.Tensor, sched: NoiseSchedule) -> Latent:
    """Invert one DDIM update: recover z_t from z_{t-1} assuming noise eps."""
    if not 1 <= t <= sched.T:
        raise ValueError(f"timestep {t} outside [1, {sched.T}]")
    _check_shapes(z_prev.values, eps, "ddim_invert_step")
    a_t = sched.alpha(t)
    a_prev = sched.alpha(t - 1)
    x0_coef = math.sqrt(a_t) / math.sqrt(a_prev)
    out = x0_coef * (z_prev.values - math.sqrt(1.0 - a_prev) * eps) + math.sqrt(1.0 - a_t) * eps
    return Latent(out, t)


def _assert_finite(values: torch.Tensor, t: int, what: str) -> None:
    if not bool(torch.isfinite(values).all()):
        raise NonFiniteLatentError(t, what)


def _schedule_compatible(denoiser: DenoiserInterface, sched: NoiseSchedule) -> None:
    bound = getattr(denoiser, "schedule", None)
    if bound is not None and bound != sched:
        raise DiffusionError(
            "denoiser is bound to a different noise schedule; rebind it with the "
            "schedule used for sampling"
        )


def denoise_loop(
    inputs: DiffusionInputs,
    denoiser: DenoiserInterface,
    sched: NoiseSchedule,
    w: float,
    hooks=None,
    checkpoint_steps: bool = False,
) -> Latent:
    """Run the full T-step guided DDIM chain down to a clean latent.

    With ``checkpoint_steps`` the graph of each step is discarded during the
    forward pass and rebuilt on demand in backward, so gradients stay exact
    while memory holds only step boundaries.
    """
    T = sched.T
    inputs.validate(T)
    _schedule_compatible(denoiser, sched)
    if hooks is not None:
        if not denoiser.has_cross_attention:
            raise DiffusionError("attention hooks require a denoiser with cross-attention layers")
        hooks.bind(T)

    spans_c = [c.token_spans for c in inputs.cond_seq]
    spans_n = [c.token_spans for c in inputs.null_seq]

    def make_step(t: int) -> Callable:
        idx = t - 1

        def step(z_values: torch.Tensor, c_values: torch.Tensor, n_values: torch.Tensor):
            xa = hooks.for_call(t) if hooks is not None else None
            cond = ConditioningMatrix(c_values, spans_c[idx])
            null = ConditioningMatrix(n_values, spans_n[idx])
            eps_hat = cfg_noise(denoiser, Latent(z_values, t), t, cond, null, w, xa_control=xa)
            _assert_finite(eps_hat, t, "noise estimate")
            out = ddim_step(Latent(z_values, t), t, eps_hat, sched)
            _assert_finite(out.values, t - 1, "latent")
            return out.values

        return step

    z = inputs.z_T.values
    _assert_finite(z, T, "latent")
    for t in range(T, 0, -1):
        step = make_step(t)
        c_vals = inputs.cond_seq[t - 1].values
        n_vals = inputs.null_seq[t - 1].values
        if checkpoint_steps:
            z = torch.utils.checkpoint.checkpoint(step, z, c_vals, n_vals, use_reentrant=False)
        else:
            z = step(z, c_vals, n_vals)
    return Latent(z, 0)


def ddim_invert(
    z0: Latent,
    cond: ConditioningMatrix,
    denoiser: DenoiserInterface,
    sched: NoiseSchedule,
    w: float = 0.0,
    null: Optional[ConditioningMatrix] = None,
) -> list[Latent]:
    """Plain DDIM inversion: walk the chain toward noise, returning z_0..z_T.

    The noise estimate at each step is taken at the current latent.  The
    default w = 0 keeps the prediction conditional-only, which is the stable
    regime for inversion; the reconstruction pass may use any guidance.
    """
    if z0.timestep != 0:
        raise ValueError(f"inversion starts from a clean latent, got t={z0.timestep}")
    _schedule_compatible(denoiser, sched)
    trajectory = [Latent(z0.values.detach().clone(), 0)]
    z = trajectory[0]
    with torch.no_grad():
        for t in range(1, sched.T + 1):
            if w == 0.0:
                eps = denoiser.epsilon(Latent(z.values, t), t, cond)
            else:
                if null is None:
                    raise DiffusionError("guided inversion needs a null matrix; use w=0")
                eps = cfg_noise(denoiser, Latent(z.values, t), t, cond, null, w)
            _assert_finite(eps, t, "noise estimate")
            z = ddim_invert_step(z, t, eps, sched)
            _assert_finite(z.values, t, "latent")
            trajectory.append(Latent(z.values.clone(), t))
    return trajectory
