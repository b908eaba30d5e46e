"""Null-text inversion: make guided reconstruction hit a real image.

Plain DDIM inversion gives a starting latent whose *unguided* replay is
close to the input, but guided replay drifts off it.  Optimizing one null
matrix per timestep pulls every guided step back onto the inversion
trajectory, after which the guided chain reproduces the image closely.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F

from .conditioning import ConditioningMatrix
from .diffusion import (
    DenoiserInterface,
    DiffusionInputs,
    Latent,
    NoiseSchedule,
    ddim_invert,
    ddim_step,
    denoise_loop,
)


class InversionError(RuntimeError):
    pass


@dataclass
class InversionResult:
    z_T: Latent
    null_seq: list[ConditioningMatrix]
    reconstruction_error: float
    trajectory_errors: list[dict]

    def inputs_for(self, cond: ConditioningMatrix, T: int) -> DiffusionInputs:
        return DiffusionInputs(self.z_T, [cond] * T, list(self.null_seq))


def relative_l2(a: torch.Tensor, b: torch.Tensor) -> float:
    return (a - b).norm().item() / max(b.norm().item(), 1e-12)


def null_text_invert(
    z0: Latent,
    C_hat: ConditioningMatrix,
    denoiser: DenoiserInterface,
    sched: NoiseSchedule,
    w: float,
    null_init: ConditioningMatrix,
    inner_steps: int = 10,
    tol: float = 1e-5,
    lr: float = 1e-2,
    inversion_w: float = 0.0,
    divergence_patience: int = 5,
    divergence_ceiling: float = 1e3,
) -> InversionResult:
    """Optimize per-step null matrices so guided steps track the inversion path.

    The conditioning stays fixed; only the null side moves.  Each step keeps
    the best null iterate seen (including the initialization), so per-step
    tracking error never increases.  Reconstruction error is measured by a
    full guided replay at the end.
    """
    T = sched.T
    trajectory = ddim_invert(z0, C_hat, denoiser, sched, w=inversion_w)
    z_T = trajectory[T]

    null_seq: list[Optional[ConditioningMatrix]] = [None] * T
    errors: list[dict] = []
    z_cur = z_T.values
    bad_steps = 0

    for t in range(T, 0, -1):
        target = trajectory[t - 1].values
        with torch.no_grad():
            eps_c = denoiser.epsilon(Latent(z_cur, t), t, C_hat)

        def tracking_error(null_values: torch.Tensor) -> torch.Tensor:
            eps_n = denoiser.epsilon(Latent(z_cur, t), t, ConditioningMatrix(null_values, null_init.token_spans))
            eps_hat = eps_c + w * (eps_c - eps_n)
            stepped = ddim_step(Latent(z_cur, t), t, eps_hat, sched)
            return F.mse_loss(stepped.values, target)

        n = null_init.values.detach().clone().requires_grad_(True)
        with torch.no_grad():
            err_before = tracking_error(n).item()
        best_err, best_n = err_before, n.detach().clone()

        if inner_steps > 0 and err_before > tol:
            opt = torch.optim.Adam([n], lr=lr)
            for _ in range(inner_steps):
                err = tracking_error(n)
                if err.item() < best_err:
                    best_err = err.item()
                    best_n = n.detach().clone()
                if err.item() < tol:
                    break
                opt.zero_grad()
                err.backward()
                opt.step()
            with torch.no_grad():
                final_err = tracking_error(n).item()
            if final_err < best_err:
                best_err, best_n = final_err, n.detach().clone()

        null_seq[t - 1] = ConditioningMatrix(best_n, dict(null_init.token_spans))
        errors.append({"t": t, "before": err_before, "after": best_err})

        # tracking error normally accumulates along the chain; divergence is
        # a blow-up past the ceiling, or repeated failure to improve a bad step
        if not math.isfinite(best_err) or best_err > divergence_ceiling:
            raise InversionError(
                f"tracking error blew up to {best_err:.3e} at t={t}; "
                f"partial errors: {errors}"
            )
        if inner_steps > 0 and err_before > 100 * tol and best_err >= err_before:
            bad_steps += 1
            if bad_steps >= divergence_patience:
                raise InversionError(
                    f"inner optimization made no progress for {bad_steps} consecutive "
                    f"steps (latest error {best_err:.3e} at t={t}); partial errors: {errors}"
                )
        else:
            bad_steps = 0

        with torch.no_grad():
            eps_n = denoiser.epsilon(
                Latent(z_cur, t), t, ConditioningMatrix(best_n, null_init.token_spans)
            )
            eps_hat = eps_c + w * (eps_c - eps_n)
            z_cur = ddim_step(Latent(z_cur, t), t, eps_hat, sched).values

    result_nulls = [n for n in null_seq if n is not None]
    inputs = DiffusionInputs(z_T, [C_hat] * T, result_nulls)
    with torch.no_grad():
        recon = denoise_loop(inputs, denoiser, sched, w)
    return InversionResult(
        z_T=z_T,
        null_seq=result_nulls,
        reconstruction_error=relative_l2(recon.values, z0.values),
        trajectory_errors=errors,
    )


def save_inversion(result: InversionResult, path) -> None:
    torch.save(
        {
            "z_T": result.z_T.values,
            "T": result.z_T.timestep,
            "null_values": [n.values for n in result.null_seq],
            "null_spans": [n.token_spans for n in result.null_seq],
            "reconstruction_error": result.reconstruction_error,
            "trajectory_errors": result.trajectory_errors,
        },
        path,
    )


def load_inversion(path) -> InversionResult:
    payload = torch.load(path, weights_only=False)
    nulls = [
        ConditioningMatrix(v, s)
        for v, s in zip(payload["null_values"], payload["null_spans"])
    ]
    return InversionResult(
        z_T=Latent(payload["z_T"], payload["T"]),
        null_seq=nulls,
        reconstruction_error=payload["reconstruction_error"],
        trajectory_errors=payload["trajectory_errors"],
    )
