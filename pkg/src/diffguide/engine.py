"""First-order optimization of diffusion inputs through the full chain.

The optimizer treats the starting latent and every per-step conditioning
and null matrix as free variables, backpropagates the task loss through
all denoising steps (checkpointed by default so memory stays flat in the
step count), and applies adaptive-moment updates with separate step sizes
for the latent and the text-side variables.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, asdict
from typing import Optional

import torch

from .conditioning import ConditioningMatrix
from .diffusion import (
    DenoiserInterface,
    DiffusionInputs,
    Latent,
    NoiseSchedule,
    denoise_loop,
)
from .objectives import AugmentationConfig, EvalContext, GuidanceObjective


class OptimizationError(RuntimeError):
    pass


@dataclass
class OptimizerConfig:
    steps: int = 20
    lr_cond: float = 0.01
    lr_latent: float = 0.001
    scheduler: str = "none"  # none | cosine
    grad_clip: Optional[float] = None
    ddim_steps: int = 20
    guidance_w: float = 3.0
    resolution: int = 32
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    checkpointing: bool = True
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("need at least one optimization step")
        if self.lr_cond <= 0 or self.lr_latent <= 0:
            raise ValueError("step sizes must be positive")
        if self.scheduler not in ("none", "cosine"):
            raise ValueError(f"unknown scheduler {self.scheduler!r}")


@dataclass
class RunTrace:
    """Per-step record of the optimization; serializes to JSON lines."""

    seed: int
    records: list[dict] = field(default_factory=list)

    def append(self, step: int, loss: float, metrics: dict, wall_clock: float, lr_scale: float) -> None:
        self.records.append(
            {
                "step": step,
                "loss": loss,
                "metrics": dict(metrics),
                "wall_clock": wall_clock,
                "lr_scale": lr_scale,
            }
        )

    def losses(self) -> list[float]:
        return [r["loss"] for r in self.records]

    def to_jsonl(self, path) -> None:
        import json

        with open(path, "w") as fh:
            fh.write(json.dumps({"seed": self.seed}) + "\n")
            for rec in self.records:
                fh.write(json.dumps(rec) + "\n")

    @staticmethod
    def from_jsonl(path) -> "RunTrace":
        import json

        with open(path) as fh:
            lines = [json.loads(line) for line in fh if line.strip()]
        trace = RunTrace(seed=lines[0]["seed"])
        trace.records = lines[1:]
        return trace


@dataclass
class OptimizeResult:
    best_inputs: DiffusionInputs
    final_inputs: DiffusionInputs
    best_loss: float
    best_step: int
    trace: RunTrace


def _as_parameters(inputs: DiffusionInputs):
    z = inputs.z_T.values.detach().clone().requires_grad_(True)
    conds = [c.values.detach().clone().requires_grad_(True) for c in inputs.cond_seq]
    nulls = [c.values.detach().clone().requires_grad_(True) for c in inputs.null_seq]
    spans_c = [c.token_spans for c in inputs.cond_seq]
    spans_n = [c.token_spans for c in inputs.null_seq]
    T = inputs.z_T.timestep
    live = DiffusionInputs(
        z_T=Latent(z, T),
        cond_seq=[ConditioningMatrix(v, s) for v, s in zip(conds, spans_c)],
        null_seq=[ConditioningMatrix(v, s) for v, s in zip(nulls, spans_n)],
    )
    return live, z, conds, nulls


def step_rng(seed: int, step: int) -> torch.Generator:
    """Fresh but reproducible generator for each optimization step."""
    return torch.Generator().manual_seed((seed * 1_000_003 + step) % (2**63))


def _forward_loss(
    objective: GuidanceObjective,
    live: DiffusionInputs,
    cfg: OptimizerConfig,
    denoiser: DenoiserInterface,
    sched: NoiseSchedule,
    vae,
    hooks,
    rng: torch.Generator,
):
    z0 = denoise_loop(
        live, denoiser, sched, cfg.guidance_w, hooks=hooks, checkpoint_steps=cfg.checkpointing
    )
    decoded = vae.decode(z0)
    ctx = EvalContext(rng=rng)
    loss = objective.evaluate(decoded, z0, ctx)
    return loss, ctx


def optimize(
    objective: GuidanceObjective,
    inputs: DiffusionInputs,
    cfg: OptimizerConfig,
    denoiser: DenoiserInterface,
    vae,
    hooks=None,
    sched: Optional[NoiseSchedule] = None,
    seed: int = 0,
) -> OptimizeResult:
    """Minimize the objective over (z_T, C_1..C_T, null_1..null_T).

    Returns both the best-by-loss inputs (losses are rarely monotone here)
    and the final iterate, together with the full per-step trace.
    """
    sched = sched or getattr(denoiser, "schedule", None)
    if sched is None:
        raise OptimizationError("no noise schedule given and the denoiser has none bound")
    if sched.T != cfg.ddim_steps:
        raise OptimizationError(
            f"config says {cfg.ddim_steps} DDIM steps but the schedule has {sched.T}"
        )
    inputs.validate(sched.T)

    live, z, conds, nulls = _as_parameters(inputs)
    opt = torch.optim.Adam(
        [
            {"params": [z], "lr": cfg.lr_latent},
            {"params": conds + nulls, "lr": cfg.lr_cond},
        ],
        betas=cfg.adam_betas,
        eps=cfg.adam_eps,
    )
    base_lrs = [g["lr"] for g in opt.param_groups]

    trace = RunTrace(seed=seed)
    best_loss = math.inf
    best_step = -1
    best_snapshot = live.detached_clone()

    for k in range(cfg.steps):
        lr_scale = 1.0
        if cfg.scheduler == "cosine":
            lr_scale = 0.5 * (1.0 + math.cos(math.pi * k / cfg.steps))
        for g, base in zip(opt.param_groups, base_lrs):
            g["lr"] = base * lr_scale

        t0 = time.perf_counter()
        loss, ctx = _forward_loss(objective, live, cfg, denoiser, sched, vae, hooks, step_rng(seed, k))
        loss_val = loss.item()
        if not math.isfinite(loss_val):
            raise OptimizationError(
                f"non-finite loss at step {k}; trace so far: {trace.losses()}"
            )
        if loss_val < best_loss:
            best_loss = loss_val
            best_step = k
            best_snapshot = live.detached_clone()

        opt.zero_grad()
        loss.backward()
        grads = [p.grad for p in [z] + conds + nulls if p.grad is not None]
        if any(not bool(torch.isfinite(g).all()) for g in grads):
            raise OptimizationError(
                f"non-finite gradient at step {k}; trace so far: {trace.losses()}"
            )
        if cfg.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_([z] + conds + nulls, cfg.grad_clip)
        opt.step()

        trace.append(
            step=k,
            loss=loss_val,
            metrics=ctx.metrics,
            wall_clock=time.perf_counter() - t0,
            lr_scale=lr_scale,
        )

    return OptimizeResult(
        best_inputs=best_snapshot,
        final_inputs=live.detached_clone(),
        best_loss=best_loss,
        best_step=best_step,
        trace=trace,
    )


def compute_gradients(
    objective: GuidanceObjective,
    inputs: DiffusionInputs,
    cfg: OptimizerConfig,
    denoiser: DenoiserInterface,
    vae,
    hooks=None,
    sched: Optional[NoiseSchedule] = None,
    seed: int = 0,
    checkpointing: Optional[bool] = None,
) -> dict:
    """One forward/backward pass; returns gradients for every input variable.

    Checkpointed and non-checkpointed passes run the same arithmetic, so
    their gradients must agree to rounding; this helper exists to make that
    comparison (and finite-difference checks) direct.
    """
    sched = sched or getattr(denoiser, "schedule", None)
    if checkpointing is not None:
        from dataclasses import replace

        cfg = replace(cfg, checkpointing=checkpointing)
    live, z, conds, nulls = _as_parameters(inputs)
    loss, _ = _forward_loss(objective, live, cfg, denoiser, sched, vae, hooks, step_rng(seed, 0))
    loss.backward()
    zero = torch.zeros_like(z)
    return {
        "loss": loss.item(),
        "z_T": z.grad if z.grad is not None else zero,
        "cond": [c.grad if c.grad is not None else torch.zeros_like(c) for c in conds],
        "null": [n.grad if n.grad is not None else torch.zeros_like(n) for n in nulls],
    }
