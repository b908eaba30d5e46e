"""Subprocess probe for the backward-pass memory contract.

Run as ``python -m diffguide.memprobe T [--no-checkpoint]``: builds a fixed
random denoiser, backpropagates one loss through a T-step chain, and prints
the process peak RSS in kilobytes.  Each probe runs in its own process so
the peaks are comparable; an oversized latent makes stored activations
dominate the interpreter baseline.
"""

from __future__ import annotations

import resource
import subprocess
import sys

import torch

from .conditioning import ConditioningMatrix
from .diffusion import DiffusionInputs, Latent, denoise_loop, make_schedule
from .adapters.toy_models import ToyUNet, ToyDenoiser
from .adapters.toy_text import ToyTextEncoder

PROBE_LATENT = (3, 96, 96)


def probe_peak_kb(T: int, checkpointing: bool) -> int:
    sched = make_schedule(T, "cosine", 0.01)
    enc = ToyTextEncoder(seed=0)
    with torch.random.fork_rng():
        torch.manual_seed(0)
        net = ToyUNet(cond_dim=enc.feature_dim)
    den = ToyDenoiser(net, sched, PROBE_LATENT)
    cm = enc.encode("a photograph of a circle")
    null = enc.null_text()
    g = torch.Generator().manual_seed(1)
    z = torch.randn(*PROBE_LATENT, generator=g).requires_grad_(True)
    inputs = DiffusionInputs(
        Latent(z, T),
        [ConditioningMatrix(cm.values.clone().requires_grad_(True), cm.token_spans) for _ in range(T)],
        [ConditioningMatrix(null.values.clone().requires_grad_(True), null.token_spans) for _ in range(T)],
    )
    out = denoise_loop(inputs, den, sched, w=3.0, checkpoint_steps=checkpointing)
    out.values.square().mean().backward()
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss


def measure_peak_kb(T: int, checkpointing: bool = True, timeout: float = 300.0) -> int:
    """Run the probe in a fresh interpreter and return its peak RSS in kB."""
    args = [sys.executable, "-m", "diffguide.memprobe", str(T)]
    if not checkpointing:
        args.append("--no-checkpoint")
    proc = subprocess.run(args, capture_output=True, text=True, timeout=timeout)
    if proc.returncode != 0:
        raise RuntimeError(f"memory probe failed: {proc.stderr}")
    return int(proc.stdout.strip().splitlines()[-1])


def main(argv: list[str]) -> int:
    T = int(argv[0])
    checkpointing = "--no-checkpoint" not in argv[1:]
    print(probe_peak_kb(T, checkpointing))
    return 0


if __name__ == "__main__":
    raise SystemExit(main(sys.argv[1:]))
