"""End-to-end task pipelines over a backend stack.

Each pipeline writes a run directory: lossless PNGs, one JSONL metric trace
per optimization, a manifest listing every file with its metrics, and a
matplotlib grid for quick inspection.  Stages record a hash of the config
that shaped them; re-running against the same directory skips stages whose
hash matches and whose outputs still exist.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import requests
import torch
from PIL import Image

from . import __version__
from .attention import capture_hooks, foreground_mask, inject_hooks, save_mask_png
from .conditioning import (
    build_generic_prompt,
    extend_caption,
    swap_classname,
    word_alignment,
    expand_alignment_to_tokens,
)
from .config import TaskConfig
from .diffusion import DiffusionInputs, Latent, denoise_loop, make_schedule
from .engine import optimize
from .grids import emit_grid
from .inversion import InversionResult, load_inversion, null_text_invert, save_inversion
from .objectives import (
    DisagreementObjective,
    NeuronObjective,
    VCEObjective,
)
from .adapters.toy_training import ToyStack, load_toy_stack
from .adapters.toy_world import BackgroundCaptionExtender

log = logging.getLogger("diffguide")


class PipelineError(RuntimeError):
    pass


class InversionGateError(PipelineError):
    pass


# ---------------------------------------------------------------------------
# Manifest and stage bookkeeping
# ---------------------------------------------------------------------------


class Manifest:
    """Inventory of a run directory: files, metrics, config, stage hashes."""

    NAME = "manifest.json"

    def __init__(self, out_dir: Path, config_snapshot: dict):
        self.out_dir = Path(out_dir)
        self.data = {
            "version": __version__,
            "config": config_snapshot,
            "stages": {},
            "files": {},
        }

    @classmethod
    def load_or_create(cls, out_dir: Path, config_snapshot: dict) -> "Manifest":
        out_dir = Path(out_dir)
        m = cls(out_dir, config_snapshot)
        path = out_dir / cls.NAME
        if path.exists():
            with open(path) as fh:
                existing = json.load(fh)
            m.data["stages"] = existing.get("stages", {})
            m.data["files"] = existing.get("files", {})
        return m

    def add_file(self, name: str, **meta) -> None:
        self.data["files"][name] = meta

    def stage_done(self, stage: str, stage_hash: str) -> bool:
        rec = self.data["stages"].get(stage)
        if not rec or rec.get("hash") != stage_hash:
            return False
        return all((self.out_dir / f).exists() for f in rec.get("files", []))

    def mark_stage(self, stage: str, stage_hash: str, files: list[str]) -> None:
        self.data["stages"][stage] = {"hash": stage_hash, "files": files}

    def save(self) -> None:
        with open(self.out_dir / self.NAME, "w") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)

    def verify_complete(self) -> None:
        on_disk = {
            p.name for p in self.out_dir.iterdir() if p.is_file() and p.name != self.NAME
        }
        listed = set(self.data["files"])
        if on_disk != listed:
            raise PipelineError(
                f"manifest incomplete: only-on-disk={sorted(on_disk - listed)}, "
                f"only-in-manifest={sorted(listed - on_disk)}"
            )


def stage_hash(payload: dict) -> str:
    blob = json.dumps({"version": __version__, **payload}, sort_keys=True, default=str)
    return hashlib.blake2b(blob.encode(), digest_size=8).hexdigest()


def save_image_png(image: torch.Tensor, path: Path) -> None:
    arr = (image.detach().clamp(0, 1).permute(1, 2, 0).numpy() * 255.0).round().astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_image_png(path: Path) -> torch.Tensor:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1)


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def get_stack(cfg: TaskConfig, stack: Optional[ToyStack] = None) -> ToyStack:
    if stack is not None:
        return stack
    if cfg.adapters != "toy":
        raise PipelineError(f"only the toy adapter stack is wired in; got {cfg.adapters!r}")
    return load_toy_stack(seed=cfg.stack_seed)


def _task_schedule(stack: ToyStack, cfg: TaskConfig):
    sched = make_schedule(cfg.optimizer.ddim_steps, stack.schedule.kind)
    return sched, stack.denoiser.with_schedule(sched)


def _clean_confidence(classifier, image: torch.Tensor, y: int) -> float:
    with torch.no_grad():
        return classifier.probs(image.clamp(0, 1).unsqueeze(0))[0, y].item()


def _sample_latent(seed: int, shape) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g)


def _initial_inputs(stack: ToyStack, sched, prompt: str, seed: int) -> DiffusionInputs:
    cm = stack.encoder.encode(prompt)
    null = stack.encoder.null_text()
    zT = Latent(_sample_latent(seed, stack.denoiser.latent_shape), sched.T)
    return DiffusionInputs(zT, [cm] * sched.T, [null] * sched.T)


def _decode(stack: ToyStack, denoiser, sched, inputs, w, hooks=None) -> torch.Tensor:
    with torch.no_grad():
        z0 = denoise_loop(inputs, denoiser, sched, w, hooks=hooks)
        return stack.vae.decode(z0)


# ---------------------------------------------------------------------------
# Classifier disagreement
# ---------------------------------------------------------------------------


def run_disagreement(cfg: TaskConfig, stack: Optional[ToyStack] = None) -> Manifest:
    """Generate images that split two classifiers on one class.

    For every seed: sample a starting latent, emit the pre-optimization
    sample, then optimize the confidence gap in each requested direction
    and emit the optimized images with both classifiers' confidences.
    """
    cfg.validate()
    stack = get_stack(cfg, stack)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest.load_or_create(out, cfg.to_dict())
    sched, denoiser = _task_schedule(stack, cfg)
    f, g = stack.classifier_shape, stack.classifier_background
    y = list(stack.world.class_names).index(cfg.classname)
    prompt = build_generic_prompt(cfg.classname, "generation")
    directions = {"f_up": (f, g), "g_up": (g, f)}
    if cfg.directions != "both":
        directions = {cfg.directions: directions[cfg.directions]}

    for seed in cfg.seeds:
        for dname, (a, b) in directions.items():
            stage = f"seed{seed:03d}_{dname}"
            shash = stage_hash({"seed": seed, "dir": dname, "opt": cfg.to_dict()["optimizer"],
                                "class": cfg.classname})
            if manifest.stage_done(stage, shash):
                log.info("skipping completed stage %s", stage)
                continue
            inputs = _initial_inputs(stack, sched, prompt, seed)
            init_img = _decode(stack, denoiser, sched, inputs, cfg.optimizer.guidance_w)
            init_name = f"seed{seed:03d}_init.png"
            save_image_png(init_img, out / init_name)
            manifest.add_file(
                init_name,
                kind="sd_init",
                seed=seed,
                p_f=_clean_confidence(f, init_img, y),
                p_g=_clean_confidence(g, init_img, y),
            )

            objective = DisagreementObjective(a, b, y, cfg.optimizer.augmentation)
            result = optimize(
                objective, inputs, cfg.optimizer, denoiser, stack.vae, sched=sched, seed=seed
            )
            final_img = _decode(stack, denoiser, sched, result.best_inputs, cfg.optimizer.guidance_w)
            final_name = f"seed{seed:03d}_{dname}.png"
            trace_name = f"seed{seed:03d}_{dname}_trace.jsonl"
            save_image_png(final_img, out / final_name)
            result.trace.to_jsonl(out / trace_name)
            p_f_final = _clean_confidence(f, final_img, y)
            p_g_final = _clean_confidence(g, final_img, y)
            manifest.add_file(
                final_name,
                kind="optimized",
                seed=seed,
                direction=dname,
                p_f=p_f_final,
                p_g=p_g_final,
                gap=abs(p_f_final - p_g_final),
                best_loss=result.best_loss,
                best_step=result.best_step,
            )
            manifest.add_file(trace_name, kind="trace", seed=seed, direction=dname)
            manifest.mark_stage(stage, shash, [init_name, final_name, trace_name])
            manifest.save()

    grid_entries = []
    for name, meta in sorted(manifest.data["files"].items()):
        if meta.get("kind") == "sd_init":
            grid_entries.append({"file": name, "label": f"init ({meta['p_f']:.2f} / {meta['p_g']:.2f})"})
        elif meta.get("kind") == "optimized":
            grid_entries.append(
                {"file": name, "label": f"{meta['direction']} ({meta['p_f']:.2f} / {meta['p_g']:.2f})"}
            )
    _emit_run_grid(manifest, grid_entries, out, f"disagreement: {cfg.classname} (A / B)")
    manifest.save()
    manifest.verify_complete()
    return manifest


def _emit_run_grid(manifest: Manifest, entries: list[dict], out: Path, title: str) -> None:
    if not entries:
        return
    cols = min(len(entries), 6)
    rows = (len(entries) + cols - 1) // cols
    emit_grid(entries, (rows, cols), out / "grid.png", base_dir=out, title=title)
    manifest.add_file("grid.png", kind="grid")


# ---------------------------------------------------------------------------
# Neuron visualization
# ---------------------------------------------------------------------------


def run_neuron(cfg: TaskConfig, stack: Optional[ToyStack] = None) -> Manifest:
    """Visualize one penultimate neuron by pushing its activation both ways.

    Starts from the generic prompt of the configured class (which may differ
    from the class the neuron correlates with, for spur-hunting runs) and
    emits the initialization plus the maximized/minimized images annotated
    "activation (confidence)".
    """
    cfg.validate()
    stack = get_stack(cfg, stack)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest.load_or_create(out, cfg.to_dict())
    sched, denoiser = _task_schedule(stack, cfg)
    classifier = stack.classifier_background
    n = cfg.neuron.index if cfg.neuron.index >= 0 else classifier.planted_index
    if not 0 <= n < classifier.feature_dim:
        raise PipelineError(f"neuron index {n} out of range [0, {classifier.feature_dim})")
    tracked = cfg.neuron.tracked_class or cfg.neuron.classname
    y_tracked = list(stack.world.class_names).index(tracked)
    prompt = build_generic_prompt(cfg.neuron.classname, "generation")
    signs = ["maximize", "minimize"] if cfg.neuron.sign == "both" else [cfg.neuron.sign]

    def activation(image: torch.Tensor) -> float:
        with torch.no_grad():
            return classifier.features(image.clamp(0, 1).unsqueeze(0))[0, n].item()

    for seed in cfg.seeds:
        inputs = _initial_inputs(stack, sched, prompt, seed)
        init_img = _decode(stack, denoiser, sched, inputs, cfg.optimizer.guidance_w)
        init_name = f"seed{seed:03d}_init.png"
        init_act = activation(init_img)
        save_image_png(init_img, out / init_name)
        manifest.add_file(
            init_name, kind="sd_init", seed=seed,
            activation=init_act, confidence=_clean_confidence(classifier, init_img, y_tracked),
        )
        for sign in signs:
            stage = f"seed{seed:03d}_{sign}"
            shash = stage_hash({"seed": seed, "sign": sign, "n": n,
                                "opt": cfg.to_dict()["optimizer"], "class": cfg.neuron.classname})
            if manifest.stage_done(stage, shash):
                log.info("skipping completed stage %s", stage)
                continue
            objective = NeuronObjective(
                classifier, n, sign, cfg.optimizer.augmentation, tracked_class=y_tracked
            )
            result = optimize(
                objective, inputs, cfg.optimizer, denoiser, stack.vae, sched=sched, seed=seed
            )
            img = _decode(stack, denoiser, sched, result.best_inputs, cfg.optimizer.guidance_w)
            img_name = f"seed{seed:03d}_{sign}.png"
            trace_name = f"seed{seed:03d}_{sign}_trace.jsonl"
            save_image_png(img, out / img_name)
            result.trace.to_jsonl(out / trace_name)
            manifest.add_file(
                img_name, kind=sign, seed=seed, neuron=n,
                activation=activation(img),
                init_activation=init_act,
                confidence=_clean_confidence(classifier, img, y_tracked),
                best_loss=result.best_loss,
            )
            manifest.add_file(trace_name, kind="trace", seed=seed, sign=sign)
            manifest.mark_stage(stage, shash, [init_name, img_name, trace_name])
            manifest.save()

    entries = []
    for name, meta in sorted(manifest.data["files"].items()):
        if meta.get("kind") in ("sd_init", "maximize", "minimize"):
            entries.append(
                {"file": name, "label": f"{meta['kind']} {meta['activation']:.2f} ({meta['confidence']:.2f})"}
            )
    _emit_run_grid(manifest, entries, out, f"neuron {n}: {cfg.neuron.classname}")
    manifest.save()
    manifest.verify_complete()
    return manifest


# ---------------------------------------------------------------------------
# Universal visual counterfactuals
# ---------------------------------------------------------------------------


def _uvce_input_image(cfg: TaskConfig, stack: ToyStack):
    if cfg.uvce.image_path:
        return load_image_png(Path(cfg.uvce.image_path)), None
    # toy-sampled input of the source class with its ground-truth mask
    rng = np.random.default_rng((stack.world.seed, cfg.uvce.image_seed, 991))
    src = list(stack.world.class_names).index(cfg.uvce.source_class)
    for _ in range(64):
        ex = stack.world.sample(rng, "correlated")
        if ex.label == src and ex.shape_kind == src:
            return torch.from_numpy(ex.image), ex
    raise PipelineError(f"could not sample a {cfg.uvce.source_class!r} example")


def run_uvce(cfg: TaskConfig, stack: Optional[ToyStack] = None) -> Manifest:
    """Counterfactual editing: caption, invert, mask, inject, optimize.

    Aborts before optimization when the null-text inversion cannot
    reconstruct the input within the configured gate, since everything
    downstream depends on that reconstruction.
    """
    cfg.validate()
    stack = get_stack(cfg, stack)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest.load_or_create(out, cfg.to_dict())
    sched, denoiser = _task_schedule(stack, cfg)
    f = stack.classifier_shape
    uv = cfg.uvce
    y_src = list(stack.world.class_names).index(uv.source_class)
    y_tgt = list(stack.world.class_names).index(uv.target_class)

    x_hat, example = _uvce_input_image(cfg, stack)
    orig_name = "original.png"
    save_image_png(x_hat, out / orig_name)
    manifest.add_file(
        orig_name, kind="original",
        p_source=_clean_confidence(f, x_hat, y_src),
        p_target=_clean_confidence(f, x_hat, y_tgt),
    )

    # caption and prompt pair
    generic = build_generic_prompt(uv.source_class, "uvce")
    caption = extend_caption(BackgroundCaptionExtender(), x_hat, generic)
    pair = swap_classname(caption, uv.source_class, uv.target_class)
    C_hat = stack.encoder.encode(pair.source_prompt)
    C_tgt = stack.encoder.encode(pair.target_prompt)
    null = stack.encoder.null_text()
    z_hat = stack.vae.encode(x_hat)

    # inversion (cached on disk so repeated runs resume)
    inv_name = "inversion.pt"
    inv_stage_hash = stage_hash({"caption": caption, "w": cfg.optimizer.guidance_w,
                                 "T": sched.T, "inner": uv.inversion_inner_steps})
    if manifest.stage_done("inversion", inv_stage_hash):
        inversion = load_inversion(out / inv_name)
        log.info("reusing cached inversion (error %.4f)", inversion.reconstruction_error)
    else:
        inversion = null_text_invert(
            z_hat, C_hat, denoiser, sched, w=cfg.optimizer.guidance_w, null_init=null,
            inner_steps=uv.inversion_inner_steps, tol=uv.inversion_tol, lr=uv.inversion_lr,
            inversion_w=uv.inversion_w,
        )
        save_inversion(inversion, out / inv_name)
        manifest.add_file(inv_name, kind="inversion",
                          reconstruction_error=inversion.reconstruction_error)
        manifest.mark_stage("inversion", inv_stage_hash, [inv_name])
        manifest.save()
    if inversion.reconstruction_error > uv.inversion_gate:
        raise InversionGateError(
            f"inversion reconstruction error {inversion.reconstruction_error:.4f} exceeds "
            f"gate {uv.inversion_gate}; refusing to optimize on a bad inversion"
        )

    # attention capture on the reconstruction pass
    hooks = capture_hooks()
    recon_inputs = inversion.inputs_for(C_hat, sched.T)
    recon_img = _decode(stack, denoiser, sched, recon_inputs, cfg.optimizer.guidance_w, hooks=hooks)
    recon_name = "reconstruction.png"
    save_image_png(recon_img, out / recon_name)
    manifest.add_file(recon_name, kind="reconstruction",
                      reconstruction_error=inversion.reconstruction_error)

    # foreground mask from the source class tokens
    class_tokens: list[int] = []
    for wi in pair.source_class_words:
        s0, s1 = C_hat.token_spans[wi]
        class_tokens.extend(range(s0, s1))
    mask = foreground_mask(
        hooks.store, class_tokens, stack.vae.latent_shape, (3,) + tuple(x_hat.shape[-2:])
    )
    mask_name = "mask.png"
    save_mask_png(mask.s_px, out / mask_name)
    mask_meta = {"kind": "mask"}
    if example is not None:
        gt = example.mask > 0.5
        mb = (mask.s_px > 0.5).numpy()
        mask_meta["iou_vs_ground_truth"] = float((mb & gt).sum() / max((mb | gt).sum(), 1))
    manifest.add_file(mask_name, **mask_meta)

    # token alignment for the prompt swap (identity when spans line up)
    alignment = None
    if C_hat.token_spans != C_tgt.token_spans:
        src_words = pair.source_prompt.split()
        tgt_words = pair.target_prompt.split()
        word_w = word_alignment(stack.encoder, src_words, tgt_words)
        alignment = expand_alignment_to_tokens(
            word_w, C_tgt.token_spans, C_hat.token_spans, stack.encoder.token_count
        )

    inj = inject_hooks(hooks.store, uv.inject_fraction, alignment)
    edit_inputs = DiffusionInputs(inversion.z_T, [C_tgt] * sched.T, list(inversion.null_seq))
    init_img = _decode(stack, denoiser, sched, edit_inputs, cfg.optimizer.guidance_w, hooks=inj)
    init_name = "p2p_init.png"
    save_image_png(init_img, out / init_name)
    from .objectives import masked_distance

    with torch.no_grad():
        z0_init = denoise_loop(edit_inputs, denoiser, sched, cfg.optimizer.guidance_w, hooks=inj)
        init_distance = masked_distance(
            z0_init, x_hat, z_hat, mask, uv.weights, decoded=stack.vae.decode(z0_init)
        ).item()
    manifest.add_file(
        init_name, kind="p2p_init",
        p_target=_clean_confidence(f, init_img, y_tgt),
        p_source=_clean_confidence(f, init_img, y_src),
        distance=init_distance,
    )

    objective = VCEObjective(
        f, y_tgt, x_hat, z_hat, mask, uv.weights, cfg.optimizer.augmentation
    )
    seed = cfg.seeds[0]
    result = optimize(
        objective, edit_inputs, cfg.optimizer, denoiser, stack.vae,
        hooks=inj, sched=sched, seed=seed,
    )
    final_img = _decode(stack, denoiser, sched, result.best_inputs, cfg.optimizer.guidance_w, hooks=inj)
    final_name = "uvce.png"
    trace_name = "uvce_trace.jsonl"
    save_image_png(final_img, out / final_name)
    result.trace.to_jsonl(out / trace_name)
    with torch.no_grad():
        z0_fin = denoise_loop(result.best_inputs, denoiser, sched, cfg.optimizer.guidance_w, hooks=inj)
        final_distance = masked_distance(
            z0_fin, x_hat, z_hat, mask, uv.weights, decoded=stack.vae.decode(z0_fin)
        ).item()
    manifest.add_file(
        final_name, kind="uvce",
        p_target=_clean_confidence(f, final_img, y_tgt),
        p_source=_clean_confidence(f, final_img, y_src),
        distance=final_distance,
        init_distance=init_distance,
        best_loss=result.best_loss,
        best_step=result.best_step,
    )
    manifest.add_file(trace_name, kind="trace", seed=seed)

    entries = [
        {"file": orig_name, "label": f"original {uv.source_class}"},
        {"file": recon_name, "label": f"recon err={inversion.reconstruction_error:.3f}"},
        {"file": mask_name, "label": "mask"},
        {"file": init_name, "label": f"init p={manifest.data['files'][init_name]['p_target']:.2f}"},
        {"file": final_name, "label": f"uvce p={manifest.data['files'][final_name]['p_target']:.2f}"},
    ]
    _emit_run_grid(manifest, entries, out, f"uvce: {uv.source_class} -> {uv.target_class}")
    manifest.save()
    manifest.verify_complete()
    return manifest


# ---------------------------------------------------------------------------
# Retrieval validation client
# ---------------------------------------------------------------------------


def retrieval_validate(
    query: str,
    k: int = 5,
    endpoint: Optional[str] = None,
    timeout: float = 10.0,
) -> dict:
    """Query an external image-retrieval endpoint for validation images.

    Degrades gracefully: no endpoint means status "unavailable", network
    failures mean an empty result list with a logged warning; neither is an
    error for the caller.
    """
    if not endpoint:
        return {"status": "unavailable", "query": query, "results": []}
    try:
        resp = requests.get(endpoint, params={"q": query, "k": k}, timeout=timeout)
        resp.raise_for_status()
        payload = resp.json()
        results = payload.get("results", [])[:k]
        return {"status": "ok", "query": query, "results": results}
    except (requests.RequestException, ValueError) as exc:
        log.warning("retrieval query %r failed: %s", query, exc)
        return {"status": "error", "query": query, "results": [], "error": str(exc)}
