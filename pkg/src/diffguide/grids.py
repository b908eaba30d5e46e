"""Figure-style image grids rendered to files with matplotlib.

Grids are built from a run manifest: each cell shows one output image with
its metric annotation.  Study mode lays out counterfactual pairs with the
method-to-letter assignment randomized per example under a recorded seed.
"""

from __future__ import annotations

import random
from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from PIL import Image


class GridError(RuntimeError):
    pass


def _load(path: Path) -> np.ndarray:
    if not path.exists():
        raise GridError(f"grid references missing file {path}")
    return np.asarray(Image.open(path))


def emit_grid(
    entries: list[dict],
    layout: tuple[int, int],
    out_path,
    base_dir: Optional[Path] = None,
    title: Optional[str] = None,
    cell_inches: float = 2.0,
) -> Path:
    """Render labeled images into a rows x cols figure.

    Each entry is ``{"file": name, "label": text}``; files resolve against
    ``base_dir``.  Cells beyond the entry list stay blank.
    """
    rows, cols = layout
    if rows * cols < len(entries):
        raise GridError(f"layout {rows}x{cols} cannot hold {len(entries)} images")
    base = Path(base_dir) if base_dir else Path(".")
    fig, axes = plt.subplots(rows, cols, figsize=(cols * cell_inches, rows * cell_inches * 1.12))
    axes = np.atleast_1d(axes).reshape(rows, cols)
    for ax in axes.flat:
        ax.axis("off")
    for ax, entry in zip(axes.flat, entries):
        ax.imshow(_load(base / entry["file"]))
        ax.set_title(entry.get("label", ""), fontsize=7)
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def emit_study_bundle(
    examples: list[dict],
    out_path,
    seed: int,
    base_dir: Optional[Path] = None,
    cell_inches: float = 2.0,
) -> dict:
    """Blinded side-by-side bundle for human comparison of two methods.

    Each example supplies ``original``, ``method_a``, ``method_b`` files;
    which method lands on which letter is drawn per example from the seed,
    and the assignment is returned so answers can be unblinded later.
    """
    rng = random.Random(seed)
    assignment = []
    entries = []
    for i, ex in enumerate(examples):
        flip = rng.random() < 0.5
        first, second = ("method_b", "method_a") if flip else ("method_a", "method_b")
        assignment.append({"example": i, "A": ex[first], "B": ex[second], "flipped": flip})
        entries.append({"file": ex["original"], "label": f"Original {i}"})
        entries.append({"file": ex[first], "label": f"Counterfactual A"})
        entries.append({"file": ex[second], "label": f"Counterfactual B"})
    emit_grid(entries, (len(examples), 3), out_path, base_dir=base_dir, cell_inches=cell_inches)
    return {"seed": seed, "assignment": assignment, "file": str(out_path)}
