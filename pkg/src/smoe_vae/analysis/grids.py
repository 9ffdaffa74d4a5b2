"""Per-expert input/reconstruction grids written as binary PGM (P5)."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from ..data import Dataset, SIDE
from ..backbone import make_rng
from ..model import SmoeVae
from .specialization import AssignmentTable, utilization

GAP = 2
GAP_VALUE = 128


def write_pgm(path, img: np.ndarray):
    img = np.ascontiguousarray(img, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    magic, dims, maxval, rest = buf.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = map(int, dims.split())
    return np.frombuffer(rest, dtype=np.uint8).reshape(h, w)


def grid_shape(per_expert, gap=GAP):
    """(height, width) of a two-row grid with ``per_expert`` columns."""
    return 2 * SIDE + 3 * gap, per_expert * SIDE + (per_expert + 1) * gap


def compose_grid(top: np.ndarray, bottom: np.ndarray, per_expert, gap=GAP):
    h, w = grid_shape(per_expert, gap)
    canvas = np.full((h, w), GAP_VALUE, dtype=np.uint8)
    for row, imgs in enumerate((top, bottom)):
        y = gap + row * (SIDE + gap)
        for col, img in enumerate(imgs):
            x = gap + col * (SIDE + gap)
            canvas[y:y + SIDE, x:x + SIDE] = img
    return canvas


def recon_grid(model: SmoeVae, table: AssignmentTable, dataset: Dataset, out_dir, per_expert=5, seed=0,
               gap=GAP):
    """Write ``expert_XX.pgm`` per routed expert plus ``captions.txt``; returns the PGM paths.

    Top row holds randomly chosen inputs routed to the expert, bottom row their
    reconstructions by that expert. Experts with no routed samples get no image.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fractions, _ = utilization(table)
    rng = make_rng(seed)
    written, lines, skipped = [], [], []
    for e in range(table.num_experts):
        rows = np.flatnonzero(table.experts == e)
        if len(rows) == 0:
            skipped.append(e)
            continue
        pick = np.sort(rng.choice(rows, size=min(per_expert, len(rows)), replace=False))
        x = dataset.images[pick].astype(np.float32)[:, None] / np.float32(255.0)
        x_hat, _, _, _ = model.forward_hard(x, experts=np.full(len(pick), e))
        recon = np.clip(np.round(x_hat[:, 0] * 255), 0, 255).astype(np.uint8)
        path = out / f"expert_{e:02d}.pgm"
        write_pgm(path, compose_grid(dataset.images[pick], recon, per_expert, gap))
        written.append(path)
        names = [dataset.class_names[dataset.labels[i]] for i in pick]
        lines.append(f"expert {e}: utilization {100 * fractions[e]:.1f}% labels: {', '.join(names)}")
    if skipped:
        lines.append("skipped (no routed samples): " + ", ".join(str(e) for e in skipped))
    (out / "captions.txt").write_text("\n".join(lines) + "\n")
    return written
