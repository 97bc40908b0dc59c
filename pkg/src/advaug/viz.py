"""Augmentation-grid rendering: one row per generator kind, one column per
sampled epoch, plus a leading reference column with the untouched probe image.

The probe image and the per-row noise vectors are fixed, so differences
across columns reflect generator training alone. Output bytes are a pure
function of the checkpoints and seeds.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage

from .checkpoint import load_checkpoint
from .config import RunConfig
from .data import build_dataset, denormalize
from .errors import ConfigError
from .generators import apply_augmentation
from .trainer import TripletState

CELL_PAD = 2


def _epoch_checkpoint(run_dir: Path, epoch: int) -> Path:
    path = run_dir / f"checkpoint_epoch{epoch:04d}.npz"
    if not path.exists():
        available = sorted(
            int(p.stem.replace("checkpoint_epoch", ""))
            for p in run_dir.glob("checkpoint_epoch*.npz")
        )
        raise ConfigError(
            f"no checkpoint for epoch {epoch} in {run_dir}; available epochs: {available}"
        )
    return path


def render_augmentation_grid(run_dir, epochs, out_path=None, probe_index: int = 0):
    """Render the grid PNG for the given run directory and epoch list."""
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json"
    if not run_dir.is_dir() or not manifest_path.exists():
        raise ConfigError(f"run directory {run_dir} does not exist or has no manifest.json")
    manifest = json.loads(manifest_path.read_text())
    config = RunConfig.from_dict(manifest["config"])
    dataset = build_dataset(config.dataset)
    pool = dataset.test_images if len(dataset.test_images) else dataset.train_images
    probe = torch.as_tensor(pool[probe_index:probe_index + 1], dtype=torch.float32)
    kinds = tuple(config.train.enabled_generators)
    if not kinds:
        raise ConfigError("run has no enabled generators; nothing to visualize")

    noise = {}
    for row, kind in enumerate(kinds):
        g = torch.Generator().manual_seed(config.train.seed * 1000 + row)
        noise[kind] = torch.randn(1, config.model.noise_dim, generator=g)

    cells: dict[tuple[int, int], np.ndarray] = {}
    for col, epoch in enumerate(epochs):
        ckpt = _epoch_checkpoint(run_dir, epoch)
        state = TripletState(config)
        load_checkpoint(ckpt, state)
        state.set_train(False)
        with torch.no_grad():
            for row, kind in enumerate(kinds):
                out = state.generators[kind](noise[kind], probe)
                aug, _ = apply_augmentation(out, probe)
                cells[(row, col)] = aug[0].numpy()

    grid = _assemble(probe[0].numpy(), cells, n_rows=len(kinds), n_cols=len(epochs))
    if out_path is None:
        out_path = run_dir / ("grid_epochs_" + "-".join(str(e) for e in epochs) + ".png")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(grid).save(out_path, format="PNG")
    return out_path


def _to_rgb(chw: np.ndarray) -> np.ndarray:
    u8 = denormalize(chw)
    if u8.shape[0] == 1:
        u8 = np.repeat(u8, 3, axis=0)
    return u8[:3].transpose(1, 2, 0)


def _assemble(reference: np.ndarray, cells, n_rows: int, n_cols: int) -> np.ndarray:
    h, w = reference.shape[-2:]
    total_h = n_rows * h + (n_rows + 1) * CELL_PAD
    total_w = (n_cols + 1) * w + (n_cols + 2) * CELL_PAD
    grid = np.full((total_h, total_w, 3), 255, dtype=np.uint8)
    ref = _to_rgb(reference)
    for row in range(n_rows):
        y = CELL_PAD + row * (h + CELL_PAD)
        grid[y:y + h, CELL_PAD:CELL_PAD + w] = ref
        for col in range(n_cols):
            x = CELL_PAD + (col + 1) * (w + CELL_PAD)
            grid[y:y + h, x:x + w] = _to_rgb(cells[(row, col)])
    return grid
