"""Desk-scale dataset provisioning.

Two deterministic synthetic tasks (shape classification over textured
backgrounds, blob segmentation) plus a PNG folder-ingestion path. Images are
float32 (N, C, H, W) normalized to [-1, 1]; classification labels are int64
(N,), segmentation label maps int64 (N, H, W). Everything is a pure function
of the dataset seed.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .config import DatasetConfig
from .errors import ConfigError

log = logging.getLogger(__name__)

SHAPE_CLASSES = ("ellipse", "rectangle", "triangle", "cross")


@dataclass
class SplitDataset:
    spec: DatasetConfig
    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    fingerprint: str
    task: str

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes


def normalize(u8: np.ndarray) -> np.ndarray:
    """Map 8-bit intensities [0, 255] to float32 [-1, 1]."""
    return (u8.astype(np.float32) / 255.0) * 2.0 - 1.0


def denormalize(x: np.ndarray) -> np.ndarray:
    """Inverse of ``normalize``; rounds back to uint8."""
    return np.clip(np.round((x + 1.0) * 0.5 * 255.0), 0, 255).astype(np.uint8)


def dataset_fingerprint(images: np.ndarray, labels: np.ndarray) -> str:
    """SHA-256 over all sample bytes in generation order."""
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(images).tobytes())
    h.update(np.ascontiguousarray(labels).tobytes())
    return h.hexdigest()


def _rng(spec: DatasetConfig, *stream) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([spec.seed, *stream]))


def _upsample_bilinear(coarse: np.ndarray, out: int) -> np.ndarray:
    """Separable linear upsampling of a (C, h, w) grid to (C, out, out)."""
    c, h, w = coarse.shape
    yi = np.linspace(0, h - 1, out)
    xi = np.linspace(0, w - 1, out)
    y0 = np.clip(np.floor(yi).astype(int), 0, h - 2)
    x0 = np.clip(np.floor(xi).astype(int), 0, w - 2)
    fy = (yi - y0)[None, :, None]
    fx = (xi - x0)[None, None, :]
    a = coarse[:, y0][:, :, x0]
    b = coarse[:, y0][:, :, x0 + 1]
    cc = coarse[:, y0 + 1][:, :, x0]
    d = coarse[:, y0 + 1][:, :, x0 + 1]
    return (a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + cc * fy * (1 - fx) + d * fy * fx)


def _background(rng, channels: int, res: int) -> np.ndarray:
    """Smooth low-frequency texture in [0, 1], mid-grey on average."""
    coarse = rng.uniform(0.25, 0.6, size=(channels, 5, 5))
    return _upsample_bilinear(coarse, res)


def _shape_mask(kind: str, rng, res: int) -> np.ndarray:
    """Boolean mask of one randomly posed shape; pose/scale are nuisance."""
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    cx, cy = rng.uniform(0.35 * res, 0.65 * res, size=2)
    scale = rng.uniform(0.16, 0.30) * res
    theta = rng.uniform(0, np.pi)
    u = np.cos(theta) * (xx - cx) + np.sin(theta) * (yy - cy)
    v = -np.sin(theta) * (xx - cx) + np.cos(theta) * (yy - cy)
    if kind == "ellipse":
        rx, ry = scale, scale * rng.uniform(0.45, 0.7)
        return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    if kind == "rectangle":
        rx, ry = scale, scale * rng.uniform(0.45, 0.7)
        return (np.abs(u) <= rx) & (np.abs(v) <= ry)
    if kind == "triangle":
        angles = theta + np.array([0, 2 * np.pi / 3, 4 * np.pi / 3])
        px = cx + 1.25 * scale * np.cos(angles)
        py = cy + 1.25 * scale * np.sin(angles)
        mask = np.ones((res, res), dtype=bool)
        for i in range(3):
            ex, ey = px[(i + 1) % 3] - px[i], py[(i + 1) % 3] - py[i]
            mask &= (ex * (yy - py[i]) - ey * (xx - px[i])) >= 0
        return mask
    if kind == "cross":
        bar = scale * rng.uniform(0.25, 0.4)
        return ((np.abs(u) <= scale) & (np.abs(v) <= bar)) | ((np.abs(v) <= scale) & (np.abs(u) <= bar))
    raise ValueError(f"unknown shape {kind!r}")


def make_synthetic_cls(spec: DatasetConfig) -> SplitDataset:
    """Colored geometric shapes on textured backgrounds; label = shape class.

    Class-balanced; position, scale, orientation and hue vary per sample.
    """
    if spec.kind != "synthetic-cls":
        raise ConfigError(f"expected kind synthetic-cls, got {spec.kind!r}")
    if spec.resolution < 16:
        raise ValueError(f"resolution must be >= 16, got {spec.resolution}")
    if spec.num_classes > len(SHAPE_CLASSES):
        raise ConfigError(f"synthetic-cls supports at most {len(SHAPE_CLASSES)} classes")
    rng = _rng(spec, 1)
    res, chans = spec.resolution, spec.channels
    labels = np.arange(spec.size, dtype=np.int64) % spec.num_classes
    rng.shuffle(labels)
    images = np.empty((spec.size, chans, res, res), dtype=np.float32)
    for i, lab in enumerate(labels):
        bg = _background(rng, chans, res)
        mask = _shape_mask(SHAPE_CLASSES[lab], rng, res)
        color = rng.uniform(0.55, 1.0, size=(chans, 1, 1))
        img = np.where(mask[None], color, bg)
        img = img + rng.normal(0.0, 0.015, size=img.shape)
        images[i] = (np.clip(img, 0.0, 1.0) * 2.0 - 1.0).astype(np.float32)
    return _finish(spec, images, labels, "classification")


def make_synthetic_seg(spec: DatasetConfig) -> SplitDataset:
    """Blob-like foreground structures; label maps carry per-pixel class ids.

    Class k in 1..num_classes-1 contributes one ellipse blob per sample;
    class 0 is background.
    """
    if spec.kind != "synthetic-seg":
        raise ConfigError(f"expected kind synthetic-seg, got {spec.kind!r}")
    if spec.resolution < 16:
        raise ValueError(f"resolution must be >= 16, got {spec.resolution}")
    rng = _rng(spec, 2)
    res, chans = spec.resolution, spec.channels
    n_fg = spec.num_classes - 1
    images = np.empty((spec.size, chans, res, res), dtype=np.float32)
    labels = np.zeros((spec.size, res, res), dtype=np.int64)
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    for i in range(spec.size):
        bg = _background(rng, chans, res)
        lab = np.zeros((res, res), dtype=np.int64)
        img = bg
        for k in range(1, n_fg + 1):
            cx = rng.uniform(0.25 * res, 0.75 * res)
            cy = rng.uniform(0.25 * res, 0.75 * res)
            rx = rng.uniform(0.10, 0.20) * res
            ry = rng.uniform(0.10, 0.20) * res
            blob = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
            lab[blob] = k
            level = rng.uniform(0.6, 0.95)
            img = np.where(blob[None], level + 0.25 * (bg - 0.4), img)
        img = img + rng.normal(0.0, 0.015, size=img.shape)
        images[i] = (np.clip(img, 0.0, 1.0) * 2.0 - 1.0).astype(np.float32)
        labels[i] = lab
    return _finish(spec, images, labels, "segmentation")


def ingest_folder(path, spec: DatasetConfig) -> SplitDataset:
    """Load a PNG directory tree, resize to spec resolution, normalize.

    Classification: one subdirectory per class. Segmentation: ``images/`` and
    ``masks/`` subdirectories with matching filenames. File order is
    lexicographic by path; unreadable files are skipped with a warning.
    """
    root = Path(path)
    if not root.is_dir():
        raise ConfigError(f"dataset folder not found: {root}")
    task = spec.resolved_task()
    res = spec.resolution
    images, labels = [], []
    if task == "classification":
        class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
        if not class_dirs:
            raise ConfigError(f"no class subdirectories in {root}")
        for class_idx, cdir in enumerate(class_dirs):
            files = sorted(cdir.glob("*.png"))
            count = 0
            for f in files:
                arr = _load_png(f, spec.channels, res, resample=PILImage.BILINEAR)
                if arr is None:
                    continue
                images.append(normalize(arr))
                labels.append(class_idx)
                count += 1
            if count == 0:
                raise ConfigError(f"class directory {cdir} contains no readable PNG files")
        label_arr = np.asarray(labels, dtype=np.int64)
    else:
        img_dir, mask_dir = root / "images", root / "masks"
        if not img_dir.is_dir() or not mask_dir.is_dir():
            raise ConfigError(f"segmentation folder needs images/ and masks/ under {root}")
        files = sorted(img_dir.glob("*.png"))
        if not files:
            raise ConfigError(f"no PNG files in {img_dir}")
        masks = []
        for f in files:
            mask_path = mask_dir / f.name
            if not mask_path.exists():
                raise ConfigError(f"missing mask for image {f.name}: expected {mask_path}")
            arr = _load_png(f, spec.channels, res, resample=PILImage.BILINEAR)
            if arr is None:
                continue
            m = _load_png(mask_path, 1, res, resample=PILImage.NEAREST)
            if m is None:
                raise ConfigError(f"mask unreadable for image {f.name}: {mask_path}")
            images.append(normalize(arr))
            masks.append(m[0].astype(np.int64))
        label_arr = np.stack(masks)
    image_arr = np.stack(images)
    return _finish(spec, image_arr, label_arr, task)


def _load_png(path: Path, channels: int, res: int, resample):
    try:
        with PILImage.open(path) as im:
            im = im.convert("RGB" if channels == 3 else "L")
            im = im.resize((res, res), resample=resample)
            arr = np.asarray(im, dtype=np.uint8)
    except Exception as e:  # unreadable file: skip, warn
        log.warning("skipping unreadable file %s: %s", path, e)
        return None
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    if arr.shape[0] != channels:
        arr = arr[:channels]
    return arr


def _finish(spec: DatasetConfig, images: np.ndarray, labels: np.ndarray, task: str) -> SplitDataset:
    lo, hi = float(images.min()), float(images.max())
    if lo < -1 - 1e-6 or hi > 1 + 1e-6:
        raise ValueError(f"normalized intensities out of range: [{lo}, {hi}]")
    fingerprint = dataset_fingerprint(images, labels)
    n = images.shape[0]
    perm = _rng(spec, 3).permutation(n)
    n_train = int(round(spec.train_fraction * n))
    n_train = min(max(n_train, 1), n - 1)
    tr, te = perm[:n_train], perm[n_train:]
    return SplitDataset(
        spec=spec,
        train_images=images[tr], train_labels=labels[tr],
        test_images=images[te], test_labels=labels[te],
        fingerprint=fingerprint, task=task,
    )


def build_dataset(spec: DatasetConfig) -> SplitDataset:
    if spec.kind == "synthetic-cls":
        return make_synthetic_cls(spec)
    if spec.kind == "synthetic-seg":
        return make_synthetic_seg(spec)
    if spec.kind == "folder":
        return ingest_folder(spec.path, spec)
    raise ConfigError(f"unknown dataset kind {spec.kind!r}")
