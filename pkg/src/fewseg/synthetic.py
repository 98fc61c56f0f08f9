"""Synthetic multi-organ slice generator: a desk-scale stand-in dataset.

Each "patient" contributes slices at two axial levels: one showing the
class-{1,2} organ group, one showing the class-{3,4} group.  Organs are
textured ellipses in class-specific intensity bands over a darker textured
background, with per-patient geometric variation.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .data import DatasetManifest, ManifestRecord, save_manifest, nearest_resize

CLASS_GROUPS = {"A": (1, 2), "B": (3, 4)}
CLASS_INTENSITY = {1: 0.90, 2: 0.68, 3: 0.50, 4: 0.32}
BACKGROUND_LEVEL = 0.10
SLICES_PER_GROUP = 2
N_FOLDS = 5


def _smooth_noise(rng: np.random.Generator, size: int, sigma: float,
                  amplitude: float) -> np.ndarray:
    noise = rng.normal(0.0, 1.0, (size, size))
    noise = ndimage.gaussian_filter(noise, sigma)
    peak = np.abs(noise).max()
    if peak > 0:
        noise = noise / peak
    return amplitude * noise


def _ellipse_mask(size: int, cy: float, cx: float, ry: float, rx: float,
                  theta: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    y, x = yy - cy, xx - cx
    ct, st = np.cos(theta), np.sin(theta)
    u = ct * y + st * x
    v = -st * y + ct * x
    return ((u / ry) ** 2 + (v / rx) ** 2) <= 1.0


def _patient_geometry(rng: np.random.Generator, size: int) -> dict[int, tuple]:
    # one anchor quadrant per class; sizes and pose vary per patient
    anchors = {1: (0.30, 0.30), 2: (0.30, 0.70), 3: (0.70, 0.30), 4: (0.70, 0.70)}
    base = 0.14 * size
    geometry = {}
    for cls in sorted(anchors):
        ay, ax = anchors[cls]
        geometry[cls] = (
            ay * size + rng.uniform(-0.04, 0.04) * size,
            ax * size + rng.uniform(-0.04, 0.04) * size,
            base * rng.uniform(0.9, 1.25),
            base * rng.uniform(0.9, 1.25),
            rng.uniform(0, np.pi),
        )
    return geometry


def render_slice(rng: np.random.Generator, size: int, classes: tuple[int, ...],
                 geometry: dict[int, tuple]) -> tuple[np.ndarray, np.ndarray]:
    """Returns (image in [0,1], label map with 0 background)."""
    image = BACKGROUND_LEVEL + _smooth_noise(rng, size, sigma=1.5, amplitude=0.05)
    labels = np.zeros((size, size), dtype=np.uint8)
    for cls in classes:
        cy, cx, ry, rx, theta = geometry[cls]
        cy += rng.uniform(-0.02, 0.02) * size
        cx += rng.uniform(-0.02, 0.02) * size
        mask = _ellipse_mask(size, cy, cx, ry, rx, theta)
        mask &= labels == 0
        texture = _smooth_noise(rng, size, sigma=1.0, amplitude=0.05)
        image[mask] = CLASS_INTENSITY[cls] + texture[mask]
        labels[mask] = cls
    image = image + rng.normal(0.0, 0.01, image.shape)
    return np.clip(image, 0.0, 1.0), labels


def write_png16(path: Path, image: np.ndarray) -> None:
    arr = np.clip(np.round(image * 65535.0), 0, 65535).astype(np.uint16)
    Image.fromarray(arr).save(path)


def label_path_for(image_path: str | Path) -> Path:
    p = Path(image_path)
    return p.with_name(p.stem + "_labels.png")


def load_label_map(record: ManifestRecord, target_size: int,
                   base_dir: str | Path | None = None) -> np.ndarray:
    path = Path(record.path)
    if base_dir is not None and not path.is_absolute():
        path = Path(base_dir) / path
    labels = np.asarray(Image.open(label_path_for(path)))
    return nearest_resize(labels, target_size)


def gen_synthetic(n_patients: int, image_size: int, seed: int,
                  out_dir: str | Path) -> Path:
    """Write images, label maps, and a newline-delimited JSON manifest.

    Fold assignment cycles patients through the 5 folds so every fold holds
    both organ groups.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for p in range(n_patients):
        geometry = _patient_geometry(np.random.default_rng([seed, p]), image_size)
        for group, classes in CLASS_GROUPS.items():
            for s in range(SLICES_PER_GROUP):
                rng = np.random.default_rng([seed, p, ord(group), s])
                image, labels = render_slice(rng, image_size, classes, geometry)
                slice_id = f"p{p:03d}_{group}{s}"
                rel = Path("images") / f"{slice_id}.png"
                write_png16(out_dir / rel, image)
                Image.fromarray(labels, mode="L").save(
                    out_dir / label_path_for(rel))
                counts = {
                    str(c): int((labels == c).sum()) for c in sorted(CLASS_INTENSITY)
                }
                records.append(
                    ManifestRecord(
                        slice_id=slice_id, path=str(rel),
                        patient_id=f"p{p:03d}", fold=p % N_FOLDS,
                        class_pixel_counts=counts,
                    )
                )
    manifest = DatasetManifest(records=records, n_folds=N_FOLDS)
    manifest_path = out_dir / "manifest.jsonl"
    save_manifest(manifest, manifest_path)
    return manifest_path
