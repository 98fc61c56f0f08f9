"""Slice loading, augmentation, and leakage-safe split construction."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, DataError

RAW_MAGIC = 0x46534C32  # "FSL2", raw float32 grid files


@dataclass
class ImageSlice:
    """A single-channel square intensity grid with values in [0, 1]."""

    pixels: np.ndarray
    slice_id: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 2:
            raise ConfigError("ImageSlice pixels must be 2-D")
        if self.pixels.shape[0] != self.pixels.shape[1]:
            raise ConfigError("ImageSlice must be square after loading")
        if not np.all(np.isfinite(self.pixels)):
            raise ConfigError("ImageSlice contains non-finite values")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ConfigError("ImageSlice values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class ManifestRecord:
    slice_id: str
    path: str
    patient_id: str
    fold: int
    class_pixel_counts: dict[str, int]


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    n_folds: int = 5

    def __post_init__(self):
        seen = set()
        for rec in self.records:
            if rec.slice_id in seen:
                raise ConfigError(f"duplicate slice_id {rec.slice_id!r}")
            seen.add(rec.slice_id)
            if not 0 <= rec.fold < self.n_folds:
                raise ConfigError(
                    f"slice {rec.slice_id!r}: fold {rec.fold} outside [0, {self.n_folds})"
                )
            for cls, count in rec.class_pixel_counts.items():
                if count < 0:
                    raise ConfigError(
                        f"slice {rec.slice_id!r}: negative pixel count for class {cls}"
                    )

    def by_id(self, slice_id: str) -> ManifestRecord:
        for rec in self.records:
            if rec.slice_id == slice_id:
                return rec
        raise KeyError(slice_id)


MANIFEST_FIELDS = {"slice_id", "path", "patient_id", "fold", "class_pixel_counts"}


def load_manifest(path: str | Path, n_folds: int = 5) -> DatasetManifest:
    """Parse a newline-delimited JSON manifest, one record per line."""
    records = []
    try:
        fh = open(path)
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}:{lineno}: malformed record: {exc}") from exc
            if set(obj) != MANIFEST_FIELDS:
                raise ConfigError(
                    f"{path}:{lineno}: record fields {sorted(obj)} != {sorted(MANIFEST_FIELDS)}"
                )
            records.append(
                ManifestRecord(
                    slice_id=str(obj["slice_id"]),
                    path=str(obj["path"]),
                    patient_id=str(obj["patient_id"]),
                    fold=int(obj["fold"]),
                    class_pixel_counts={str(k): int(v) for k, v in obj["class_pixel_counts"].items()},
                )
            )
    return DatasetManifest(records=records, n_folds=n_folds)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    with open(path, "w") as fh:
        for rec in manifest.records:
            fh.write(
                json.dumps(
                    {
                        "slice_id": rec.slice_id,
                        "path": rec.path,
                        "patient_id": rec.patient_id,
                        "fold": rec.fold,
                        "class_pixel_counts": rec.class_pixel_counts,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def write_raw_grid(path: str | Path, grid: np.ndarray) -> None:
    """Raw float32 grid: 3 little-endian int32s (magic, H, W), then data."""
    grid = np.asarray(grid, dtype="<f4")
    header = np.array([RAW_MAGIC, grid.shape[0], grid.shape[1]], dtype="<i4")
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(grid.tobytes())


def read_grayscale(path: str | Path) -> np.ndarray:
    """Read a PNG (8/16-bit grayscale) or a raw float32 grid as float32."""
    path = Path(path)
    try:
        if path.suffix.lower() == ".png":
            img = Image.open(path)
            arr = np.asarray(img)
            if arr.ndim != 2:
                raise DataError(f"{path}: expected grayscale, got shape {arr.shape}")
            return arr.astype(np.float32)
        with open(path, "rb") as fh:
            header = np.frombuffer(fh.read(12), dtype="<i4")
            if len(header) != 3 or header[0] != RAW_MAGIC:
                raise DataError(f"{path}: bad raw-grid header")
            h, w = int(header[1]), int(header[2])
            data = np.frombuffer(fh.read(4 * h * w), dtype="<f4")
            if data.size != h * w:
                raise DataError(f"{path}: truncated raw grid")
            return data.reshape(h, w).copy()
    except OSError as exc:
        raise DataError(f"{path}: unreadable image: {exc}") from exc


def bilinear_resize(grid: np.ndarray, target: int) -> np.ndarray:
    """Bilinear resampling with half-pixel-centered sample coordinates."""
    h, w = grid.shape
    if (h, w) == (target, target):
        return grid.astype(np.float32).copy()
    ys = (np.arange(target) + 0.5) * (h / target) - 0.5
    xs = (np.arange(target) + 0.5) * (w / target) - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    g = grid.astype(np.float64)
    out = (
        g[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
        + g[np.ix_(y0, x1)] * (1 - fy) * fx
        + g[np.ix_(y1, x0)] * fy * (1 - fx)
        + g[np.ix_(y1, x1)] * fy * fx
    )
    return out.astype(np.float32)


def nearest_resize(grid: np.ndarray, target: int) -> np.ndarray:
    h, w = grid.shape
    if (h, w) == (target, target):
        return grid.copy()
    ys = np.clip(((np.arange(target) + 0.5) * (h / target)).astype(int), 0, h - 1)
    xs = np.clip(((np.arange(target) + 0.5) * (w / target)).astype(int), 0, w - 1)
    return grid[np.ix_(ys, xs)]


def load_slice(
    record: ManifestRecord,
    target_size: int,
    replicate_channels: int = 1,
    base_dir: str | Path | None = None,
):
    """Load, square-resize, and min-max normalize one slice.

    Returns an ImageSlice for replicate_channels=1, or a (replicate, H, W)
    stacked float32 array of identical channels otherwise.  A zero-dynamic-range
    input becomes an all-zeros slice.
    """
    path = Path(record.path)
    if base_dir is not None and not path.is_absolute():
        path = Path(base_dir) / path
    arr = read_grayscale(path)
    if arr.shape[0] != arr.shape[1]:
        side = max(arr.shape)
        padded = np.zeros((side, side), dtype=np.float32)
        padded[: arr.shape[0], : arr.shape[1]] = arr
        arr = padded
    arr = bilinear_resize(arr, target_size)
    lo, hi = float(arr.min()), float(arr.max())
    if hi > lo:
        arr = (arr - lo) / (hi - lo)
    else:
        arr = np.zeros_like(arr)
    arr = np.clip(arr, 0.0, 1.0)
    sl = ImageSlice(pixels=arr, slice_id=record.slice_id)
    if replicate_channels == 1:
        return sl
    return np.repeat(sl.pixels[None, :, :], replicate_channels, axis=0)


# ---------------------------------------------------------------------------
# Transforms


@dataclass
class TransformSpec:
    """Ranges for the geometric+intensity augmentation family.

    All geometric draws are uniform over the stated interval; the same
    (spec, seed) pair always reproduces the same sampled transform.
    """

    rotation_range: tuple[float, float] = (-15.0, 15.0)  # degrees
    translation_range: tuple[float, float] = (-0.1, 0.1)  # fraction of side
    scale_range: tuple[float, float] = (0.9, 1.1)
    gamma_range: tuple[float, float] = (0.8, 1.25)
    brightness_jitter: tuple[float, float] = (-0.1, 0.1)
    noise_std: float = 0.02

    def __post_init__(self):
        for name in ("rotation_range", "translation_range", "scale_range",
                     "gamma_range", "brightness_jitter"):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi) and lo <= hi):
                raise ConfigError(f"TransformSpec.{name} must be a bounded interval")
        if self.noise_std < 0:
            raise ConfigError("TransformSpec.noise_std must be >= 0")

    @classmethod
    def identity(cls) -> "TransformSpec":
        return cls(
            rotation_range=(0.0, 0.0),
            translation_range=(0.0, 0.0),
            scale_range=(1.0, 1.0),
            gamma_range=(1.0, 1.0),
            brightness_jitter=(0.0, 0.0),
            noise_std=0.0,
        )

    def to_dict(self) -> dict:
        return {
            "rotation_range": list(self.rotation_range),
            "translation_range": list(self.translation_range),
            "scale_range": list(self.scale_range),
            "gamma_range": list(self.gamma_range),
            "brightness_jitter": list(self.brightness_jitter),
            "noise_std": self.noise_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransformSpec":
        return cls(
            rotation_range=tuple(d["rotation_range"]),
            translation_range=tuple(d["translation_range"]),
            scale_range=tuple(d["scale_range"]),
            gamma_range=tuple(d["gamma_range"]),
            brightness_jitter=tuple(d["brightness_jitter"]),
            noise_std=float(d["noise_std"]),
        )


@dataclass
class SampledTransform:
    """One concrete draw from a TransformSpec."""

    rotation_deg: float
    translate: tuple[float, float]  # (dy, dx) fraction of side
    scale: float
    gamma: float
    brightness: float
    noise_seed: int
    noise_std: float

    def is_geometric_identity(self) -> bool:
        return (
            self.rotation_deg == 0.0
            and self.translate == (0.0, 0.0)
            and self.scale == 1.0
        )


def sample_transform(spec: TransformSpec, rng: np.random.Generator) -> SampledTransform:
    return SampledTransform(
        rotation_deg=float(rng.uniform(*spec.rotation_range)),
        translate=(
            float(rng.uniform(*spec.translation_range)),
            float(rng.uniform(*spec.translation_range)),
        ),
        scale=float(rng.uniform(*spec.scale_range)),
        gamma=float(rng.uniform(*spec.gamma_range)),
        brightness=float(rng.uniform(*spec.brightness_jitter)),
        noise_seed=int(rng.integers(0, 2**31 - 1)),
        noise_std=spec.noise_std,
    )


def warp_grid(grid: np.ndarray, t: SampledTransform, order: int,
              inverse: bool = False) -> np.ndarray:
    """Apply the geometric part of a transform about the grid center.

    order=1 for images (bilinear), order=0 for masks (nearest).  With
    inverse=True the exact inverse warp is applied, which recovers the
    original exactly for right-angle rotations and integer translations.
    """
    if t.is_geometric_identity():
        return grid.copy()
    h = grid.shape[0]
    c = (h - 1) / 2.0
    theta = math.radians(t.rotation_deg)
    ty, tx = t.translate[0] * h, t.translate[1] * h
    # forward map: y = s * R(theta) @ (x - c) + c + trans
    rot = np.array(
        [[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]]
    )
    if inverse:
        # inverse map composed forward: y = (1/s) R(-theta) (x - c - trans) + c
        mat = t.scale * rot
        offset = np.array([c + ty, c + tx]) - mat @ np.array([c, c])
    else:
        mat = rot.T / t.scale
        offset = np.array([c, c]) - mat @ (np.array([c, c]) + np.array([ty, tx]))
    out = ndimage.affine_transform(
        grid.astype(np.float64), mat, offset=offset, order=order,
        mode="constant", cval=0.0, prefilter=False,
    )
    return out


def apply_intensity(grid: np.ndarray, t: SampledTransform) -> np.ndarray:
    out = np.clip(grid.astype(np.float64), 0.0, 1.0) ** t.gamma
    out = out + t.brightness
    if t.noise_std > 0:
        noise_rng = np.random.default_rng(t.noise_seed)
        out = out + noise_rng.normal(0.0, t.noise_std, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def apply_transform_to_image(image: ImageSlice, t: SampledTransform) -> ImageSlice:
    warped = warp_grid(image.pixels, t, order=1)
    warped = apply_intensity(warped, t)
    return ImageSlice(pixels=warped.astype(np.float32), slice_id=image.slice_id)


def sample_views(image: ImageSlice, K: int, spec: TransformSpec,
                 seed: int) -> list[ImageSlice]:
    """Generate K independently augmented views of one slice."""
    if K < 2:
        raise ConfigError("K must be >= 2: contrastive learning needs a positive pair")
    views = []
    for k in range(K):
        rng = np.random.default_rng([seed, k])
        t = sample_transform(spec, rng)
        views.append(apply_transform_to_image(image, t))
    return views


def apply_paired_transform(image: ImageSlice, mask: np.ndarray,
                           spec: TransformSpec, seed: int) -> tuple[ImageSlice, np.ndarray]:
    """Warp image and mask with one shared geometric draw.

    The image is interpolated bilinearly and additionally intensity-jittered;
    the mask is warped nearest-neighbor and stays {0,1}-valued.
    """
    mask = np.asarray(mask)
    if mask.shape != image.pixels.shape:
        raise ConfigError("image and mask shapes differ")
    if not np.all(np.isin(mask, (0, 1))):
        raise ConfigError("mask must be {0,1}-valued")
    rng = np.random.default_rng([seed])
    t = sample_transform(spec, rng)
    warped_img = apply_intensity(warp_grid(image.pixels, t, order=1), t)
    warped_mask = warp_grid(mask.astype(np.float64), t, order=0)
    out_img = ImageSlice(pixels=warped_img.astype(np.float32), slice_id=image.slice_id)
    return out_img, warped_mask.astype(np.uint8)


# ---------------------------------------------------------------------------
# Splits


@dataclass
class SplitPlan:
    setting: int
    test_classes: frozenset[str]
    train_slice_ids: list[str]
    test_slice_ids: list[str]

    def __post_init__(self):
        if set(self.train_slice_ids) & set(self.test_slice_ids):
            raise ConfigError("train and test slice sets overlap")


def _has_test_class(rec: ManifestRecord, test_classes) -> bool:
    return any(rec.class_pixel_counts.get(str(c), 0) > 0 for c in test_classes)


def build_split(manifest: DatasetManifest, fold: int, setting: int,
                test_classes) -> SplitPlan:
    """Fold-based split; under setting 2 every slice touching a test class
    is dropped from training entirely."""
    if setting not in (1, 2):
        raise ConfigError(f"setting must be 1 or 2, got {setting}")
    if not test_classes:
        raise ConfigError("test_classes must be non-empty")
    if not 0 <= fold < manifest.n_folds:
        raise ConfigError(f"fold {fold} outside [0, {manifest.n_folds})")
    test_classes = frozenset(str(c) for c in test_classes)
    train, test = [], []
    for rec in manifest.records:
        if rec.fold == fold:
            if _has_test_class(rec, test_classes):
                test.append(rec.slice_id)
            continue
        if setting == 2 and _has_test_class(rec, test_classes):
            continue
        train.append(rec.slice_id)
    if not train:
        raise ConfigError("split produced an empty training set")
    return SplitPlan(setting=setting, test_classes=test_classes,
                     train_slice_ids=train, test_slice_ids=test)
