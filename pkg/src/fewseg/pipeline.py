"""Phase orchestration: training loops, episodic evaluation, feature export."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import shutil
import time
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import PipelineConfig
from .data import ImageSlice, build_split, load_manifest, load_slice
from .encoder import FewsegModel, load_checkpoint, save_checkpoint
from .errors import (ConfigError, DataError, EpisodeConstructionError,
                     EpisodeSkipError, NumericalError, SelectionExhaustedError)
from .protoseg import extract_prototypes, predict_mask, stage2_loss
from .stage1 import Stage1Trainer
from .superpixel import (FewShotEpisode, build_episode, felzenszwalb_segment,
                         select_pseudo_label)
from .synthetic import load_label_map
from .data import sample_views


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """Sorensen-Dice overlap; two empty masks score 1.0 by convention."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ConfigError(f"shape mismatch {pred.shape} vs {gt.shape}")
    for m in (pred, gt):
        if not np.all(np.isin(m, (0, 1))):
            raise ConfigError("dice inputs must be {0,1}-valued")
    denom = int(pred.sum()) + int(gt.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((pred * gt).sum()) / denom


def derive_seed(root: int, *tags) -> int:
    """Counter scheme for per-task seeds: sha256 over 'root/tag/tag/...'."""
    text = str(root) + "/" + "/".join(str(t) for t in tags)
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:4], "little")


class SliceStore:
    """Lazy cache of loaded slices, label maps, and superpixel maps."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.manifest = load_manifest(cfg.data.manifest)
        self.base_dir = Path(cfg.data.manifest).parent
        self._slices: dict[str, ImageSlice] = {}
        self._labels: dict[str, np.ndarray] = {}
        self._spmaps: dict[str, object] = {}

    def image(self, slice_id: str) -> ImageSlice:
        if slice_id not in self._slices:
            rec = self.manifest.by_id(slice_id)
            self._slices[slice_id] = load_slice(
                rec, self.cfg.data.image_size,
                replicate_channels=1, base_dir=self.base_dir,
            )
        return self._slices[slice_id]

    def labels(self, slice_id: str) -> np.ndarray:
        if slice_id not in self._labels:
            rec = self.manifest.by_id(slice_id)
            self._labels[slice_id] = load_label_map(
                rec, self.cfg.data.image_size, base_dir=self.base_dir,
            )
        return self._labels[slice_id]

    def class_mask(self, slice_id: str, cls: str) -> np.ndarray:
        return (self.labels(slice_id) == int(cls)).astype(np.uint8)

    def superpixels(self, slice_id: str):
        if slice_id not in self._spmaps:
            self._spmaps[slice_id] = felzenszwalb_segment(
                self.image(slice_id), self.cfg.felz)
        return self._spmaps[slice_id]


def _write_loss_csv(path: Path, rows: list[tuple[int, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss"])
        for it, loss in rows:
            writer.writerow([it, f"{loss:.8f}"])


def _cosine_lr(base_lr: float, step: int, total: int) -> float:
    frac = min(step / max(total, 1), 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def _init_model(cfg: PipelineConfig) -> FewsegModel:
    torch.manual_seed(derive_seed(cfg.seed, "init"))
    return FewsegModel(cfg.encoder)


def _prepare_run(cfg: PipelineConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(1)  # keeps summation order stable run-to-run
    return out


def run_stage1(cfg: PipelineConfig) -> Path:
    """Dense+global contrastive pre-training over the training split."""
    out = _prepare_run(cfg)
    split = build_split(load_manifest(cfg.data.manifest), cfg.data.fold,
                        cfg.data.setting, cfg.data.test_classes)
    if len(split.train_slice_ids) < 2:
        raise ConfigError("stage 1 needs at least 2 training slices")
    store = SliceStore(cfg)
    model = _init_model(cfg)
    trainer = Stage1Trainer(model, cfg.stage1)
    losses = []
    n_train = len(split.train_slice_ids)
    batch = min(cfg.stage1.batch_images, n_train)
    for it in range(cfg.stage1.iterations):
        rng = np.random.default_rng(derive_seed(cfg.seed, "stage1", it))
        picks = rng.choice(n_train, size=batch, replace=False)
        views = []
        for j, idx in enumerate(picks):
            image = store.image(split.train_slice_ids[int(idx)])
            vs = sample_views(image, cfg.stage1.K, cfg.view_transform,
                              seed=derive_seed(cfg.seed, "stage1-view", it, j))
            views.append(np.stack([v.pixels for v in vs]))
        batch_views = torch.from_numpy(np.stack(views)).unsqueeze(2)
        loss = trainer.step(batch_views)
        losses.append((it, loss))
    _write_loss_csv(out / "stage1_loss.csv", losses)
    ckpt = out / "stage1.ckpt"
    save_checkpoint(ckpt, model, extra={"phase": "stage1",
                                        "iterations": cfg.stage1.iterations})
    return ckpt


def _pseudo_episode(cfg: PipelineConfig, store: SliceStore,
                    train_ids: list[str], seed: int) -> FewShotEpisode:
    """One superpixel pseudo-label episode; raises DataError subclasses on
    unusable draws so the caller can resample."""
    rng = np.random.default_rng(seed)
    slice_id = train_ids[int(rng.integers(0, len(train_ids)))]
    spmap = store.superpixels(slice_id)
    pseudo = select_pseudo_label(spmap, cfg.min_fg,
                                 rng_seed=derive_seed(seed, "select"))
    return build_episode(store.image(slice_id), pseudo, cfg.episode_transform,
                         seed=derive_seed(seed, "episode"))


def _episode_dice(model: FewsegModel, episode: FewShotEpisode, cfg: PipelineConfig) -> float:
    with torch.no_grad():
        f_s = model.encode(torch.from_numpy(episode.support_image.pixels))[0]
        f_q = model.encode(torch.from_numpy(episode.query_image.pixels))[0]
        try:
            protos = extract_prototypes(
                f_s, torch.from_numpy(np.ascontiguousarray(episode.support_mask)),
                cfg.stage2)
        except EpisodeSkipError:
            return 0.0
        pred = predict_mask(protos, f_q, cfg.stage2.alpha,
                            episode.query_mask.shape[-1])
    return dice(pred.numpy(), episode.query_mask)


def _train_episodic(cfg: PipelineConfig, model: FewsegModel, out: Path,
                    phase: str, iterations: int, lr: float, momentum: float,
                    episode_fn) -> list[tuple[int, float]]:
    params = model.backbone.parameters() if cfg.finetune.unfreeze == "backbone" \
        and phase == "finetune" else model.parameters()
    optimizer = torch.optim.SGD(params, lr=lr, momentum=momentum)
    losses = []
    consecutive_failures = 0
    for it in range(iterations):
        episode = None
        while episode is None:
            try:
                episode = episode_fn(it, consecutive_failures)
            except (SelectionExhaustedError, EpisodeConstructionError,
                    EpisodeSkipError):
                consecutive_failures += 1
                if consecutive_failures > 100:
                    raise DataError(
                        f"{phase}: >100 consecutive episode-construction failures")
        consecutive_failures = 0
        for group in optimizer.param_groups:
            group["lr"] = _cosine_lr(lr, it, iterations)
        optimizer.zero_grad()
        loss = stage2_loss(episode, model, cfg.stage2)
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite {phase} loss at iteration {it}")
        loss.backward()
        optimizer.step()
        losses.append((it, float(loss.detach())))
    return losses


def run_stage2(cfg: PipelineConfig, init_checkpoint: str | Path) -> Path:
    """Superpixel-guided episodic pre-training; label-free by construction."""
    out = _prepare_run(cfg)
    ckpt_out = out / "stage2.ckpt"
    if cfg.stage2.iterations == 0:
        shutil.copyfile(init_checkpoint, ckpt_out)
        return ckpt_out
    model, _ = load_checkpoint(init_checkpoint)
    split = build_split(load_manifest(cfg.data.manifest), cfg.data.fold,
                        cfg.data.setting, cfg.data.test_classes)
    store = SliceStore(cfg)
    train_ids = split.train_slice_ids

    heldout = [
        _pseudo_episode(cfg, store, train_ids, derive_seed(cfg.seed, "heldout", i))
        for i in range(8)
    ]
    dice_before = float(np.mean([_episode_dice(model, ep, cfg) for ep in heldout]))

    audit = []

    def episode_fn(it, retry):
        ep = _pseudo_episode(cfg, store, train_ids,
                             derive_seed(cfg.seed, "stage2", it, retry))
        audit.append({"iteration": it, "kind": "pseudo",
                      "gt_class_pixels": {}})
        return ep

    losses = _train_episodic(cfg, model, out, "stage2", cfg.stage2.iterations,
                             cfg.stage2.lr, cfg.stage2.momentum, episode_fn)
    dice_after = float(np.mean([_episode_dice(model, ep, cfg) for ep in heldout]))
    _write_loss_csv(out / "stage2_loss.csv", losses)
    with open(out / "stage2_audit.json", "w") as fh:
        json.dump({"entries": audit}, fh, sort_keys=True)
    save_checkpoint(ckpt_out, model, extra={
        "phase": "stage2", "iterations": cfg.stage2.iterations,
        "heldout_pseudo_dice_before": dice_before,
        "heldout_pseudo_dice_after": dice_after,
    })
    return ckpt_out


def _gt_episode_pool(cfg: PipelineConfig, store: SliceStore,
                     train_ids: list[str]) -> dict[str, dict[str, str]]:
    """For each train class, the best (largest-foreground) slice per patient."""
    test_classes = {str(c) for c in cfg.data.test_classes}
    all_classes = set()
    for rec in store.manifest.records:
        all_classes.update(k for k, v in rec.class_pixel_counts.items() if v > 0)
    pool: dict[str, dict[str, str]] = {}
    train_set = set(train_ids)
    for cls in sorted(all_classes - test_classes):
        per_patient: dict[str, str] = {}
        for rec in store.manifest.records:
            if rec.slice_id not in train_set:
                continue
            count = rec.class_pixel_counts.get(cls, 0)
            if count <= 0:
                continue
            best = per_patient.get(rec.patient_id)
            if best is None or count > store.manifest.by_id(best).class_pixel_counts[cls]:
                per_patient[rec.patient_id] = rec.slice_id
        if len(per_patient) >= 2:
            pool[cls] = per_patient
    return pool


def finetune(cfg: PipelineConfig, init_checkpoint: str | Path) -> Path:
    """Episodic fine-tuning mixing ground-truth and pseudo-label episodes."""
    out = _prepare_run(cfg)
    ckpt_out = out / "finetune.ckpt"
    if cfg.finetune.iterations == 0:
        shutil.copyfile(init_checkpoint, ckpt_out)
        return ckpt_out
    model, _ = load_checkpoint(init_checkpoint)
    split = build_split(load_manifest(cfg.data.manifest), cfg.data.fold,
                        cfg.data.setting, cfg.data.test_classes)
    store = SliceStore(cfg)
    train_ids = split.train_slice_ids
    pool = _gt_episode_pool(cfg, store, train_ids)
    if cfg.finetune.gt_mix > 0 and not pool:
        raise ConfigError("no train class has labeled slices from >= 2 patients")

    audit = []

    def episode_fn(it, retry):
        rng = np.random.default_rng(derive_seed(cfg.seed, "finetune", it, retry))
        use_gt = pool and rng.random() < cfg.finetune.gt_mix
        if use_gt:
            cls = sorted(pool)[int(rng.integers(0, len(pool)))]
            patients = sorted(pool[cls])
            i, j = rng.choice(len(patients), size=2, replace=False)
            sup_id, qry_id = pool[cls][patients[int(i)]], pool[cls][patients[int(j)]]
            episode = FewShotEpisode(
                support_image=store.image(sup_id),
                support_mask=store.class_mask(sup_id, cls),
                query_image=store.image(qry_id),
                query_mask=store.class_mask(qry_id, cls),
            )
            audit.append({
                "iteration": it, "kind": "gt",
                "gt_class_pixels": {
                    cls: int(episode.support_mask.sum()) + int(episode.query_mask.sum())
                },
            })
            return episode
        episode = _pseudo_episode(cfg, store, train_ids,
                                  derive_seed(cfg.seed, "finetune-pseudo", it, retry))
        audit.append({"iteration": it, "kind": "pseudo", "gt_class_pixels": {}})
        return episode

    losses = _train_episodic(cfg, model, out, "finetune", cfg.finetune.iterations,
                             cfg.finetune.lr, cfg.finetune.momentum, episode_fn)
    _write_loss_csv(out / "finetune_loss.csv", losses)
    with open(out / "finetune_audit.json", "w") as fh:
        json.dump({"entries": audit}, fh, sort_keys=True)
    save_checkpoint(ckpt_out, model, extra={"phase": "finetune",
                                            "iterations": cfg.finetune.iterations})
    return ckpt_out


def audit_test_class_purity(out_dir: str | Path, test_classes) -> dict:
    """Scan every training-batch audit entry for test-class ground-truth pixels."""
    out_dir = Path(out_dir)
    test_classes = {str(c) for c in test_classes}
    total_entries = 0
    violations = []
    for name in ("stage2_audit.json", "finetune_audit.json"):
        path = out_dir / name
        if not path.exists():
            continue
        with open(path) as fh:
            entries = json.load(fh)["entries"]
        total_entries += len(entries)
        for entry in entries:
            leaked = {
                cls: px for cls, px in entry["gt_class_pixels"].items()
                if cls in test_classes and px > 0
            }
            if leaked:
                violations.append({"file": name, "entry": entry, "leaked": leaked})
    return {"entries_checked": total_entries, "violations": violations}


def evaluate(cfg: PipelineConfig, checkpoint: str | Path,
             predictor=None) -> tuple[dict, Path]:
    """Episodic test-class Dice under the configured split.

    For each test class the support comes from the patient with the largest
    foreground; every other patient contributes its largest-foreground slice
    as a query.  `predictor(support_img, support_mask, query_img) -> mask`
    may replace the model (used by oracle tests).
    """
    out = _prepare_run(cfg)
    t0 = time.monotonic()
    split = build_split(load_manifest(cfg.data.manifest), cfg.data.fold,
                        cfg.data.setting, cfg.data.test_classes)
    if not split.test_slice_ids:
        raise ConfigError("empty test split")
    store = SliceStore(cfg)
    model = None
    if predictor is None:
        model, _ = load_checkpoint(checkpoint)
        model.eval()

    per_class = {}
    warnings = []
    for cls in sorted(str(c) for c in cfg.data.test_classes):
        per_patient: dict[str, str] = {}
        for sid in split.test_slice_ids:
            rec = store.manifest.by_id(sid)
            count = rec.class_pixel_counts.get(cls, 0)
            if count <= 0:
                continue
            best = per_patient.get(rec.patient_id)
            if best is None or count > store.manifest.by_id(best).class_pixel_counts[cls]:
                per_patient[rec.patient_id] = rec.slice_id
        if len(per_patient) < 2:
            warnings.append(f"class {cls}: fewer than 2 patients in test split; skipped")
            continue
        support_patient = max(
            sorted(per_patient),
            key=lambda p: store.manifest.by_id(per_patient[p]).class_pixel_counts[cls],
        )
        sup_id = per_patient[support_patient]
        sup_img = store.image(sup_id)
        sup_mask = store.class_mask(sup_id, cls)
        scores = []
        episodes = []
        for patient in sorted(per_patient):
            if patient == support_patient:
                continue
            qry_id = per_patient[patient]
            qry_img = store.image(qry_id)
            gt = store.class_mask(qry_id, cls)
            if predictor is not None:
                pred = np.asarray(predictor(sup_img, sup_mask, qry_img))
            else:
                with torch.no_grad():
                    f_s = model.encode(torch.from_numpy(sup_img.pixels))[0]
                    f_q = model.encode(torch.from_numpy(qry_img.pixels))[0]
                    try:
                        protos = extract_prototypes(
                            f_s, torch.from_numpy(sup_mask), cfg.stage2)
                    except EpisodeSkipError:
                        warnings.append(f"class {cls}: support {sup_id} unusable")
                        continue
                    pred = predict_mask(protos, f_q, cfg.stage2.alpha,
                                        gt.shape[-1]).numpy()
            score = dice(pred, gt)
            scores.append(score)
            episodes.append({"support": sup_id, "query": qry_id,
                             "dice": round(score, 6)})
        if scores:
            per_class[cls] = {
                "mean": round(float(np.mean(scores)), 6),
                "std": round(float(np.std(scores)), 6),
                "n_episodes": len(scores),
                "episodes": episodes,
            }
    class_means = [v["mean"] for v in per_class.values()]
    report = {
        "config_fingerprint": cfg.fingerprint(),
        "setting": cfg.data.setting,
        "fold": cfg.data.fold,
        "per_class": per_class,
        "per_fold": {str(cfg.data.fold): {c: v["mean"] for c, v in per_class.items()}},
        "overall_mean": round(float(np.mean(class_means)), 6) if class_means else None,
        "warnings": warnings,
    }
    report_path = out / "report.json"
    with open(report_path, "w") as fh:
        json.dump(report, fh, sort_keys=True, indent=1)
    with open(out / "run_meta.json", "w") as fh:
        json.dump({"wall_clock_s": time.monotonic() - t0}, fh)
    return report, report_path


def run_all(cfg: PipelineConfig) -> tuple[dict, Path]:
    """Stage 1 -> stage 2 -> fine-tune -> evaluate; 0-iteration phases pass
    checkpoints through unchanged."""
    ckpt = run_stage1(cfg)
    ckpt = run_stage2(cfg, ckpt)
    ckpt = finetune(cfg, ckpt)
    return evaluate(cfg, ckpt)


def export_features(checkpoint: str | Path, image_paths: list[str | Path],
                    out_dir: str | Path) -> list[Path]:
    """Heatmap PNGs of per-pixel feature norms, nearest-upscaled to input size."""
    from .data import bilinear_resize, read_grayscale

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model, _ = load_checkpoint(checkpoint)
    model.eval()
    size = model.config.input_size
    written = []
    for path in image_paths:
        arr = read_grayscale(path)
        arr = bilinear_resize(arr, size)
        lo, hi = float(arr.min()), float(arr.max())
        arr = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
        with torch.no_grad():
            fmap = model.encode(torch.from_numpy(arr.astype(np.float32)))[0]
        heat = fmap.norm(dim=0).numpy()
        lo, hi = float(heat.min()), float(heat.max())
        heat = (heat - lo) / (hi - lo) if hi > lo else np.zeros_like(heat)
        factor = size // heat.shape[0]
        heat = np.kron(heat, np.ones((factor, factor)))
        img = Image.fromarray(np.round(heat * 255).astype(np.uint8), mode="L")
        out_path = out_dir / (Path(path).stem + "_features.png")
        img.save(out_path)
        written.append(out_path)
    return written
