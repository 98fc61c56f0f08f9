"""Prototype extraction, similarity-based segmentation, and the episodic loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .encoder import FewsegModel, NORM_EPS
from .errors import ConfigError, EpisodeSkipError
from .superpixel import FewShotEpisode


@dataclass
class Stage2Config:
    lambda_par: float = 1.0
    alpha: float = 20.0
    pooling_window: tuple[int, int] = (2, 2)
    coverage_threshold: float = 0.95
    lr: float = 0.02
    momentum: float = 0.9
    iterations: int = 2000

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigError("alpha must be > 0")
        if self.lambda_par < 0:
            raise ConfigError("lambda_par must be >= 0")
        if not 0.0 <= self.coverage_threshold <= 1.0:
            raise ConfigError("coverage_threshold must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "lambda_par": self.lambda_par, "alpha": self.alpha,
            "pooling_window": list(self.pooling_window),
            "coverage_threshold": self.coverage_threshold,
            "lr": self.lr, "momentum": self.momentum, "iterations": self.iterations,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Stage2Config":
        d = dict(d)
        d["pooling_window"] = tuple(d["pooling_window"])
        return cls(**d)


@dataclass
class PrototypeSet:
    fg_prototypes: list[torch.Tensor]
    bg_prototypes: list[torch.Tensor]
    pooling_window: tuple[int, int]
    coverage_threshold: float

    def __post_init__(self):
        if not self.bg_prototypes:
            raise ConfigError("at least one background prototype is required")
        if not self.fg_prototypes:
            raise ConfigError("at least one foreground prototype is required")


@dataclass
class SegmentationLogits:
    scores: torch.Tensor        # (2, h, w) at feature resolution, bg first
    probabilities: torch.Tensor  # (2, H, W) softmaxed then upsampled


def downsample_mask(mask: torch.Tensor, feature_hw: tuple[int, int]) -> torch.Tensor:
    """Area-average a full-resolution {0,1} mask down to feature resolution.
    Returns soft coverage values in [0, 1]."""
    return F.adaptive_avg_pool2d(mask[None, None].float(), feature_hw)[0, 0]


def _masked_average(features: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    # features (C,h,w), weights (h,w); denominator guarded by caller
    total = weights.sum()
    return (features * weights[None]).sum(dim=(1, 2)) / total


def extract_prototypes(feature_map: torch.Tensor, support_mask: torch.Tensor,
                       cfg: Stage2Config) -> PrototypeSet:
    """Global masked-average prototypes plus windowed local prototypes.

    Local prototypes come from non-overlapping pooling_window grids of
    feature cells; a window contributes a class prototype only when that
    class covers at least coverage_threshold of the window.
    """
    if support_mask.sum() < 1:
        raise EpisodeSkipError("support mask has no foreground")
    c, h, w = feature_map.shape
    soft = downsample_mask(support_mask, (h, w))
    hard = (soft >= 0.5).float()

    prototypes: dict[str, list[torch.Tensor]] = {"fg": [], "bg": []}
    for name, hard_w, soft_w in (
        ("fg", hard, soft),
        ("bg", 1.0 - hard, 1.0 - soft),
    ):
        weights = hard_w if hard_w.sum() > 0 else soft_w
        if weights.sum() <= 0:
            raise EpisodeSkipError(f"{name} weights vanished after downsampling")
        prototypes[name].append(_masked_average(feature_map, weights))

    wh, ww = cfg.pooling_window
    for r0 in range(0, h, wh):
        for c0 in range(0, w, ww):
            f_win = feature_map[:, r0:r0 + wh, c0:c0 + ww]
            m_win = hard[r0:r0 + wh, c0:c0 + ww]
            for name, class_mask in (("fg", m_win), ("bg", 1.0 - m_win)):
                coverage = class_mask.mean()
                if coverage > 0 and coverage >= cfg.coverage_threshold:
                    prototypes[name].append(_masked_average(f_win, class_mask))
    return PrototypeSet(
        fg_prototypes=prototypes["fg"], bg_prototypes=prototypes["bg"],
        pooling_window=cfg.pooling_window,
        coverage_threshold=cfg.coverage_threshold,
    )


def _cosine_scores(feature_map: torch.Tensor, protos: list[torch.Tensor],
                   alpha: float) -> torch.Tensor:
    c, h, w = feature_map.shape
    feats = feature_map.reshape(c, -1)
    feats = feats / (feats.norm(dim=0, keepdim=True) + NORM_EPS)
    stack = torch.stack(protos)
    stack = stack / (stack.norm(dim=1, keepdim=True) + NORM_EPS)
    sims = stack @ feats                       # (P, h*w)
    return alpha * sims.max(dim=0).values.reshape(h, w)


def similarity_segment(protos: PrototypeSet, query_features: torch.Tensor,
                       alpha: float, output_size: int | None = None) -> SegmentationLogits:
    """Per-pixel class score = alpha * best cosine similarity against that
    class's prototypes; softmax over {bg, fg}; probabilities upsampled
    bilinearly to full resolution."""
    bg = _cosine_scores(query_features, protos.bg_prototypes, alpha)
    fg = _cosine_scores(query_features, protos.fg_prototypes, alpha)
    scores = torch.stack([bg, fg])
    probs = torch.softmax(scores, dim=0)
    if output_size is not None and output_size != scores.shape[-1]:
        probs_full = F.interpolate(
            probs[None], size=(output_size, output_size),
            mode="bilinear", align_corners=False,
        )[0]
    else:
        probs_full = probs
    return SegmentationLogits(scores=scores, probabilities=probs_full)


def ce_loss(logits: SegmentationLogits, target: torch.Tensor) -> torch.Tensor:
    """Mean pixelwise negative log-likelihood at full resolution."""
    probs = logits.probabilities
    if probs.shape[1:] != target.shape:
        raise ConfigError(
            f"prediction {tuple(probs.shape[1:])} vs target {tuple(target.shape)}"
        )
    target = target.long()
    p_true = probs.gather(0, target[None])[0]
    return -(torch.log(p_true.clamp_min(1e-12))).mean()


def predict_mask(protos: PrototypeSet, query_features: torch.Tensor, alpha: float,
                 output_size: int) -> torch.Tensor:
    """Hard mask at image resolution; equal class scores break to background."""
    logits = similarity_segment(protos, query_features, alpha, output_size)
    probs = logits.probabilities
    return (probs[1] > probs[0]).to(torch.uint8)


def par_loss(support_features: torch.Tensor, support_mask: torch.Tensor,
             query_features: torch.Tensor, predicted_query_mask: torch.Tensor,
             cfg: Stage2Config) -> torch.Tensor:
    """Prototype alignment regularization: swap roles, extracting prototypes
    from the query under its (detached) predicted mask, then score the
    support segmentation against the true support mask."""
    pred = predicted_query_mask.detach()
    if pred.sum() < 1:
        return support_features.new_zeros(())
    try:
        protos = extract_prototypes(query_features, pred, cfg)
    except EpisodeSkipError:
        return support_features.new_zeros(())
    logits = similarity_segment(protos, support_features, cfg.alpha,
                                output_size=support_mask.shape[-1])
    return ce_loss(logits, support_mask)


def stage2_loss(episode: FewShotEpisode, model: FewsegModel,
                cfg: Stage2Config) -> torch.Tensor:
    """Episodic loss: query cross-entropy plus lambda_par * alignment term."""
    dtype = next(model.parameters()).dtype
    sup = torch.as_tensor(episode.support_image.pixels, dtype=dtype)
    qry = torch.as_tensor(episode.query_image.pixels, dtype=dtype)
    m_s = torch.as_tensor(np.ascontiguousarray(episode.support_mask))
    m_q = torch.as_tensor(np.ascontiguousarray(episode.query_mask))
    f_s = model.encode(sup)[0]
    f_q = model.encode(qry)[0]
    protos = extract_prototypes(f_s, m_s, cfg)
    logits = similarity_segment(protos, f_q, cfg.alpha, output_size=m_q.shape[-1])
    loss = ce_loss(logits, m_q)
    if cfg.lambda_par > 0:
        with torch.no_grad():
            pred = predict_mask(protos, f_q, cfg.alpha, m_q.shape[-1])
        loss = loss + cfg.lambda_par * par_loss(f_s, m_s, f_q, pred, cfg)
    return loss
