"""Dense + global contrastive pre-training losses and the stage-1 step."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .encoder import FewsegModel
from .errors import ConfigError, NumericalError


@dataclass
class Stage1Config:
    tau: float = 0.2
    lambda_dense: float = 0.7
    K: int = 2
    batch_images: int = 8
    queue_size: int = 0
    lr: float = 0.05
    momentum: float = 0.9
    iterations: int = 1000

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        if not 0.0 <= self.lambda_dense <= 1.0:
            raise ConfigError("lambda_dense must lie in [0, 1]")
        if self.K < 2:
            raise ConfigError("K must be >= 2")
        if self.batch_images < 2 and self.queue_size == 0:
            raise ConfigError("need batch_images >= 2 or a negative queue")

    def to_dict(self) -> dict:
        return {
            "tau": self.tau, "lambda_dense": self.lambda_dense, "K": self.K,
            "batch_images": self.batch_images, "queue_size": self.queue_size,
            "lr": self.lr, "momentum": self.momentum, "iterations": self.iterations,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Stage1Config":
        return cls(**d)


def match_positive_keys(align_a: torch.Tensor, align_b: torch.Tensor) -> np.ndarray:
    """For each of the S^2 cells of view a, the index (row-major) of the
    cell in view b whose alignment vector is most cosine-similar.  Ties go
    to the lowest index."""
    if align_a.shape != align_b.shape:
        raise ConfigError("alignment grids must share shape")
    c = align_a.shape[0]
    a = align_a.reshape(c, -1).T.detach().cpu().numpy()
    b = align_b.reshape(c, -1).T.detach().cpu().numpy()
    sim = a @ b.T
    return np.argmax(sim, axis=1)  # np.argmax picks the first maximum


def _info_nce(pos_logit: torch.Tensor, neg_logits: torch.Tensor) -> torch.Tensor:
    # -log(e^pos / (e^pos + sum e^neg)) via logsumexp for stability
    all_logits = torch.cat([pos_logit.unsqueeze(-1), neg_logits], dim=-1)
    return torch.logsumexp(all_logits, dim=-1) - pos_logit


def dense_loss(keys_a: torch.Tensor, keys_b: torch.Tensor, match: np.ndarray,
               negatives: torch.Tensor, tau: float) -> torch.Tensor:
    """Mean per-cell InfoNCE over the S^2 keys of view a.

    keys_a, keys_b: (C', S, S) unit-norm key grids; match: per-cell index
    into view b; negatives: (N, C') keys drawn from other images.
    """
    if negatives.numel() == 0:
        raise ConfigError("dense_loss needs a non-empty negative set")
    cp = keys_a.shape[0]
    ka = keys_a.reshape(cp, -1).T            # (S^2, C')
    kb = keys_b.reshape(cp, -1).T
    pos = (ka * kb[torch.as_tensor(match, dtype=torch.long)]).sum(dim=1) / tau
    neg = ka @ negatives.T / tau             # (S^2, N)
    return _info_nce(pos, neg).mean()


def global_loss(g: torch.Tensor, g_pos: torch.Tensor, g_negs: torch.Tensor,
                tau: float) -> torch.Tensor:
    """Single InfoNCE term on pooled whole-image embeddings."""
    if g_negs.numel() == 0:
        raise ConfigError("global_loss needs a non-empty negative set")
    pos = (g * g_pos).sum() / tau
    neg = g_negs @ g / tau
    return _info_nce(pos.unsqueeze(0), neg.unsqueeze(0))[0]


def combined_loss(loss_global: torch.Tensor, loss_dense: torch.Tensor,
                  lambda_dense: float) -> torch.Tensor:
    if not 0.0 <= lambda_dense <= 1.0:
        raise ConfigError("lambda_dense must lie in [0, 1]")
    if lambda_dense == 0.0:
        return loss_global
    if lambda_dense == 1.0:
        return loss_dense
    return (1.0 - lambda_dense) * loss_global + lambda_dense * loss_dense


def stage1_batch_loss(model: FewsegModel, views: torch.Tensor,
                      config: Stage1Config,
                      key_queue: torch.Tensor | None = None,
                      global_queue: torch.Tensor | None = None) -> torch.Tensor:
    """Combined contrastive loss over a batch of augmented views.

    views: (B, K, 1, H, W).  For every image and ordered view pair the dense
    term matches keys through alignment similarity; negatives are the keys /
    global embeddings of all views of all other images, plus queue entries.
    """
    b, k = views.shape[:2]
    if b < 2 and (key_queue is None or key_queue.numel() == 0):
        raise ConfigError("stage-1 step needs >= 2 images or a populated queue")
    flat = views.reshape(b * k, *views.shape[2:])
    fmaps = model.encode(flat)
    keys = model.project_dense(fmaps)                    # (B*K, C', S, S)
    aligns = model.align_vectors(fmaps)                  # (B*K, C, S, S)
    globs = model.project_global(fmaps)                  # (B*K, C')
    cp = keys.shape[1]
    keys_flat = keys.reshape(b, k, cp, -1)

    dense_terms, global_terms = [], []
    for i in range(b):
        others = [j for j in range(b) if j != i]
        neg_keys = keys_flat[others].permute(0, 1, 3, 2).reshape(-1, cp) if others \
            else keys_flat.new_zeros((0, cp))
        if key_queue is not None and key_queue.numel():
            neg_keys = torch.cat([neg_keys, key_queue.to(neg_keys.dtype)], dim=0)
        neg_globs = globs.reshape(b, k, -1)[others].reshape(-1, globs.shape[-1]) if others \
            else globs.new_zeros((0, globs.shape[-1]))
        if global_queue is not None and global_queue.numel():
            neg_globs = torch.cat([neg_globs, global_queue.to(neg_globs.dtype)], dim=0)
        for va in range(k):
            for vb in range(k):
                if va == vb:
                    continue
                ia, ib = i * k + va, i * k + vb
                if config.lambda_dense > 0.0:
                    match = match_positive_keys(aligns[ia], aligns[ib])
                    dense_terms.append(
                        dense_loss(keys[ia], keys[ib], match, neg_keys, config.tau)
                    )
                if config.lambda_dense < 1.0:
                    global_terms.append(
                        global_loss(globs[ia], globs[ib], neg_globs, config.tau)
                    )
    zero = views.new_zeros(())
    lt = torch.stack(dense_terms).mean() if dense_terms else zero
    lg = torch.stack(global_terms).mean() if global_terms else zero
    return combined_loss(lg, lt, config.lambda_dense)


class Stage1Trainer:
    """Momentum-SGD training loop with cosine learning-rate decay and an
    optional FIFO queue of extra negatives."""

    def __init__(self, model: FewsegModel, config: Stage1Config):
        self.model = model
        self.config = config
        self.optimizer = torch.optim.SGD(
            model.parameters(), lr=config.lr, momentum=config.momentum
        )
        self.step_count = 0
        self.key_queue: torch.Tensor | None = None
        self.global_queue: torch.Tensor | None = None

    def _lr(self) -> float:
        total = max(self.config.iterations, 1)
        frac = min(self.step_count / total, 1.0)
        return self.config.lr * 0.5 * (1.0 + math.cos(math.pi * frac))

    def _push_queue(self, keys: torch.Tensor, globs: torch.Tensor) -> None:
        if self.config.queue_size == 0:
            return
        cp = keys.shape[1]
        new_keys = keys.detach().permute(0, 2, 3, 1).reshape(-1, cp)
        new_globs = globs.detach()
        self.key_queue = new_keys if self.key_queue is None else \
            torch.cat([self.key_queue, new_keys])[-self.config.queue_size:]
        self.global_queue = new_globs if self.global_queue is None else \
            torch.cat([self.global_queue, new_globs])[-self.config.queue_size:]

    def step(self, views: torch.Tensor) -> float:
        """One gradient step on a (B, K, 1, H, W) batch of views."""
        lr = self._lr()
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.zero_grad()
        loss = stage1_batch_loss(self.model, views, self.config,
                                 self.key_queue, self.global_queue)
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite stage-1 loss at step {self.step_count}")
        loss.backward()
        self.optimizer.step()
        self.step_count += 1
        if self.config.queue_size > 0:
            with torch.no_grad():
                b, k = views.shape[:2]
                flat = views.reshape(b * k, *views.shape[2:])
                fmaps = self.model.encode(flat)
                self._push_queue(self.model.project_dense(fmaps),
                                 self.model.project_global(fmaps))
        return float(loss.detach())
