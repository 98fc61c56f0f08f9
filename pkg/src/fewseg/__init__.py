"""Few-shot dense segmentation with two-stage unsupervised pre-training."""

from .config import PipelineConfig
from .data import (DatasetManifest, ImageSlice, TransformSpec,
                   apply_paired_transform, build_split, load_manifest,
                   load_slice, sample_views)
from .encoder import EncoderConfig, FewsegModel, load_checkpoint, save_checkpoint
from .pipeline import dice, evaluate, finetune, run_all, run_stage1, run_stage2
from .protoseg import (PrototypeSet, Stage2Config, ce_loss, extract_prototypes,
                       par_loss, predict_mask, similarity_segment, stage2_loss)
from .stage1 import (Stage1Config, combined_loss, dense_loss, global_loss,
                     match_positive_keys)
from .superpixel import (FelzParams, FewShotEpisode, SuperpixelMap,
                         build_episode, felzenszwalb_segment,
                         select_pseudo_label)
from .synthetic import gen_synthetic

__all__ = [
    "PipelineConfig", "DatasetManifest", "ImageSlice", "TransformSpec",
    "apply_paired_transform", "build_split", "load_manifest", "load_slice",
    "sample_views", "EncoderConfig", "FewsegModel", "load_checkpoint",
    "save_checkpoint", "dice", "evaluate", "finetune", "run_all",
    "run_stage1", "run_stage2", "PrototypeSet", "Stage2Config", "ce_loss",
    "extract_prototypes", "par_loss", "predict_mask", "similarity_segment",
    "stage2_loss", "Stage1Config", "combined_loss", "dense_loss",
    "global_loss", "match_positive_keys", "FelzParams", "FewShotEpisode",
    "SuperpixelMap", "build_episode", "felzenszwalb_segment",
    "select_pseudo_label", "gen_synthetic",
]
