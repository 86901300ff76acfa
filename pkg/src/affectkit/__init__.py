"""affectkit: masked-autoencoder pretraining, per-task fine-tuning, and
temporal multimodal fusion for frame-level facial affect prediction."""

from .datamodel import (
    AU_NAMES, EXPR_NAMES, FoldSplit, FrameRecord, SmoothingSpec, Task,
    TaskSpec, VideoClip, load_labels, make_folds, save_labels, segment_clips,
)
from .losses import (
    au_loss, ccc, compute_class_weights, expr_loss, task_outputs, va_loss,
)
from .mae import (
    MAEConfig, MaskedAutoencoder, MaskPlan, PatchGrid, attach_head,
    mae_forward, mae_loss, patchify, pretrain, sample_mask, unpatchify,
)
from .metrics import (
    MetricsReport, aggregate_va, f1_per_class, pcc, score_au, score_eri,
    score_expr, score_va,
)
from .postprocess import (
    apply_policy, average_smooth, fill_missing, gaussian_smooth, median_smooth,
)
from .features import (
    FeatureSequence, FeatureSetSpec, align_audio, combine, extract_vision,
    synthetic_audio_provider,
)
from .tmf import TMFConfig, TemporalFusionModel, predict_video, tmf_forward, tmf_train

__version__ = "0.1.0"

__all__ = [
    "AU_NAMES", "EXPR_NAMES", "FoldSplit", "FrameRecord", "SmoothingSpec",
    "Task", "TaskSpec", "VideoClip", "load_labels", "make_folds",
    "save_labels", "segment_clips",
    "au_loss", "ccc", "compute_class_weights", "expr_loss", "task_outputs",
    "va_loss",
    "MAEConfig", "MaskedAutoencoder", "MaskPlan", "PatchGrid", "attach_head",
    "mae_forward", "mae_loss", "patchify", "pretrain", "sample_mask",
    "unpatchify",
    "MetricsReport", "aggregate_va", "f1_per_class", "pcc", "score_au",
    "score_eri", "score_expr", "score_va",
    "apply_policy", "average_smooth", "fill_missing", "gaussian_smooth",
    "median_smooth",
    "FeatureSequence", "FeatureSetSpec", "align_audio", "combine",
    "extract_vision", "synthetic_audio_provider",
    "TMFConfig", "TemporalFusionModel", "predict_video", "tmf_forward",
    "tmf_train",
    "__version__",
]
