"""End-to-end stages behind the CLI: training runs, prediction files, scoring."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import mae as mae_mod
from . import metrics as metrics_mod
from . import tmf as tmf_mod
from .checkpoint import (
    load_checkpoint, load_state_dict, save_checkpoint, state_dict_tensors,
)
from .config import ExperimentConfig
from .datamodel import (
    AU_NAMES, DEFAULT_GAUSSIAN_SIGMA, DEFAULT_WINDOW, EXPR_NAMES, FrameRecord,
    SmoothingSpec, Task, TASK_OUTPUTS, TaskSpec, load_labels, make_folds,
)
from .features import (
    FeatureSetSpec, SyntheticFeatureProvider, align_audio, combine,
    extract_vision, file_digest, load_features, params_digest, save_features,
)
from .losses import compute_class_weights
from .optim import OptimizerSpec
from .postprocess import apply_policy, fill_missing
from .seeding import derive_seed
from .synthetic import VideoArchive, load_archives

VISION_PROVIDER = "mae-vision"
AUDIO_PROVIDER = "synthetic-audio"


class AlignmentError(ValueError):
    """Predictions and labels disagree on which frames exist."""


def pretrain_ckpt_path(config: ExperimentConfig) -> Path:
    return config.out_dir / "mae_pretrain.ckpt"


def finetune_ckpt_path(config: ExperimentConfig, task: Task) -> Path:
    return config.out_dir / f"mae_finetune_{task.value}.ckpt"


def tmf_ckpt_path(config: ExperimentConfig, task: Task) -> Path:
    return config.out_dir / f"tmf_{task.value}.ckpt"


def predictions_path(config: ExperimentConfig, task: Task) -> Path:
    return config.out_dir / f"predictions_{task.value}.csv"


def labels_path(config: ExperimentConfig, task: Task) -> Path:
    return config.data_dir / "labels" / f"{task.value}.csv"


def load_task_labels(config: ExperimentConfig, task: Task) -> list[FrameRecord]:
    path = labels_path(config, task)
    if not path.exists():
        raise FileNotFoundError(f"no label file at {path}")
    return load_labels(path, task)


def records_by_frame(records: Sequence[FrameRecord]
                     ) -> dict[tuple[str, int], FrameRecord]:
    return {(r.video_id, r.frame_index): r for r in records}


def timeline_targets(archive: VideoArchive,
                     rec_map: dict[tuple[str, int], FrameRecord],
                     task: Task) -> tuple[np.ndarray, np.ndarray]:
    """Targets aligned to the archive's frame rows plus a validity mask.

    Row i corresponds to archived frame archive.frame_index[i]; rows without
    a usable label are zero-filled and marked invalid.
    """
    n = archive.frames.shape[0]
    n_out = TASK_OUTPUTS[task]
    targets = np.zeros((n, n_out), dtype=np.float32)
    valid = np.zeros(n, dtype=bool)
    for i, t in enumerate(archive.frame_index):
        rec = rec_map.get((archive.video_id, int(t)))
        if rec is None or not rec.face_present:
            continue
        if task is Task.AU:
            if rec.au is None:
                continue
            targets[i] = rec.au
        elif task is Task.EXPR:
            if rec.expr is None:
                continue
            targets[i, rec.expr] = 1.0
        else:
            if rec.valence is None:
                continue
            targets[i, 0] = rec.valence
            targets[i, 1] = rec.arousal
        valid[i] = True
    return targets, valid


def split_videos(video_ids: Sequence[str], val_fraction: float,
                 seed: int) -> tuple[list[str], list[str]]:
    """Seeded video-level train/val split; at least one video stays in train."""
    vids = sorted(set(video_ids))
    if not vids:
        raise ValueError("no videos to split")
    if val_fraction <= 0 or len(vids) < 2:
        return vids, []
    rng = np.random.default_rng(seed)
    order = [vids[int(i)] for i in rng.permutation(len(vids))]
    n_val = max(1, int(len(vids) * val_fraction))
    n_val = min(n_val, len(vids) - 1)
    return sorted(order[n_val:]), sorted(order[:n_val])


def class_counts(targets: np.ndarray, task: Task) -> np.ndarray:
    """Per-class label counts feeding the inverse-frequency weights."""
    if task is Task.AU:
        return targets.sum(axis=0)
    if task is Task.EXPR:
        return targets.sum(axis=0)
    raise ValueError("VA has no class counts")


def task_spec_for_training(task: Task, targets: np.ndarray,
                           smoothing: SmoothingSpec) -> TaskSpec:
    if task is Task.VA:
        return TaskSpec.for_task(task, smoothing=smoothing)
    weights = compute_class_weights(class_counts(targets, task))
    return TaskSpec.for_task(task, class_weights=weights, smoothing=smoothing)


def run_pretrain(config: ExperimentConfig) -> Path:
    """Train the autoencoder on every archived frame; write ckpt + loss CSV."""
    archives = load_archives(config.data_dir)
    frames = np.concatenate([a.frames for a in sorted(archives.values(),
                                                      key=lambda a: a.video_id)])
    cap = config.pretrain.max_frames
    if frames.shape[0] > cap:
        rng = np.random.default_rng(derive_seed(config.seed, "pretrain-subsample"))
        idx = np.sort(rng.choice(frames.shape[0], size=cap, replace=False))
        frames = frames[idx]
    opt = OptimizerSpec(lr=config.pretrain.lr,
                        batch_size=config.pretrain.batch_size,
                        steps=config.pretrain.steps,
                        log_every=config.pretrain.log_every,
                        seed=derive_seed(config.seed, "pretrain"))
    model, history = mae_mod.pretrain(frames, config.mae, opt)
    config.out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = pretrain_ckpt_path(config)
    save_checkpoint(ckpt, kind="mae-pretrain", config=config.mae.to_dict(),
                    tensors=state_dict_tensors(model), step=len(history))
    loss_csv = config.out_dir / "pretrain_loss.csv"
    with loss_csv.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss"])
        for i in range(0, len(history), opt.log_every):
            chunk = history[i:i + opt.log_every]
            writer.writerow([chunk[-1][0],
                             repr(float(np.mean([l for _, l in chunk])))])
    return ckpt


def load_pretrained(config: ExperimentConfig) -> mae_mod.MaskedAutoencoder:
    ckpt_path = pretrain_ckpt_path(config)
    if not ckpt_path.exists():
        raise FileNotFoundError(
            f"no pretraining checkpoint at {ckpt_path}; run pretrain first")
    ckpt = load_checkpoint(ckpt_path)
    if ckpt.kind != "mae-pretrain":
        raise ValueError(f"{ckpt_path}: expected a mae-pretrain checkpoint, "
                         f"found {ckpt.kind!r}")
    model = mae_mod.MaskedAutoencoder(mae_mod.MAEConfig.from_dict(ckpt.config))
    load_state_dict(model, ckpt.tensors)
    return model


def run_finetune(config: ExperimentConfig, task: Task) -> Path:
    """Attach a task head to the pretrained encoder and train on labeled frames."""
    autoencoder = load_pretrained(config)
    records = load_task_labels(config, task)
    rec_map = records_by_frame(records)
    archives = load_archives(config.data_dir)
    train_ids, val_ids = split_videos(
        list(archives), config.finetune.val_fraction,
        derive_seed(config.seed, f"finetune-split:{task.value}"))

    def gather(ids):
        images, raw_targets = [], []
        for vid in ids:
            archive = archives[vid]
            targets, valid = timeline_targets(archive, rec_map, task)
            if not valid.any():
                continue
            images.append(archive.frames[valid])
            raw_targets.append(targets[valid])
        if not images:
            return None
        return np.concatenate(images), np.concatenate(raw_targets)

    train = gather(train_ids)
    if train is None:
        raise ValueError(f"no labeled {task.value} frames in the training split")
    images, targets = train
    spec = task_spec_for_training(task, targets, config.smoothing_for(task))
    model = mae_mod.attach_head(autoencoder, spec,
                                freeze_encoder=config.finetune.freeze_encoder,
                                seed=derive_seed(config.seed,
                                                 f"head:{task.value}"))
    if task is Task.EXPR:
        fit_targets: np.ndarray = targets.argmax(axis=1)
    else:
        fit_targets = targets
    val = gather(val_ids)
    if val is not None and task is Task.EXPR:
        val = (val[0], val[1].argmax(axis=1))
    opt = OptimizerSpec(lr=config.finetune.lr,
                        batch_size=config.finetune.batch_size,
                        epochs=config.finetune.epochs,
                        seed=derive_seed(config.seed,
                                         f"finetune:{task.value}"))
    history = mae_mod.finetune(model, images, fit_targets, opt, val=val)
    ckpt = finetune_ckpt_path(config, task)
    ckpt_config = {
        "mae": config.mae.to_dict(),
        "task": task.value,
        "class_weights": (None if spec.class_weights is None
                          else [float(w) for w in spec.class_weights]),
        "freeze_encoder": config.finetune.freeze_encoder,
    }
    save_checkpoint(ckpt, kind=f"mae-finetune:{task.value}",
                    config=ckpt_config, tensors=state_dict_tensors(model),
                    step=len(history))
    history_path = config.out_dir / f"finetune_{task.value}_history.jsonl"
    with history_path.open("w", encoding="utf-8") as fh:
        for row in history:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return ckpt


def load_finetuned(config: ExperimentConfig,
                   task: Task) -> tuple[mae_mod.FineTuneModel, TaskSpec]:
    ckpt_path = finetune_ckpt_path(config, task)
    if not ckpt_path.exists():
        raise FileNotFoundError(
            f"no finetuned checkpoint at {ckpt_path}; run finetune first")
    ckpt = load_checkpoint(ckpt_path)
    expected = f"mae-finetune:{task.value}"
    if ckpt.kind != expected:
        raise ValueError(f"{ckpt_path}: expected kind {expected!r}, "
                         f"found {ckpt.kind!r}")
    mae_config = mae_mod.MAEConfig.from_dict(ckpt.config["mae"])
    weights = ckpt.config.get("class_weights")
    spec = TaskSpec.for_task(
        task, class_weights=None if weights is None else np.asarray(weights),
        smoothing=config.smoothing_for(task))
    encoder = mae_mod.MAEEncoder(mae_config)
    model = mae_mod.FineTuneModel(encoder, spec)
    load_state_dict(model, ckpt.tensors)
    model.eval()
    return model, spec


def audio_provider(config: ExperimentConfig) -> Optional[SyntheticFeatureProvider]:
    if config.features.audio == "none":
        return None
    return SyntheticFeatureProvider(
        provider_id=AUDIO_PROVIDER, dim=config.features.audio_dim,
        seed=derive_seed(config.seed, "audio-provider"),
        profile=config.features.audio,
        noise_scale=config.features.audio_noise_scale)


def feature_set_spec(config: ExperimentConfig) -> FeatureSetSpec:
    audio = (AUDIO_PROVIDER,) if config.features.audio != "none" else ()
    return FeatureSetSpec(vision_providers=(VISION_PROVIDER,),
                          audio_providers=audio)


def _audio_on_frame_clock(provider: SyntheticFeatureProvider,
                          video_id: str, n_archived: int,
                          planted: Optional[np.ndarray],
                          audio_rate: float, video_rate: float):
    """Generate audio-clock features, then resample them onto frame times."""
    m = max(1, math.ceil(n_archived * audio_rate / video_rate))
    planted_audio = None
    if planted is not None and provider.profile == "label_correlated":
        steps = np.arange(m, dtype=np.float64) * (video_rate / audio_rate)
        pos = np.clip(np.ceil(steps - 0.5).astype(np.int64), 0, n_archived - 1)
        planted_audio = planted[pos]
    raw = provider.features_for(video_id, m, planted_audio)
    return align_audio(raw.features, audio_rate, video_rate, n_archived,
                       provider_id=provider.provider_id, video_id=video_id)


def assemble_features(config: ExperimentConfig, task: Task,
                      encoder_model: mae_mod.FineTuneModel,
                      archives: dict[str, VideoArchive],
                      rec_map: dict[tuple[str, int], FrameRecord],
                      vision_hash: str) -> dict[str, np.ndarray]:
    """Combined per-frame features for every video, through the disk cache.

    Vision features are keyed on the finetuned checkpoint digest; synthetic
    audio on the provider parameters. Cache hits skip extraction entirely.
    """
    cache_dir = config.out_dir / "feature_cache"
    provider = audio_provider(config)
    set_spec = feature_set_spec(config)
    audio_hash = params_digest(provider.params()) if provider else ""
    out: dict[str, np.ndarray] = {}
    for vid in sorted(archives):
        archive = archives[vid]
        n = archive.frames.shape[0]
        vision = load_features(cache_dir, VISION_PROVIDER, vid, vision_hash)
        if vision is None:
            vision = extract_vision(encoder_model.encoder, archive.frames,
                                    vid, provider_id=VISION_PROVIDER)
            save_features(cache_dir, vision, vision_hash)
        parts = [vision]
        if provider is not None:
            audio = load_features(cache_dir, AUDIO_PROVIDER, vid, audio_hash)
            if audio is None:
                planted, _ = timeline_targets(archive, rec_map, task)
                audio = _audio_on_frame_clock(
                    provider, vid, n, planted,
                    config.features.audio_rate, config.features.video_rate)
                save_features(cache_dir, audio, audio_hash)
            parts.append(audio)
        out[vid] = combine(parts, set_spec).features
    return out


def build_clip_samples(config: ExperimentConfig, task: Task,
                       features: dict[str, np.ndarray],
                       archives: dict[str, VideoArchive],
                       rec_map: dict[tuple[str, int], FrameRecord],
                       video_ids: Sequence[str]) -> list[tmf_mod.ClipSample]:
    samples: list[tmf_mod.ClipSample] = []
    for vid in sorted(video_ids):
        targets, valid = timeline_targets(archives[vid], rec_map, task)
        samples.extend(tmf_mod.clip_samples_for_video(
            vid, features[vid], config.fusion.clip_length,
            targets=targets, label_valid=valid))
    return samples


def run_fuse_train(config: ExperimentConfig, task: Task) -> Path:
    """Train the temporal fusion model on cached multimodal features."""
    encoder_model, _ = load_finetuned(config, task)
    records = load_task_labels(config, task)
    rec_map = records_by_frame(records)
    archives = load_archives(config.data_dir)
    vision_hash = file_digest(finetune_ckpt_path(config, task))
    features = assemble_features(config, task, encoder_model, archives,
                                 rec_map, vision_hash)
    train_ids, val_ids = split_videos(
        list(archives), config.fusion.val_fraction,
        derive_seed(config.seed, f"fusion-split:{task.value}"))
    train_samples = build_clip_samples(config, task, features, archives,
                                       rec_map, train_ids)
    val_samples = build_clip_samples(config, task, features, archives,
                                     rec_map, val_ids) or None
    train_targets = np.concatenate(
        [s.targets[s.frame_valid] for s in train_samples
         if s.frame_valid.any()])
    if train_targets.shape[0] == 0:
        raise ValueError(f"no labeled {task.value} frames to fuse-train on")
    spec = task_spec_for_training(task, train_targets,
                                  config.smoothing_for(task))
    input_dim = next(iter(features.values())).shape[1]
    tmf_config = tmf_mod.TMFConfig(
        input_dim=input_dim, task=spec, d_model=config.fusion.d_model,
        n_layers=config.fusion.n_layers, n_heads=config.fusion.n_heads,
        dropout=config.fusion.dropout, clip_length=config.fusion.clip_length)
    opt = OptimizerSpec(lr=config.fusion.lr,
                        batch_size=config.fusion.batch_size,
                        epochs=config.fusion.epochs,
                        seed=derive_seed(config.seed, f"fuse:{task.value}"))
    model, history = tmf_mod.tmf_train(train_samples, tmf_config, opt,
                                       val_samples=val_samples)
    ckpt = tmf_ckpt_path(config, task)
    save_checkpoint(ckpt, kind=f"tmf:{task.value}",
                    config=tmf_config.to_dict(),
                    tensors=state_dict_tensors(model), step=len(history))
    history_path = config.out_dir / f"fuse_{task.value}_history.jsonl"
    with history_path.open("w", encoding="utf-8") as fh:
        for row in history:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return ckpt


def load_tmf(config: ExperimentConfig, task: Task,
             path: Optional[Path] = None
             ) -> tuple[tmf_mod.TemporalFusionModel, tmf_mod.TMFConfig]:
    ckpt_path = path or tmf_ckpt_path(config, task)
    if not ckpt_path.exists():
        raise FileNotFoundError(
            f"no fusion checkpoint at {ckpt_path}; run fuse-train first")
    ckpt = load_checkpoint(ckpt_path)
    expected = f"tmf:{task.value}"
    if ckpt.kind != expected:
        raise ValueError(f"{ckpt_path}: expected kind {expected!r}, "
                         f"found {ckpt.kind!r}")
    tmf_config = tmf_mod.TMFConfig.from_dict(ckpt.config)
    model = tmf_mod.TemporalFusionModel(tmf_config)
    load_state_dict(model, ckpt.tensors)
    model.eval()
    return model, tmf_config


def output_columns(task: Task) -> list[str]:
    if task is Task.AU:
        return list(AU_NAMES)
    if task is Task.EXPR:
        return [f"p_{name}" for name in EXPR_NAMES]
    return ["valence", "arousal"]


def resolve_smoothing(config: ExperimentConfig, task: Task,
                      override: Optional[str]) -> SmoothingSpec:
    """--smooth overrides the config's policy, using the task's default params."""
    if override is None:
        return config.smoothing_for(task)
    if override == "none":
        return SmoothingSpec(kind="none")
    return SmoothingSpec(kind=override, window=DEFAULT_WINDOW[task],
                         sigma=DEFAULT_GAUSSIAN_SIGMA[task])


def write_predictions_csv(path: Path, dense: dict[str, np.ndarray],
                          task: Task) -> None:
    """Dense per-video predictions -> CSV; floats via repr for exact round trips."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["video_id", "frame_index", *output_columns(task)])
        for vid in sorted(dense):
            block = dense[vid]
            for t in range(block.shape[0]):
                writer.writerow([vid, t,
                                 *[repr(float(x)) for x in block[t]]])


def read_predictions_csv(path: Path,
                         task: Task) -> dict[tuple[str, int], np.ndarray]:
    if not path.exists():
        raise FileNotFoundError(f"no predictions file at {path}")
    expected = ["video_id", "frame_index", *output_columns(task)]
    out: dict[tuple[str, int], np.ndarray] = {}
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != expected:
            raise ValueError(f"{path}: bad prediction header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected):
                raise ValueError(f"{path}:{lineno}: expected "
                                 f"{len(expected)} fields, got {len(row)}")
            try:
                key = (row[0], int(row[1]))
                values = np.array([float(x) for x in row[2:]],
                                  dtype=np.float64)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric field") from None
            if key in out:
                raise ValueError(f"{path}:{lineno}: duplicate frame {key}")
            out[key] = values
    return out


def run_predict(config: ExperimentConfig, task: Task,
                checkpoint: Optional[Path] = None,
                smooth_override: Optional[str] = None,
                out_path: Optional[Path] = None) -> Path:
    """Predict every frame of every video, fill gaps, smooth, write the CSV."""
    encoder_model, _ = load_finetuned(config, task)
    model, _ = load_tmf(config, task, checkpoint)
    archives = load_archives(config.data_dir)
    label_file = labels_path(config, task)
    rec_map = (records_by_frame(load_labels(label_file, task))
               if label_file.exists() else {})
    vision_hash = file_digest(finetune_ckpt_path(config, task))
    features = assemble_features(config, task, encoder_model, archives,
                                 rec_map, vision_hash)
    spec = resolve_smoothing(config, task, smooth_override)
    dense: dict[str, np.ndarray] = {}
    for vid in sorted(archives):
        archive = archives[vid]
        raw = tmf_mod.predict_video(model, features[vid])
        sparse = {int(archive.frame_index[i]): raw[i]
                  for i in range(raw.shape[0])}
        filled = fill_missing(sparse, archive.n_frames)
        dense[vid] = apply_policy(filled, spec)
    out = out_path or predictions_path(config, task)
    write_predictions_csv(out, dense, task)
    return out


def run_evaluate(task: Task, predictions_file: Path, labels_file: Path,
                 report_path: Optional[Path] = None
                 ) -> metrics_mod.MetricsReport:
    """Score a prediction CSV against a label CSV on their shared frames.

    Every labeled frame must be present in the predictions; the first missing
    one raises AlignmentError. AU probabilities are thresholded at 0.5 and
    expression distributions argmaxed here, after any smoothing already baked
    into the file.
    """
    preds = read_predictions_csv(predictions_file, task)
    if not labels_file.exists():
        raise FileNotFoundError(f"no label file at {labels_file}")
    records = load_labels(labels_file, task)
    pred_rows, label_rows = [], []
    for rec in records:
        if rec.labels_for(task) is None:
            continue
        key = (rec.video_id, rec.frame_index)
        if key not in preds:
            raise AlignmentError(
                f"labeled frame {key[0]}:{key[1]} has no prediction "
                f"in {predictions_file}")
        pred_rows.append(preds[key])
        if task is Task.AU:
            label_rows.append(np.asarray(rec.au, dtype=np.int64))
        elif task is Task.EXPR:
            label_rows.append(rec.expr)
        else:
            label_rows.append(np.array([rec.valence, rec.arousal]))
    if not pred_rows:
        raise ValueError(f"no labeled frames in {labels_file}")
    pred = np.stack(pred_rows)
    if task is Task.AU:
        target = np.stack(label_rows)
        report = metrics_mod.classification_report(
            task, metrics_mod.binarize_au(pred), target)
    elif task is Task.EXPR:
        pred_oh = metrics_mod.expr_to_onehot(pred.argmax(axis=1))
        target_oh = metrics_mod.expr_to_onehot(
            np.asarray(label_rows, dtype=np.int64))
        report = metrics_mod.classification_report(task, pred_oh, target_oh)
    else:
        target = np.stack(label_rows)
        report = metrics_mod.score_va(pred[:, 0], pred[:, 1],
                                      target[:, 0], target[:, 1])
    if report_path is not None:
        report_path.parent.mkdir(parents=True, exist_ok=True)
        report.save(report_path)
    return report


def run_crossval(config: ExperimentConfig, task: Task,
                 n_folds: Optional[int] = None,
                 smooth_override: Optional[str] = "none") -> Path:
    """Video-level cross-validation of the fusion stage on cached features."""
    encoder_model, _ = load_finetuned(config, task)
    records = load_task_labels(config, task)
    rec_map = records_by_frame(records)
    archives = load_archives(config.data_dir)
    vision_hash = file_digest(finetune_ckpt_path(config, task))
    features = assemble_features(config, task, encoder_model, archives,
                                 rec_map, vision_hash)
    folds = make_folds(list(archives), n_folds or config.crossval.n_folds,
                       derive_seed(config.seed, "folds"))
    cv_dir = config.out_dir / f"crossval_{task.value}"
    cv_dir.mkdir(parents=True, exist_ok=True)
    folds.save(cv_dir / "folds.json")
    spec = resolve_smoothing(config, task, smooth_override)
    aggregates = []
    for fold in range(folds.n_folds):
        held_out = folds.videos_in_fold(fold)
        train_ids = [v for v in archives if folds.assignment[v] != fold]
        train_samples = build_clip_samples(config, task, features, archives,
                                           rec_map, train_ids)
        train_targets = np.concatenate(
            [s.targets[s.frame_valid] for s in train_samples
             if s.frame_valid.any()])
        task_spec = task_spec_for_training(task, train_targets,
                                           config.smoothing_for(task))
        input_dim = next(iter(features.values())).shape[1]
        tmf_config = tmf_mod.TMFConfig(
            input_dim=input_dim, task=task_spec,
            d_model=config.fusion.d_model, n_layers=config.fusion.n_layers,
            n_heads=config.fusion.n_heads, dropout=config.fusion.dropout,
            clip_length=config.fusion.clip_length)
        opt = OptimizerSpec(lr=config.fusion.lr,
                            batch_size=config.fusion.batch_size,
                            epochs=config.fusion.epochs,
                            seed=derive_seed(config.seed,
                                             f"crossval:{task.value}:{fold}"))
        model, _ = tmf_mod.tmf_train(train_samples, tmf_config, opt)
        pred_rows, label_rows = [], []
        for vid in held_out:
            archive = archives[vid]
            targets, valid = timeline_targets(archive, rec_map, task)
            raw = tmf_mod.predict_video(model, features[vid])
            smoothed = apply_policy(raw, spec)
            pred_rows.append(smoothed[valid])
            label_rows.append(targets[valid])
        pred = np.concatenate(pred_rows)
        target = np.concatenate(label_rows)
        if task is Task.AU:
            report = metrics_mod.classification_report(
                task, metrics_mod.binarize_au(pred),
                target.astype(np.int64))
        elif task is Task.EXPR:
            report = metrics_mod.classification_report(
                task, metrics_mod.expr_to_onehot(pred.argmax(axis=1)),
                target.astype(np.int64))
        else:
            report = metrics_mod.score_va(pred[:, 0], pred[:, 1],
                                          target[:, 0], target[:, 1])
        report.save(cv_dir / f"fold_{fold}_report.json")
        aggregates.append(report.aggregate)
    summary = {
        "task": task.value,
        "n_folds": folds.n_folds,
        "fold_aggregates": [float(a) for a in aggregates],
        "mean_aggregate": float(np.mean(aggregates)),
    }
    summary_path = cv_dir / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2) + "\n",
                            encoding="utf-8")
    return summary_path
