"""Temporal fusion: a clip-wise transformer over concatenated per-frame features."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn

from . import metrics as _metrics
from .datamodel import Task, TaskSpec, SmoothingSpec
from .losses import task_loss, task_outputs
from .optim import OptimizerSpec, require_epochs
from .seeding import derive_seed


@dataclass(frozen=True)
class TMFConfig:
    """Architecture of the fusion model.

    input_dim is the width of the combined per-frame feature vector;
    clip_length is the fixed temporal window the encoder attends over.
    """

    input_dim: int
    task: TaskSpec
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    dropout: float = 0.3
    clip_length: int = 100

    def __post_init__(self) -> None:
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.d_model < 1 or self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} must be a positive multiple of "
                f"n_heads {self.n_heads}"
            )
        if self.d_model % 2 != 0:
            raise ValueError("d_model must be even for sinusoidal positions")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.clip_length < 1:
            raise ValueError("clip_length must be >= 1")

    @property
    def dim_feedforward(self) -> int:
        return 4 * self.d_model

    def to_dict(self) -> dict:
        spec = self.task
        return {
            "input_dim": self.input_dim,
            "task": {
                "task": spec.task.value,
                "class_weights": (None if spec.class_weights is None
                                  else [float(w) for w in spec.class_weights]),
                "smoothing": {"kind": spec.smoothing.kind,
                              "window": spec.smoothing.window,
                              "sigma": spec.smoothing.sigma},
            },
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "dropout": self.dropout,
            "clip_length": self.clip_length,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TMFConfig":
        t = d["task"]
        weights = t.get("class_weights")
        spec = TaskSpec.for_task(
            t["task"],
            class_weights=None if weights is None else np.asarray(weights),
            smoothing=SmoothingSpec(**t["smoothing"]))
        return cls(input_dim=int(d["input_dim"]), task=spec,
                   d_model=int(d["d_model"]), n_layers=int(d["n_layers"]),
                   n_heads=int(d["n_heads"]), dropout=float(d["dropout"]),
                   clip_length=int(d["clip_length"]))


class PositionalEncoding(nn.Module):
    """Classic fixed sin/cos position table added to the input sequence."""

    def __init__(self, d_model: int, max_len: int):
        super().__init__()
        position = torch.arange(max_len, dtype=torch.float32).unsqueeze(1)
        div_term = torch.exp(torch.arange(0, d_model, 2, dtype=torch.float32)
                             * (-math.log(10000.0) / d_model))
        pe = torch.zeros(max_len, d_model)
        pe[:, 0::2] = torch.sin(position * div_term)
        pe[:, 1::2] = torch.cos(position * div_term)
        self.register_buffer("pe", pe.unsqueeze(0))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.pe[:, :x.size(1)]


class TemporalFusionModel(nn.Module):
    """Projection -> positions -> transformer encoder -> per-frame affine head."""

    def __init__(self, config: TMFConfig):
        super().__init__()
        self.config = config
        self.input_proj = nn.Linear(config.input_dim, config.d_model)
        self.pos_enc = PositionalEncoding(config.d_model, config.clip_length)
        layer = nn.TransformerEncoderLayer(
            d_model=config.d_model, nhead=config.n_heads,
            dim_feedforward=config.dim_feedforward,
            dropout=config.dropout, batch_first=True)
        # One code path for train and eval; the nested-tensor fast path
        # zeroes padded rows and would make the two modes diverge.
        self.encoder = nn.TransformerEncoder(layer, num_layers=config.n_layers,
                                             enable_nested_tensor=False)
        self.head = nn.Linear(config.d_model, config.task.n_outputs)

    def forward(self, features: torch.Tensor,
                frame_valid: Optional[torch.Tensor] = None) -> torch.Tensor:
        """[B, K, input_dim] features -> [B, K, n_outputs] raw logits.

        frame_valid marks real frames; padded positions are excluded from
        attention so their feature values cannot leak into valid frames.
        """
        if features.dim() != 3 or features.shape[2] != self.config.input_dim:
            raise ValueError(
                f"features must be [B, K, {self.config.input_dim}], "
                f"got {tuple(features.shape)}"
            )
        if features.shape[1] > self.config.clip_length:
            raise ValueError(
                f"clip of {features.shape[1]} frames exceeds clip_length "
                f"{self.config.clip_length}"
            )
        x = self.pos_enc(self.input_proj(features))
        padding_mask = None
        if frame_valid is not None:
            padding_mask = ~torch.as_tensor(frame_valid, dtype=torch.bool)
        x = self.encoder(x, src_key_padding_mask=padding_mask)
        return self.head(x)


@dataclass
class ClipSample:
    """One clip's worth of aligned features, targets and validity."""

    video_id: str
    start: int
    features: np.ndarray
    frame_valid: np.ndarray
    targets: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float32)
        self.frame_valid = np.asarray(self.frame_valid, dtype=bool)
        if self.features.ndim != 2:
            raise ValueError("features must be [K, dim]")
        if self.frame_valid.shape != (self.features.shape[0],):
            raise ValueError("frame_valid length != clip length")
        if self.targets is not None:
            self.targets = np.asarray(self.targets, dtype=np.float32)
            if self.targets.shape[0] != self.features.shape[0]:
                raise ValueError("targets length != clip length")


@dataclass
class ClipBatch:
    features: torch.Tensor
    frame_valid: torch.Tensor
    targets: Optional[torch.Tensor]
    video_ids: tuple[str, ...]
    starts: tuple[int, ...]


def clip_spans(n_frames: int, clip_length: int) -> list[tuple[int, int]]:
    """(start, real_length) for each of the ceil(n/K) clips covering n frames."""
    if clip_length < 1:
        raise ValueError("clip_length must be >= 1")
    if n_frames < 0:
        raise ValueError("n_frames must be >= 0")
    return [(start, min(clip_length, n_frames - start))
            for start in range(0, n_frames, clip_length)]


def clip_samples_for_video(video_id: str, features: np.ndarray,
                           clip_length: int,
                           targets: Optional[np.ndarray] = None,
                           label_valid: Optional[np.ndarray] = None
                           ) -> list[ClipSample]:
    """Cut one video's aligned feature (and target) rows into padded clips.

    frame_valid on a clip is True where the frame is real AND, when
    label_valid is given, carries a usable label; the zero-padded tail is
    always False.
    """
    feats = np.asarray(features, dtype=np.float32)
    if feats.ndim != 2:
        raise ValueError("features must be [n, dim]")
    n = feats.shape[0]
    if targets is not None:
        targets = np.asarray(targets, dtype=np.float32)
        if targets.ndim != 2 or targets.shape[0] != n:
            raise ValueError("targets must be [n, n_outputs] aligned to features")
    if label_valid is not None:
        label_valid = np.asarray(label_valid, dtype=bool)
        if label_valid.shape != (n,):
            raise ValueError("label_valid and features disagree on frame count")
    samples = []
    for start, real in clip_spans(n, clip_length):
        f = np.zeros((clip_length, feats.shape[1]), dtype=np.float32)
        f[:real] = feats[start:start + real]
        valid = np.zeros(clip_length, dtype=bool)
        valid[:real] = (label_valid[start:start + real]
                        if label_valid is not None else True)
        t = None
        if targets is not None:
            t = np.zeros((clip_length, targets.shape[1]), dtype=np.float32)
            t[:real] = targets[start:start + real]
        samples.append(ClipSample(video_id=video_id, start=start,
                                  features=f, frame_valid=valid, targets=t))
    return samples


def collate_clips(samples: Sequence[ClipSample]) -> ClipBatch:
    if not samples:
        raise ValueError("empty clip batch")
    feats = torch.from_numpy(np.stack([s.features for s in samples]))
    valid = torch.from_numpy(np.stack([s.frame_valid for s in samples]))
    targets = None
    if all(s.targets is not None for s in samples):
        targets = torch.from_numpy(np.stack([s.targets for s in samples]))
    return ClipBatch(features=feats, frame_valid=valid, targets=targets,
                     video_ids=tuple(s.video_id for s in samples),
                     starts=tuple(s.start for s in samples))


def tmf_forward(model: TemporalFusionModel, batch: ClipBatch,
                training: bool = False) -> torch.Tensor:
    """Activated per-frame predictions [B, K, n_outputs] for one clip batch."""
    model.train(training)
    logits = model(batch.features, batch.frame_valid)
    return task_outputs(logits, model.config.task.task)


def _flatten_valid(preds: torch.Tensor, targets: torch.Tensor,
                   valid: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    flat = valid.reshape(-1)
    p = preds.reshape(-1, preds.shape[-1])[flat]
    t = targets.reshape(-1, targets.shape[-1])[flat]
    return p, t


def _clip_metric(model: TemporalFusionModel, samples: Sequence[ClipSample],
                 task_spec: TaskSpec, batch_size: int) -> Optional[float]:
    preds, targs = [], []
    model.eval()
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            batch = collate_clips(samples[i:i + batch_size])
            if batch.targets is None:
                return None
            out = tmf_forward(model, batch, training=False)
            p, t = _flatten_valid(out, batch.targets, batch.frame_valid)
            preds.append(p.numpy())
            targs.append(t.numpy())
    pred = np.concatenate(preds) if preds else np.zeros((0, task_spec.n_outputs))
    targ = np.concatenate(targs) if targs else np.zeros((0, task_spec.n_outputs))
    if pred.shape[0] < 2:
        return None
    task = task_spec.task
    if task is Task.AU:
        return _metrics.score_au(_metrics.f1_per_class(
            _metrics.binarize_au(pred), targ.astype(np.int64)))
    if task is Task.EXPR:
        pred_oh = _metrics.expr_to_onehot(pred.argmax(axis=1))
        return _metrics.score_expr(_metrics.f1_per_class(
            pred_oh, targ.astype(np.int64)))
    return _metrics.score_va(pred[:, 0], pred[:, 1],
                             targ[:, 0], targ[:, 1]).aggregate


def tmf_train(samples: Sequence[ClipSample], config: TMFConfig,
              opt: OptimizerSpec,
              val_samples: Optional[Sequence[ClipSample]] = None
              ) -> tuple[TemporalFusionModel, list[dict]]:
    """Train the fusion model on clip samples with epoch-shuffled minibatches.

    The loss flattens every valid frame in the batch into one frame list.
    Batches with no valid frames (or fewer than two for VA) are skipped with
    a warning. History rows: epoch, mean train_loss, val_metric when
    val_samples is given.
    """
    epochs = require_epochs(opt)
    if not samples:
        raise ValueError("no clip samples to train on")
    for s in samples:
        if s.targets is None:
            raise ValueError(f"clip {s.video_id}:{s.start} has no targets")
        if s.features.shape[1] != config.input_dim:
            raise ValueError("clip feature width != config.input_dim")
        if s.features.shape[0] != config.clip_length:
            raise ValueError("clip length != config.clip_length")
    task_spec = config.task
    task = task_spec.task
    min_valid = 2 if task is Task.VA else 1
    torch.manual_seed(derive_seed(opt.seed, "tmf-init"))
    model = TemporalFusionModel(config)
    optimizer = opt.build(model.parameters())
    rng = np.random.default_rng(derive_seed(opt.seed, "tmf-batches"))
    torch_rng = torch.Generator().manual_seed(derive_seed(opt.seed, "tmf-dropout"))
    history: list[dict] = []
    n = len(samples)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        losses_seen = []
        for i in range(0, n, opt.batch_size):
            batch = collate_clips([samples[int(j)]
                                   for j in order[i:i + opt.batch_size]])
            n_valid = int(batch.frame_valid.sum())
            if n_valid < min_valid:
                warnings.warn(
                    f"skipping batch with {n_valid} valid frames "
                    f"(epoch {epoch})", RuntimeWarning)
                continue
            torch.manual_seed(int(torch.randint(0, 2 ** 31 - 1, (1,),
                                                generator=torch_rng)))
            preds = tmf_forward(model, batch, training=True)
            p, t = _flatten_valid(preds, batch.targets, batch.frame_valid)
            loss = task_loss(p, t, task, task_spec.class_weights)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses_seen.append(float(loss.detach()))
        row = {"epoch": epoch,
               "train_loss": float(np.mean(losses_seen)) if losses_seen else None}
        if val_samples is not None:
            row["val_metric"] = _clip_metric(model, val_samples, task_spec,
                                             opt.batch_size)
        history.append(row)
    model.eval()
    return model, history


def predict_video(model: TemporalFusionModel, features: np.ndarray,
                  batch_size: int = 32) -> np.ndarray:
    """Per-frame predictions [n, n_outputs] for one video's feature rows.

    The video is cut into the model's fixed-length clips; each clip is
    processed independently (attention never crosses clip boundaries) and
    padded tails are dropped from the output.
    """
    feats = np.asarray(features, dtype=np.float32)
    if feats.ndim != 2 or feats.shape[1] != model.config.input_dim:
        raise ValueError(
            f"features must be [n, {model.config.input_dim}]")
    n = feats.shape[0]
    if n == 0:
        return np.zeros((0, model.config.task.n_outputs), dtype=np.float64)
    samples = clip_samples_for_video("", feats, model.config.clip_length)
    rows = []
    model.eval()
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            batch = collate_clips(chunk)
            out = tmf_forward(model, batch, training=False).numpy()
            for sample, pred in zip(chunk, out):
                real = int(sample.frame_valid.sum())
                rows.append(pred[:real])
    return np.concatenate(rows).astype(np.float64)
