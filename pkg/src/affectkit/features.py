"""Per-frame feature extraction, modality alignment, and the feature cache."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch

from .mae import MAEEncoder
from .seeding import derive_seed


@dataclass
class FeatureSequence:
    """One provider's per-frame feature rows for one video."""

    provider_id: str
    video_id: str
    features: np.ndarray

    def __post_init__(self) -> None:
        f = np.asarray(self.features, dtype=np.float32)
        if f.ndim != 2:
            raise ValueError("features must be [n_frames, dim]")
        self.features = f

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class FeatureSetSpec:
    """Which providers feed the fusion model, and in what column order."""

    vision_providers: tuple[str, ...]
    audio_providers: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "vision_providers",
                           tuple(self.vision_providers))
        object.__setattr__(self, "audio_providers",
                           tuple(self.audio_providers))
        if len(self.vision_providers) == 0:
            raise ValueError("need at least one vision provider")
        everything = self.ordered()
        if len(set(everything)) != len(everything):
            raise ValueError("duplicate provider ids")

    def ordered(self) -> tuple[str, ...]:
        return self.vision_providers + self.audio_providers


def extract_vision(encoder: MAEEncoder, frames: Union[np.ndarray, torch.Tensor],
                   video_id: str, provider_id: str = "mae-vision",
                   batch_size: int = 64) -> FeatureSequence:
    """Pooled encoder embedding of each frame, with the encoder left untouched.

    frames is [n, H, W, C] in [0, 1]. Runs under no_grad in eval mode; the
    result does not depend on batch_size.
    """
    data = torch.as_tensor(np.asarray(frames), dtype=torch.float32)
    if data.dim() != 4:
        raise ValueError("frames must be [n, H, W, C]")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    was_training = encoder.training
    encoder.eval()
    rows = []
    with torch.no_grad():
        for i in range(0, data.shape[0], batch_size):
            _, pooled = encoder(data[i:i + batch_size])
            rows.append(pooled)
    encoder.train(was_training)
    feats = (torch.cat(rows).numpy() if rows
             else np.zeros((0, encoder.config.encoder_dim)))
    return FeatureSequence(provider_id=provider_id, video_id=video_id,
                           features=feats.astype(np.float32))


def align_audio(audio_features: np.ndarray, audio_rate: float,
                video_rate: float, n_frames: int,
                provider_id: str = "audio",
                video_id: str = "") -> FeatureSequence:
    """Resample per-step audio features onto the video frame clock.

    Video frame t (timestamp t / video_rate) takes the audio step nearest in
    time; exact midpoints resolve to the earlier step, and out-of-range
    frames clamp to the first/last step.
    """
    audio = np.asarray(audio_features, dtype=np.float32)
    if audio.ndim != 2 or audio.shape[0] == 0:
        raise ValueError("audio_features must be a non-empty [m, dim] array")
    if not (audio_rate > 0 and video_rate > 0):
        raise ValueError("rates must be > 0")
    if n_frames < 0:
        raise ValueError("n_frames must be >= 0")
    m = audio.shape[0]
    t = np.arange(n_frames, dtype=np.float64)
    exact = t * (audio_rate / video_rate)
    # Nearest step with ties toward earlier: ceil(x - 1/2).
    idx = np.ceil(exact - 0.5).astype(np.int64)
    idx = np.clip(idx, 0, m - 1)
    return FeatureSequence(provider_id=provider_id, video_id=video_id,
                           features=audio[idx])


def combine(sequences: Sequence[FeatureSequence],
            spec: FeatureSetSpec) -> FeatureSequence:
    """Column-concatenate one sequence per provider, ordered as in ``spec``.

    All sequences must cover the same video with the same frame count;
    anything missing, extra, or misaligned raises ValueError.
    """
    by_provider: dict[str, FeatureSequence] = {}
    for seq in sequences:
        if seq.provider_id in by_provider:
            raise ValueError(f"duplicate sequence for provider "
                             f"{seq.provider_id!r}")
        by_provider[seq.provider_id] = seq
    wanted = spec.ordered()
    missing = [p for p in wanted if p not in by_provider]
    if missing:
        raise ValueError(f"missing feature sequences for providers {missing}")
    extra = [p for p in by_provider if p not in wanted]
    if extra:
        raise ValueError(f"unexpected feature sequences for providers {extra}")
    chosen = [by_provider[p] for p in wanted]
    video_ids = {seq.video_id for seq in chosen}
    if len(video_ids) != 1:
        raise ValueError(f"sequences cover different videos: {sorted(video_ids)}")
    lengths = {seq.n_frames for seq in chosen}
    if len(lengths) != 1:
        raise ValueError(f"frame-count mismatch across providers: "
                         f"{ {seq.provider_id: seq.n_frames for seq in chosen} }")
    return FeatureSequence(
        provider_id="+".join(wanted),
        video_id=chosen[0].video_id,
        features=np.concatenate([seq.features for seq in chosen], axis=1))


PROVIDER_PROFILES = ("noise", "label_correlated")


class SyntheticFeatureProvider:
    """Deterministic stand-in for a pretrained audio (or extra) feature model.

    profile 'noise' emits Gaussian rows; 'label_correlated' mixes a planted
    per-frame signal into the leading columns so feature column j tracks
    planted column j mod k. Rows depend only on (seed, provider_id, video_id,
    n_frames), never on call order.
    """

    def __init__(self, provider_id: str, dim: int, seed: int,
                 profile: str = "noise", noise_scale: float = 0.3):
        profile = profile.replace("-", "_")
        if profile not in PROVIDER_PROFILES:
            raise ValueError(f"unknown profile {profile!r}; "
                             f"expected one of {PROVIDER_PROFILES}")
        if dim < 1:
            raise ValueError("dim must be >= 1")
        if noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")
        self.provider_id = provider_id
        self.dim = dim
        self.seed = seed
        self.profile = profile
        self.noise_scale = noise_scale

    def _rng(self, video_id: str) -> np.random.Generator:
        return np.random.default_rng(
            derive_seed(self.seed, f"provider:{self.provider_id}:{video_id}"))

    def features_for(self, video_id: str, n_frames: int,
                     planted: Optional[np.ndarray] = None) -> FeatureSequence:
        if n_frames < 0:
            raise ValueError("n_frames must be >= 0")
        rng = self._rng(video_id)
        noise = rng.normal(0.0, 1.0, size=(n_frames, self.dim))
        if self.profile == "noise":
            feats = noise
        else:
            if planted is None:
                raise ValueError("label_correlated profile needs a planted signal")
            signal = np.asarray(planted, dtype=np.float64)
            if signal.ndim == 1:
                signal = signal[:, None]
            if signal.shape[0] != n_frames:
                raise ValueError("planted signal length != n_frames")
            k = signal.shape[1]
            cols = signal[:, np.arange(self.dim) % k]
            feats = cols + self.noise_scale * noise
        return FeatureSequence(provider_id=self.provider_id,
                               video_id=video_id,
                               features=feats.astype(np.float32))

    def params(self) -> dict:
        return {"provider_id": self.provider_id, "dim": self.dim,
                "seed": self.seed, "profile": self.profile,
                "noise_scale": self.noise_scale}


def synthetic_audio_provider(seed: int, dim: int = 16,
                             profile: str = "noise",
                             provider_id: str = "synthetic-audio",
                             noise_scale: float = 0.3) -> SyntheticFeatureProvider:
    """Factory for the stand-in audio feature source."""
    return SyntheticFeatureProvider(provider_id=provider_id, dim=dim,
                                    seed=seed, profile=profile,
                                    noise_scale=noise_scale)


def _sanitize(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", text)


def _cache_key(provider_id: str, video_id: str, config_hash: str) -> str:
    digest = hashlib.sha256(
        f"{provider_id}\x00{video_id}\x00{config_hash}".encode("utf-8")
    ).hexdigest()[:12]
    return f"{_sanitize(provider_id)}__{_sanitize(video_id)}__{digest}"


def save_features(cache_dir: Union[str, Path], seq: FeatureSequence,
                  config_hash: str) -> Path:
    """Persist a feature sequence as JSON sidecar + raw float32 payload."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    key = _cache_key(seq.provider_id, seq.video_id, config_hash)
    payload_name = f"{key}.bin"
    sidecar = {
        "provider_id": seq.provider_id,
        "video_id": seq.video_id,
        "config_hash": config_hash,
        "n_frames": seq.n_frames,
        "dim": seq.dim,
        "dtype": "float32",
        "byte_order": "little",
        "order": "C",
        "payload": payload_name,
    }
    (cache_dir / payload_name).write_bytes(
        np.ascontiguousarray(seq.features).astype("<f4").tobytes(order="C"))
    (cache_dir / f"{key}.json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return cache_dir / f"{key}.json"


def load_features(cache_dir: Union[str, Path], provider_id: str,
                  video_id: str, config_hash: str) -> Optional[FeatureSequence]:
    """Fetch a cached sequence; None on a clean miss, ValueError if corrupt."""
    cache_dir = Path(cache_dir)
    key = _cache_key(provider_id, video_id, config_hash)
    sidecar_path = cache_dir / f"{key}.json"
    if not sidecar_path.exists():
        return None
    try:
        sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"{sidecar_path}: corrupt sidecar ({exc})") from None
    for field_name in ("provider_id", "video_id", "n_frames", "dim", "payload"):
        if field_name not in sidecar:
            raise ValueError(f"{sidecar_path}: sidecar missing {field_name!r}")
    payload_path = cache_dir / sidecar["payload"]
    if not payload_path.exists():
        raise ValueError(f"{payload_path}: payload missing for cached features")
    raw = payload_path.read_bytes()
    n, d = int(sidecar["n_frames"]), int(sidecar["dim"])
    expected = n * d * 4
    if len(raw) != expected:
        raise ValueError(f"{payload_path}: expected {expected} bytes, "
                         f"got {len(raw)}")
    feats = np.frombuffer(raw, dtype="<f4").reshape(n, d).astype(np.float32)
    return FeatureSequence(provider_id=sidecar["provider_id"],
                           video_id=sidecar["video_id"], features=feats)


def file_digest(path: Union[str, Path]) -> str:
    """sha256 of a file's bytes; used to key caches on checkpoint identity."""
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def params_digest(params: dict) -> str:
    """Stable sha256 of a JSON-serializable parameter dict."""
    return hashlib.sha256(
        json.dumps(params, sort_keys=True, separators=(",", ":")).encode("utf-8")
    ).hexdigest()
