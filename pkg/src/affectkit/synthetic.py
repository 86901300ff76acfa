"""Self-contained synthetic videos with affect labels derived from two latents.

Each video follows a smooth two-channel latent trajectory (u_vis, u_aud) in
[-1, 1]. Rendered frames show only u_vis (a moving, brightness-modulated
blob); u_aud is invisible on screen and reachable only through an audio-side
feature provider. All labels are fixed functions of both latents, so a model
with audio access has strictly more signal than a vision-only one.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .datamodel import (
    FrameRecord, N_AU, N_EXPR, Task, save_labels,
)
from .seeding import derive_seed


@dataclass
class SyntheticVideo:
    video_id: str
    frames: np.ndarray
    frame_index: np.ndarray
    n_frames: int
    latent: np.ndarray
    au: np.ndarray
    expr: np.ndarray
    valence: np.ndarray
    arousal: np.ndarray

    @property
    def n_archived(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class LabelRule:
    """Dataset-level projection from latents to labels, fixed per seed."""

    au_vis: np.ndarray
    au_aud: np.ndarray
    au_thresh: np.ndarray

    @classmethod
    def from_seed(cls, seed: int) -> "LabelRule":
        rng = np.random.default_rng(derive_seed(seed, "label-rule"))
        sign = rng.choice([-1.0, 1.0], size=N_AU)
        au_vis = sign * rng.uniform(0.4, 1.0, size=N_AU)
        au_aud = rng.choice([-1.0, 1.0], size=N_AU) * rng.uniform(0.4, 1.0,
                                                                  size=N_AU)
        au_thresh = rng.uniform(-0.25, 0.25, size=N_AU)
        return cls(au_vis=au_vis, au_aud=au_aud, au_thresh=au_thresh)

    def labels_from_latent(self, latent: np.ndarray
                           ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        u_vis, u_aud = latent[:, 0], latent[:, 1]
        mix = np.outer(u_vis, self.au_vis) + np.outer(u_aud, self.au_aud)
        au = (mix > self.au_thresh).astype(np.int64)
        blend = 0.5 * u_vis + 0.5 * u_aud
        expr = np.clip(((blend + 1.0) / 2.0 * N_EXPR).astype(np.int64),
                       0, N_EXPR - 1)
        valence = np.clip(0.6 * u_vis + 0.4 * u_aud, -1.0, 1.0)
        arousal = np.clip(0.4 * u_vis - 0.6 * u_aud, -1.0, 1.0)
        return au, expr, valence, arousal


def _latent_trajectory(rng: np.random.Generator, n: int) -> np.ndarray:
    t = np.arange(n, dtype=np.float64)
    out = np.zeros((n, 2))
    for ch in range(2):
        freq = rng.uniform(1.0, 3.0)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        out[:, ch] = 0.9 * np.sin(2.0 * np.pi * freq * t / max(n, 1) + phase)
    return out


def _render_frames(rng: np.random.Generator, u_vis: np.ndarray,
                   image_size: int, channels: int) -> np.ndarray:
    n = u_vis.shape[0]
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    cy = (image_size - 1) / 2.0
    sigma = image_size / 6.0
    frames = np.zeros((n, image_size, image_size, channels), dtype=np.float64)
    cx = (u_vis + 1.0) / 2.0 * (image_size - 1)
    brightness = 0.6 + 0.4 * u_vis
    base = 0.1 * (xx / max(image_size - 1, 1))
    for i in range(n):
        blob = np.exp(-((xx - cx[i]) ** 2 + (yy - cy) ** 2) / (2 * sigma ** 2))
        img = base + brightness[i] * blob
        for ch in range(channels):
            frames[i, :, :, ch] = img
    frames += rng.normal(0.0, 0.01, size=frames.shape)
    return np.clip(frames, 0.0, 1.0).astype(np.float32)


def make_videos(n_videos: int, n_frames: int, image_size: int = 32,
                channels: int = 1, seed: int = 0,
                gap_rate: float = 0.0) -> list[SyntheticVideo]:
    """Generate labeled toy videos, deterministically per seed.

    gap_rate drops that fraction of frames from the archive (labels drop with
    them) while n_frames keeps the dense length, leaving holes for the
    nearest-frame fill to close at prediction time.
    """
    if n_videos < 1 or n_frames < 2:
        raise ValueError("need at least 1 video and 2 frames")
    if not 0.0 <= gap_rate < 1.0:
        raise ValueError("gap_rate must lie in [0, 1)")
    rule = LabelRule.from_seed(seed)
    videos = []
    for v in range(n_videos):
        video_id = f"vid{v:03d}"
        rng = np.random.default_rng(derive_seed(seed, f"video:{video_id}"))
        latent = _latent_trajectory(rng, n_frames)
        au, expr, valence, arousal = rule.labels_from_latent(latent)
        frames = _render_frames(rng, latent[:, 0], image_size, channels)
        keep = np.ones(n_frames, dtype=bool)
        if gap_rate > 0:
            keep = rng.uniform(size=n_frames) >= gap_rate
            keep[0] = True
        idx = np.nonzero(keep)[0]
        videos.append(SyntheticVideo(
            video_id=video_id,
            frames=frames[idx],
            frame_index=idx.astype(np.int64),
            n_frames=n_frames,
            latent=latent[idx],
            au=au[idx],
            expr=expr[idx],
            valence=valence[idx],
            arousal=arousal[idx],
        ))
    return videos


def video_records(video: SyntheticVideo, task: Task) -> list[FrameRecord]:
    """FrameRecords for one video's archived frames, labeled for one task."""
    records = []
    for i, t in enumerate(video.frame_index):
        rec = FrameRecord(video_id=video.video_id, frame_index=int(t))
        if task is Task.AU:
            rec.au = video.au[i].astype(np.float32)
        elif task is Task.EXPR:
            rec.expr = int(video.expr[i])
        else:
            rec.valence = float(video.valence[i])
            rec.arousal = float(video.arousal[i])
        records.append(rec)
    return records


def write_dataset(data_dir: Union[str, Path],
                  videos: Sequence[SyntheticVideo],
                  tasks: Sequence[Task] = (Task.AU, Task.EXPR, Task.VA)
                  ) -> None:
    """Write frames/<video>.npz archives and labels/<task>.csv files."""
    data_dir = Path(data_dir)
    frames_dir = data_dir / "frames"
    labels_dir = data_dir / "labels"
    frames_dir.mkdir(parents=True, exist_ok=True)
    labels_dir.mkdir(parents=True, exist_ok=True)
    for video in videos:
        np.savez(frames_dir / f"{video.video_id}.npz",
                 frames=video.frames,
                 frame_index=video.frame_index,
                 n_frames=np.int64(video.n_frames))
    for task in tasks:
        records = []
        for video in videos:
            records.extend(video_records(video, task))
        save_labels(labels_dir / f"{task.value}.csv", records, task)


@dataclass
class VideoArchive:
    """Frames of one video as stored on disk."""

    video_id: str
    frames: np.ndarray
    frame_index: np.ndarray
    n_frames: int


def read_video_archive(path: Union[str, Path]) -> VideoArchive:
    path = Path(path)
    with np.load(path) as data:
        for key in ("frames", "frame_index", "n_frames"):
            if key not in data:
                raise ValueError(f"{path}: archive missing {key!r}")
        frames = data["frames"].astype(np.float32)
        frame_index = data["frame_index"].astype(np.int64)
        n_frames = int(data["n_frames"])
    if frames.ndim != 4:
        raise ValueError(f"{path}: frames must be [n, H, W, C]")
    if frame_index.shape != (frames.shape[0],):
        raise ValueError(f"{path}: frame_index length != frame count")
    if frames.shape[0] and (frame_index.min() < 0
                            or frame_index.max() >= n_frames):
        raise ValueError(f"{path}: frame_index outside [0, n_frames)")
    return VideoArchive(video_id=path.stem, frames=frames,
                        frame_index=frame_index, n_frames=n_frames)


def load_archives(data_dir: Union[str, Path]) -> dict[str, VideoArchive]:
    frames_dir = Path(data_dir) / "frames"
    if not frames_dir.is_dir():
        raise FileNotFoundError(f"no frames directory at {frames_dir}")
    archives = {}
    for path in sorted(frames_dir.glob("*.npz")):
        archives[path.stem] = read_video_archive(path)
    if not archives:
        raise FileNotFoundError(f"no .npz archives in {frames_dir}")
    return archives
