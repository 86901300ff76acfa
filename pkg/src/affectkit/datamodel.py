"""Core domain types and dataset plumbing: label CSV I/O, clip segmentation, folds."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

AU_NAMES = (
    "au1", "au2", "au4", "au6", "au7", "au10",
    "au12", "au15", "au23", "au24", "au25", "au26",
)
EXPR_NAMES = (
    "neutral", "anger", "disgust", "fear",
    "happiness", "sadness", "surprise", "other",
)
VA_NAMES = ("valence", "arousal")

N_AU = len(AU_NAMES)
N_EXPR = len(EXPR_NAMES)
N_VA = len(VA_NAMES)


class Task(str, Enum):
    AU = "au"
    EXPR = "expr"
    VA = "va"


TASK_OUTPUTS = {Task.AU: N_AU, Task.EXPR: N_EXPR, Task.VA: N_VA}
TASK_COLUMNS = {Task.AU: AU_NAMES, Task.EXPR: ("expression",), Task.VA: VA_NAMES}

SMOOTHING_KINDS = ("none", "gaussian", "median", "average")

# Per-task post-processing defaults.
DEFAULT_GAUSSIAN_SIGMA = {Task.AU: 5.0, Task.EXPR: 25.0, Task.VA: 25.0}
DEFAULT_WINDOW = {Task.AU: 10, Task.EXPR: 25, Task.VA: 50}


class LabelParseError(ValueError):
    """A label CSV row could not be parsed (wrong arity, non-numeric field)."""


class LabelValidationError(ValueError):
    """A label CSV row parsed but carries an out-of-range value."""


@dataclass(frozen=True)
class SmoothingSpec:
    """Choice of temporal filter applied to per-frame outputs before scoring.

    window is the filter span in frames for median/average; sigma is the
    Gaussian standard deviation in frames. Whichever parameter the kind does
    not use is ignored but still validated.
    """

    kind: str = "none"
    window: int = 1
    sigma: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in SMOOTHING_KINDS:
            raise ValueError(f"unknown smoothing kind {self.kind!r}")
        if self.window < 1:
            raise ValueError("smoothing window must be >= 1")
        if not self.sigma > 0:
            raise ValueError("smoothing sigma must be > 0")


def default_smoothing(task: "Task", kind: str = "gaussian") -> SmoothingSpec:
    """Per-task default filter parameters (sigma 5/25/25, window 10/25/50)."""
    if kind == "none":
        return SmoothingSpec("none")
    return SmoothingSpec(
        kind=kind,
        window=DEFAULT_WINDOW[task],
        sigma=DEFAULT_GAUSSIAN_SIGMA[task],
    )


@dataclass(frozen=True, eq=False)
class TaskSpec:
    """Static description of one prediction task.

    class_weights is present exactly for the classification tasks (AU, EXPR)
    and is None for VA; for_task() fills uniform weights until real ones are
    computed from label counts.
    """

    task: Task
    n_outputs: int
    class_weights: Optional[np.ndarray]
    smoothing: SmoothingSpec = SmoothingSpec()

    def __post_init__(self) -> None:
        if self.n_outputs != TASK_OUTPUTS[self.task]:
            raise ValueError(
                f"{self.task.value} has {TASK_OUTPUTS[self.task]} outputs, "
                f"got {self.n_outputs}"
            )
        if self.task is Task.VA:
            if self.class_weights is not None:
                raise ValueError("VA task takes no class weights")
        else:
            if self.class_weights is None:
                raise ValueError(f"{self.task.value} task requires class weights")
            w = np.asarray(self.class_weights, dtype=np.float64)
            if w.shape != (self.n_outputs,):
                raise ValueError(
                    f"class_weights shape {w.shape} != ({self.n_outputs},)"
                )
            if not np.all(w > 0):
                raise ValueError("class weights must be positive")
            object.__setattr__(self, "class_weights", w)

    @classmethod
    def for_task(
        cls,
        task: Union[Task, str],
        class_weights: Optional[np.ndarray] = None,
        smoothing: Optional[SmoothingSpec] = None,
    ) -> "TaskSpec":
        task = Task(task)
        n = TASK_OUTPUTS[task]
        if task is not Task.VA and class_weights is None:
            class_weights = np.ones(n)
        if smoothing is None:
            smoothing = SmoothingSpec()
        return cls(task=task, n_outputs=n, class_weights=class_weights,
                   smoothing=smoothing)


@dataclass(eq=False)
class FrameRecord:
    """Labels attached to one video frame.

    A None field means the annotation is absent for that frame. AU labels are
    a length-12 binary vector; expression is a class index in [0, 8);
    valence/arousal live in [-1, 1]. face_present is carried by the frame
    archive, not the label CSV, so it does not survive a CSV round trip.
    """

    video_id: str
    frame_index: int
    au: Optional[np.ndarray] = None
    expr: Optional[int] = None
    valence: Optional[float] = None
    arousal: Optional[float] = None
    face_present: bool = True

    def labels_for(self, task: Task):
        if task is Task.AU:
            return self.au
        if task is Task.EXPR:
            return self.expr
        if self.valence is None:
            return None
        return (self.valence, self.arousal)


@dataclass(frozen=True)
class VideoClip:
    """A window of clip_length consecutive frame positions within one video.

    start indexes positions in the video's frame sequence (not raw frame
    numbers). frame_valid marks real frames; the zero-padded tail of the last
    clip is False so it never contributes to losses or metrics.
    """

    video_id: str
    start: int
    clip_length: int
    frame_valid: np.ndarray

    def __post_init__(self) -> None:
        valid = np.asarray(self.frame_valid, dtype=bool)
        if valid.shape != (self.clip_length,):
            raise ValueError("frame_valid must have clip_length entries")
        object.__setattr__(self, "frame_valid", valid)

    @property
    def n_valid(self) -> int:
        return int(self.frame_valid.sum())


@dataclass(frozen=True)
class FoldSplit:
    """Assignment of whole videos to cross-validation folds."""

    n_folds: int
    assignment: Mapping[str, int]

    def __post_init__(self) -> None:
        if self.n_folds < 2:
            raise ValueError("need at least 2 folds")
        for vid, fold in self.assignment.items():
            if not 0 <= fold < self.n_folds:
                raise ValueError(f"video {vid!r} assigned to bad fold {fold}")

    def videos_in_fold(self, fold: int) -> list[str]:
        return sorted(v for v, f in self.assignment.items() if f == fold)

    def fold_sizes(self) -> list[int]:
        sizes = [0] * self.n_folds
        for fold in self.assignment.values():
            sizes[fold] += 1
        return sizes

    def save(self, path: Union[str, Path]) -> None:
        payload = {"n_folds": self.n_folds,
                   "assignment": dict(sorted(self.assignment.items()))}
        Path(path).write_text(json.dumps(payload, indent=2) + "\n",
                              encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "FoldSplit":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(n_folds=int(payload["n_folds"]),
                   assignment={str(k): int(v)
                               for k, v in payload["assignment"].items()})


def _parse_int(field_text: str, path: str, lineno: int, what: str) -> int:
    try:
        return int(field_text)
    except ValueError:
        raise LabelParseError(
            f"{path}:{lineno}: {what} {field_text!r} is not an integer"
        ) from None


def _parse_float(field_text: str, path: str, lineno: int, what: str) -> float:
    try:
        return float(field_text)
    except ValueError:
        raise LabelParseError(
            f"{path}:{lineno}: {what} {field_text!r} is not a number"
        ) from None


def load_labels(path: Union[str, Path],
                task: Union[Task, str, TaskSpec]) -> list[FrameRecord]:
    """Read a per-task label CSV into FrameRecords.

    Expected header: video_id,frame_index,<task columns>. The sentinel -1
    marks an absent annotation: any -1 entry blanks the AU vector, -1 blanks
    the expression, and a VA row is absent only when BOTH columns are exactly
    -1 (since -1 is itself a legal valence/arousal value). Rows come back
    sorted by (video_id, frame_index). Raises LabelParseError for malformed
    rows and LabelValidationError for out-of-range values, both with the
    offending line number.
    """
    if isinstance(task, TaskSpec):
        task = task.task
    task = Task(task)
    path = Path(path)
    expected = ["video_id", "frame_index", *TASK_COLUMNS[task]]
    records: list[FrameRecord] = []
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise LabelParseError(f"{path}:1: empty file, expected header") from None
        if header != expected:
            raise LabelParseError(
                f"{path}:1: bad header {header!r}, expected {expected!r}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected):
                raise LabelParseError(
                    f"{path}:{lineno}: expected {len(expected)} fields, "
                    f"got {len(row)}"
                )
            video_id = row[0]
            if not video_id:
                raise LabelParseError(f"{path}:{lineno}: empty video_id")
            frame_index = _parse_int(row[1], str(path), lineno, "frame_index")
            if frame_index < 0:
                raise LabelValidationError(
                    f"{path}:{lineno}: negative frame_index {frame_index}"
                )
            rec = FrameRecord(video_id=video_id, frame_index=frame_index)
            if task is Task.AU:
                vals = [_parse_int(f, str(path), lineno, name)
                        for f, name in zip(row[2:], AU_NAMES)]
                bad = [v for v in vals if v not in (-1, 0, 1)]
                if bad:
                    raise LabelValidationError(
                        f"{path}:{lineno}: AU values must be 0, 1 or -1, got {bad[0]}"
                    )
                if -1 not in vals:
                    rec.au = np.array(vals, dtype=np.float32)
            elif task is Task.EXPR:
                val = _parse_int(row[2], str(path), lineno, "expression")
                if val != -1:
                    if not 0 <= val < N_EXPR:
                        raise LabelValidationError(
                            f"{path}:{lineno}: expression {val} outside [0, {N_EXPR})"
                        )
                    rec.expr = val
            else:
                v = _parse_float(row[2], str(path), lineno, "valence")
                a = _parse_float(row[3], str(path), lineno, "arousal")
                if not (v == -1.0 and a == -1.0):
                    for name, x in (("valence", v), ("arousal", a)):
                        if not -1.0 <= x <= 1.0:
                            raise LabelValidationError(
                                f"{path}:{lineno}: {name} {x} outside [-1, 1]"
                            )
                    rec.valence, rec.arousal = v, a
            records.append(rec)
    records.sort(key=lambda r: (r.video_id, r.frame_index))
    return records


def _format_float(x: float) -> str:
    return repr(float(x))


def save_labels(path: Union[str, Path], records: Iterable[FrameRecord],
                task: Union[Task, str, TaskSpec]) -> None:
    """Write FrameRecords to the task's CSV layout (UTF-8, LF, -1 sentinels)."""
    if isinstance(task, TaskSpec):
        task = task.task
    task = Task(task)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["video_id", "frame_index", *TASK_COLUMNS[task]])
        for rec in records:
            base = [rec.video_id, str(rec.frame_index)]
            if task is Task.AU:
                if rec.au is None:
                    base += ["-1"] * N_AU
                else:
                    au = np.asarray(rec.au)
                    if au.shape != (N_AU,):
                        raise ValueError(
                            f"AU vector for {rec.video_id}:{rec.frame_index} "
                            f"has shape {au.shape}"
                        )
                    base += [str(int(v)) for v in au]
            elif task is Task.EXPR:
                base.append("-1" if rec.expr is None else str(int(rec.expr)))
            else:
                if rec.valence is None:
                    base += ["-1", "-1"]
                else:
                    base += [_format_float(rec.valence),
                             _format_float(rec.arousal)]
            writer.writerow(base)


def group_by_video(records: Sequence[FrameRecord]) -> dict[str, list[FrameRecord]]:
    """Group records per video, preserving input order within each video."""
    groups: dict[str, list[FrameRecord]] = {}
    for rec in records:
        groups.setdefault(rec.video_id, []).append(rec)
    return groups


def segment_clips(records: Sequence[FrameRecord],
                  clip_length: int) -> list[VideoClip]:
    """Cut each video's frame sequence into non-overlapping fixed-length clips.

    A video with n frames yields ceil(n / clip_length) clips; the last clip is
    padded to full length with frame_valid False on the padded tail. Clip
    starts index positions within the video's frame sequence.
    """
    if clip_length < 1:
        raise ValueError("clip_length must be >= 1")
    clips: list[VideoClip] = []
    for video_id, frames in group_by_video(records).items():
        n = len(frames)
        for start in range(0, n, clip_length):
            real = min(clip_length, n - start)
            valid = np.zeros(clip_length, dtype=bool)
            valid[:real] = True
            clips.append(VideoClip(video_id=video_id, start=start,
                                   clip_length=clip_length, frame_valid=valid))
    return clips


def make_folds(video_ids: Iterable[str], n_folds: int, seed: int) -> FoldSplit:
    """Deal videos into n_folds balanced folds (sizes differ by at most one).

    Videos are sorted, shuffled with the given seed, then dealt round-robin,
    so the split is a pure function of (video set, n_folds, seed) regardless
    of input ordering.
    """
    vids = sorted(set(video_ids))
    if n_folds < 2:
        raise ValueError("need at least 2 folds")
    if len(vids) < n_folds:
        raise ValueError(
            f"cannot split {len(vids)} videos into {n_folds} folds"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(vids))
    assignment = {vids[int(idx)]: pos % n_folds
                  for pos, idx in enumerate(order)}
    return FoldSplit(n_folds=n_folds, assignment=assignment)
