"""Evaluation metrics: per-class F1, macro task scores, CCC/PCC aggregates."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .datamodel import AU_NAMES, EXPR_NAMES, N_AU, N_EXPR, Task
from .losses import ccc

ERI_CLASSES = (
    "adoration", "amusement", "anxiety", "disgust", "fear", "horror", "surprise",
)
N_ERI = len(ERI_CLASSES)

AU_THRESHOLD = 0.5


@dataclass
class MetricsReport:
    """Evaluation summary for one task on one prediction set.

    per_class holds the per-output scores in task order (F1 for AU/EXPR, CCC
    for VA, PCC for reaction intensities); aggregate is the task score built
    from them. degenerate_flags names outputs whose score was pinned by a
    zero-denominator convention rather than measured.
    """

    task: str
    n_frames: int
    per_class: list[float]
    aggregate: float
    class_names: list[str] = field(default_factory=list)
    degenerate_flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "n_frames": self.n_frames,
            "class_names": list(self.class_names),
            "per_class": [float(x) for x in self.per_class],
            "aggregate": float(self.aggregate),
            "degenerate_flags": list(self.degenerate_flags),
        }

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n",
                              encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "MetricsReport":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(task=d["task"], n_frames=int(d["n_frames"]),
                   per_class=[float(x) for x in d["per_class"]],
                   aggregate=float(d["aggregate"]),
                   class_names=[str(x) for x in d.get("class_names", [])],
                   degenerate_flags=[str(x) for x in d.get("degenerate_flags", [])])


def _check_binary(a: np.ndarray, what: str) -> None:
    bad = ~np.isin(a, (0, 1))
    if bad.any():
        raise ValueError(f"{what} must be binary 0/1")


def f1_per_class(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-class F1 = 2TP / (2TP + FP + FN) for binary [N, C] arrays.

    Counts are pooled over frames (micro within a class); classes are kept
    separate. A class with zero denominator (no positives predicted or
    present) scores 0.
    """
    p = np.asarray(pred)
    t = np.asarray(target)
    if p.ndim != 2 or p.shape != t.shape:
        raise ValueError(f"pred {p.shape} and target {t.shape} must match as [N, C]")
    if p.shape[0] == 0:
        raise ValueError("no frames to score")
    _check_binary(p, "pred")
    _check_binary(t, "target")
    p = p.astype(bool)
    t = t.astype(bool)
    tp = (p & t).sum(axis=0).astype(np.float64)
    fp = (p & ~t).sum(axis=0).astype(np.float64)
    fn = (~p & t).sum(axis=0).astype(np.float64)
    denom = 2.0 * tp + fp + fn
    out = np.zeros(p.shape[1], dtype=np.float64)
    ok = denom > 0
    out[ok] = 2.0 * tp[ok] / denom[ok]
    return out


def f1_degenerate_classes(pred: np.ndarray, target: np.ndarray,
                          names: Sequence[str]) -> list[str]:
    """Names of classes whose F1 denominator 2TP+FP+FN is zero."""
    p = np.asarray(pred).astype(bool)
    t = np.asarray(target).astype(bool)
    tp = (p & t).sum(axis=0)
    fp = (p & ~t).sum(axis=0)
    fn = (~p & t).sum(axis=0)
    return [names[j] for j in range(p.shape[1])
            if 2 * tp[j] + fp[j] + fn[j] == 0]


def score_au(f1s: Sequence[float]) -> float:
    """Macro AU score: unweighted mean of the 12 per-unit F1 values."""
    f = np.asarray(f1s, dtype=np.float64)
    if f.shape != (N_AU,):
        raise ValueError(f"expected {N_AU} AU F1 values, got shape {f.shape}")
    return float(f.mean())


def score_expr(f1s: Sequence[float]) -> float:
    """Macro expression score: unweighted mean of the 8 per-class F1 values."""
    f = np.asarray(f1s, dtype=np.float64)
    if f.shape != (N_EXPR,):
        raise ValueError(f"expected {N_EXPR} expression F1 values, got shape {f.shape}")
    return float(f.mean())


def aggregate_va(ccc_valence: float, ccc_arousal: float) -> float:
    """VA score: 0.5 * (CCC_valence + CCC_arousal)."""
    return 0.5 * (float(ccc_valence) + float(ccc_arousal))


def score_va(pred_valence: np.ndarray, pred_arousal: np.ndarray,
             true_valence: np.ndarray, true_arousal: np.ndarray) -> MetricsReport:
    """CCC of valence and arousal over all frames, averaged into one score."""
    pv = np.asarray(pred_valence, dtype=np.float64)
    pa = np.asarray(pred_arousal, dtype=np.float64)
    tv = np.asarray(true_valence, dtype=np.float64)
    ta = np.asarray(true_arousal, dtype=np.float64)
    if not (pv.shape == pa.shape == tv.shape == ta.shape) or pv.ndim != 1:
        raise ValueError("valence/arousal series must be equal-length 1-D arrays")
    if pv.size < 2:
        raise ValueError("need at least 2 frames to score VA")
    cv = float(ccc(pv, tv))
    ca = float(ccc(pa, ta))
    flags = []
    if pv.var() == 0 or tv.var() == 0:
        flags.append("valence")
    if pa.var() == 0 or ta.var() == 0:
        flags.append("arousal")
    return MetricsReport(task=Task.VA.value, n_frames=pv.size,
                         per_class=[cv, ca], aggregate=aggregate_va(cv, ca),
                         class_names=["valence", "arousal"],
                         degenerate_flags=flags)


def pcc(x: np.ndarray, y: np.ndarray) -> float:
    """Pearson correlation with population statistics; 0 if either side is constant."""
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if xa.ndim != 1 or xa.shape != ya.shape:
        raise ValueError("pcc expects equal-length 1-D inputs")
    if xa.size < 2:
        raise ValueError("pcc needs at least 2 points")
    dx = xa - xa.mean()
    dy = ya - ya.mean()
    denom = np.sqrt((dx * dx).mean()) * np.sqrt((dy * dy).mean())
    if denom == 0.0:
        return 0.0
    return float((dx * dy).mean() / denom)


def score_eri(pccs: Sequence[float]) -> float:
    """Reaction-intensity score: mean PCC over the 7 emotion dimensions."""
    p = np.asarray(pccs, dtype=np.float64)
    if p.shape != (N_ERI,):
        raise ValueError(f"expected {N_ERI} PCC values, got shape {p.shape}")
    return float(p.mean())


def eri_report(pred: np.ndarray, target: np.ndarray) -> MetricsReport:
    """Per-dimension PCC plus the mean score for reaction-intensity outputs."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.ndim != 2 or p.shape != t.shape or p.shape[1] != N_ERI:
        raise ValueError(f"pred and target must both be [N, {N_ERI}]")
    vals = [pcc(p[:, j], t[:, j]) for j in range(N_ERI)]
    flags = [ERI_CLASSES[j] for j in range(N_ERI)
             if p[:, j].var() == 0 or t[:, j].var() == 0]
    return MetricsReport(task="eri", n_frames=p.shape[0], per_class=vals,
                         aggregate=score_eri(vals),
                         class_names=list(ERI_CLASSES),
                         degenerate_flags=flags)


def binarize_au(probs: np.ndarray, threshold: float = AU_THRESHOLD) -> np.ndarray:
    """AU probabilities -> hard 0/1 decisions at the given threshold."""
    p = np.asarray(probs)
    return (p >= threshold).astype(np.int64)


def expr_to_onehot(classes: np.ndarray) -> np.ndarray:
    """Expression class indices [N] -> one-hot [N, 8] int array."""
    idx = np.asarray(classes, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError("classes must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= N_EXPR):
        raise ValueError(f"class index outside [0, {N_EXPR})")
    out = np.zeros((idx.size, N_EXPR), dtype=np.int64)
    out[np.arange(idx.size), idx] = 1
    return out


def classification_report(task: Task, pred_bin: np.ndarray,
                          target_bin: np.ndarray) -> MetricsReport:
    """Assemble the F1-based report for AU or EXPR from binary [N, C] arrays."""
    if task is Task.AU:
        names = list(AU_NAMES)
        agg = score_au
    elif task is Task.EXPR:
        names = list(EXPR_NAMES)
        agg = score_expr
    else:
        raise ValueError("classification_report covers AU and EXPR only")
    f1s = f1_per_class(pred_bin, target_bin)
    return MetricsReport(task=task.value, n_frames=int(np.asarray(pred_bin).shape[0]),
                         per_class=[float(x) for x in f1s],
                         aggregate=agg(f1s), class_names=names,
                         degenerate_flags=f1_degenerate_classes(pred_bin, target_bin, names))
