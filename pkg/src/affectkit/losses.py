"""Training losses: weighted BCE for AUs, weighted CE for expressions, CCC for VA."""

from __future__ import annotations

from typing import Optional, Sequence, Union

import numpy as np
import torch

from .datamodel import N_AU, N_EXPR, Task

# Probabilities are clamped to [EPS, 1-EPS] before any log.
EPS = 1e-7

ArrayLike = Union[np.ndarray, torch.Tensor, Sequence[float]]


def compute_class_weights(counts: ArrayLike) -> np.ndarray:
    """Inverse-frequency class weights, normalized to mean 1.

    w_j = (1 / c_j) / mean_k(1 / c_k). Rare classes get weights above 1,
    common ones below. Counts must be strictly positive.
    """
    c = np.asarray(counts, dtype=np.float64)
    if c.ndim != 1 or c.size == 0:
        raise ValueError("counts must be a non-empty 1-D array")
    if not np.all(c > 0):
        raise ValueError("class counts must be strictly positive")
    inv = 1.0 / c
    return inv / inv.mean()


def _as_tensor(x: ArrayLike, like: Optional[torch.Tensor] = None) -> torch.Tensor:
    t = torch.as_tensor(x)
    if like is not None and t.dtype != like.dtype and t.is_floating_point():
        t = t.to(like.dtype)
    return t


def _resolve_valid(valid: Optional[ArrayLike], n: int) -> torch.Tensor:
    if valid is None:
        return torch.ones(n, dtype=torch.bool)
    v = torch.as_tensor(valid, dtype=torch.bool)
    if v.shape != (n,):
        raise ValueError(f"valid mask shape {tuple(v.shape)} != ({n},)")
    return v


def au_loss(pred: ArrayLike, target: ArrayLike, weights: ArrayLike,
            valid: Optional[ArrayLike] = None) -> torch.Tensor:
    """Class-weighted binary cross-entropy over the 12 action units.

    pred holds probabilities in (0, 1), target binary {0, 1}, both [N, 12].
    Per frame: -(1/12) * sum_j w_j * (y_j log p_j + (1-y_j) log(1-p_j)),
    averaged over valid frames.
    """
    p = _as_tensor(pred)
    y = _as_tensor(target, like=p)
    if p.ndim != 2 or p.shape[1] != N_AU:
        raise ValueError(f"pred must be [N, {N_AU}], got {tuple(p.shape)}")
    if y.shape != p.shape:
        raise ValueError("pred and target shapes differ")
    w = _as_tensor(weights, like=p)
    if w.shape != (N_AU,):
        raise ValueError(f"weights must have {N_AU} entries")
    v = _resolve_valid(valid, p.shape[0])
    if int(v.sum()) == 0:
        raise ValueError("no valid frames in batch")
    p = torch.clamp(p, EPS, 1.0 - EPS)
    per_unit = y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)
    per_frame = -(per_unit * w).sum(dim=1) / N_AU
    return per_frame[v].mean()


def expr_loss(pred: ArrayLike, target: ArrayLike, weights: ArrayLike,
              valid: Optional[ArrayLike] = None) -> torch.Tensor:
    """Class-weighted cross-entropy over the 8 expression classes.

    pred holds softmax probabilities [N, 8]; target is one-hot [N, 8].
    Per frame: -(1/8) * sum_j w_j * z_j log zhat_j, averaged over valid frames.
    """
    p = _as_tensor(pred)
    z = _as_tensor(target, like=p)
    if p.ndim != 2 or p.shape[1] != N_EXPR:
        raise ValueError(f"pred must be [N, {N_EXPR}], got {tuple(p.shape)}")
    if z.shape != p.shape:
        raise ValueError("pred and target shapes differ")
    w = _as_tensor(weights, like=p)
    if w.shape != (N_EXPR,):
        raise ValueError(f"weights must have {N_EXPR} entries")
    v = _resolve_valid(valid, p.shape[0])
    if int(v.sum()) == 0:
        raise ValueError("no valid frames in batch")
    p = torch.clamp(p, EPS, 1.0 - EPS)
    per_frame = -(w * z * torch.log(p)).sum(dim=1) / N_EXPR
    return per_frame[v].mean()


def onehot_expr(classes: ArrayLike, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Expression class indices [N] -> one-hot [N, 8]."""
    idx = torch.as_tensor(classes, dtype=torch.long)
    if idx.ndim != 1:
        raise ValueError("classes must be 1-D")
    if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= N_EXPR):
        raise ValueError(f"class index outside [0, {N_EXPR})")
    return torch.nn.functional.one_hot(idx, N_EXPR).to(dtype)


def ccc(x: ArrayLike, y: ArrayLike) -> torch.Tensor:
    """Concordance correlation coefficient between two 1-D series.

    2*cov(x,y) / (var(x) + var(y) + (mean(x)-mean(y))^2) with population
    (1/N) statistics. Degenerate cases: both series constant and equal -> 1;
    otherwise a constant series yields 0 through the covariance term.
    Differentiable; needs at least 2 points.
    """
    xt = _as_tensor(x)
    yt = _as_tensor(y, like=xt)
    if xt.ndim != 1 or yt.ndim != 1:
        raise ValueError("ccc expects 1-D inputs")
    if xt.shape != yt.shape:
        raise ValueError("ccc inputs must have the same length")
    if xt.numel() < 2:
        raise ValueError("ccc needs at least 2 points")
    mx, my = xt.mean(), yt.mean()
    dx, dy = xt - mx, yt - my
    var_x = (dx * dx).mean()
    var_y = (dy * dy).mean()
    cov = (dx * dy).mean()
    denom = var_x + var_y + (mx - my) ** 2
    if float(denom.detach()) == 0.0:
        return torch.ones((), dtype=xt.dtype if xt.is_floating_point() else torch.float64)
    return 2.0 * cov / denom


def va_loss(pred: ArrayLike, target: ArrayLike,
            valid: Optional[ArrayLike] = None) -> torch.Tensor:
    """(1 - CCC(valence)) + (1 - CCC(arousal)) over a flattened frame batch.

    pred and target are [N, 2] with columns (valence, arousal); frames where
    valid is False are dropped before the statistics. Needs >= 2 valid frames.
    """
    p = _as_tensor(pred)
    t = _as_tensor(target, like=p)
    if p.ndim != 2 or p.shape[1] != 2:
        raise ValueError(f"pred must be [N, 2], got {tuple(p.shape)}")
    if t.shape != p.shape:
        raise ValueError("pred and target shapes differ")
    v = _resolve_valid(valid, p.shape[0])
    if int(v.sum()) < 2:
        raise ValueError("va_loss needs at least 2 valid frames")
    p, t = p[v], t[v]
    return (1.0 - ccc(p[:, 0], t[:, 0])) + (1.0 - ccc(p[:, 1], t[:, 1]))


def task_outputs(logits: torch.Tensor, task: Task) -> torch.Tensor:
    """Map raw head outputs to task space.

    AU -> per-unit sigmoid probabilities, EXPR -> softmax distribution,
    VA -> tanh into [-1, 1]. Acts on the last dimension.
    """
    if task is Task.AU:
        return torch.sigmoid(logits)
    if task is Task.EXPR:
        return torch.softmax(logits, dim=-1)
    return torch.tanh(logits)


def task_loss(outputs: torch.Tensor, targets: torch.Tensor, task: Task,
              class_weights: Optional[ArrayLike] = None,
              valid: Optional[ArrayLike] = None) -> torch.Tensor:
    """Dispatch to the per-task loss on activated outputs."""
    if task is Task.AU:
        if class_weights is None:
            raise ValueError("AU loss requires class weights")
        return au_loss(outputs, targets, class_weights, valid)
    if task is Task.EXPR:
        if class_weights is None:
            raise ValueError("EXPR loss requires class weights")
        return expr_loss(outputs, targets, class_weights, valid)
    return va_loss(outputs, targets, valid)
