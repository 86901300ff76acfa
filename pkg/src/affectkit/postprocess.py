"""Temporal post-processing of per-frame outputs: gap filling and smoothing."""

from __future__ import annotations

from typing import Mapping, Union

import numpy as np

from .datamodel import SmoothingSpec, TaskSpec

# Gaussian kernels are truncated at this many standard deviations.
GAUSSIAN_TRUNCATE = 4.0


def fill_missing(predictions: Mapping[int, np.ndarray],
                 n_frames: int) -> np.ndarray:
    """Expand sparse frame->vector predictions to a dense [n_frames, d] array.

    Missing frames copy the nearest predicted frame; equidistant neighbours
    resolve to the earlier one. Keys must lie in [0, n_frames) and at least
    one prediction must exist.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    if not predictions:
        raise ValueError("no predictions to fill from")
    known = np.array(sorted(predictions.keys()), dtype=np.int64)
    if known[0] < 0 or known[-1] >= n_frames:
        raise ValueError(f"frame index outside [0, {n_frames})")
    rows = []
    for k in known:
        v = np.asarray(predictions[int(k)], dtype=np.float64)
        if v.ndim != 1:
            raise ValueError("each prediction must be a 1-D vector")
        rows.append(v)
    d = rows[0].size
    if any(r.size != d for r in rows):
        raise ValueError("prediction vectors differ in length")
    values = np.stack(rows)
    t = np.arange(n_frames)
    # Index of the first known frame strictly greater than t.
    right = np.searchsorted(known, t, side="right")
    left = right - 1
    left_c = np.clip(left, 0, known.size - 1)
    right_c = np.clip(right, 0, known.size - 1)
    dist_left = np.where(left >= 0, t - known[left_c], np.iinfo(np.int64).max)
    dist_right = np.where(right < known.size, known[right_c] - t,
                          np.iinfo(np.int64).max)
    pick_left = dist_left <= dist_right
    idx = np.where(pick_left, left_c, right_c)
    return values[idx]


def _as_series(series: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(series, dtype=np.float64)
    if x.ndim == 1:
        return x[:, None], True
    if x.ndim == 2:
        return x, False
    raise ValueError("series must be 1-D or 2-D [n, d]")


def _window_span(window: int) -> tuple[int, int]:
    # Even windows take the extra element on the earlier side.
    left = window // 2
    right = window - 1 - left
    return left, right


def _compensated_filter(x: np.ndarray, weights: np.ndarray,
                        left: int, right: int) -> np.ndarray:
    """Weighted moving filter, exact on constant series.

    Computes out[t] = x[t] + sum_i w_i * (x_pad[t+i] - x[t]) column-wise,
    which equals the direct convolution when the weights sum to 1 but keeps
    constant inputs bit-identical (every difference term is exactly zero).
    Boundaries use symmetric padding (edge value repeated into the pad).
    """
    n = x.shape[0]
    if n == 0:
        raise ValueError("series is empty")
    padded = np.pad(x, ((left, right), (0, 0)), mode="symmetric")
    out = x.copy()
    for j, w in enumerate(weights):
        out += w * (padded[j:j + n] - x)
    return out


def gaussian_smooth(series: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian-weighted temporal smoothing with standard deviation sigma.

    The kernel covers offsets within 4*sigma (radius floor(4*sigma)) and is
    normalized to unit sum; boundaries reflect symmetrically. Works on [n] or
    [n, d] input, returns float64 of the same shape. A constant series comes
    back bit-identical.
    """
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    x, squeeze = _as_series(series)
    radius = int(np.floor(GAUSSIAN_TRUNCATE * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    weights = np.exp(-0.5 * (offsets / sigma) ** 2)
    weights /= weights.sum()
    out = _compensated_filter(x, weights, radius, radius)
    return out[:, 0] if squeeze else out


def average_smooth(series: np.ndarray, window: int) -> np.ndarray:
    """Uniform moving average over `window` frames.

    Centered span; even windows extend one frame further into the past.
    Symmetric boundary padding; constant series come back bit-identical.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    x, squeeze = _as_series(series)
    left, right = _window_span(window)
    weights = np.full(window, 1.0 / window)
    out = _compensated_filter(x, weights, left, right)
    return out[:, 0] if squeeze else out


def median_smooth(series: np.ndarray, window: int) -> np.ndarray:
    """Moving median over `window` frames.

    Same span and padding conventions as average_smooth. Even windows use the
    usual midpoint average of the two central order statistics.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    x, squeeze = _as_series(series)
    n = x.shape[0]
    if n == 0:
        raise ValueError("series is empty")
    left, right = _window_span(window)
    padded = np.pad(x, ((left, right), (0, 0)), mode="symmetric")
    stacked = np.stack([padded[j:j + n] for j in range(window)])
    out = np.median(stacked, axis=0)
    return out[:, 0] if squeeze else out


def smooth(series: np.ndarray, spec: SmoothingSpec) -> np.ndarray:
    """Apply the filter described by spec; kind 'none' is the identity."""
    if spec.kind == "none":
        x, squeeze = _as_series(series)
        return x[:, 0] if squeeze else x
    if spec.kind == "gaussian":
        return gaussian_smooth(series, spec.sigma)
    if spec.kind == "median":
        return median_smooth(series, spec.window)
    if spec.kind == "average":
        return average_smooth(series, spec.window)
    raise ValueError(f"unknown smoothing kind {spec.kind!r}")


def apply_policy(predictions: np.ndarray,
                 task_spec: Union[TaskSpec, SmoothingSpec]) -> np.ndarray:
    """Smooth raw per-frame outputs according to the task's policy.

    Smoothing happens on the continuous outputs (probabilities or VA values),
    before any thresholding or argmax downstream.
    """
    spec = task_spec.smoothing if isinstance(task_spec, TaskSpec) else task_spec
    return smooth(predictions, spec)
