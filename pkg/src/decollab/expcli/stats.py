"""Curve smoothing, bootstrap intervals and threshold bookkeeping for metric streams."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import ValidationError


def ema_smooth(series: Sequence[tuple], alpha: float) -> list:
    """Time-weighted EMA: the weight of a new point grows with its x-gap.

    y'_k = (1 − w_k)·y'_{k−1} + w_k·y_k, w_k = 1 − (1 − alpha)^(x_k − x_{k−1}).
    """
    if not 0.0 < alpha <= 1.0:
        raise ValidationError(f"alpha must lie in (0, 1], got {alpha}")
    out = []
    prev_x = prev_y = None
    for x, y in series:
        if prev_x is None:
            sy = float(y)
        else:
            if not x > prev_x:
                raise ValidationError(f"x must be strictly increasing ({x} after {prev_x})")
            w = 1.0 - (1.0 - alpha) ** (x - prev_x)
            sy = (1.0 - w) * prev_y + w * y
        out.append((x, sy))
        prev_x, prev_y = x, sy
    return out


def bootstrap_ci(samples: Sequence[float], level: float = 0.95, resamples: int = 10_000, seed: int = 0) -> tuple:
    """Percentile bootstrap interval of the mean."""
    x = np.asarray(samples, dtype=np.float64)
    if x.size < 2:
        raise ValidationError("bootstrap needs at least 2 samples")
    if not 0.0 < level < 1.0:
        raise ValidationError(f"level must lie in (0, 1), got {level}")
    rng = np.random.default_rng(seed)
    means = x[rng.integers(x.size, size=(resamples, x.size))].mean(axis=1)
    lo, hi = np.quantile(means, [(1 - level) / 2, (1 + level) / 2])
    # constant samples give a degenerate interval exactly at the value
    if np.all(x == x[0]):
        return float(x[0]), float(x[0])
    return float(lo), float(hi)


def first_crossing(series: Sequence[tuple], threshold: float):
    """Smallest x at which y ≥ threshold, or None."""
    for x, y in series:
        if y >= threshold:
            return x
    return None


def area_under_curve(series: Sequence[tuple], budget: float) -> float:
    """Mean height of a step curve (value held until the next point) over [x_0, budget]."""
    pts = [(x, y) for x, y in series if x <= budget]
    if not pts:
        return float("nan")
    area = 0.0
    for (x0, y0), (x1, _) in zip(pts, pts[1:] + [(budget, None)]):
        area += y0 * (x1 - x0)
    span = budget - pts[0][0]
    return area / span if span > 0 else pts[0][1]
