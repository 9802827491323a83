"""Forecast verification: evaluation region, FSS, PMM, RMSE.

All operations are pure numpy on plain arrays so they can be driven
directly by brute-force oracles in the tests.  FSS follows the
aggregate form: the squared-difference and reference sums are each
accumulated over all forecasts before the final ratio, and a vanishing
denominator (nothing exceeds the threshold anywhere) counts as perfect
agreement on absence, FSS = 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeMismatchError

EVAL_MARGIN = 5


@dataclass
class FssSpec:
    """Thresholds and neighborhood scales for the FSS table.

    Thresholds may be given directly (physical units) or derived from
    percentiles of the observed field; scales are window sizes in grid
    units (odd).
    """

    percentiles: tuple[float, ...] = (80.0, 90.0, 95.0, 99.0)
    thresholds: tuple[float, ...] | None = None
    scales: tuple[int, ...] = (1, 3, 5, 7, 9, 13)

    def __post_init__(self):
        for n in self.scales:
            if n < 1 or n % 2 == 0:
                raise ConfigError(f"neighborhood size {n} must be odd and >= 1")

    def resolve_thresholds(self, observed: np.ndarray) -> list[float]:
        if self.thresholds is not None:
            return [float(t) for t in self.thresholds]
        return [float(np.percentile(observed, q)) for q in self.percentiles]


def evaluation_region(values: np.ndarray, margin: int = EVAL_MARGIN) -> np.ndarray:
    """Drop the upper and lower `margin` rows (y axis); x untouched.

    Single application only: applying it twice removes another 2*margin
    rows.
    """
    values = np.asarray(values)
    y = values.shape[-2]
    if y <= 2 * margin:
        raise ShapeMismatchError(f"y={y} leaves no rows after removing 2x{margin}")
    return values[..., margin : y - margin, :]


def _box_sum(a: np.ndarray, n: int) -> np.ndarray:
    """Windowed sum over n x n neighborhoods, clipped at the region edge."""
    r = n // 2
    ny, nx = a.shape
    c = np.zeros((ny + 1, nx + 1), dtype=np.float64)
    c[1:, 1:] = np.cumsum(np.cumsum(a, axis=0), axis=1)
    y0 = np.clip(np.arange(ny) - r, 0, ny)
    y1 = np.clip(np.arange(ny) + r + 1, 0, ny)
    x0 = np.clip(np.arange(nx) - r, 0, nx)
    x1 = np.clip(np.arange(nx) + r + 1, 0, nx)
    return c[y1][:, x1] - c[y0][:, x1] - c[y1][:, x0] + c[y0][:, x0]


def fractions(field2d: np.ndarray, threshold: float, n: int) -> np.ndarray:
    """Exceedance fraction over the n x n window centered at each cell.

    Windows are clipped to the field and normalized by the valid area,
    so edge values stay in [0, 1] without zero-padding bias.
    """
    if n < 1 or n % 2 == 0:
        raise ConfigError(f"neighborhood size {n} must be odd and >= 1")
    field2d = np.asarray(field2d)
    if field2d.ndim != 2:
        raise ShapeMismatchError("fractions expects a 2-D field")
    ind = (field2d >= threshold).astype(np.float64)
    count = _box_sum(np.ones_like(ind), n)
    return _box_sum(ind, n) / count


def fss(
    forecasts: Sequence[np.ndarray] | np.ndarray,
    observations: Sequence[np.ndarray] | np.ndarray,
    threshold: float,
    n: int,
) -> float:
    """Aggregate fractions skill score over a set of forecast/observation pairs."""
    f_list = [np.asarray(f) for f in forecasts]
    o_list = [np.asarray(o) for o in observations]
    if len(f_list) != len(o_list) or not f_list:
        raise ShapeMismatchError("forecast and observation counts differ or are empty")
    num = 0.0
    den = 0.0
    for f2, o2 in zip(f_list, o_list):
        if f2.shape != o2.shape:
            raise ShapeMismatchError(f"field shapes differ: {f2.shape} vs {o2.shape}")
        ff = fractions(f2, threshold, n)
        oo = fractions(o2, threshold, n)
        num += float(np.sum((ff - oo) ** 2))
        den += float(np.sum(ff**2) + np.sum(oo**2))
    if den == 0.0:
        return 1.0
    return 1.0 - num / den


def fss_table(
    forecasts,
    observations,
    thresholds: Sequence[float],
    scales: Sequence[int],
) -> np.ndarray:
    """FSS for every threshold x scale combination; shape [thresholds, scales]."""
    out = np.empty((len(thresholds), len(scales)))
    for i, t in enumerate(thresholds):
        for j, n in enumerate(scales):
            out[i, j] = fss(forecasts, observations, t, n)
    return out


def ensemble_mean(members: np.ndarray) -> np.ndarray:
    members = np.asarray(members)
    if members.ndim < 3:
        raise ShapeMismatchError("members must be [m, ..., y, x]")
    return members.mean(axis=0)


def pmm(members: np.ndarray) -> np.ndarray:
    """Probability matched mean of an ensemble of 2-D fields.

    Pool all M*G values, sort descending, keep every M-th starting at
    index 0; assign the i-th kept value to the cell holding the i-th
    largest ensemble-mean value (mean ties broken by row-major index).
    """
    members = np.asarray(members, dtype=np.float64)
    if members.ndim != 3:
        raise ShapeMismatchError("pmm expects members shaped [m, y, x]")
    m, gy, gx = members.shape
    pooled = np.sort(members.reshape(-1))[::-1]
    kept = pooled[::m]
    mean_flat = members.mean(axis=0).reshape(-1)
    order = np.argsort(-mean_flat, kind="stable")
    out = np.empty(gy * gx, dtype=np.float64)
    out[order] = kept
    return out.reshape(gy, gx)


def rmse(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shapes differ: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def rmse_report(
    members: np.ndarray,
    predictor: np.ndarray,
    truth: np.ndarray,
    names: Sequence[str],
) -> dict:
    """Per-variable RMSE of the ensemble mean and of the predictor alone.

    All inputs are in physical units with the evaluation region already
    applied: members [m, c, y, x], predictor and truth [c, y, x].
    Also reports the mean over members of the per-member RMSE, which by
    convexity can never beat the ensemble-mean RMSE.
    """
    members = np.asarray(members, dtype=np.float64)
    predictor = np.asarray(predictor, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if members.shape[1:] != truth.shape or predictor.shape != truth.shape:
        raise ShapeMismatchError("member/predictor/truth shapes disagree")
    if len(names) != truth.shape[0]:
        raise ShapeMismatchError("one name per channel required")
    mean = members.mean(axis=0)
    out = {}
    for c, name in enumerate(names):
        member_rmses = [rmse(members[i, c], truth[c]) for i in range(members.shape[0])]
        out[name] = {
            "ensemble_mean": rmse(mean[c], truth[c]),
            "predictor": rmse(predictor[c], truth[c]),
            "member_mean": float(np.mean(member_rmses)),
        }
    return out
