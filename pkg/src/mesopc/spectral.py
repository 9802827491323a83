"""x-direction power spectra and spectral noise-level calibration.

Convention: PSD(k) = <|X(k)|^2> / N^2 with X the unnormalized DFT of a
row of length N, averaged over rows and samples.  Under this convention
white noise of variance s^2 has a flat PSD of s^2/N, so the matching
noise level for a spectral bin is sigma = sqrt(N * PSD(k)): injecting
white noise of that variance raises every bin by exactly PSD(k).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import CalibrationError, NumericsError, ShapeMismatchError
from .grids import FieldSet, GridSet
from .util import dump_json, load_json


@dataclass
class SpectrumProfile:
    """One-sided x-direction PSD of one variable.

    `psd[k]` holds the per-bin (two-sided) value for k = 0..N/2; the
    negative-frequency twins are implied by Hermitian symmetry.
    """

    variable: str
    n: int
    psd: np.ndarray
    n_rows: int = 0

    def __post_init__(self):
        self.psd = np.asarray(self.psd, dtype=np.float64)
        if self.psd.shape != (self.n // 2 + 1,):
            raise ShapeMismatchError(
                f"psd length {self.psd.shape} does not match N={self.n}"
            )
        if np.any(self.psd < 0) or not np.all(np.isfinite(self.psd)):
            raise NumericsError("psd values must be finite and >= 0")

    @property
    def wavenumbers(self) -> np.ndarray:
        return np.arange(self.n // 2 + 1)

    def two_sided_sum(self) -> float:
        """Sum of the full two-sided spectrum (equals the row mean square)."""
        inner = self.psd[1 : (self.n + 1) // 2]
        total = self.psd[0] + 2.0 * inner.sum()
        if self.n % 2 == 0:
            total += self.psd[self.n // 2]
        return float(total)

    def to_dict(self) -> dict:
        return {
            "variable": self.variable,
            "n": self.n,
            "n_rows": self.n_rows,
            "psd": [float(v) for v in self.psd],
        }


def psd_rows(rows: np.ndarray) -> np.ndarray:
    """One-sided PSD of rows[..., N], averaged over all leading axes."""
    rows = np.asarray(rows, dtype=np.float64)
    if not np.all(np.isfinite(rows)):
        raise NumericsError("non-finite values in spectral input")
    n = rows.shape[-1]
    spec = np.fft.rfft(rows, axis=-1)
    power = (spec.real**2 + spec.imag**2) / (n * n)
    return power.reshape(-1, n // 2 + 1).mean(axis=0)


def psd_x(fields: GridSet | Sequence[FieldSet], variable: str) -> SpectrumProfile:
    """PSD along x of one variable, averaged over y rows and samples."""
    if isinstance(fields, GridSet):
        rows = fields.values[:, fields.channel_index(variable)]
    else:
        fields = list(fields)
        if not fields:
            raise ShapeMismatchError("need at least one field set")
        idx = fields[0].channel_index(variable)
        rows = np.stack([fs.values[idx] for fs in fields])
    n = rows.shape[-1]
    return SpectrumProfile(
        variable=variable,
        n=n,
        psd=psd_rows(rows),
        n_rows=int(np.prod(rows.shape[:-1])),
    )


def _as_psd_array(p) -> np.ndarray:
    return p.psd if isinstance(p, SpectrumProfile) else np.asarray(p, dtype=np.float64)


def cutoff_wavenumber(psd_pred, psd_true, p: float) -> int | None:
    """Smallest k >= 1 where the prediction PSD drops below (1-p) of truth.

    Returns None when no bin drops that far (the "no-drop" outcome).
    """
    if not 0.0 < p < 1.0:
        raise CalibrationError(f"drop proportion must be in (0, 1), got {p}")
    a = _as_psd_array(psd_pred)
    b = _as_psd_array(psd_true)
    if a.shape != b.shape:
        raise ShapeMismatchError("prediction and truth spectra differ in length")
    drops = np.nonzero(a[1:] < (1.0 - p) * b[1:])[0]
    if drops.size == 0:
        return None
    return int(drops[0] + 1)


def sigma_for_bin(profile: SpectrumProfile, k: int) -> float:
    """Noise level sigma = sqrt(N * PSD(k))."""
    return float(np.sqrt(profile.n * profile.psd[k]))


@dataclass
class VariableCutoff:
    name: str
    k_star: int
    sigma: float
    no_drop: bool = False

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "k_star": self.k_star,
            "sigma": self.sigma,
            "no_drop": self.no_drop,
        }


@dataclass
class NoiseCalibration:
    """Per-variable cutoffs and the global (median) noise level."""

    p: float
    n: int
    per_variable: list[VariableCutoff] = field(default_factory=list)
    sigma_global: float = 0.0

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "N": self.n,
            "per_variable": [v.to_dict() for v in self.per_variable],
            "sigma_global": self.sigma_global,
        }

    def save(self, path: Path | str) -> None:
        dump_json(self.to_dict(), path)

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseCalibration":
        return cls(
            p=d["p"],
            n=d["N"],
            per_variable=[VariableCutoff(**v) for v in d["per_variable"]],
            sigma_global=d["sigma_global"],
        )

    @classmethod
    def load(cls, path: Path | str) -> "NoiseCalibration":
        return cls.from_dict(load_json(path))

    def k_star(self, variable: str) -> int:
        for v in self.per_variable:
            if v.name == variable:
                return v.k_star
        raise KeyError(f"no calibration entry for {variable!r}")


def calibrate(
    val_truth: GridSet,
    predict_fn: Callable[[FieldSet], FieldSet],
    p: float = 0.1,
) -> NoiseCalibration:
    """Calibrate the corrector noise level on a validation sequence.

    `val_truth` must be normalized.  For every consecutive pair the
    predictor maps step t to t+1; prediction spectra are compared with
    the spectra of the actual t+1 fields.  Per variable, k* is the first
    wavenumber whose prediction PSD drops below (1-p) of the truth PSD
    and sigma_v = sqrt(N * PSD_true(k*)); the global level is the median
    of the sigma_v.  Variables with no drop fall back to k = N/2.
    """
    if not val_truth.normalized:
        raise CalibrationError("calibration requires normalized validation data")
    if val_truth.n_times < 2:
        raise CalibrationError("validation sequence needs at least 2 time steps")

    preds = np.stack(
        [predict_fn(val_truth.fieldset(t)).values for t in range(val_truth.n_times - 1)]
    )
    truths = val_truth.values[1:]

    per_variable: list[VariableCutoff] = []
    n = val_truth.grid[1]
    for c, spec in enumerate(val_truth.specs):
        psd_t = psd_rows(truths[:, c])
        psd_p = psd_rows(preds[:, c])
        profile_t = SpectrumProfile(spec.name, n, psd_t)
        k = cutoff_wavenumber(psd_p, psd_t, p)
        no_drop = k is None
        if no_drop:
            k = n // 2
        per_variable.append(
            VariableCutoff(
                name=spec.name,
                k_star=int(k),
                sigma=sigma_for_bin(profile_t, int(k)),
                no_drop=no_drop,
            )
        )

    if all(v.no_drop for v in per_variable):
        raise CalibrationError(
            "no variable shows a spectral drop: the predictor is not smoothing, "
            "so there is nothing for the corrector to restore"
        )
    sigma_global = float(np.median([v.sigma for v in per_variable]))
    return NoiseCalibration(p=p, n=n, per_variable=per_variable, sigma_global=sigma_global)
