"""Verification report assembly: FSS tables, RMSE, PSD curves, plots.

Consumes forecast cases (ensemble + truth pairs), applies the
evaluation region, and emits a JSON-serializable report plus static
plot images.  All spectra are computed on normalized variables inside
the evaluation region; precipitation skill uses the post-PMM field.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeMismatchError
from .grids import FieldSet, normalize_values
from .sampler import EnsembleForecast
from .spectral import NoiseCalibration, psd_rows
from .util import dump_json, load_json
from .verify import FssSpec, evaluation_region, fss_table, pmm, rmse_report

PRECIP_NAME = "precip"


@dataclass
class ForecastCase:
    """One verification unit: an ensemble forecast and its physical truth."""

    ensemble: EnsembleForecast
    truth: FieldSet

    def __post_init__(self):
        if self.truth.normalized:
            raise ConfigError("case truth must be in physical units")
        if self.truth.values.shape != self.ensemble.predictor_output.values.shape:
            raise ShapeMismatchError("truth and forecast shapes differ")


@dataclass
class VerificationReport:
    variables: list[str]
    sigma: float
    p: float
    fss_thresholds: list[float]
    fss_scales: list[int]
    fss_pmm: list[list[float]]
    fss_predictor: list[list[float]]
    rmse: dict
    psd: dict
    bands: dict
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema": "mesopc-report-v1",
            "variables": self.variables,
            "sigma": self.sigma,
            "p": self.p,
            "fss": {
                "thresholds": self.fss_thresholds,
                "scales": self.fss_scales,
                "pmm": self.fss_pmm,
                "predictor": self.fss_predictor,
            },
            "rmse": self.rmse,
            "psd": self.psd,
            "bands": self.bands,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VerificationReport":
        if d.get("schema") != "mesopc-report-v1":
            raise ConfigError(f"unknown report schema {d.get('schema')!r}")
        return cls(
            variables=d["variables"],
            sigma=d["sigma"],
            p=d["p"],
            fss_thresholds=d["fss"]["thresholds"],
            fss_scales=d["fss"]["scales"],
            fss_pmm=d["fss"]["pmm"],
            fss_predictor=d["fss"]["predictor"],
            rmse=d["rmse"],
            psd=d["psd"],
            bands=d["bands"],
            metadata=d["metadata"],
        )

    def save(self, path: Path | str) -> None:
        dump_json(self.to_dict(), path)

    @classmethod
    def load(cls, path: Path | str) -> "VerificationReport":
        return cls.from_dict(load_json(path))


def _mean_abs_logratio(a: np.ndarray, b: np.ndarray, lo: int, hi: int) -> float | None:
    if hi < lo:
        return None
    sel = slice(lo, hi + 1)
    ratio = np.maximum(a[sel], 1e-30) / np.maximum(b[sel], 1e-30)
    return float(np.mean(np.abs(np.log(ratio))))


def _mean_logratio(a: np.ndarray, b: np.ndarray, lo: int, hi: int) -> float | None:
    if hi < lo:
        return None
    sel = slice(lo, hi + 1)
    ratio = np.maximum(a[sel], 1e-30) / np.maximum(b[sel], 1e-30)
    return float(np.mean(np.log(ratio)))


def build_report(
    cases: list[ForecastCase],
    calib: NoiseCalibration,
    fss_spec: FssSpec | None = None,
    precip_name: str = PRECIP_NAME,
) -> VerificationReport:
    """Assemble the verification report from forecast cases.

    Missing inputs are reported by name; the FSS table compares the
    PMM-aggregated ensemble and the raw predictor against truth at
    every threshold and scale.
    """
    if not cases:
        raise ConfigError("missing artifact: no forecast cases supplied")
    if calib is None:
        raise ConfigError("missing artifact: noise calibration")
    fss_spec = fss_spec or FssSpec()

    specs = cases[0].ensemble.specs
    names = [s.name for s in specs]
    pi = names.index(precip_name) if precip_name in names else None

    # Precipitation skill (physical units, region applied).
    truth_precip = []
    pmm_precip = []
    pred_precip = []
    # Spectra (normalized units, region applied); member 0 is the sample member.
    rows_truth = {v: [] for v in names}
    rows_pred = {v: [] for v in names}
    rows_member = {v: [] for v in names}
    rows_ens_mean = {v: [] for v in names}
    # RMSE accumulators (physical units, region applied).
    rmse_cases = []

    for case in cases:
        ens = case.ensemble
        truth_phys = np.asarray(case.truth.values, dtype=np.float64)
        members_phys = ens.members_physical()
        pred_phys = ens.predictor_physical()

        t_reg = evaluation_region(truth_phys)
        m_reg = evaluation_region(members_phys)
        p_reg = evaluation_region(pred_phys)
        if pi is not None:
            truth_precip.append(t_reg[pi])
            pred_precip.append(p_reg[pi])
            pmm_precip.append(pmm(m_reg[:, pi]))
        rmse_cases.append(rmse_report(m_reg, p_reg, t_reg, names))

        truth_norm = evaluation_region(normalize_values(truth_phys, specs))
        pred_norm = evaluation_region(ens.predictor_output.values)
        memb_norm = evaluation_region(ens.members[0].values)
        mean_norm = evaluation_region(
            np.mean([m.values for m in ens.members], axis=0)
        )
        for c, v in enumerate(names):
            rows_truth[v].append(truth_norm[c])
            rows_pred[v].append(pred_norm[c])
            rows_member[v].append(memb_norm[c])
            rows_ens_mean[v].append(mean_norm[c])

    # FSS tables.
    if pi is not None:
        thresholds = fss_spec.resolve_thresholds(np.stack(truth_precip))
        table_pmm = fss_table(pmm_precip, truth_precip, thresholds, fss_spec.scales)
        table_pred = fss_table(pred_precip, truth_precip, thresholds, fss_spec.scales)
    else:
        thresholds = []
        table_pmm = np.zeros((0, len(fss_spec.scales)))
        table_pred = np.zeros((0, len(fss_spec.scales)))

    # RMSE averaged over cases.
    rmse_out = {}
    for v in names:
        rmse_out[v] = {
            key: float(np.mean([rc[v][key] for rc in rmse_cases]))
            for key in ("ensemble_mean", "predictor", "member_mean")
        }

    # Spectra and calibration bands.
    psd_out = {}
    bands = {}
    nx = cases[0].truth.grid[1]
    for v in names:
        pt = psd_rows(np.concatenate(rows_truth[v]))
        pp = psd_rows(np.concatenate(rows_pred[v]))
        pm = psd_rows(np.concatenate(rows_member[v]))
        pe = psd_rows(np.concatenate(rows_ens_mean[v]))
        k_star = calib.k_star(v)
        psd_out[v] = {
            "k": list(range(nx // 2 + 1)),
            "truth": [float(x) for x in pt],
            "predictor": [float(x) for x in pp],
            "member": [float(x) for x in pm],
            "ensemble_mean": [float(x) for x in pe],
        }
        bands[v] = {
            "k_star": int(k_star),
            "high_member_vs_truth": _mean_abs_logratio(pm, pt, k_star + 1, nx // 2),
            "high_predictor_vs_truth": _mean_abs_logratio(pp, pt, k_star + 1, nx // 2),
            "low_member_vs_predictor": _mean_logratio(
                pm, pp, 1, int(np.ceil(k_star / 2)) - 1
            ),
        }

    return VerificationReport(
        variables=names,
        sigma=calib.sigma_global,
        p=calib.p,
        fss_thresholds=[float(t) for t in thresholds],
        fss_scales=[int(s) for s in fss_spec.scales],
        fss_pmm=[[float(x) for x in row] for row in table_pmm],
        fss_predictor=[[float(x) for x in row] for row in table_pred],
        rmse=rmse_out,
        psd=psd_out,
        bands=bands,
        metadata={
            "n_cases": len(cases),
            "members": len(cases[0].ensemble.members),
            "steps": cases[0].ensemble.steps,
            "region_margin": 5,
            "fss_percentiles": list(fss_spec.percentiles),
            "window_normalization": "valid-area",
            "calibration": calib.to_dict(),
        },
    )


def render_plots(report: VerificationReport, out_dir: Path | str) -> list[Path]:
    """Write PSD, FSS, and RMSE panels as PNG files; returns the paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    n_var = len(report.variables)
    fig, axes = plt.subplots(1, n_var, figsize=(4.2 * n_var, 3.6), squeeze=False)
    for ax, v in zip(axes[0], report.variables):
        curves = report.psd[v]
        k = np.asarray(curves["k"])
        for label, key in (("truth", "truth"), ("predictor", "predictor"), ("corrected member", "member")):
            ax.loglog(k[1:], np.maximum(curves[key][1:], 1e-30), label=label)
        ax.axvline(report.bands[v]["k_star"], color="red", lw=0.8, ls="--")
        ax.set_title(f"{v} (k* = {report.bands[v]['k_star']})")
        ax.set_xlabel("wavenumber k")
        ax.set_ylabel("PSD")
    axes[0][0].legend(fontsize=8)
    fig.tight_layout()
    p = out_dir / "psd.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    written.append(p)

    if report.fss_thresholds:
        n_thr = len(report.fss_thresholds)
        fig, axes = plt.subplots(1, n_thr, figsize=(3.4 * n_thr, 3.2), squeeze=False, sharey=True)
        for i, (ax, thr) in enumerate(zip(axes[0], report.fss_thresholds)):
            ax.plot(report.fss_scales, report.fss_pmm[i], "o-", label="corrected PMM")
            ax.plot(report.fss_scales, report.fss_predictor[i], "s--", label="predictor")
            ax.set_title(f"threshold {thr:.2f}")
            ax.set_xlabel("scale (grid units)")
            ax.set_ylim(0, 1)
        axes[0][0].set_ylabel("FSS")
        axes[0][0].legend(fontsize=8)
        fig.tight_layout()
        p = out_dir / "fss.png"
        fig.savefig(p, dpi=120)
        plt.close(fig)
        written.append(p)

    fig, ax = plt.subplots(figsize=(1.6 * len(report.variables) + 2, 3.2))
    xs = np.arange(len(report.variables))
    ens = [report.rmse[v]["ensemble_mean"] for v in report.variables]
    pred = [report.rmse[v]["predictor"] for v in report.variables]
    ax.bar(xs - 0.18, pred, width=0.36, label="predictor")
    ax.bar(xs + 0.18, ens, width=0.36, label="ensemble mean")
    ax.set_xticks(xs, report.variables)
    ax.set_ylabel("RMSE")
    ax.legend(fontsize=8)
    fig.tight_layout()
    p = out_dir / "rmse.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    written.append(p)
    return written
