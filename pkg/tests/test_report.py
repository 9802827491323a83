import numpy as np
import pytest

from mesopc.errors import ConfigError
from mesopc.grids import FieldSet, VariableSpec, normalize_values
from mesopc.report import ForecastCase, VerificationReport, build_report, render_plots
from mesopc.sampler import EnsembleForecast
from mesopc.spectral import NoiseCalibration, VariableCutoff
from mesopc.verify import FssSpec

NY, NX = 32, 48


def specs():
    return [
        VariableSpec(name="theta", norm_mean=0.0, norm_std=1.0),
        VariableSpec(name="precip", norm_mean=0.2, norm_std=0.8, transform="log1p"),
    ]


def physical_field(seed, scale=1.0):
    rng = np.random.default_rng(seed)
    vals = np.empty((2, NY, NX))
    vals[0] = rng.normal(0.0, scale, size=(NY, NX))
    vals[1] = rng.gamma(0.5, 2.0, size=(NY, NX))
    return vals


def make_case(seed, n_members=3):
    sp = specs()
    truth_phys = physical_field(seed)
    truth = FieldSet(values=truth_phys, specs=sp, time_index=1)
    pred_norm = normalize_values(physical_field(seed + 100), sp)
    members = [
        FieldSet(
            values=normalize_values(physical_field(seed + 200 + m), sp),
            specs=sp,
            time_index=1,
            normalized=True,
        )
        for m in range(n_members)
    ]
    ens = EnsembleForecast(
        members=members,
        predictor_output=FieldSet(values=pred_norm, specs=sp, time_index=1, normalized=True),
        seeds=list(range(n_members)),
        sigma=0.5,
        steps=4,
    )
    return ForecastCase(ensemble=ens, truth=truth)


def make_calib():
    return NoiseCalibration(
        p=0.1,
        n=NX,
        per_variable=[
            VariableCutoff(name="theta", k_star=8, sigma=0.5),
            VariableCutoff(name="precip", k_star=4, sigma=0.7),
        ],
        sigma_global=0.6,
    )


class TestBuildReport:
    def test_empty_cases_named_error(self):
        with pytest.raises(ConfigError, match="forecast cases"):
            build_report([], make_calib())

    def test_missing_calibration_named_error(self):
        with pytest.raises(ConfigError, match="calibration"):
            build_report([make_case(0)], None)

    def test_report_structure(self):
        rep = build_report([make_case(0), make_case(1)], make_calib(), FssSpec())
        assert rep.variables == ["theta", "precip"]
        assert len(rep.fss_pmm) == len(rep.fss_thresholds)
        assert len(rep.fss_pmm[0]) == len(rep.fss_scales)
        for v in rep.variables:
            assert len(rep.psd[v]["truth"]) == NX // 2 + 1
            assert rep.bands[v]["k_star"] == make_calib().k_star(v)
        assert rep.metadata["n_cases"] == 2
        assert all(0 <= x <= 1 for row in rep.fss_pmm for x in row)

    def test_low_band_empty_when_k_star_tiny(self):
        calib = make_calib()
        calib.per_variable[1] = VariableCutoff(name="precip", k_star=1, sigma=0.7)
        rep = build_report([make_case(3)], calib)
        assert rep.bands["precip"]["low_member_vs_predictor"] is None

    def test_json_round_trip(self, tmp_path):
        rep = build_report([make_case(0)], make_calib())
        rep.save(tmp_path / "r.json")
        back = VerificationReport.load(tmp_path / "r.json")
        assert back.to_dict() == rep.to_dict()

    def test_deterministic_rebuild(self):
        a = build_report([make_case(5)], make_calib())
        b = build_report([make_case(5)], make_calib())
        assert a.to_dict() == b.to_dict()

    def test_perfect_member_scores_zero_high_band(self):
        sp = specs()
        truth_phys = physical_field(9)
        truth_norm = normalize_values(truth_phys, sp)
        fsn = FieldSet(values=truth_norm, specs=sp, time_index=1, normalized=True)
        ens = EnsembleForecast(
            members=[fsn], predictor_output=fsn, seeds=[0], sigma=0.0, steps=0
        )
        case = ForecastCase(ensemble=ens, truth=FieldSet(values=truth_phys, specs=sp, time_index=1))
        rep = build_report([case], make_calib())
        for v in rep.variables:
            assert rep.bands[v]["high_member_vs_truth"] == pytest.approx(0.0, abs=1e-9)
            assert rep.bands[v]["high_predictor_vs_truth"] == pytest.approx(0.0, abs=1e-9)

    def test_plots_written(self, tmp_path):
        rep = build_report([make_case(0)], make_calib())
        paths = render_plots(rep, tmp_path)
        assert sorted(p.name for p in paths) == ["fss.png", "psd.png", "rmse.png"]
        for p in paths:
            assert p.stat().st_size > 1000
