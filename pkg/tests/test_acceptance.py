"""Acceptance suite: one test per criterion, each printing a PASS line.

Criteria 6-9 share a single full desk run (seed 7) produced through the
CLI; criterion 10 exercises byte-level determinism on the tiny preset
and checks the desk run's wall-clock budget.  Time budgets are stated
for an 8-core machine and scaled by the cores actually available.
"""

import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from mesopc.cli import main
from mesopc.report import VerificationReport
from mesopc.util import load_json

BUDGET_SCALE = max(1.0, 8.0 / (os.cpu_count() or 1))


def _announce(criterion: str, ok: bool, detail: str):
    print(f"ACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"{criterion}: {detail}"


# ---------------------------------------------------------------------------
# Shared desk run (criteria 6-9 + timing for 10)


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance") / "desk"
    t0 = time.monotonic()
    rc = main(["demo", "--seed", "7", "--out", str(out)])
    wall = time.monotonic() - t0
    assert rc == 0, "desk demo failed"
    report = VerificationReport.load(out / "report" / "report.json")
    return {"dir": out, "wall_s": wall, "report": report}


def _log_wall_seconds(path: Path) -> float:
    return sum(json.loads(line)["wall_s"] for line in path.read_text().splitlines())


class TestCriterion1:
    def test_fss_brute_force_equivalence(self):
        from test_verify import brute_force_fss

        from mesopc.verify import fss

        t0 = time.monotonic()
        rng = np.random.default_rng(42)
        worst = 0.0
        for _ in range(200):
            f = rng.integers(0, 2, size=(1, 9, 9)).astype(float)
            o = rng.integers(0, 2, size=(1, 9, 9)).astype(float)
            for n in (1, 3, 5):
                a = fss(f, o, 0.5, n)
                b = brute_force_fss(f, o, 0.5, n)
                worst = max(worst, abs(a - b))
        dt = time.monotonic() - t0
        _announce(
            "1 (FSS oracle equivalence)",
            worst <= 1e-12 and dt < 10 * BUDGET_SCALE,
            f"max |impl - brute force| = {worst:.2e} over 200 pairs x 3 scales in {dt:.1f}s",
        )


class TestCriterion2:
    def test_pmm_exactness(self):
        from mesopc.verify import pmm

        t0 = time.monotonic()
        rng = np.random.default_rng(7)
        member = rng.random((7, 9))
        ok = np.array_equal(pmm(member[None]), member)
        stack = np.repeat(member[None], 5, axis=0)
        ok &= np.allclose(pmm(stack), member)
        for _ in range(100):
            m = int(rng.integers(1, 8))
            members = rng.random((m, 6, 8))
            out = pmm(members)
            pooled = np.sort(members.reshape(-1))[::-1]
            ok &= np.array_equal(np.sort(out.reshape(-1))[::-1], pooled[::m])
            mean = members.mean(axis=0).reshape(-1)
            order = np.argsort(-mean, kind="stable")
            ok &= bool(np.all(np.diff(out.reshape(-1)[order]) <= 0))
        dt = time.monotonic() - t0
        _announce(
            "2 (PMM exactness)",
            bool(ok) and dt < 10 * BUDGET_SCALE,
            f"identity, multiset, and rank-order invariants on 100 ensembles in {dt:.1f}s",
        )


class TestCriterion3:
    def test_parseval(self):
        from mesopc.spectral import SpectrumProfile, psd_rows

        t0 = time.monotonic()
        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(50):
            n = int(rng.integers(16, 128))
            rows = rng.normal(size=(int(rng.integers(4, 32)), n)) * rng.uniform(0.1, 4.0)
            prof = SpectrumProfile("v", n, psd_rows(rows))
            ms = float(np.mean(rows**2))
            worst = max(worst, abs(prof.two_sided_sum() - ms) / ms)
        dt = time.monotonic() - t0
        _announce(
            "3 (Parseval)",
            worst <= 1e-6 and dt < 5 * BUDGET_SCALE,
            f"max relative error {worst:.2e} over 50 random fields in {dt:.1f}s",
        )


class TestCriterion4:
    def test_calibration_recovery(self):
        from dataclasses import replace

        from mesopc.grids import GridSet, VariableSpec
        from mesopc.spectral import calibrate
        from mesopc.synthetic import expected_psd_x, make_grf

        t0 = time.monotonic()
        ny, nx, k_c = 64, 96, 16
        slope, amp = 2.0, 1.0
        vals = np.stack(
            [make_grf((ny, nx), slope, amp, seed=s)[None] for s in range(80)]
        ).astype(np.float32)
        gs = GridSet(values=vals, specs=[VariableSpec(name="v")], normalized=True)

        def lowpass(fs):
            spec = np.fft.rfft(fs.values, axis=-1)
            spec[..., k_c + 1 :] = 0.0
            return replace(fs, values=np.fft.irfft(spec, n=nx, axis=-1))

        calib = calibrate(gs, lowpass, p=0.1)
        vc = calib.per_variable[0]
        analytic = float(np.sqrt(nx * expected_psd_x(nx, slope, amp)[k_c]))
        ok = abs(vc.k_star - k_c) <= 2
        ok &= abs(vc.sigma - analytic) <= 0.2 * analytic

        # k* monotone in p under a smooth attenuation profile
        def soft(fs):
            spec = np.fft.rfft(fs.values, axis=-1)
            k = np.arange(spec.shape[-1])
            spec *= np.exp(-((k / k_c) ** 2))
            return replace(fs, values=np.fft.irfft(spec, n=nx, axis=-1))

        ks = [calibrate(gs, soft, p=p).per_variable[0].k_star for p in (0.05, 0.1, 0.2)]
        ok &= all(a <= b for a, b in zip(ks, ks[1:]))
        dt = time.monotonic() - t0
        _announce(
            "4 (calibration recovery)",
            bool(ok) and dt < 60 * BUDGET_SCALE,
            f"k*={vc.k_star} (target {k_c}+-2), sigma={vc.sigma:.3f} vs analytic "
            f"{analytic:.3f}, k* monotone {ks} in {dt:.1f}s",
        )


class TestCriterion5:
    def test_edm_correctness(self, tmp_path):
        from mesopc.corrector import (
            CorrectorConfig,
            DiffTrainConfig,
            EDMParams,
            build_corrector,
            denoise,
            denoise_tensor,
            load_corrector,
            precond_coeffs,
            train_corrector,
        )
        from mesopc.grids import FieldSet, GridSet, VariableSpec

        t0 = time.monotonic()
        # (a) sigma = 0 identity, exact
        model0 = build_corrector(CorrectorConfig(base_embed=8, multipliers=(1, 2)), 1)
        fs = FieldSet(
            values=np.random.default_rng(0).normal(size=(1, 16, 16)),
            specs=[VariableSpec(name="g")],
            normalized=True,
        )
        ok = np.array_equal(denoise(model0, fs, 0.0).values, fs.values)

        # (b) preconditioning formulas vs reference arithmetic
        rng = np.random.default_rng(1)
        sd = 0.5
        for sigma in rng.uniform(1e-3, 60.0, size=100):
            c_skip, c_out, c_in, c_noise = precond_coeffs(float(sigma), sd)
            ok &= abs(c_skip - sd**2 / (sigma**2 + sd**2)) < 1e-12
            ok &= abs(c_out - sigma * sd / np.sqrt(sigma**2 + sd**2)) < 1e-12
            ok &= abs(c_in - 1.0 / np.sqrt(sigma**2 + sd**2)) < 1e-12
            ok &= abs(c_noise - np.log(sigma) / 4.0) < 1e-12

        # (c) trained-on-Gaussian closed-form equivalence
        s = 1.0
        vals = rng.normal(0.0, s, size=(2048, 1, 16, 16)).astype(np.float32)
        gs = GridSet(values=vals, specs=[VariableSpec(name="g")], normalized=True)
        ckpt = train_corrector(
            gs,
            CorrectorConfig(base_embed=16, multipliers=(1, 2), res_blocks=2),
            EDMParams(),
            DiffTrainConfig(epochs=16, batch=64, lr=4e-4, seed=0),
            tmp_path / "toy.ckpt",
        )
        model, edm, _ = load_corrector(ckpt)
        test = torch.from_numpy(rng.normal(0.0, s, size=(64, 1, 16, 16)).astype(np.float32))
        rels = {}
        gen = torch.Generator().manual_seed(2)
        for sig in (0.1, 0.5, 1.0):
            noisy = test + sig * torch.randn(test.shape, generator=gen)
            with torch.no_grad():
                d = denoise_tensor(model, noisy, torch.full((64,), sig), edm.sigma_data)
            optimal = (s**2 / (s**2 + sig**2)) * noisy
            rels[sig] = float(
                torch.linalg.vector_norm(d - optimal) / torch.linalg.vector_norm(optimal)
            )
            ok &= rels[sig] <= 0.10
        dt = time.monotonic() - t0
        _announce(
            "5 (EDM correctness)",
            bool(ok) and dt < 600 * BUDGET_SCALE,
            f"identity exact, formulas to 1e-12, closed-form rel errs "
            f"{ {k: round(v, 4) for k, v in rels.items()} } in {dt:.0f}s",
        )


class TestCriterion6:
    def test_spectral_restoration(self, desk_run):
        report = desk_run["report"]
        member = np.mean([report.bands[v]["high_member_vs_truth"] for v in report.variables])
        pred = np.mean([report.bands[v]["high_predictor_vs_truth"] for v in report.variables])
        ratio = member / pred
        for ckpt_log, budget in (("predictor.log", 900), ("corrector.log", 900)):
            wall = _log_wall_seconds(desk_run["dir"] / "ckpt" / ckpt_log)
            assert wall < budget * BUDGET_SCALE, f"{ckpt_log}: {wall:.0f}s over budget"
        _announce(
            "6 (spectral restoration)",
            ratio <= 0.5,
            f"mean |log PSD ratio| above k*: member {member:.3f} vs predictor "
            f"{pred:.3f} (ratio {ratio:.2f}, need <= 0.5)",
        )


class TestCriterion7:
    def test_fss_improvement(self, desk_run):
        report = desk_run["report"]
        i95 = report.metadata["fss_percentiles"].index(95.0)
        cols = [j for j, s in enumerate(report.fss_scales) if s >= 7]
        pmm_vals = [report.fss_pmm[i95][j] for j in cols]
        pred_vals = [report.fss_predictor[i95][j] for j in cols]
        ok = all(a >= b for a, b in zip(pmm_vals, pred_vals))
        _announce(
            "7 (FSS improvement at 95th percentile)",
            ok,
            f"scales>=7: corrected-PMM {np.round(pmm_vals, 3).tolist()} vs "
            f"predictor {np.round(pred_vals, 3).tolist()} "
            f"(threshold {report.fss_thresholds[i95]:.2f})",
        )


class TestCriterion8:
    def test_low_frequency_preservation(self, desk_run):
        report = desk_run["report"]
        lows = [
            report.bands[v]["low_member_vs_predictor"]
            for v in report.variables
            if report.bands[v]["low_member_vs_predictor"] is not None
        ]
        assert lows, "no variable has a non-empty low band"
        pooled = abs(float(np.mean(lows)))
        _announce(
            "8 (low-frequency preservation)",
            pooled <= np.log(1.2),
            f"|mean log(member/predictor)| below k*/2 = {pooled:.3f} "
            f"(limit {np.log(1.2):.3f})",
        )


class TestCriterion9:
    def test_rmse_sanity(self, desk_run):
        report = desk_run["report"]
        ok = True
        lines = []
        for v in report.variables:
            r = report.rmse[v]
            ok &= r["ensemble_mean"] <= r["member_mean"] + 1e-9
            lines.append(
                f"{v}: ens-mean {r['ensemble_mean']:.3f} vs predictor {r['predictor']:.3f}"
            )
        _announce(
            "9 (RMSE sanity)",
            bool(ok),
            "ens-mean <= mean member RMSE for all variables; " + "; ".join(lines),
        )


class TestCriterion10:
    def test_determinism_and_budget(self, desk_run, tmp_path):
        outs = []
        for run in range(2):
            out = tmp_path / f"d{run}"
            rc = main(
                ["demo", "--seed", "7", "--preset", "tiny", "--out", str(out), "--single-threaded"]
            )
            assert rc == 0
            outs.append((out / "report" / "report.json").read_bytes())
        identical = outs[0] == outs[1]
        wall = desk_run["wall_s"]
        within = wall < 45 * 60 * BUDGET_SCALE
        _announce(
            "10 (determinism + budget)",
            identical and within,
            f"tiny demo reports byte-identical: {identical}; desk demo "
            f"{wall / 60:.1f} min (budget {45 * BUDGET_SCALE:.0f} min on this machine)",
        )
