"""Command-line orchestration: config schema, run directories, stages.

Run layout: config.json, manifest.json, data/, ckpt/, calib.json,
forecast/, report/.  Stages are idempotent: re-running with identical
inputs is a no-op unless --force.  Exit codes: 0 ok, 2 invalid config,
3 corrupt file, 4 shape mismatch, 5 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .corrector import (
    CorrectorConfig,
    DiffTrainConfig,
    EDMParams,
    load_corrector,
    train_corrector,
)
from .errors import ConfigError, MesopcError
from .grids import (
    GridSet,
    normalize_gridset,
    read_gridset,
    write_gridset,
)
from .predictor import (
    PredictorConfig,
    TrainConfig,
    load_predictor,
    make_predict_fn,
    train_predictor,
)
from .report import ForecastCase, build_report, render_plots
from .sampler import SampleConfig, ensemble_forecast
from .spectral import NoiseCalibration, calibrate
from .synthetic import ChannelConfig, FlowConfig, SynthConfig, generate_dataset
from .util import (
    canonical_json,
    derive_seed,
    dump_json,
    load_json,
    set_torch_threads,
    sha256_bytes,
    sha256_file,
)
from .verify import FssSpec

STAGES = ("synth", "train-predictor", "train-corrector", "calibrate", "forecast", "verify")


# ---------------------------------------------------------------------------
# Config schema


@dataclass
class RunConfig:
    seed: int = 0
    single_threaded: bool = False
    device: str = "cpu"
    n_cases: int = 8
    p: float = 0.1
    synth: SynthConfig = field(default_factory=SynthConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    predictor_train: TrainConfig = field(default_factory=TrainConfig)
    corrector: CorrectorConfig = field(default_factory=CorrectorConfig)
    edm: EDMParams = field(default_factory=EDMParams)
    corrector_train: DiffTrainConfig = field(default_factory=DiffTrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    fss: FssSpec = field(default_factory=FssSpec)

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise ConfigError("calibration proportion p must be in (0, 1)")
        if self.n_cases < 1:
            raise ConfigError("n_cases must be >= 1")


def default_config(seed: int = 0, preset: str = "desk") -> RunConfig:
    """Built-in presets; `desk` is the full experiment, `tiny` a fast one."""
    if preset == "desk":
        return RunConfig(
            seed=seed,
            synth=SynthConfig(seed=seed),
            predictor=PredictorConfig(depths=(1, 1, 2), heads=(2, 4, 8)),
            predictor_train=TrainConfig(epochs=30, batch=8, seed=derive_seed(seed, "predictor")),
            corrector=CorrectorConfig(base_embed=32),
            corrector_train=DiffTrainConfig(
                epochs=110, batch=8, lr=2e-4, seed=derive_seed(seed, "corrector")
            ),
            sample=SampleConfig(members=16, steps=20, base_seed=derive_seed(seed, "sample")),
            n_cases=8,
        )
    if preset == "tiny":
        return RunConfig(
            seed=seed,
            synth=SynthConfig(
                grid=(32, 48),
                channels=[ChannelConfig("theta", 2.2), ChannelConfig("chi", 2.8)],
                n_steps=60,
                seed=seed,
                spinup_steps=4,
            ),
            predictor=PredictorConfig(embed_dim=16, depths=(1, 1), heads=(2, 4)),
            predictor_train=TrainConfig(epochs=4, batch=8, seed=derive_seed(seed, "predictor")),
            corrector=CorrectorConfig(base_embed=16, multipliers=(1, 2, 2)),
            corrector_train=DiffTrainConfig(
                epochs=6, batch=8, lr=2e-4, seed=derive_seed(seed, "corrector")
            ),
            sample=SampleConfig(members=4, steps=5, base_seed=derive_seed(seed, "sample")),
            n_cases=2,
        )
    raise ConfigError(f"unknown preset {preset!r} (expected desk or tiny)")


def _strict_kwargs(cls, d: dict, path: str) -> dict:
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown config keys at {path or 'top level'}: {unknown}")
    return {k: v for k, v in d.items() if k in names}


def _simple_section(cls, d: dict, path: str):
    if not isinstance(d, dict):
        raise ConfigError(f"section {path} must be an object")
    try:
        return cls(**_strict_kwargs(cls, d, path))
    except TypeError as e:
        raise ConfigError(f"bad value in {path}: {e}") from e


def _synth_from_dict(d: dict) -> SynthConfig:
    if not isinstance(d, dict):
        raise ConfigError("section synth must be an object")
    kwargs = _strict_kwargs(SynthConfig, d, "synth")
    if "grid" in kwargs:
        kwargs["grid"] = tuple(kwargs["grid"])
    if "splits" in kwargs:
        kwargs["splits"] = tuple(kwargs["splits"])
    if "channels" in kwargs:
        kwargs["channels"] = [
            _simple_section(ChannelConfig, c, f"synth.channels[{i}]")
            for i, c in enumerate(kwargs["channels"])
        ]
    if "flow" in kwargs:
        kwargs["flow"] = _simple_section(FlowConfig, kwargs["flow"], "synth.flow")
    return SynthConfig(**kwargs)


_SECTIONS = {
    "synth": _synth_from_dict,
    "predictor": lambda d: _simple_section(PredictorConfig, d, "predictor"),
    "predictor_train": lambda d: _simple_section(TrainConfig, d, "predictor_train"),
    "corrector": lambda d: _simple_section(CorrectorConfig, d, "corrector"),
    "edm": lambda d: _simple_section(EDMParams, d, "edm"),
    "corrector_train": lambda d: _simple_section(DiffTrainConfig, d, "corrector_train"),
    "sample": lambda d: _simple_section(SampleConfig, d, "sample"),
    "fss": lambda d: _simple_section(FssSpec, d, "fss"),
}


def config_from_dict(d: dict) -> RunConfig:
    kwargs = _strict_kwargs(RunConfig, d, "")
    for name, builder in _SECTIONS.items():
        if name in kwargs:
            kwargs[name] = builder(kwargs[name])
    if "fss" in kwargs and kwargs["fss"].thresholds is not None:
        kwargs["fss"] = dataclasses.replace(
            kwargs["fss"], thresholds=tuple(kwargs["fss"].thresholds)
        )
    return RunConfig(**kwargs)


def config_to_dict(cfg: RunConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["synth"]["grid"] = list(cfg.synth.grid)
    return d


# ---------------------------------------------------------------------------
# Run directory and manifest


class Run:
    """A run directory with a manifest tracking stage inputs and artifacts."""

    def __init__(self, out_dir: Path, cfg: RunConfig, force: bool = False):
        self.dir = Path(out_dir)
        self.cfg = cfg
        self.force = force
        self.dir.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.dir / "manifest.json"
        self.manifest = (
            load_json(self.manifest_path)
            if self.manifest_path.exists()
            else {"tool": f"mesopc {__version__}", "stages": {}}
        )

    # paths
    @property
    def data_dir(self) -> Path:
        return self.dir / "data"

    @property
    def ckpt_dir(self) -> Path:
        return self.dir / "ckpt"

    def data_path(self, split: str) -> Path:
        return self.data_dir / f"{split}.gset"

    @property
    def predictor_ckpt(self) -> Path:
        return self.ckpt_dir / "predictor.ckpt"

    @property
    def corrector_ckpt(self) -> Path:
        return self.ckpt_dir / "corrector.ckpt"

    @property
    def calib_path(self) -> Path:
        return self.dir / "calib.json"

    @property
    def forecast_dir(self) -> Path:
        return self.dir / "forecast"

    @property
    def report_dir(self) -> Path:
        return self.dir / "report"

    def digest(self, *parts) -> str:
        text = "|".join(
            sha256_file(p) if isinstance(p, Path) else canonical_json(p) for p in parts
        )
        return sha256_bytes(text.encode())

    def is_fresh(self, stage: str, inputs_digest: str) -> bool:
        if self.force:
            return False
        entry = self.manifest["stages"].get(stage)
        if not entry or entry["inputs"] != inputs_digest:
            return False
        for rel, digest in entry["artifacts"].items():
            p = self.dir / rel
            if not p.exists() or sha256_file(p) != digest:
                return False
        for rel in entry.get("aux", []):
            if not (self.dir / rel).exists():
                return False
        return True

    def record(self, stage: str, inputs_digest: str, artifacts: list[Path], aux: list[Path] = ()):
        self.manifest["stages"][stage] = {
            "inputs": inputs_digest,
            "artifacts": {
                str(p.relative_to(self.dir)): sha256_file(p) for p in artifacts
            },
            "aux": [str(p.relative_to(self.dir)) for p in aux],
            "finished_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        }
        dump_json(self.manifest, self.manifest_path)

    def load_split(self, split: str) -> GridSet:
        return read_gridset(self.data_path(split))


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# Stages


def stage_synth(run: Run) -> None:
    d = run.digest(dataclasses.asdict(run.cfg.synth))
    if run.is_fresh("synth", d):
        _log("synth: up to date, skipping")
        return
    _log("synth: generating dataset")
    paths = generate_dataset(run.cfg.synth, run.data_dir)
    run.record("synth", d, [paths["train"], paths["val"], paths["test"]])


def stage_train_predictor(run: Run) -> None:
    cfg = run.cfg
    d = run.digest(
        dataclasses.asdict(cfg.predictor),
        dataclasses.asdict(cfg.predictor_train),
        run.data_path("train"),
        run.data_path("val"),
    )
    if run.is_fresh("train-predictor", d):
        _log("train-predictor: up to date, skipping")
        return
    _log("train-predictor: training")
    log_path = run.ckpt_dir / "predictor.log"
    train_predictor(
        run.load_split("train"),
        run.load_split("val"),
        cfg.predictor,
        cfg.predictor_train,
        run.predictor_ckpt,
        log_path,
        device=cfg.device,
    )
    run.record("train-predictor", d, [run.predictor_ckpt], [log_path])


def stage_train_corrector(run: Run) -> None:
    cfg = run.cfg
    d = run.digest(
        dataclasses.asdict(cfg.corrector),
        dataclasses.asdict(cfg.edm),
        dataclasses.asdict(cfg.corrector_train),
        run.data_path("train"),
    )
    if run.is_fresh("train-corrector", d):
        _log("train-corrector: up to date, skipping")
        return
    _log("train-corrector: training")
    log_path = run.ckpt_dir / "corrector.log"
    train_corrector(
        run.load_split("train"),
        cfg.corrector,
        cfg.edm,
        cfg.corrector_train,
        run.corrector_ckpt,
        log_path,
        device=cfg.device,
    )
    run.record("train-corrector", d, [run.corrector_ckpt], [log_path])


def stage_calibrate(run: Run) -> None:
    cfg = run.cfg
    d = run.digest({"p": cfg.p}, run.predictor_ckpt, run.data_path("val"))
    if run.is_fresh("calibrate", d):
        _log("calibrate: up to date, skipping")
        return
    _log("calibrate: selecting noise level")
    model, _ = load_predictor(run.predictor_ckpt, device=cfg.device)
    val = normalize_gridset(run.load_split("val"))
    calib = calibrate(val, make_predict_fn(model), p=cfg.p)
    calib.save(run.calib_path)
    for v in calib.per_variable:
        suffix = " (no drop; fell back to N/2)" if v.no_drop else ""
        _log(f"  {v.name}: k*={v.k_star} sigma={v.sigma:.4f}{suffix}")
    _log(f"  global sigma = {calib.sigma_global:.4f}")
    run.record("calibrate", d, [run.calib_path])


def _case_indices(n_pairs: int, n_cases: int) -> list[int]:
    n = min(n_cases, n_pairs)
    return sorted({int(round(x)) for x in np.linspace(0, n_pairs - 1, n)})


def stage_forecast(run: Run) -> None:
    cfg = run.cfg
    d = run.digest(
        dataclasses.asdict(cfg.sample),
        {"n_cases": cfg.n_cases},
        run.predictor_ckpt,
        run.corrector_ckpt,
        run.calib_path,
        run.data_path("test"),
    )
    if run.is_fresh("forecast", d):
        _log("forecast: up to date, skipping")
        return
    _log("forecast: generating ensembles")
    pred_model, _ = load_predictor(run.predictor_ckpt, device=cfg.device)
    corr_model, edm, corr_cfg = load_corrector(run.corrector_ckpt, device=cfg.device)
    calib = NoiseCalibration.load(run.calib_path)
    test = run.load_split("test")
    test_norm = normalize_gridset(test)
    if pred_model.in_channels != test.values.shape[1]:
        from .errors import ShapeMismatchError

        raise ShapeMismatchError(
            f"test data has {test.values.shape[1]} channels, predictor expects "
            f"{pred_model.in_channels}"
        )

    artifacts = []
    cases_meta = []
    for ci, t in enumerate(_case_indices(test.n_times - 1, cfg.n_cases)):
        scfg = dataclasses.replace(
            cfg.sample,
            base_seed=cfg.sample.base_seed + 1000 * ci,
            sequential=cfg.single_threaded,
        )
        ens = ensemble_forecast(
            pred_model, corr_model, calib.sigma_global, test_norm.fieldset(t), scfg, edm
        )
        case_dir = run.forecast_dir / f"case_{ci:03d}"
        members_phys = ens.members_physical()
        for m in range(members_phys.shape[0]):
            gs = GridSet(
                values=members_phys[m][None].astype(np.float32),
                specs=test.specs,
                dt_hours=test.dt_hours,
                seed=scfg.base_seed + m,
                time_start=test.time_start + t + 1,
            )
            artifacts.append(write_gridset(gs, case_dir / f"member_{m:02d}.gset"))
        pred_phys = ens.predictor_physical()
        artifacts.append(
            write_gridset(
                GridSet(
                    values=pred_phys[None].astype(np.float32),
                    specs=test.specs,
                    dt_hours=test.dt_hours,
                    time_start=test.time_start + t + 1,
                ),
                case_dir / "predictor.gset",
            )
        )
        mean_fs = ens.ensemble_mean()
        artifacts.append(
            write_gridset(
                GridSet(
                    values=mean_fs.values[None].astype(np.float32),
                    specs=test.specs,
                    dt_hours=test.dt_hours,
                    time_start=test.time_start + t + 1,
                ),
                case_dir / "ens_mean.gset",
            )
        )
        precip_idx = test.channel_index("precip") if "precip" in test.variable_names() else None
        if precip_idx is not None:
            artifacts.append(
                write_gridset(
                    GridSet(
                        values=ens.pmm_precip()[None, None].astype(np.float32),
                        specs=[test.specs[precip_idx]],
                        dt_hours=test.dt_hours,
                        time_start=test.time_start + t + 1,
                    ),
                    case_dir / "pmm.gset",
                )
            )
        cases_meta.append(
            {
                "case": ci,
                "input_time_index": int(test.time_start + t),
                "seeds": ens.seeds,
                "sigma": calib.sigma_global,
                "steps": scfg.steps,
            }
        )
    fmanifest = run.forecast_dir / "manifest.json"
    dump_json(
        {
            "cases": cases_meta,
            "checkpoint_digests": {
                "predictor": sha256_file(run.predictor_ckpt),
                "corrector": sha256_file(run.corrector_ckpt),
            },
        },
        fmanifest,
    )
    artifacts.append(fmanifest)
    run.record("forecast", d, artifacts)


def _load_cases(run: Run) -> list[ForecastCase]:
    from .sampler import EnsembleForecast

    test = run.load_split("test")
    fmanifest = load_json(run.forecast_dir / "manifest.json")
    cases = []
    for meta in fmanifest["cases"]:
        ci = meta["case"]
        case_dir = run.forecast_dir / f"case_{ci:03d}"
        member_paths = sorted(case_dir.glob("member_*.gset"))
        members = []
        for p in member_paths:
            gs = normalize_gridset(read_gridset(p))
            members.append(gs.fieldset(0))
        pred = normalize_gridset(read_gridset(case_dir / "predictor.gset")).fieldset(0)
        ens = EnsembleForecast(
            members=members,
            predictor_output=pred,
            seeds=meta["seeds"],
            sigma=meta["sigma"],
            steps=meta["steps"],
        )
        t_local = meta["input_time_index"] - test.time_start + 1
        cases.append(ForecastCase(ensemble=ens, truth=test.fieldset(t_local)))
    return cases


def stage_verify(run: Run) -> None:
    cfg = run.cfg
    d = run.digest(
        dataclasses.asdict(cfg.fss),
        run.forecast_dir / "manifest.json",
        run.data_path("test"),
        run.calib_path,
    )
    if run.is_fresh("verify", d):
        _log("verify: up to date, skipping")
        return
    _log("verify: building report")
    calib = NoiseCalibration.load(run.calib_path)
    report = build_report(_load_cases(run), calib, cfg.fss)
    run.report_dir.mkdir(parents=True, exist_ok=True)
    report_path = run.report_dir / "report.json"
    report.save(report_path)
    plots = render_plots(report, run.report_dir)
    run.record("verify", d, [report_path], plots)
    thr = report.fss_thresholds
    if thr:
        _log(f"  FSS thresholds: {[round(t, 3) for t in thr]}")
    _log(f"  report: {report_path}")


_STAGE_FUNCS = {
    "synth": stage_synth,
    "train-predictor": stage_train_predictor,
    "train-corrector": stage_train_corrector,
    "calibrate": stage_calibrate,
    "forecast": stage_forecast,
    "verify": stage_verify,
}


# ---------------------------------------------------------------------------
# Entry point


def _resolve_config(args) -> RunConfig:
    """Priority: explicit --config file, then the run dir's stored
    config.json, then preset defaults built from --seed."""
    stored = Path(args.out) / "config.json"
    if getattr(args, "config", None):
        cfg = config_from_dict(load_json(args.config))
    elif stored.exists():
        cfg = config_from_dict(load_json(stored))
    else:
        cfg = default_config(seed=args.seed, preset=args.preset)
    if args.single_threaded:
        cfg.single_threaded = True
    device = os.environ.get("MESOPC_DEVICE")
    if device:
        cfg.device = device
    return cfg


def _prepare(args) -> Run:
    cfg = _resolve_config(args)
    set_torch_threads(cfg.single_threaded)
    run = Run(Path(args.out), cfg, force=args.force)
    stored = run.dir / "config.json"
    if not stored.exists() or args.force:
        dump_json(config_to_dict(cfg), stored)
    return run


def _run_stages(args, names) -> int:
    run = _prepare(args)
    for name in names:
        try:
            _STAGE_FUNCS[name](run)
        except MesopcError as e:
            _log(f"{name}: error: {e}")
            return e.exit_code
    return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--config", help="JSON config file (strict schema)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--preset", choices=("desk", "tiny"), default="desk")
    p.add_argument("--force", action="store_true", help="re-run even if up to date")
    p.add_argument(
        "--single-threaded",
        action="store_true",
        help="bit-reproducible mode: one torch thread, sequential members",
    )


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mesopc",
        description="Desk-scale predictor-corrector forecasting pipeline",
    )
    parser.add_argument("--version", action="version", version=f"mesopc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES + ("demo",):
        p = sub.add_parser(name)
        _add_common(p)

    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else 0

    try:
        if args.command == "demo":
            t0 = time.monotonic()
            rc = _run_stages(args, STAGES)
            _log(f"demo: finished in {time.monotonic() - t0:.1f}s")
            return rc
        return _run_stages(args, [args.command])
    except MesopcError as e:
        _log(f"error: {e}")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
