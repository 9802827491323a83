import json

import numpy as np
import pytest

from mesopc.cli import config_from_dict, config_to_dict, default_config, main
from mesopc.errors import ConfigError
from mesopc.grids import GridSet, VariableSpec, read_gridset, write_gridset
from mesopc.util import load_json, sha256_file


@pytest.fixture(scope="module")
def micro_config(tmp_path_factory):
    """Smallest config that still runs every stage."""
    cfg = default_config(seed=11, preset="tiny")
    d = config_to_dict(cfg)
    d["synth"]["n_steps"] = 40
    d["predictor_train"]["epochs"] = 1
    d["corrector_train"]["epochs"] = 1
    d["sample"]["members"] = 2
    d["sample"]["steps"] = 2
    d["n_cases"] = 2
    p = tmp_path_factory.mktemp("cfg") / "micro.json"
    p.write_text(json.dumps(d))
    return p


@pytest.fixture(scope="module")
def micro_run(micro_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "r1"
    rc = main(["demo", "--out", str(out), "--config", str(micro_config)])
    assert rc == 0
    return out


class TestConfigSchema:
    def test_round_trip(self):
        cfg = default_config(seed=4, preset="desk")
        back = config_from_dict(config_to_dict(cfg))
        assert config_to_dict(back) == config_to_dict(cfg)

    def test_unknown_top_level_key_rejected(self):
        d = config_to_dict(default_config())
        d["bogus"] = 1
        with pytest.raises(ConfigError, match="bogus"):
            config_from_dict(d)

    def test_unknown_nested_key_rejected(self):
        d = config_to_dict(default_config())
        d["edm"]["sigma_typo"] = 1.0
        with pytest.raises(ConfigError, match="sigma_typo"):
            config_from_dict(d)

    def test_unknown_preset_rejected(self):
        with pytest.raises(ConfigError):
            default_config(preset="huge")

    def test_invalid_p_rejected(self):
        d = config_to_dict(default_config())
        d["p"] = 1.5
        with pytest.raises(ConfigError):
            config_from_dict(d)


class TestCliDispatch:
    def test_unknown_flag_exits_2(self, capsys):
        rc = main(["demo", "--out", "/tmp/x", "--bogus-flag"])
        assert rc == 2

    def test_unknown_subcommand_exits_2(self):
        rc = main(["frobnicate", "--out", "/tmp/x"])
        assert rc == 2

    def test_bad_config_key_exits_2(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"not_a_key": 1}))
        rc = main(["synth", "--out", str(tmp_path / "r"), "--config", str(p)])
        assert rc == 2

    def test_demo_layout(self, micro_run):
        assert (micro_run / "config.json").exists()
        assert (micro_run / "manifest.json").exists()
        for split in ("train", "val", "test"):
            assert (micro_run / "data" / f"{split}.gset").exists()
        assert (micro_run / "ckpt" / "predictor.ckpt").exists()
        assert (micro_run / "ckpt" / "corrector.ckpt").exists()
        assert (micro_run / "calib.json").exists()
        assert (micro_run / "report" / "report.json").exists()
        assert (micro_run / "report" / "psd.png").exists()

    def test_manifest_digests_match_artifacts(self, micro_run):
        manifest = load_json(micro_run / "manifest.json")
        n_checked = 0
        for stage, entry in manifest["stages"].items():
            for rel, digest in entry["artifacts"].items():
                p = micro_run / rel
                assert p.exists(), rel
                assert sha256_file(p) == digest, rel
                n_checked += 1
        assert n_checked > 5

    def test_rerun_is_noop(self, micro_run, micro_config, capsys):
        before = sha256_file(micro_run / "report" / "report.json")
        rc = main(["demo", "--out", str(micro_run), "--config", str(micro_config)])
        assert rc == 0
        err = capsys.readouterr().err
        assert err.count("skipping") >= 6
        assert sha256_file(micro_run / "report" / "report.json") == before

    def test_forecast_manifest_contents(self, micro_run):
        fm = load_json(micro_run / "forecast" / "manifest.json")
        assert len(fm["cases"]) == 2
        assert "predictor" in fm["checkpoint_digests"]
        case = fm["cases"][0]
        assert {"case", "input_time_index", "seeds", "sigma", "steps"} <= set(case)

    def test_forecast_files_roundtrip(self, micro_run):
        gs = read_gridset(micro_run / "forecast" / "case_000" / "member_00.gset")
        assert gs.n_times == 1
        pm = read_gridset(micro_run / "forecast" / "case_000" / "pmm.gset")
        assert pm.values.shape[1] == 1
        assert pm.values.min() >= 0

    def test_calibrate_channel_mismatch_exits_4(self, micro_run, tmp_path):
        import shutil

        out = tmp_path / "broken"
        shutil.copytree(micro_run, out)
        val = read_gridset(out / "data" / "val.gset")
        two = GridSet(
            values=val.values[:, :2],
            specs=val.specs[:2],
            dt_hours=val.dt_hours,
            seed=val.seed,
            time_start=val.time_start,
        )
        write_gridset(two, out / "data" / "val.gset")
        rc = main(["calibrate", "--out", str(out), "--force"])
        assert rc == 4

    def test_corrupt_data_exits_3(self, micro_run, tmp_path):
        import shutil

        out = tmp_path / "corrupt"
        shutil.copytree(micro_run, out)
        p = out / "data" / "train.gset"
        data = bytearray(p.read_bytes())
        data[:8] = b"XXXXXXXX"
        p.write_bytes(bytes(data))
        rc = main(["train-predictor", "--out", str(out), "--force"])
        assert rc == 3
