import json
import textwrap
from pathlib import Path

import numpy as np
import pytest

import sivcharge.runner as runner
from sivcharge import cli
from sivcharge.acceptance import CriterionResult
from sivcharge.config import ConfigError, ExperimentConfig, load_config, parse_config
from sivcharge.profiles import list_profiles, load_profile
from sivcharge.model import ChargeModelParams

CONFIGS = sorted((Path(__file__).resolve().parents[1] / "configs").glob("*.cfg"))

SMALL = textwrap.dedent("""\
    name: small
    seed: 42
    repetitions: 300
    model: emitter_a
    protocol:
      name: fig1
      params: {probe_power: 13.0}
    sweep:
      voltage: [0, 50]
    analysis:
      bin_width: 100 us
    """)


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL)
    return path


class TestConfig:
    @pytest.mark.parametrize("path", CONFIGS, ids=lambda p: p.stem)
    def test_shipped_configs_round_trip(self, path):
        cfg = load_config(path)
        again = parse_config(cfg.dump())
        assert again.dump() == cfg.dump() and again.digest() == cfg.digest()
        assert again.model_params() == cfg.model_params()
        assert again.detector_params() == cfg.detector_params()
        assert [r.axes for r in again.runs()] == [r.axes for r in cfg.runs()]
        assert len(cfg.runs()) >= 2

    def test_run_order_first_axis_slowest(self):
        cfg = load_config(next(p for p in CONFIGS if p.stem == "fig3_recovery"))
        axes = [r.axes for r in cfg.runs()]
        assert axes[0] == {"near_resonant_on": True, "tau2": 0}
        assert axes[1] == {"near_resonant_on": True, "tau2": 1}
        assert [r.index for r in cfg.runs()] == list(range(len(axes)))

    def test_errors_carry_line_numbers(self):
        text = SMALL.replace("repetitions: 300", "repetitions: -3").replace("voltage: [0, 50]", "voltage: []")
        with pytest.raises(ConfigError) as info:
            parse_config(text, "bad.cfg")
        assert info.value.problems == [(3, "'repetitions' must be an integer >= 1, got -3"),
                                       (9, "sweep axis 'voltage' is empty")]
        assert str(info.value).startswith("bad.cfg:3: ")

    def test_unknown_keys_and_axes(self):
        text = SMALL.replace("sweep:\n  voltage", "sweep:\n  volts") + "colour: red\n"
        with pytest.raises(ConfigError) as info:
            parse_config(text)
        msgs = " ".join(m for _, m in info.value.problems)
        assert "unknown sweep axis 'volts'" in msgs and "unknown key 'colour'" in msgs

    def test_yaml_syntax_error(self):
        with pytest.raises(ConfigError) as info:
            parse_config("name: x\nseed: [1, 2\n")
        assert info.value.problems[0][0] is not None
        assert "YAML syntax" in info.value.problems[0][1]

    def test_invalid_sequence_caught_before_simulation(self):
        text = SMALL.replace("params: {probe_power: 13.0}", "params: {probe_power: -1.0}")
        with pytest.raises(ConfigError, match=">= 0") as info:
            parse_config(text)
        assert info.value.problems[0][0] == 5

    def test_model_overrides(self):
        text = SMALL.replace("model: emitter_a", "model:\n  profile: emitter_a\n  overrides: {k_ion: 5.0}")
        assert parse_config(text).model_params().k_ion == 5.0
        with pytest.raises(ConfigError, match="model"):
            parse_config(SMALL.replace("model: emitter_a", "model: nowhere"))

    def test_explicit_segments(self, tmp_path):
        text = textwrap.dedent("""\
            name: custom
            seed: 1
            repetitions: 200
            protocol:
              segments:
                - {duration: 2 ms, lasers: [{color: green, power_uw: 300}]}
                - {duration: 10 ms, lasers: [{color: resonant, power_uw: 13}]}
              windows: {readout: [2 ms, 12 ms]}
            sweep:
              voltage: [0, 50]
            """)
        cfg = parse_config(text)
        runs = cfg.runs()
        assert [r.sequence.segments[1].voltage for r in runs] == [0.0, 50.0]
        assert runs[0].sequence.window("readout") == (2_000_000, 12_000_000)
        out = runner.run_experiment(cfg, tmp_path / "o")
        assert out.ok

    def test_missing_seed(self):
        with pytest.raises(ConfigError, match="'seed' is required"):
            parse_config(SMALL.replace("seed: 42\n", ""))


class TestProfiles:
    def test_default_profile_matches_dataclass(self):
        assert load_profile("emitter_a") == ChargeModelParams()

    def test_inheritance(self):
        p = load_profile("emitter_a_unquenched")
        assert p.v_capture_quench == float("inf")
        assert p.replace(v_capture_quench=ChargeModelParams().v_capture_quench) == ChargeModelParams()

    def test_listing_and_unknown(self):
        names = [n for n, _ in list_profiles()]
        assert "emitter_a" in names and names == sorted(names)
        with pytest.raises(KeyError, match="unknown profile"):
            load_profile("nope")


class TestRunner:
    def test_artifacts_and_replay(self, small_cfg, tmp_path):
        out = runner.run_experiment(small_cfg, tmp_path / "out")
        assert out.ok and len(out.manifest["runs"]) == 2
        for name in ("config.cfg", "fits.json", "summary.csv", "manifest.json", "histograms/run_001.csv"):
            assert (out.out_dir / name).exists()
        report = runner.replay(out.out_dir)
        assert report.identical and report.version_mismatch is None
        assert report.lines()[-1] == "replay identical"

    def test_worker_count_invariance(self, small_cfg, tmp_path):
        a = runner.run_experiment(small_cfg, tmp_path / "w1", workers=1)
        b = runner.run_experiment(small_cfg, tmp_path / "w2", workers=2)
        assert a.manifest["outputs"] == b.manifest["outputs"]

    def test_seeds_independent_of_order(self):
        assert runner.run_seed(42, 3) == runner.run_seed(42, 3)
        assert len({runner.run_seed(42, i) for i in range(100)}) == 100

    def test_tampered_seed_diverges(self, small_cfg, tmp_path, capsys):
        out = runner.run_experiment(small_cfg, tmp_path / "out")
        m = json.loads((out.out_dir / "manifest.json").read_text())
        m["seed"] += 1
        (out.out_dir / "manifest.json").write_text(json.dumps(m))
        assert cli.main(["replay", str(out.out_dir / "manifest.json")]) == cli.EXIT_FAIL
        assert "diverged" in capsys.readouterr().out

    def test_version_mismatch_reported(self, small_cfg, tmp_path):
        out = runner.run_experiment(small_cfg, tmp_path / "out")
        m = json.loads((out.out_dir / "manifest.json").read_text())
        m["version"] = "0.0.0-old"
        (out.out_dir / "manifest.json").write_text(json.dumps(m))
        report = runner.replay(out.out_dir)
        assert report.version_mismatch and "0.0.0-old" in report.version_mismatch
        assert report.lines()[0].startswith("version mismatch")

    def test_partial_failure_recorded(self, small_cfg, tmp_path, monkeypatch):
        real = runner.simulate_histogram

        def flaky(seq, *a, **kw):
            if seq.segments[0].voltage == 50:
                raise FloatingPointError("boom")
            return real(seq, *a, **kw)

        monkeypatch.setattr(runner, "simulate_histogram", flaky)
        out = runner.run_experiment(small_cfg, tmp_path / "out")
        assert not out.ok and out.manifest["failures"] == 1
        failed = [r for r in out.manifest["runs"] if r["status"] == "failed"]
        assert failed[0]["axes"] == {"voltage": 50} and "boom" in failed[0]["error"]
        assert (out.out_dir / "histograms/run_000.csv").exists()


class TestCLI:
    def test_run_and_replay(self, small_cfg, tmp_path, capsys):
        assert cli.main(["run", "--config", str(small_cfg), "--out", str(tmp_path / "o")]) == 0
        assert cli.main(["replay", str(tmp_path / "o")]) == 0
        assert "replay identical" in capsys.readouterr().out

    def test_seed_override(self, small_cfg, tmp_path):
        cli.main(["run", "--config", str(small_cfg), "--out", str(tmp_path / "o"), "--seed", "7"])
        assert json.loads((tmp_path / "o/manifest.json").read_text())["seed"] == 7

    def test_config_error_exit(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text(SMALL.replace("seed: 42", "seed: -1"))
        assert cli.main(["run", "--config", str(bad)]) == cli.EXIT_CONFIG
        assert f"{bad}:2:" in capsys.readouterr().err
        assert cli.main(["validate", str(bad)]) == cli.EXIT_CONFIG

    def test_validate_shipped(self, capsys):
        assert cli.main(["validate", *map(str, CONFIGS)]) == 0
        assert capsys.readouterr().out.count(": ok") == len(CONFIGS)

    def test_list_profiles(self, capsys):
        assert cli.main(["list-profiles"]) == 0
        assert "emitter_a\t" in capsys.readouterr().out

    def test_unknown_profile(self, small_cfg):
        assert cli.main(["run", "--config", str(small_cfg), "--profile", "nope"]) == cli.EXIT_CONFIG

    def test_simulation_failure_exit(self, small_cfg, tmp_path, monkeypatch):
        def broken(*a, **kw):
            raise FloatingPointError("boom")

        monkeypatch.setattr(runner, "simulate_histogram", broken)
        assert cli.main(["run", "--config", str(small_cfg), "--out", str(tmp_path / "o")]) == cli.EXIT_SIM

    def test_check_failure_exit(self, monkeypatch, capsys):
        import sivcharge.acceptance as acc

        monkeypatch.setattr(acc, "run_suite", lambda quick=False: [
            CriterionResult("A1", "ok", True, "", 0.0), CriterionResult("A2", "bad", False, "", 0.0)])
        assert cli.main(["run", "--check"]) == cli.EXIT_ACCEPT
        assert "FAIL" in capsys.readouterr().out

    def test_ple_command(self, tmp_path, capsys):
        out = tmp_path / "ple.json"
        code = cli.main(["ple", "--power", "13", "--points", "15", "--repetitions", "300", "--seed", "1",
                         "--out", str(out)])
        assert code == 0
        report = json.loads(out.read_text())
        assert len(report["scan"]) == 15 and report["fit"]["converged"]
        assert "FWHM" in capsys.readouterr().out
