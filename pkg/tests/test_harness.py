import json
import math

import numpy as np
import pytest
from click.testing import CliRunner
from hypothesis import given, settings
from hypothesis import strategies as st

from fbm_ergo.harness import (
    ExperimentConfig,
    HarnessError,
    TailEstimate,
    default_constants,
    fit_tail,
    load_config,
    run_experiment,
    run_records,
    run_seed_sequence,
    runs_jsonl,
    survival_function,
    theory_gamma,
    tomllib,
    tv_bound,
)
from fbm_ergo.harness.calibrate import chain_constants, grid_constants
from fbm_ergo.harness.cli import main


def small_config(**kw):
    base = dict(sample_count=4, t_max=32.0, seed=3)
    base.update(kw)
    return ExperimentConfig.from_mapping(base)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


class TestConfig:
    def test_defaults_from_shipped_constants(self):
        cfg = ExperimentConfig.from_mapping({})
        consts = default_constants()
        assert cfg.params.kappa2 == consts["kappa2"] and cfg.params.h == consts["h"]

    def test_sample_count(self):
        with pytest.raises(HarnessError):
            small_config(sample_count=0)

    def test_unknown_key(self):
        with pytest.raises(HarnessError, match="unknown config keys"):
            ExperimentConfig.from_mapping({"hurst_index": 0.3})

    def test_invalid_params(self):
        with pytest.raises(HarnessError):
            ExperimentConfig.from_mapping({"alpha": 0.6})
        with pytest.raises(HarnessError, match="kappa2"):
            ExperimentConfig.from_mapping({"kappa2": 2.0})
        with pytest.raises(HarnessError, match="drift"):
            ExperimentConfig.from_mapping({"drift": "nonsense"})

    def test_load_config(self, tmp_path):
        path = tmp_path / "exp.toml"
        path.write_text('h = 0.7\nsample_count = 7\ndrift = "double_well"\n')
        cfg = load_config(path)
        assert cfg.params.h == 0.7 and cfg.sample_count == 7
        bad = tmp_path / "bad.toml"
        bad.write_text("h = = 1")
        with pytest.raises(HarnessError, match="cannot parse"):
            load_config(bad)


# ---------------------------------------------------------------------------
# Tail estimation
# ---------------------------------------------------------------------------


class TestSurvival:
    def test_example(self):
        t, s = survival_function([1.0, 2.0, 2.0, 3.0], 5, 10.0)
        assert t.tolist() == [1.0, 2.0, 3.0, 10.0]
        np.testing.assert_allclose(s, [0.8, 0.4, 0.2, 0.2])

    @given(st.lists(st.floats(0.01, 100.0), min_size=1, max_size=50), st.integers(0, 10))
    @settings(max_examples=50)
    def test_monotone(self, taus, extra):
        t, s = survival_function(taus, len(taus) + extra, 200.0)
        assert np.all(np.diff(s) <= 0) and np.all(s >= 0) and s[0] <= 1
        assert np.all(np.diff(t) > 0)

    def test_estimate_rejects_increasing(self):
        with pytest.raises(HarnessError):
            TailEstimate(np.array([1.0, 2.0]), np.array([0.2, 0.5]), 1.0, (0.5, 1.5))


class TestFitTail:
    @pytest.mark.parametrize("gamma", [0.25, 0.5, 1.0])
    def test_recovers_power_law(self, gamma):
        # quantiles of P(tau > t) = t^{-gamma} on [1, inf)
        n = 2000
        q = (np.arange(n) + 0.5) / n
        taus = q ** (-1.0 / gamma)
        assert fit_tail(taus, n) == pytest.approx(gamma, rel=0.05)

    def test_degenerate(self):
        assert math.isnan(fit_tail(np.ones(100), 100))
        assert math.isnan(fit_tail([], 10))
        assert math.isnan(fit_tail(np.arange(1.0, 11.0), 10))


class TestTvBound:
    def test_examples(self):
        tail = TailEstimate(np.array([1.0, 2.0, 4.0]), np.array([1.0, 0.5, 0.1]), 1.0, (0.5, 1.5))
        assert tv_bound(tail) == [(1.0, 2.0), (2.0, 1.0), (4.0, 0.2)]

    def test_empty(self):
        with pytest.raises(HarnessError):
            tv_bound(TailEstimate(np.array([]), np.array([]), math.nan, (math.nan, math.nan), False))


class TestTheoryGamma:
    def test_values(self):
        assert theory_gamma(0.7) == 0.125
        assert theory_gamma(0.3) == 0.125
        assert theory_gamma(0.1) == pytest.approx(0.08)

    def test_half_excluded(self):
        with pytest.raises(HarnessError, match="excluded by theory"):
            theory_gamma(0.5)


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


class TestDriver:
    def test_forced_success(self):
        tail, records = run_experiment(small_config(sample_count=5, t_max=16.0, forced_success=True))
        assert all(r.tau_infinity == 1.0 for r in records)
        assert tail.survival[0] == 0.0 and tail.t_values[0] == 1.0
        assert not tail.gamma_defined and math.isnan(tail.fitted_gamma)
        assert all(v == 0.0 for _, v in tv_bound(tail))

    def test_no_coupling(self):
        with pytest.raises(HarnessError, match="increase t_max"):
            run_experiment(small_config(t_max=1.0))

    def test_seed_streams(self):
        a = run_seed_sequence(0, 0).standard_normal(4)
        b = run_seed_sequence(0, 1).standard_normal(4)
        c = run_seed_sequence(0, 0).standard_normal(4)
        assert not np.array_equal(a, b) and np.array_equal(a, c)

    def test_workers_do_not_change_results(self):
        one = runs_jsonl(run_records(small_config(workers=1)))
        two = runs_jsonl(run_records(small_config(workers=2)))
        assert one == two

    def test_runs_jsonl_index(self):
        text = runs_jsonl(run_records(small_config(sample_count=2, t_max=8.0)))
        runs = {json.loads(line)["run"] for line in text.splitlines()}
        assert runs == {0, 1}

    def test_outputs(self, tmp_path):
        out = tmp_path / "exp"
        tail, records = run_experiment(small_config(sample_count=6, output=str(out)))
        assert (out / "runs.jsonl").exists()
        rows = (out / "tail.csv").read_text().splitlines()
        assert rows[0] == "t,survival,tv_bound" and len(rows) == len(tail.t_values) + 1
        summary = json.loads((out / "summary.json").read_text())
        assert summary["sample_count"] == 6 and summary["theory_gamma"] == 0.125
        assert summary["censored_count"] == tail.censored_count


# ---------------------------------------------------------------------------
# Calibration and CLI
# ---------------------------------------------------------------------------


class TestCalibrate:
    def test_grid_constants(self):
        g = grid_constants(0.3, 2.0**-6, 64.0)
        assert g["future_constant"] == pytest.approx(g["future_constant_closed_form"], rel=1e-4)

    def test_chain_constants(self):
        c = chain_constants()
        assert c["kappa1"] == pytest.approx(1.0, abs=1e-6)
        assert c["kappa2_min"] == pytest.approx(4.0 * math.sqrt(c["admissible_distance"]))
        assert default_constants()["kappa2"] >= c["kappa2_min"]


class TestCli:
    def test_run(self, tmp_path):
        out = tmp_path / "o"
        res = CliRunner().invoke(main, ["run", "--samples", "4", "--t-max", "128", "--out", str(out)])
        assert res.exit_code == 0, res.output
        assert {p.name for p in out.iterdir()} == {"runs.jsonl", "tail.csv", "summary.json"}

    def test_run_with_config(self, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text("sample_count = 4\nt_max = 128.0\nh = 0.7\n")
        res = CliRunner().invoke(main, ["run", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert res.exit_code == 0, res.output

    def test_config_error(self, tmp_path):
        res = CliRunner().invoke(main, ["run", "--alpha", "0.6", "--out", str(tmp_path / "o")])
        assert res.exit_code == 2

    def test_no_coupling_exit(self, tmp_path):
        res = CliRunner().invoke(main, ["run", "--samples", "2", "--t-max", "1", "--out", str(tmp_path / "o")])
        assert res.exit_code == 1

    def test_determinism(self, tmp_path):
        args = ["run", "--samples", "3", "--t-max", "32", "--seed", "9"]
        CliRunner().invoke(main, args + ["--out", str(tmp_path / "a")])
        CliRunner().invoke(main, args + ["--out", str(tmp_path / "b")])
        assert (tmp_path / "a" / "runs.jsonl").read_bytes() == (tmp_path / "b" / "runs.jsonl").read_bytes()

    def test_calibrate(self, tmp_path):
        out = tmp_path / "constants.toml"
        res = CliRunner().invoke(main, ["calibrate", "--out", str(out), "--hurst", "0.3"])
        assert res.exit_code == 0, res.output
        data = tomllib.loads(out.read_text())
        assert data["kappa2"] >= data["drift"]["kappa2_min"]
        assert "H0.3" in data["grid"]
