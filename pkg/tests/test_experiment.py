import json

import numpy as np
import pytest

from swarmlearn.cli import main as cli_main
from swarmlearn.experiment import (ExperimentConfig, ExperimentError, derive_seed,
                                   desk_config, run_experiment, run_trial)
from swarmlearn.reports import emit_reports


def tiny_od_config(**kw):
    base = dict(preset="od", M=2, M_rho=4, L=10, T0=0.0, T=10.0, T_f=50.0,
                trials=1, seed=13)
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def od_artifact():
    return run_experiment(tiny_od_config())


class TestConfig:
    def test_validation(self):
        with pytest.raises(ExperimentError):
            tiny_od_config(T=60.0)  # T > T_f
        with pytest.raises(ExperimentError):
            tiny_od_config(preset="nope")
        with pytest.raises(ExperimentError):
            tiny_od_config(M=0)

    def test_grids_uniform_and_nested(self):
        cfg = tiny_od_config()
        gt, gf = cfg.grids()
        assert len(gt) == 10 and np.isclose(gf[-1], 50.0)
        steps = np.diff(gf)
        assert np.abs(steps - steps[0]).max() < 1e-12 * 50
        assert (gf[:10] == gt).all()

    def test_desk_scale_divides_ensembles(self):
        cfg = tiny_od_config(M=40, M_rho=40, trials=6, desk_scale=4.0)
        assert cfg.eff_M == 10 and cfg.eff_M_rho == 10 and cfg.eff_trials == 2

    def test_seed_derivation_distinct(self):
        seeds = {derive_seed(0, t, p) for t in range(3) for p in range(3)}
        assert len(seeds) == 9


class TestRunExperiment:
    def test_smoke_contract_all_sections(self, od_artifact):
        agg = od_artifact.aggregates
        assert ("x", 0, 0) in agg["kernel_errors"]
        assert ("training", "x", "train_window") in agg["trajectory_errors"]
        assert set(agg["confusion"]) == {"training", "random"}
        assert "accuracy" in agg["confusion_stats"]["training"]
        assert "pi1_mean" in agg["pattern"]["training"]
        assert agg["gss"] is None
        assert od_artifact.metadata["integrator"].startswith("adaptive embedded")

    def test_determinism_bitwise(self, od_artifact):
        again = run_experiment(tiny_od_config())
        a = od_artifact.trials[0].kernel_errors[("x", 0, 0)]
        b = again.trials[0].kernel_errors[("x", 0, 0)]
        assert a == b
        for key, va in od_artifact.trials[0].trajectory_errors.items():
            vb = again.trials[0].trajectory_errors[key]
            assert va == vb

    def test_parallel_serial_equivalence(self, od_artifact):
        par = run_experiment(tiny_od_config(workers=2, chunk=1))
        a = od_artifact.trials[0].kernel_errors[("x", 0, 0)]
        b = par.trials[0].kernel_errors[("x", 0, 0)]
        assert abs(a - b) <= 1e-9 * max(abs(a), 1.0)

    def test_reports_emitted(self, od_artifact, tmp_path):
        written = emit_reports(od_artifact, tmp_path / "out")
        names = {p.name for p in written}
        for expected in ("config.yaml", "metadata.json", "checks.json",
                         "kernel_errors.csv", "trajectory_errors.csv",
                         "confusion.csv", "confusion_stats.csv",
                         "pattern_indicators.csv", "events.csv"):
            assert expected in names
        plot = tmp_path / "out" / "plotdata" / "kernel_x_0_0.csv"
        rows = plot.read_text().splitlines()
        assert rows[0].split(",")[:3] == ["r", "phi_true", "phi_hat_mean"]
        assert len(rows) - 1 >= 500  # resolution contract

    def test_report_tables_bitwise_deterministic(self, od_artifact, tmp_path):
        again = run_experiment(tiny_od_config())
        emit_reports(od_artifact, tmp_path / "a")
        emit_reports(again, tmp_path / "b")
        for name in ("kernel_errors.csv", "trajectory_errors.csv", "confusion.csv",
                     "pattern_indicators.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_undef_rendering(self, tmp_path):
        # an empty confusion denominator must render as "undef", not 0
        from swarmlearn.reports import _cell
        assert _cell(None) == "undef"
        assert _cell(float("nan")) == "undef"
        assert _cell(1.5) == "1.5"


class TestCli:
    def test_simulate_learn_evaluate_chain(self, tmp_path):
        traj = tmp_path / "t.swtr"
        est = tmp_path / "e.npz"
        out = tmp_path / "rep"
        assert cli_main(["simulate", "--preset", "od", "--M", "2", "--L", "8",
                         "--seed", "3", "--out", str(traj)]) == 0
        assert traj.exists()
        assert cli_main(["learn", "--preset", "od", "--data", str(traj),
                         "--exact-derivatives", "--seed", "3", "--out", str(est)]) == 0
        assert est.exists()
        assert cli_main(["evaluate", "--preset", "od", "--estimate", str(est),
                         "--M", "2", "--seed", "3", "--out", str(out)]) == 0
        report = json.loads((out / "evaluate.json").read_text())
        assert "kernel_errors" in report

    def test_reproduce_exit_code_reflects_checks(self, tmp_path):
        # a deliberately starved run: the kernel error check fails
        rc = cli_main(["reproduce", "od", "--M", "2", "--trials", "1",
                       "--desk-scale", "100", "--seed", "1",
                       "--out", str(tmp_path / "r")])
        assert rc in (0, 1)
        checks = json.loads((tmp_path / "r" / "checks.json").read_text())
        assert rc == (0 if all(c["pass"] for c in checks.values()) else 1)
