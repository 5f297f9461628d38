import csv

import numpy as np
import pytest
import yaml

from actorsim.cli import EXIT_CONFIG, EXIT_OK, main
from actorsim.exceptions import ConfigError, RunFailedError
from actorsim.harness import (METRIC_FIELDS, ExperimentConfig, confidence_band, init_beta, relative_error,
                              run_baseline, run_campaign, run_replication, stream)


def tiny(**kw):
    base = dict(
        iterations=2, init_episodes=2, initial_restarts=1, horizon=10, replications=1, eval_episodes=10,
        eval_every=1, eval_episodes_interim=5, mape_probes=5,
        dqn={"episodes": 8, "batch_size": 8, "hidden": [8, 8]},
        uncertainty={"samples": 2, "rollouts": 1, "penalty_samples": 1, "penalty_rollouts": 1,
                     "penalty_representatives": 2},
        gp={"grid_search": False},
    )
    base.update(kw)
    return ExperimentConfig(**base)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_config_defaults_and_validation(tmp_path):
    cfg = ExperimentConfig()
    assert cfg.iterations == 100 and cfg.replications == 30 and cfg.case == 20
    assert cfg.dqn["eps0"] == 0.6 and cfg.uncertainty["v_max"] == 10.0
    for bad in ({"arms": ["nope"]}, {"iterations": 0}, {"gamma": 1.0}, {"c": 0.5}, {"case": 25},
                {"dqn": {"bogus": 1}}, {"kinetics_path": str(tmp_path / "missing.yaml")}):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(bad)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"unknown_key": 1})


def test_config_yaml_roundtrip(tmp_path):
    cfg = tiny(seed=5)
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(cfg.to_dict()))
    back = ExperimentConfig.from_yaml(path)
    assert back.to_dict() == cfg.to_dict()
    path.write_text("- not a mapping\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_yaml(path)
    assert cfg.replace(seed=9).seed == 9 and cfg.replace(seed=9).dqn == cfg.dqn


def test_kinetics_overrides_reach_the_model():
    cfg = tiny(kinetics={"initial_density": 0.07})
    assert cfg.kinetic_config().initial_density == 0.07


def test_streams_independent_and_reproducible():
    a = stream(1, 0, "physical").uniform(size=3)
    assert np.array_equal(a, stream(1, 0, "physical").uniform(size=3))
    assert not np.array_equal(a, stream(1, 1, "physical").uniform(size=3))
    assert not np.array_equal(a, stream(1, 0, "select").uniform(size=3))
    assert not np.array_equal(stream(1, 0, "eval", 1).uniform(), stream(1, 0, "eval", 2).uniform())


def test_init_beta_range():
    bt = np.array([1.0, 10.0])
    draws = np.array([init_beta(bt, np.random.default_rng(i)) for i in range(200)])
    assert np.all(draws > 0) and np.all(draws <= 4 * bt)
    assert relative_error(bt * 1.1, bt) == pytest.approx(0.1 * np.sqrt(2))
    with pytest.raises(ConfigError):
        init_beta(np.array([0.0]), np.random.default_rng(0))


def test_confidence_band():
    m, lo, hi = confidence_band(np.array([1.0, 2.0, 3.0, np.nan]))
    assert m == 2.0 and hi - 2.0 == pytest.approx(2.0 - lo) == pytest.approx(4.302652729911275 / np.sqrt(3))
    assert confidence_band(np.array([4.0])) == (4.0, 4.0, 4.0)


@pytest.mark.parametrize("arm", ["actor-simulator", "random", "gp"])
def test_run_replication_each_arm(arm):
    res = run_replication(tiny(), arm, 0)
    assert res.status == "ok" and len(res.records) == 2
    last = res.records[-1]
    assert last.transitions == 2 * 10 + 2
    assert np.isfinite(last.j_raw) and np.isfinite(last.relative_error)
    assert res.mape.shape == (30,)
    assert len(res.visited) == 22
    if arm == "actor-simulator":
        assert len(res.audit) == 2 * 11


def test_arms_share_initial_design():
    a = run_replication(tiny(iterations=1), "random", 0)
    b = run_replication(tiny(iterations=1), "gp", 0)
    assert np.array_equal(a.visited.states[:20], b.visited.states[:20])


def test_run_baseline_rejects_actor_arm():
    with pytest.raises(ConfigError):
        run_baseline(tiny(), "actor-simulator")
    with pytest.raises(ConfigError):
        run_replication(tiny(), "bogus")


def test_degraded_budget(monkeypatch):
    import actorsim.harness as h

    def broken(*a, **k):
        raise h.ActorSimulatorError("forced")

    monkeypatch.setattr(h, "StepPenalty", broken)
    with pytest.raises(RunFailedError):
        run_replication(tiny(), "random", 0)
    res = run_replication(tiny(max_degraded_fraction=1.0), "random", 0)
    assert res.status == "degraded" and all(r.degraded for r in res.records)


def test_initial_design_too_small():
    with pytest.raises(ConfigError):
        run_replication(tiny(init_episodes=1), "random", 0)


def test_campaign_outputs(tmp_path):
    cfg = tiny(arms=["random", "gp"], replications=2)
    res = run_campaign(cfg, out_dir=tmp_path)
    assert all(r.status == "ok" for r in res.runs)
    rows = read_csv(tmp_path / "metrics.csv")
    assert list(rows[0]) == METRIC_FIELDS
    assert len(rows) == 2 * 2 * 2
    assert "wall_time" not in rows[0]
    for name in ("summary.csv", "timings.csv", "mape.csv", "status.csv", "visited_states.csv",
                 "uncertainty_audit.csv", "training_log.csv", "final_beta.csv", "config.yaml"):
        assert (tmp_path / name).exists(), name
    assert res.final("random").shape == (2,)
    summary = read_csv(tmp_path / "summary.csv")
    assert {r["arm"] for r in summary} == {"random", "gp"}
    assert ExperimentConfig.from_yaml(tmp_path / "config.yaml").to_dict() == cfg.to_dict()


def test_cli_exit_codes(tmp_path, capsys):
    cfg_path = tmp_path / "c.yaml"
    cfg_path.write_text(yaml.safe_dump(tiny().to_dict()))
    out = tmp_path / "sim"
    assert main(["simulate", "--config", str(cfg_path), "--episodes", "2", "--out", str(out)]) == EXIT_OK
    assert len(read_csv(out / "trajectories.csv")) == 2 * 10
    assert main(["calibrate", "--config", str(cfg_path), "--data", str(out / "trajectories.csv"),
                 "--out", str(out)]) == EXIT_OK
    assert (out / "beta.csv").exists() and (out / "covariance.csv").exists()
    assert main(["train", "--config", str(cfg_path), "--beta", str(out / "beta.csv"), "--episodes", "8",
                 "--out", str(out)]) == EXIT_OK
    assert main(["evaluate", "--config", str(cfg_path), "--policy", str(out / "policy.qnet"),
                 "--episodes", "5"]) == EXIT_OK
    assert main(["run", "--config", str(cfg_path), "--arm", "random", "--out", str(tmp_path / "run")]) == EXIT_OK
    assert (tmp_path / "run" / "metrics.csv").exists()
    bad = tmp_path / "bad.yaml"
    bad.write_text("iterations: 0\n")
    assert main(["campaign", "--config", str(bad), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert main(["evaluate", "--config", str(cfg_path), "--policy", str(tmp_path / "missing.qnet")]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err
