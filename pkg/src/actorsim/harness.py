"""End-to-end calibration runs, multi-arm campaigns and their CSV outputs.

One run alternates three steps per iteration: pick an exchange ratio and
observe one physical transition, refit the twin, retrain the policy on
the penalised twin.  Arms differ only in how the action is picked.

Randomness comes from named streams derived from the master seed, the
replication index and a fixed component id, so different arms of the
same replication see identical physical noise, initial guesses and
evaluation draws.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import yaml
from scipy import stats

from .baselines import GPSurrogate, default_hyper_grid, gp_inputs, gp_select_action, prediction_mse, random_action
from .calibration import MLEOptions, estimate_covariance, mean_log_likelihood, mle_fit
from .exceptions import (ActorSimulatorError, ConfigError, DivergedSimulationError, IllConditionedError,
                         RunFailedError, SelectionFailedError)
from .kinetics.layout import REACTION_NAMES, STATE_DIM
from .kinetics.model import IPSCModel, flux_mape
from .kinetics.params import load_kinetic_config
from .mdp import ActionGrid, Dataset, RandomPolicy, simulate_batch, batch_returns
from .policy import EpsilonSchedule, PenalizedMDP, QNetwork, StepPenalty, train_policy
from .uncertainty import select_calibration_action

log = logging.getLogger(__name__)

ARMS = ("actor-simulator", "random", "gp")
STREAMS = {"init": 0, "physical": 1, "select": 2, "policy": 3, "value": 4, "eval": 5, "probe": 6, "explore": 7}


def stream(seed, replication, name, *extra):
    """Generator for one named component of one replication."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(replication), STREAMS[name], *extra)))


@dataclass
class ExperimentConfig:
    arms: tuple = ARMS
    case: int = 20
    iterations: int = 100
    init_episodes: int = 5
    initial_restarts: int = 4  # starting points for the first fit; the best likelihood wins
    horizon: int = 12
    replications: int = 30
    eval_episodes: int = 1000
    eval_every: int = 5
    eval_episodes_interim: int = 200
    gamma: float = 0.99
    c: float = 1.0
    seed: int = 0
    workers: int = 1
    mape_probes: int = 100
    max_degraded_fraction: float = 0.2
    covariance_mode: str = "gauss-newton"
    kinetics_path: str | None = None
    kinetics: dict = field(default_factory=dict)  # overrides merged onto the simulator config
    mle: dict = field(default_factory=lambda: {"max_epochs": 0, "polish_max_nfev": 50})
    initial_mle: dict = field(default_factory=lambda: {"max_epochs": 0, "polish_max_nfev": 200})
    dqn: dict = field(default_factory=lambda: {
        "episodes": 200, "n_envs": 8, "batch_size": 64, "max_updates_per_episode": 50, "hidden": [64, 64],
        "lr": 1e-4, "l2": 1e-10, "log_inputs": True, "eps0": 0.6, "eps_decay": 5e-4, "eps_min": 0.01,
        "buffer_capacity": 100_000,
    })
    uncertainty: dict = field(default_factory=lambda: {
        "samples": 16, "rollouts": 8, "v_max": 10.0,
        "penalty_samples": 4, "penalty_rollouts": 2, "penalty_representatives": 8,
    })
    gp: dict = field(default_factory=lambda: {"capacity": 500, "grid_search": True})

    def __post_init__(self):
        self.arms = tuple(self.arms)
        for a in self.arms:
            if a not in ARMS:
                raise ConfigError(f"unknown arm {a!r}; expected one of {ARMS}")
        for name in ("iterations", "init_episodes", "initial_restarts", "horizon", "replications", "eval_episodes", "eval_every",
                     "eval_episodes_interim", "workers", "mape_probes"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma must lie in (0, 1)")
        if self.c < 1.0:
            raise ConfigError("penalty coefficient c must be >= 1")
        if self.case not in (20, 30, 40):
            raise ConfigError("case must be 20, 30 or 40")
        if self.kinetics_path is not None and not os.path.exists(self.kinetics_path):
            raise ConfigError(f"kinetics file {self.kinetics_path} does not exist")
        defaults = ExperimentConfig.__dataclass_fields__
        for name in ("mle", "initial_mle", "dqn", "uncertainty", "gp"):
            base = defaults[name].default_factory()
            given = getattr(self, name) or {}
            unknown = set(given) - set(base) - (set(MLEOptions.__dataclass_fields__) if "mle" in name else set())
            if unknown:
                raise ConfigError(f"unknown {name} option(s): {', '.join(sorted(unknown))}")
            setattr(self, name, {**base, **given})

    @classmethod
    def from_dict(cls, tree):
        tree = dict(tree or {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(tree) - known
        if unknown:
            raise ConfigError(f"unknown experiment option(s): {', '.join(sorted(unknown))}")
        try:
            return cls(**tree)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_yaml(cls, path):
        try:
            with open(path) as fh:
                tree = yaml.safe_load(fh) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(tree, dict):
            raise ConfigError("experiment config must be a mapping")
        return cls.from_dict(tree)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["arms"] = list(self.arms)
        return d

    def kinetic_config(self):
        return load_kinetic_config(self.kinetics_path, overrides=self.kinetics, case=self.case)

    def replace(self, **kw):
        d = self.to_dict()
        d.update(kw)
        return ExperimentConfig.from_dict(d)


METRIC_FIELDS = ["replication", "iteration", "arm", "relative_error", "j_raw", "j_raw_se", "j_shifted",
                 "j_shifted_se", "calibration_loss", "transitions", "action_index", "b", "degraded"]


@dataclass
class MetricsRecord:
    replication: int
    iteration: int
    arm: str
    relative_error: float
    j_raw: float
    j_raw_se: float
    j_shifted: float
    j_shifted_se: float
    calibration_loss: float
    transitions: int
    action_index: int
    b: float
    degraded: bool = False
    wall_time: float = 0.0  # kept out of the metrics CSV so reruns compare byte for byte

    def row(self):
        out = []
        for name in METRIC_FIELDS:
            v = getattr(self, name)
            out.append(repr(float(v)) if isinstance(v, float) else (int(v) if isinstance(v, (bool, np.bool_)) else v))
        return out


@dataclass
class RunResult:
    arm: str
    replication: int
    records: list
    beta_hat: np.ndarray
    mape: np.ndarray
    visited: Dataset
    audit: list  # (iteration, action_index, UncertaintyEstimate | None)
    train_log: list
    status: str = "ok"
    message: str = ""


def init_beta(true_beta, rng, lower=None, upper=None):
    """Each entry ``~ U(1e-6 * beta*, 4 * beta*)``, clipped to the bounds."""
    true_beta = np.asarray(true_beta, dtype=float)
    if np.any(true_beta <= 0):
        raise ConfigError("true parameters must be positive")
    beta = rng.uniform(1e-6 * true_beta, 4.0 * true_beta)
    if lower is not None or upper is not None:
        beta = np.clip(beta, lower if lower is not None else -np.inf, upper if upper is not None else np.inf)
    return beta


def initial_fit(data, model, true_beta, rng, restarts, opts):
    """Best of ``restarts`` fits started from independent :func:`init_beta` draws."""
    best, best_ll = None, -np.inf
    for _ in range(restarts):
        res = mle_fit(data, init_beta(true_beta, rng, model.lower, model.upper), model, opts)
        if best is None or res.mean_log_likelihood > best_ll:
            best, best_ll = res.beta, res.mean_log_likelihood
    return best


def relative_error(beta_hat, beta_true):
    return float(np.linalg.norm((np.asarray(beta_hat) - beta_true) / beta_true))


class _ListWriter:
    def __init__(self):
        self.rows = []

    def writerow(self, row):
        self.rows.append(row)


def _evaluate(phys, policy, model, config, episodes, rng):
    raw = model.reward_fn("raw")
    init = model.initial_sampler()(episodes, rng)
    _, _, _, r = simulate_batch(phys, policy, raw, init, config.horizon, rng)
    shift = model.config.reward.shift
    g_raw = batch_returns(r, config.gamma)
    g_sh = batch_returns(np.maximum(r + shift, 0.0), config.gamma)
    se = lambda g: float(g.std(ddof=1) / np.sqrt(g.size)) if g.size > 1 else 0.0  # noqa: E731
    return float(g_raw.mean()), se(g_raw), float(g_sh.mean()), se(g_sh)


def run_replication(config: ExperimentConfig, arm: str, replication: int = 0) -> RunResult:
    """One calibration run of ``config.iterations`` iterations for one arm."""
    if arm not in ARMS:
        raise ConfigError(f"unknown arm {arm!r}")
    seed, rep, H = config.seed, replication, config.horizon
    model = IPSCModel(config.kinetic_config())
    bt = model.beta_true
    phys = model.at(bt)
    grid = ActionGrid()
    reward_norm = model.reward_fn("normalized")
    init_sampler = model.initial_sampler()
    uc = config.uncertainty
    weight_kw = dict(samples=uc["samples"], rollouts=uc["rollouts"], horizon=H, gamma=config.gamma, v_max=uc["v_max"])
    # StepPenalty reuses its episode horizon for the value rollouts
    pen_kw = dict(samples=uc["penalty_samples"], rollouts=uc["penalty_rollouts"], gamma=config.gamma,
                  v_max=uc["v_max"])
    opts = MLEOptions(**config.mle)

    rng_init, rng_phys = stream(seed, rep, "init"), stream(seed, rep, "physical")
    rng_sel, rng_pol = stream(seed, rep, "select"), stream(seed, rep, "policy")
    rng_val = stream(seed, rep, "value")

    # initial design: random exchange ratios, identical across arms
    data = Dataset(STATE_DIM)
    for _ in range(config.init_episodes):
        data.start_episode()
        s = init_sampler(1, rng_phys)[0]
        for _ in range(H):
            a = random_action(grid, rng_init)
            nxt = phys.sample(s[None], a.b, rng_phys)[0]
            data.append(s, a, nxt)
            s = nxt
    if len(data) < model.n_params:
        raise ConfigError(f"initial design has {len(data)} transitions; at least {model.n_params} are needed")
    beta = initial_fit(data, model, bt, rng_init, config.initial_restarts, MLEOptions(**config.initial_mle))
    cov = estimate_covariance(data, beta, model, mode=config.covariance_mode)

    dq = config.dqn
    net = QNetwork(STATE_DIM, len(grid), hidden=tuple(dq["hidden"]), rng=stream(seed, rep, "policy", 1),
                   input_scale=np.maximum(model.config.base_state, 1e-6), lr=dq["lr"], l2=dq["l2"],
                   log_inputs=dq["log_inputs"])
    schedule = EpsilonSchedule(dq["eps0"], dq["eps_decay"], dq["eps_min"])
    policy = RandomPolicy(grid)
    gp = GPSurrogate(capacity=config.gp["capacity"],
                     hyper_grid=default_hyper_grid(STATE_DIM + 1) if config.gp["grid_search"] else None)

    records, audit, train_log = [], [], _ListWriter()
    data.start_episode()
    s = init_sampler(1, rng_phys)[0]
    step, degraded = 0, 0
    for n in range(1, config.iterations + 1):
        t0 = time.perf_counter()
        bad = False
        if step == H:
            data.start_episode()
            s = init_sampler(1, rng_phys)[0]
            step = 0
        # (i) choose the experiment and observe one physical transition
        try:
            if arm == "actor-simulator":
                action, ests = select_calibration_action(s, beta, cov, policy, grid, model, reward_norm, rng_sel,
                                                         **weight_kw)
                audit.extend((n, i, e) for i, e in enumerate(ests))
            elif arm == "gp":
                if len(data) >= 2:
                    y = prediction_mse(model, beta, data.states, data.b, data.next_states)
                    gp.fit(gp_inputs(data.states, data.b), y)
                    action = gp_select_action(gp, s, grid)
                else:
                    action = gp_select_action(None, s, grid, rng=rng_sel)
            else:
                action = random_action(grid, rng_sel)
        except (SelectionFailedError, DivergedSimulationError, ActorSimulatorError, np.linalg.LinAlgError) as exc:
            log.warning("selection failed at iteration %d: %s", n, exc)
            action, bad = random_action(grid, rng_sel), True
        nxt = phys.sample(s[None], action.b, rng_phys)[0]
        data.append(s, action, nxt)
        s, step = nxt, step + 1

        # (ii) refit the twin
        try:
            beta = mle_fit(data, beta, model, opts).beta
            cov = estimate_covariance(data, beta, model, mode=config.covariance_mode)
        except (ActorSimulatorError, IllConditionedError, np.linalg.LinAlgError) as exc:
            log.warning("calibration failed at iteration %d: %s", n, exc)
            bad = True

        # (iii) retrain the policy on the penalised twin
        try:
            penalty = StepPenalty(beta, cov, policy, model, reward_norm, grid, init_sampler, H, rng_val,
                                  representatives=uc["penalty_representatives"], **pen_kw)
            pmdp = PenalizedMDP(model.at(beta), reward_norm, init_sampler, grid, penalty, gamma=config.gamma,
                                c=config.c)
            policy = train_policy(pmdp, net, dq["episodes"], horizon=H, schedule=schedule, rng=rng_pol,
                                  n_envs=dq["n_envs"], batch_size=dq["batch_size"],
                                  max_updates_per_episode=dq["max_updates_per_episode"], log=train_log,
                                  iteration=n)
        except ActorSimulatorError as exc:
            log.warning("policy training failed at iteration %d: %s", n, exc)
            bad = True

        degraded += bad
        if degraded > config.max_degraded_fraction * config.iterations:
            raise RunFailedError(f"{arm} replication {rep}: {degraded} degraded iterations out of {n}")

        j = (float("nan"),) * 4
        if n % config.eval_every == 0 or n == config.iterations:
            eps = config.eval_episodes if n == config.iterations else config.eval_episodes_interim
            try:
                j = _evaluate(phys, policy, model, config, eps, stream(seed, rep, "eval", n))
            except DivergedSimulationError as exc:
                log.warning("evaluation diverged at iteration %d: %s", n, exc)
        loss = -mean_log_likelihood(data, beta, model)
        records.append(MetricsRecord(rep, n, arm, relative_error(beta, bt), *j, float(loss),
                                     len(data), action.index, action.b, bool(bad), time.perf_counter() - t0))

    # probe states from the physical system under the final policy
    rng_probe = stream(seed, rep, "probe")
    n_ep = -(-config.mape_probes // H)
    st, _, _, _ = simulate_batch(phys, policy, reward_norm, init_sampler(n_ep, rng_probe), H, rng_probe)
    probes = st[:, :H].reshape(-1, STATE_DIM)[: config.mape_probes]
    mape = flux_mape(probes, beta, bt, model)
    return RunResult(arm, rep, records, beta, mape, data, audit, train_log.rows,
                     status="degraded" if degraded else "ok")


def run_actor_simulator(config: ExperimentConfig, replication: int = 0) -> list:
    return run_replication(config, "actor-simulator", replication).records


def run_baseline(config: ExperimentConfig, arm: str, replication: int = 0) -> list:
    if arm not in ("random", "gp"):
        raise ConfigError(f"baseline arm must be 'random' or 'gp', got {arm!r}")
    return run_replication(config, arm, replication).records


def _safe_run(args):
    config, arm, rep = args
    try:
        return run_replication(config, arm, rep)
    except ActorSimulatorError as exc:
        return RunResult(arm, rep, [], np.array([]), np.array([]), Dataset(STATE_DIM), [], [], "failed", str(exc))


def confidence_band(values, level=0.95):
    """Mean and two-sided t-interval over replications."""
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return float("nan"), float("nan"), float("nan")
    m = float(v.mean())
    if v.size < 2:
        return m, m, m
    half = float(stats.t.ppf(0.5 + level / 2, v.size - 1) * v.std(ddof=1) / np.sqrt(v.size))
    return m, m - half, m + half


def summarize(records, metrics=("relative_error", "j_raw", "j_shifted", "calibration_loss")):
    rows = []
    keys = sorted({(r.arm, r.iteration) for r in records}, key=lambda k: (ARMS.index(k[0]), k[1]))
    for arm, it in keys:
        sel = [r for r in records if r.arm == arm and r.iteration == it]
        for m in metrics:
            vals = [getattr(r, m) for r in sel]
            mean, lo, hi = confidence_band(vals)
            n = int(np.isfinite(np.asarray(vals, float)).sum())
            rows.append([arm, it, m, n, repr(mean), repr(lo), repr(hi)])
    return rows


@dataclass
class CampaignResult:
    runs: list
    records: list
    summary: list

    def final(self, arm, metric="relative_error"):
        K = max(r.iteration for r in self.records)
        return np.array([getattr(r, metric) for r in self.records if r.arm == arm and r.iteration == K])

    def final_j(self, arm):
        """Final J per replication, ordered by replication."""
        K = max(r.iteration for r in self.records)
        recs = sorted((r for r in self.records if r.arm == arm and r.iteration == K), key=lambda r: r.replication)
        return np.array([r.j_raw for r in recs]), np.array([r.replication for r in recs])


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def write_campaign(out_dir, config: ExperimentConfig, runs):
    os.makedirs(out_dir, exist_ok=True)
    records = [r for run in runs for r in run.records]
    _write_csv(os.path.join(out_dir, "metrics.csv"), METRIC_FIELDS, [r.row() for r in records])
    _write_csv(os.path.join(out_dir, "summary.csv"), ["arm", "iteration", "metric", "n", "mean", "ci_low", "ci_high"],
               summarize(records))
    _write_csv(os.path.join(out_dir, "timings.csv"), ["arm", "replication", "iteration", "seconds"],
               [[r.arm, r.replication, r.iteration, f"{r.wall_time:.3f}"] for r in records])
    mape_rows = []
    for run in runs:
        if run.mape.size:
            mape_rows += [[run.arm, run.replication, f, repr(float(v))] for f, v in zip(REACTION_NAMES, run.mape)]
    for arm in config.arms:
        ok = [run.mape for run in runs if run.arm == arm and run.mape.size]
        if ok:
            mean = np.mean(ok, axis=0)
            mape_rows += [[arm, "mean", f, repr(float(v))] for f, v in zip(REACTION_NAMES, mean)]
    _write_csv(os.path.join(out_dir, "mape.csv"), ["arm", "replication", "flux", "mape_percent"], mape_rows)
    _write_csv(os.path.join(out_dir, "status.csv"), ["arm", "replication", "status", "message"],
               [[run.arm, run.replication, run.status, run.message] for run in runs])
    visited = []
    for run in runs:
        d = run.visited
        for k in range(len(d)):
            visited.append([run.arm, run.replication, int(d.episodes[k])] + [repr(float(x)) for x in d.states[k]])
    _write_csv(os.path.join(out_dir, "visited_states.csv"),
               ["arm", "replication", "episode"] + [f"s_{j}" for j in range(STATE_DIM)], visited)
    _write_csv(os.path.join(out_dir, "uncertainty_audit.csv"),
               ["replication", "iteration", "action_index", "weight", "trace", "u"],
               [[run.replication, it, i] + (["nan"] * 3 if e is None else [repr(e.weight), repr(e.trace), repr(e.u)])
                for run in runs for it, i, e in run.audit])
    _write_csv(os.path.join(out_dir, "training_log.csv"),
               ["arm", "replication", "iteration", "episode", "mean_loss", "epsilon", "mean_penalized_return"],
               [[run.arm, run.replication, *row] for run in runs for row in run.train_log])
    _write_csv(os.path.join(out_dir, "final_beta.csv"), ["arm", "replication", "parameter", "value"],
               [[run.arm, run.replication, i, repr(float(v))] for run in runs for i, v in enumerate(run.beta_hat)])
    with open(os.path.join(out_dir, "config.yaml"), "w") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=True)


def run_campaign(config: ExperimentConfig, out_dir=None) -> CampaignResult:
    """All arms x replications; failed replications are reported, not raised."""
    jobs = [(config, arm, rep) for rep in range(config.replications) for arm in config.arms]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as ex:
            runs = list(ex.map(_safe_run, jobs))
    else:
        runs = [_safe_run(j) for j in jobs]
    records = [r for run in runs for r in run.records]
    if out_dir is not None:
        write_campaign(out_dir, config, runs)
    return CampaignResult(runs, records, summarize(records))
