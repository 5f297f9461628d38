"""Command-line entry point: ``actorsim <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error, 3 run failed, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

import numpy as np

from .calibration import MLEOptions, estimate_covariance, mle_fit, write_fit_diagnostics
from .exceptions import (ConfigError, DivergedSimulationError, FitFailedError, IllConditionedError,
                         InvalidArgumentError, RunFailedError, TrainingDivergedError)
from .harness import ARMS, ExperimentConfig, init_beta, run_campaign, run_replication, stream, write_campaign
from .kinetics.layout import STATE_DIM
from .kinetics.model import IPSCModel
from .mdp import ActionGrid, ConstantPolicy, Dataset, RandomPolicy, evaluate_policy, simulate_batch
from .policy import EpsilonSchedule, GreedyPolicy, PenalizedMDP, QNetwork, open_training_log, train_policy

EXIT_OK, EXIT_CONFIG, EXIT_RUN_FAILED, EXIT_NUMERICAL = 0, 2, 3, 4
log = logging.getLogger("actorsim")


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_yaml(args.config) if args.config else ExperimentConfig()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.case is not None:
        over["case"] = args.case
    if getattr(args, "arm", None):
        over["arms"] = [args.arm]
    return cfg.replace(**over) if over else cfg


def _out(args):
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def _read_beta(path, model):
    with open(path, newline="") as fh:
        rows = {r["parameter"]: float(r["value"]) for r in csv.DictReader(fh)}
    try:
        return np.array([rows[n] for n in model.param_names])
    except KeyError as exc:
        raise ConfigError(f"{path} lacks parameter {exc}") from exc


def _write_beta(path, model, beta):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["parameter", "value"])
        w.writerows([n, repr(float(v))] for n, v in zip(model.param_names, beta))


def cmd_simulate(args):
    cfg = _config(args)
    model = IPSCModel(cfg.kinetic_config())
    grid = ActionGrid()
    policy = RandomPolicy(grid) if args.action is None else ConstantPolicy(grid, args.action)
    rng = stream(cfg.seed, 0, "physical")
    sim = model.at(model.beta_true)
    if args.noise_free:
        sim = model.with_noise(0.0).at(model.beta_true)
    states, actions, bs, _ = simulate_batch(sim, policy, model.reward_fn(), model.initial_sampler()(args.episodes, rng),
                                            cfg.horizon, rng)
    data = Dataset(STATE_DIM)
    for e in range(args.episodes):
        data.start_episode()
        for t in range(cfg.horizon):
            data.append(states[e, t], grid[actions[e, t]], states[e, t + 1])
    path = os.path.join(_out(args), "trajectories.csv")
    data.to_csv(path)
    print(f"wrote {len(data)} transitions to {path}")


def cmd_calibrate(args):
    cfg = _config(args)
    if not args.data:
        raise ConfigError("calibrate needs --data")
    model = IPSCModel(cfg.kinetic_config())
    data = Dataset.from_csv(args.data)
    beta0 = init_beta(model.beta_true, stream(cfg.seed, 0, "init"), model.lower, model.upper)
    res = mle_fit(data, beta0, model, MLEOptions(**cfg.initial_mle))
    cov = estimate_covariance(data, res.beta, model, mode=cfg.covariance_mode)
    out = _out(args)
    _write_beta(os.path.join(out, "beta.csv"), model, res.beta)
    np.savetxt(os.path.join(out, "covariance.csv"), cov.parameter_covariance, delimiter=",")
    write_fit_diagnostics(os.path.join(out, "fit_diagnostics.csv"), res)
    err = np.linalg.norm((res.beta - model.beta_true) / model.beta_true)
    print(f"mean log-likelihood {res.mean_log_likelihood:.6g}; relative error {err:.4g}; stop: {res.stop_reason}")


def cmd_train(args):
    cfg = _config(args)
    model = IPSCModel(cfg.kinetic_config())
    beta = _read_beta(args.beta, model) if args.beta else model.beta_true
    grid = ActionGrid()
    dq = cfg.dqn
    rng = stream(cfg.seed, 0, "policy")
    net = QNetwork(STATE_DIM, len(grid), hidden=tuple(dq["hidden"]), rng=stream(cfg.seed, 0, "policy", 1),
                   input_scale=np.maximum(model.config.base_state, 1e-6), lr=dq["lr"], l2=dq["l2"],
                   log_inputs=dq["log_inputs"])
    pmdp = PenalizedMDP(model.at(beta), model.reward_fn(), model.initial_sampler(), grid, None, lam=0.0,
                        gamma=cfg.gamma)
    out = _out(args)
    fh, writer = open_training_log(os.path.join(out, "training_log.csv"))
    with fh:
        train_policy(pmdp, net, args.episodes or dq["episodes"], horizon=cfg.horizon,
                     schedule=EpsilonSchedule(dq["eps0"], dq["eps_decay"], dq["eps_min"]), rng=rng,
                     n_envs=dq["n_envs"], batch_size=dq["batch_size"],
                     max_updates_per_episode=dq["max_updates_per_episode"], log=writer)
    net.save(os.path.join(out, "policy.qnet"))
    print(f"trained {net.updates} updates; checkpoint {os.path.join(out, 'policy.qnet')}")


def cmd_evaluate(args):
    cfg = _config(args)
    if not args.policy:
        raise ConfigError("evaluate needs --policy")
    model = IPSCModel(cfg.kinetic_config())
    grid = ActionGrid()
    try:
        net = QNetwork.load(args.policy)
    except (OSError, InvalidArgumentError) as exc:
        raise ConfigError(f"cannot load policy: {exc}") from exc
    policy = GreedyPolicy(net, grid)
    rng = stream(cfg.seed, 0, "eval")
    for scale in ("raw", "normalized"):
        m, se = evaluate_policy(model.at(model.beta_true), policy, model.reward_fn(scale), model.initial_sampler(),
                                args.episodes or cfg.eval_episodes, cfg.horizon, cfg.gamma, rng)
        print(f"J ({scale} reward): {m:.6g} +/- {se:.3g}")


def cmd_run(args):
    cfg = _config(args)
    arm = args.arm or cfg.arms[0]
    result = run_replication(cfg, arm, args.replication)
    write_campaign(_out(args), cfg.replace(arms=[arm], replications=1), [result])
    last = result.records[-1]
    print(f"{arm}: relative error {last.relative_error:.4g}, J {last.j_raw:.6g}, degraded {result.status != 'ok'}")


def cmd_campaign(args):
    cfg = _config(args)
    res = run_campaign(cfg, out_dir=_out(args))
    failed = [r for r in res.runs if r.status == "failed"]
    for arm in cfg.arms:
        errs = res.final(arm)
        if errs.size:
            print(f"{arm}: median final relative error {np.median(errs):.4g} over {errs.size} replications")
    if failed:
        for r in failed:
            print(f"failed: {r.arm} replication {r.replication}: {r.message}", file=sys.stderr)
        return EXIT_RUN_FAILED
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="actorsim", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="experiment YAML")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--case", type=int, choices=(20, 30, 40))
        sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("simulate", help="roll the physical emulator and dump trajectories")
    common(sp)
    sp.add_argument("--episodes", type=int, default=5)
    sp.add_argument("--action", type=int, help="constant action index (default: random)")
    sp.add_argument("--noise-free", action="store_true")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("calibrate", help="fit the twin parameters to a dataset CSV")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("train", help="train a policy on the twin at fixed parameters")
    common(sp)
    sp.add_argument("--beta", help="parameter CSV written by calibrate (default: true values)")
    sp.add_argument("--episodes", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("run", help="single calibration run")
    common(sp)
    sp.add_argument("--arm", choices=ARMS)
    sp.add_argument("--replication", type=int, default=0)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("campaign", help="all arms x replications")
    common(sp)
    sp.add_argument("--arm", choices=ARMS, help="restrict to one arm")
    sp.set_defaults(func=cmd_campaign)

    sp = sub.add_parser("evaluate", help="evaluate a policy checkpoint on the physical system")
    common(sp)
    sp.add_argument("--policy", required=True)
    sp.add_argument("--episodes", type=int)
    sp.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        code = args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RunFailedError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUN_FAILED
    except (DivergedSimulationError, FitFailedError, IllConditionedError, TrainingDivergedError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
