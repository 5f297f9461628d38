"""Uncertainty of a state-action pair and information-driven action choice.

Two forms are provided.  The oracle form needs the true parameters:

    u = sqrt(2) * (1 + log E[exp(V(s')^2)])^(1/2) * sqrt(KL(mu_true || mu_hat))

The plug-in form replaces the KL term by the trace of the conditional
information times the estimator covariance:

    u^2 = w_hat * Tr(I(beta_hat; s, a) Sigma_hat),  w_hat = 2 (1 + log E[exp(V_hat^2)])

with ``V_hat`` estimated by rollouts in the digital twin and clipped to
``[0, v_max]``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .calibration import CovarianceEstimate, conditional_fisher_info
from .exceptions import DivergedSimulationError, InvalidArgumentError, SelectionFailedError
from .mdp import ActionGrid, ActionValue, batch_returns, simulate_batch
from .models import BoundModel

V_MAX = 10.0


@dataclass(frozen=True)
class ValueEstimate:
    values: np.ndarray  # one clipped value per queried state
    v_max: float
    rollouts: int
    horizon: int
    dropped: int = 0


@dataclass(frozen=True)
class UncertaintyEstimate:
    u: float
    weight: float
    trace: float  # Tr(I Sigma) in plug-in mode, KL in oracle mode
    mode: str  # "plug-in" or "exact-oracle"


def logmeanexp(x, axis=None):
    """``log(mean(exp(x)))`` evaluated in the log domain."""
    x = np.asarray(x, dtype=float)
    n = x.size if axis is None else x.shape[axis]
    return logsumexp(x, axis=axis) - np.log(n)


def kl_gaussian_transitions(state, b, beta_a, beta_b, model):
    """``KL(N(f_a, Sigma) || N(f_b, Sigma)) = 0.5 (f_a - f_b)' Sigma^-1 (f_a - f_b)``."""
    single = np.ndim(state) == 1
    fa = model.mean(state, b, beta_a)
    fb = model.mean(state, b, beta_b)
    kl = 0.5 * ((fa - fb) ** 2 * model.precision).sum(axis=1)
    return float(kl[0]) if single else kl


def estimate_value(states, policy, digital: BoundModel, reward_fn, rollouts, horizon, gamma, rng,
                   v_max=V_MAX) -> ValueEstimate:
    """Clipped Monte Carlo values of ``policy`` in the twin, one per state in ``states``.

    Rollouts that diverge are dropped; a state whose rollouts all diverge
    gets value ``v_max`` (the conservative end for the weight).
    """
    if rollouts < 1:
        raise InvalidArgumentError("rollouts must be >= 1")
    states = np.atleast_2d(np.asarray(states, dtype=float))
    n = states.shape[0]
    init = np.repeat(states, rollouts, axis=0)
    dropped = 0
    try:
        _, _, _, rewards = simulate_batch(digital, policy, reward_fn, init, horizon, rng)
        ret = batch_returns(rewards, gamma).reshape(n, rollouts)
        vals = ret.mean(axis=1)
    except DivergedSimulationError:
        vals = np.empty(n)
        for i in range(n):
            ok = []
            for _ in range(rollouts):
                try:
                    _, _, _, r = simulate_batch(digital, policy, reward_fn, states[i : i + 1], horizon, rng)
                    ok.append(batch_returns(r, gamma)[0])
                except DivergedSimulationError:
                    dropped += 1
            vals[i] = np.mean(ok) if ok else v_max
    return ValueEstimate(np.clip(vals, 0.0, v_max), v_max, rollouts, horizon, dropped)


def _weight_from_values(values):
    """``2 (1 + logmeanexp(V^2))`` along the last axis."""
    return 2.0 * (1.0 + logmeanexp(np.asarray(values) ** 2, axis=-1))


def weight_hat(states, b, beta_hat, policy, model, reward_fn, rng, samples=16, rollouts=8, horizon=12,
               gamma=0.99, v_max=V_MAX, value_model=None):
    """Value weight ``w_hat`` for one ``(s, a)`` or a batch of pairs.

    Draws ``samples`` next states from the twin at ``beta_hat``, values
    each by :func:`estimate_value` (in ``value_model`` when given, else the
    twin) and returns ``2 (1 + logmeanexp(V^2))``.
    """
    if samples < 1:
        raise InvalidArgumentError("samples must be >= 1")
    single = np.ndim(states) == 1
    states = np.atleast_2d(np.asarray(states, dtype=float))
    n = states.shape[0]
    bb = np.broadcast_to(np.asarray(b, dtype=float), (n,))
    twin = model.at(beta_hat)
    nxt = twin.sample(np.repeat(states, samples, axis=0), np.repeat(bb, samples), rng)
    vm = twin if value_model is None else value_model
    est = estimate_value(nxt, policy, vm, reward_fn, rollouts, horizon, gamma, rng, v_max=v_max)
    w = _weight_from_values(est.values.reshape(n, samples))
    return float(w[0]) if single else w


def _param_cov(cov):
    if isinstance(cov, CovarianceEstimate):
        return cov.parameter_covariance
    return np.asarray(cov, dtype=float)


def trace_term(states, b, beta_hat, cov, model, info=None):
    """``max(0, Tr(I(beta_hat; s, a) Sigma_hat))`` per pair."""
    if info is None:
        info = conditional_fisher_info(np.atleast_2d(states), b, beta_hat, model)
    info = np.asarray(info)
    if info.ndim == 2:
        info = info[None]
    tr = np.einsum("bpq,qp->b", info, _param_cov(cov))
    return np.maximum(tr, 0.0)


def uncertainty_plug_in(state, b, beta_hat, cov, policy, model, reward_fn, rng, weight=None, info=None,
                        **weight_kw) -> UncertaintyEstimate:
    """Plug-in uncertainty at one ``(s, a)``; ``weight`` may be supplied to skip the rollouts."""
    tr = float(trace_term(state, b, beta_hat, cov, model, info=info)[0])
    if weight is None:
        weight = weight_hat(np.asarray(state, dtype=float), b, beta_hat, policy, model, reward_fn, rng,
                            **weight_kw)
    return UncertaintyEstimate(float(np.sqrt(weight * tr)), float(weight), tr, "plug-in")


def uncertainty_plug_in_batch(states, b, beta_hat, cov, policy, model, reward_fn, rng, weights=None,
                              **weight_kw):
    """Vectorised plug-in uncertainty; returns ``(u, weights, traces)`` arrays."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    tr = trace_term(states, b, beta_hat, cov, model)
    if weights is None:
        weights = weight_hat(states, b, beta_hat, policy, model, reward_fn, rng, **weight_kw)
    weights = np.broadcast_to(np.asarray(weights, dtype=float), tr.shape)
    return np.sqrt(weights * tr), weights, tr


def uncertainty_exact_oracle(state, b, beta_hat, beta_true, policy, model, reward_fn, rng, value_fn=None,
                             samples=16, rollouts=8, horizon=12, gamma=0.99, v_max=V_MAX):
    """Oracle uncertainty with the true parameters known.

    The weight takes next states from the twin at ``beta_hat`` and values
    them in the physical system (``beta_true``), or with ``value_fn`` when
    an exact value function is available.
    """
    kl = max(float(kl_gaussian_transitions(np.asarray(state, float), b, beta_true, beta_hat, model)), 0.0)
    if kl == 0.0:
        return UncertaintyEstimate(0.0, float("nan"), 0.0, "exact-oracle")
    nxt = model.at(beta_hat).sample(np.repeat(np.atleast_2d(state), samples, axis=0), b, rng)
    if value_fn is not None:
        vals = np.clip(value_fn(nxt), 0.0, v_max)
    else:
        vals = estimate_value(nxt, policy, model.at(beta_true), reward_fn, rollouts, horizon, gamma, rng,
                              v_max=v_max).values
    w = float(_weight_from_values(vals))
    return UncertaintyEstimate(float(np.sqrt(w * kl)), w, kl, "exact-oracle")


def action_substreams(rng, n):
    """Independent child generators, one per action index."""
    seeds = rng.integers(0, 2**63 - 1, size=n)
    return [np.random.default_rng(int(s)) for s in seeds]


def select_calibration_action(state, beta_hat, cov, policy, grid: ActionGrid, model, reward_fn, rng,
                              **weight_kw):
    """Grid action with the largest plug-in uncertainty (lowest index on ties).

    Returns ``(ActionValue, list of UncertaintyEstimate)``; actions whose
    evaluation diverged are skipped.
    """
    if len(grid) == 0:
        raise SelectionFailedError("empty action grid")
    state = np.asarray(state, dtype=float)
    streams = action_substreams(rng, len(grid))
    n = len(grid)
    try:
        tr = trace_term(np.repeat(state[None], n, axis=0), grid.values, beta_hat, cov, model)
    except DivergedSimulationError:
        tr = np.full(n, np.nan)
        for i in range(n):
            try:
                tr[i] = trace_term(state[None], grid.values[i], beta_hat, cov, model)[0]
            except DivergedSimulationError:
                pass
    estimates: list[UncertaintyEstimate | None] = []
    for i in range(n):
        if not np.isfinite(tr[i]):
            estimates.append(None)
            continue
        if tr[i] == 0.0:
            estimates.append(UncertaintyEstimate(0.0, float("nan"), 0.0, "plug-in"))
            continue
        try:
            w = weight_hat(state, grid.values[i], beta_hat, policy, model, reward_fn, streams[i], **weight_kw)
        except DivergedSimulationError:
            estimates.append(None)
            continue
        estimates.append(UncertaintyEstimate(float(np.sqrt(w * tr[i])), float(w), float(tr[i]), "plug-in"))
    us = np.array([e.u if e is not None else -np.inf for e in estimates])
    if not np.isfinite(us).any():
        raise SelectionFailedError("uncertainty evaluation failed for every action")
    best = int(np.argmax(us))
    return grid[best], estimates


def write_uncertainty_audit(path, rows, append=False):
    """CSV rows ``(iteration, action_index, weight, trace, u)``."""
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if not append or fh.tell() == 0:
            w.writerow(["iteration", "action_index", "weight", "trace", "u"])
        for it, idx, est in rows:
            if est is None:
                w.writerow([it, idx, "nan", "nan", "nan"])
            else:
                w.writerow([it, idx, repr(est.weight), repr(est.trace), repr(est.u)])


__all__ = [
    "V_MAX", "ValueEstimate", "UncertaintyEstimate", "logmeanexp", "kl_gaussian_transitions",
    "estimate_value", "weight_hat", "trace_term", "uncertainty_plug_in", "uncertainty_plug_in_batch",
    "uncertainty_exact_oracle", "select_calibration_action", "write_uncertainty_audit", "ActionValue",
]
