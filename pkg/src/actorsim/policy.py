"""Policy optimisation on the uncertainty-penalised digital twin.

A small fully connected Q-network trained by plain one-step TD (no target
network) from a replay buffer, with linearly decaying epsilon-greedy
exploration.  Everything is numpy; the network is tiny (two hidden layers
of 64 units) so a hand-written backward pass is simpler than a framework.
"""

from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .exceptions import DivergedSimulationError, InvalidArgumentError, TrainingDivergedError
from .mdp import ActionGrid, ActionValue, PolicyBase, simulate_batch
from .uncertainty import uncertainty_plug_in_batch

CHECKPOINT_MAGIC = b"ACTQ"
CHECKPOINT_VERSION = 2
LOG_FLOOR = 1e-3  # log inputs clamp at this fraction of the scale


class QNetwork:
    """``input -> 64 -> 64 -> n_actions`` with ReLU activations.

    Inputs are divided by ``input_scale`` before the first layer; with
    ``log_inputs`` the network sees ``log(x / input_scale)`` instead, which
    keeps concentrations that grow tenfold within an episode in range.  The
    network owns its Adam state and counters, so warm starts across calls
    just keep using the same object.
    """

    def __init__(self, input_dim, n_actions, hidden=(64, 64), rng=None, input_scale=None, lr=1e-3, l2=1e-10,
                 beta1=0.9, beta2=0.999, eps=1e-8, log_inputs=False):
        if input_dim < 1 or n_actions < 1:
            raise InvalidArgumentError("input_dim and n_actions must be >= 1")
        rng = np.random.default_rng(0) if rng is None else rng
        sizes = [int(input_dim), *map(int, hidden), int(n_actions)]
        self.params = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            self.params.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
            self.params.append(np.zeros(fan_out))
        self.input_scale = np.ones(input_dim) if input_scale is None else np.asarray(input_scale, float).copy()
        if self.input_scale.shape != (input_dim,) or np.any(self.input_scale <= 0):
            raise InvalidArgumentError("input_scale must be positive with one entry per input")
        self.log_inputs = bool(log_inputs)
        self.lr, self.l2 = float(lr), float(l2)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self._m = [np.zeros_like(p) for p in self.params]
        self._v = [np.zeros_like(p) for p in self.params]
        self.updates = 0  # gradient steps taken
        self.env_steps = 0  # simulated transitions seen; drives the epsilon schedule

    @property
    def input_dim(self):
        return self.params[0].shape[0]

    @property
    def n_actions(self):
        return self.params[-1].shape[0]

    def _forward(self, x):
        h = np.atleast_2d(np.asarray(x, dtype=float)) / self.input_scale
        if self.log_inputs:
            h = np.log(np.maximum(h, LOG_FLOOR))
        acts = [h]
        n_layers = len(self.params) // 2
        for i in range(n_layers):
            W, b = self.params[2 * i], self.params[2 * i + 1]
            z = h @ W + b
            h = np.maximum(z, 0.0) if i < n_layers - 1 else z
            acts.append(h)
        return acts

    def forward(self, x):
        """Q-values, ``(B, n_actions)``."""
        return self._forward(x)[-1]

    __call__ = forward

    def loss_and_grad(self, states, actions, targets):
        """MSE between ``Q(s, a)`` and ``targets`` plus ``0.5 * l2 * ||theta||^2``."""
        acts = self._forward(states)
        q = acts[-1]
        idx = np.arange(q.shape[0])
        diff = q[idx, actions] - targets
        loss = float(np.mean(diff**2)) + 0.5 * self.l2 * sum(float((p**2).sum()) for p in self.params)
        delta = np.zeros_like(q)
        delta[idx, actions] = 2.0 * diff / q.shape[0]
        grads = [None] * len(self.params)
        n_layers = len(self.params) // 2
        for i in reversed(range(n_layers)):
            W = self.params[2 * i]
            grads[2 * i] = acts[i].T @ delta + self.l2 * W
            grads[2 * i + 1] = delta.sum(axis=0) + self.l2 * self.params[2 * i + 1]
            if i > 0:
                delta = (delta @ W.T) * (acts[i] > 0)
        return loss, grads

    def apply_gradients(self, grads):
        self.updates += 1
        t = self.updates
        for k, (p, g) in enumerate(zip(self.params, grads)):
            self._m[k] = self.beta1 * self._m[k] + (1 - self.beta1) * g
            self._v[k] = self.beta2 * self._v[k] + (1 - self.beta2) * g**2
            mh = self._m[k] / (1 - self.beta1**t)
            vh = self._v[k] / (1 - self.beta2**t)
            p -= self.lr * mh / (np.sqrt(vh) + self.eps)

    def get_vector(self):
        return np.concatenate([p.ravel() for p in self.params])

    def set_vector(self, vec):
        vec = np.asarray(vec, dtype=float)
        pos = 0
        for p in self.params:
            p[...] = vec[pos : pos + p.size].reshape(p.shape)
            pos += p.size

    def param_hash(self):
        return hashlib.sha256(self.get_vector().tobytes()).hexdigest()

    def all_finite(self):
        return all(np.isfinite(p).all() for p in self.params)

    def save(self, path):
        """Flat binary: magic, version, array count, then (ndim, shape, float64 data) per array."""
        arrays = [self.input_scale, np.array([float(self.log_inputs)]), *self.params]
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(arrays)))
            for a in arrays:
                fh.write(struct.pack("<I", a.ndim))
                fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
                fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path, **kw) -> "QNetwork":
        with open(path, "rb") as fh:
            raw = fh.read()
        if raw[:4] != CHECKPOINT_MAGIC:
            raise InvalidArgumentError(f"{path} is not a Q-network checkpoint")
        version, count = struct.unpack_from("<II", raw, 4)
        if version != CHECKPOINT_VERSION:
            raise InvalidArgumentError(f"unsupported checkpoint version {version}")
        pos, arrays = 12, []
        for _ in range(count):
            (ndim,) = struct.unpack_from("<I", raw, pos)
            shape = struct.unpack_from(f"<{ndim}I", raw, pos + 4)
            pos += 4 + 4 * ndim
            size = int(np.prod(shape))
            arrays.append(np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).copy())
            pos += 8 * size
        scale, flag, params = arrays[0], arrays[1], arrays[2:]
        hidden = tuple(W.shape[1] for W in params[0:-2:2])
        net = cls(params[0].shape[0], params[-1].shape[0], hidden=hidden, input_scale=scale,
                  log_inputs=bool(flag[0]), **kw)
        for p, a in zip(net.params, params):
            p[...] = a
        return net


class ReplayBuffer:
    """Fixed-capacity ring buffer of ``(s, a, r, s', done)``; oldest entries are overwritten."""

    def __init__(self, state_dim, capacity=100_000):
        if capacity < 1:
            raise InvalidArgumentError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.state_dim = int(state_dim)
        self._s = np.empty((0, state_dim))
        self._a = np.empty(0, dtype=int)
        self._r = np.empty(0)
        self._s2 = np.empty((0, state_dim))
        self._done = np.empty(0, dtype=bool)
        self.inserted = 0

    def __len__(self):
        return min(self.inserted, self.capacity)

    def _grow(self, need):
        cur = self._a.size
        if need <= cur or cur == self.capacity:
            return
        new = min(self.capacity, max(need, 2 * cur, 1024))
        self._s = np.resize(self._s, (new, self.state_dim))
        self._s2 = np.resize(self._s2, (new, self.state_dim))
        self._a = np.resize(self._a, new)
        self._r = np.resize(self._r, new)
        self._done = np.resize(self._done, new)

    def add(self, s, a, r, s2, done):
        """Insert one transition or a batch (leading axis)."""
        s = np.atleast_2d(s)
        s2 = np.atleast_2d(s2)
        n = s.shape[0]
        a = np.broadcast_to(np.asarray(a, dtype=int), (n,))
        r = np.broadcast_to(np.asarray(r, dtype=float), (n,))
        done = np.broadcast_to(np.asarray(done, dtype=bool), (n,))
        self._grow(min(self.inserted + n, self.capacity))
        pos = (self.inserted + np.arange(n)) % self.capacity
        self._s[pos], self._a[pos], self._r[pos], self._s2[pos], self._done[pos] = s, a, r, s2, done
        self.inserted += n

    def sample(self, batch_size, rng):
        """Uniform minibatch without replacement."""
        if batch_size > len(self):
            raise InvalidArgumentError(f"cannot sample {batch_size} from a buffer of {len(self)}")
        idx = rng.choice(len(self), size=batch_size, replace=False)
        return self._s[idx], self._a[idx], self._r[idx], self._s2[idx], self._done[idx]


@dataclass(frozen=True)
class EpsilonSchedule:
    eps0: float = 0.6
    decay: float = 5e-4
    eps_min: float = 0.01

    def __call__(self, step):
        return max(self.eps_min, self.eps0 - step * self.decay)


def penalized_reward(r, u, lam):
    """``r - lam * u``."""
    u = np.asarray(u, dtype=float)
    if np.any(u < 0) or lam < 0:
        raise InvalidArgumentError("uncertainty and lambda must be non-negative")
    out = np.asarray(r, dtype=float) - lam * u
    return float(out) if out.ndim == 0 else out


def epsilon_greedy_action(q_values, eps, rng, grid: ActionGrid | None = None) -> ActionValue:
    """Random grid action with probability ``eps`` (uniform b, nearest grid point), else argmax."""
    q = np.asarray(q_values, dtype=float)
    if q.size == 0:
        raise InvalidArgumentError("empty Q-value vector")
    if not 0.0 <= eps <= 1.0:
        raise InvalidArgumentError("epsilon must lie in [0, 1]")
    grid = grid if grid is not None else ActionGrid(np.linspace(0.0, 1.0, q.size))
    if rng.uniform() < eps:
        return grid[int(grid.nearest(rng.uniform()))]
    return grid[int(np.argmax(q))]


def _epsilon_greedy_batch(q, eps, rng, grid):
    greedy = np.argmax(q, axis=1)
    explore = rng.uniform(size=q.shape[0]) < eps
    rand = np.asarray(grid.nearest(rng.uniform(size=q.shape[0])), dtype=int)
    return np.where(explore, rand, greedy)


def dqn_train_step(net: QNetwork, buffer: ReplayBuffer, rng, batch_size=64, gamma=0.99):
    """One Adam step on the TD loss of a sampled minibatch; returns the loss."""
    if len(buffer) < batch_size:
        raise InvalidArgumentError("buffer holds fewer transitions than one batch")
    s, a, r, s2, done = buffer.sample(batch_size, rng)
    with np.errstate(invalid="ignore", over="ignore"):  # non-finite values are reported below
        target = r + np.where(done, 0.0, gamma * net.forward(s2).max(axis=1))
        loss, grads = net.loss_and_grad(s, a, target)
        gnorm = float(np.sqrt(sum((g**2).sum() for g in grads)))
    if not (np.isfinite(loss) and np.isfinite(gnorm)):
        raise TrainingDivergedError("non-finite TD loss",
                                    diagnostics={"loss": loss, "grad_norm": gnorm, "update": net.updates})
    net.apply_gradients(grads)
    if not net.all_finite():
        raise TrainingDivergedError("non-finite network parameters", diagnostics={"update": net.updates})
    return loss


class PenalizedMDP:
    """Twin dynamics with reward ``r - lam * u``.

    ``penalty(states, actions, t)`` returns non-negative uncertainties; it
    may be ``None`` for an unpenalised twin.
    """

    def __init__(self, model, reward_fn, initial_sampler, grid: ActionGrid, penalty=None, lam=0.99,
                 gamma=0.99, c=None):
        if lam < 0:
            raise InvalidArgumentError("lambda must be non-negative")
        if c is not None:
            if c < 1:
                raise InvalidArgumentError("penalty coefficient c must be >= 1")
            lam = c * gamma
        self.model, self.reward_fn, self.initial_sampler = model, reward_fn, initial_sampler
        self.grid, self.penalty, self.lam, self.gamma = grid, penalty, float(lam), float(gamma)

    def step(self, states, actions, t, rng):
        b = self.grid.b(actions)
        nxt = self.model.sample(states, b, rng)
        if not np.isfinite(nxt).all():
            raise DivergedSimulationError("non-finite twin state", step=t)
        r = self.reward_fn(states, b, nxt)
        if self.penalty is not None and self.lam > 0:
            r = penalized_reward(r, self.penalty(states, actions, t), self.lam)
        return nxt, r


class StepPenalty:
    """Plug-in uncertainty cached per (episode step, action).

    Representative states are the mean twin states at each step of a few
    rollouts of ``policy``; ``u`` is evaluated once for every
    (step, action) pair and looked up during training.
    """

    def __init__(self, beta_hat, cov, policy, model, reward_fn, grid, initial_sampler, horizon, rng,
                 representatives=8, **weight_kw):
        twin = model.at(beta_hat)
        init = initial_sampler(representatives, rng)
        states, _, _, _ = simulate_batch(twin, policy, reward_fn, init, horizon, rng)
        reps = states[:, :horizon].mean(axis=0)  # (horizon, d)
        n_a = len(grid)
        s = np.repeat(reps, n_a, axis=0)
        b = np.tile(grid.values, horizon)
        u, w, tr = uncertainty_plug_in_batch(s, b, beta_hat, cov, policy, model, reward_fn, rng, horizon=horizon,
                                             **weight_kw)
        self.table = u.reshape(horizon, n_a)
        self.weights = w.reshape(horizon, n_a)
        self.traces = tr.reshape(horizon, n_a)
        self.representatives = reps

    def __call__(self, states, actions, t):
        return self.table[min(t, self.table.shape[0] - 1), np.asarray(actions, dtype=int)]


class GreedyPolicy(PolicyBase):
    def __init__(self, net: QNetwork, grid: ActionGrid):
        if net.n_actions != len(grid):
            raise InvalidArgumentError("network output size must match the action grid")
        self.net, self.grid = net, grid

    def act(self, states, rng=None):
        return np.argmax(self.net.forward(states), axis=1)


def train_policy(penalized: PenalizedMDP, net: QNetwork, episodes, horizon=12, schedule=None, rng=None,
                 n_envs=8, batch_size=64, max_updates_per_episode=50, buffer=None, log=None, iteration=0):
    """Train ``net`` on simulated episodes and return its greedy policy.

    Episodes run ``n_envs`` at a time in lock-step; every simulated
    transition is inserted and followed by one update (once the buffer
    holds a batch), up to ``max_updates_per_episode`` per episode.
    ``log`` is an optional csv writer receiving one row per episode.
    """
    if episodes < 1:
        raise InvalidArgumentError("episodes must be >= 1")
    schedule = schedule or EpsilonSchedule()
    rng = rng if rng is not None else np.random.default_rng()
    grid = penalized.grid
    if net.n_actions != len(grid):
        raise InvalidArgumentError("network output size must match the action grid")
    buffer = buffer if buffer is not None else ReplayBuffer(net.input_dim)
    updates_per_step = min(n_envs, max(1, (max_updates_per_episode * n_envs) // horizon))
    done_eps = 0
    while done_eps < episodes:
        m = min(n_envs, episodes - done_eps)
        s = penalized.initial_sampler(m, rng)
        ret = np.zeros(m)
        losses = []
        budget = max_updates_per_episode * m
        for t in range(horizon):
            eps = schedule(net.env_steps)
            a = _epsilon_greedy_batch(net.forward(s), eps, rng, grid)
            s2, r = penalized.step(s, a, t, rng)
            buffer.add(s, a, r, s2, t == horizon - 1)
            net.env_steps += m
            ret += penalized.gamma**t * r
            for _ in range(min(updates_per_step, m, budget)):
                if len(buffer) >= batch_size:
                    losses.append(dqn_train_step(net, buffer, rng, batch_size, penalized.gamma))
                    budget -= 1
            s = s2
        if log is not None:
            mean_loss = float(np.mean(losses)) if losses else float("nan")
            for k in range(m):
                log.writerow([iteration, done_eps + k, repr(mean_loss), repr(schedule(net.env_steps)),
                              repr(float(ret[k]))])
        done_eps += m
    return GreedyPolicy(net, grid)


def open_training_log(path):
    fh = open(path, "w", newline="")
    w = csv.writer(fh)
    w.writerow(["iteration", "episode", "mean_loss", "epsilon", "mean_penalized_return"])
    return fh, w
