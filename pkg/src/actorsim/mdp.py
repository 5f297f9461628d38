"""Generic MDP plumbing shared by the physical emulator, the digital twin
and the testbeds: action grids, transition datasets, policies, rollouts
and discounted returns.

Every simulator handed to :func:`rollout` / :func:`evaluate_policy` only
needs a ``sample(states, b, rng)`` method returning next states for a
batch of states ``(B, d)`` and exchange ratios / action values ``(B,)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .exceptions import DivergedSimulationError, InvalidArgumentError


@dataclass(frozen=True)
class ActionValue:
    index: int
    b: float


class ActionGrid:
    """Discrete grid of medium-exchange ratios in ``[0, 1]``."""

    def __init__(self, values=None):
        if values is None:
            values = np.linspace(0.0, 1.0, 11)
        values = np.asarray(values, dtype=float).ravel()
        if values.size == 0:
            raise InvalidArgumentError("action grid must be non-empty")
        if np.any(values < 0.0) or np.any(values > 1.0):
            raise InvalidArgumentError("action grid values must lie in [0, 1]")
        self.values = values

    def __len__(self):
        return self.values.size

    def __getitem__(self, index) -> ActionValue:
        index = int(index)
        if not 0 <= index < len(self):
            raise InvalidArgumentError(f"action index {index} outside grid of size {len(self)}")
        return ActionValue(index, float(self.values[index]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def __eq__(self, other):
        return isinstance(other, ActionGrid) and np.array_equal(self.values, other.values)

    def b(self, indices):
        return self.values[np.asarray(indices, dtype=int)]

    def nearest(self, b):
        """Index of the grid point closest to ``b`` (lowest index on ties)."""
        b = np.asarray(b, dtype=float)
        return np.abs(b[..., None] - self.values).argmin(axis=-1)


@dataclass(frozen=True)
class TransitionSample:
    state: np.ndarray
    action: ActionValue
    next_state: np.ndarray

    def __post_init__(self):
        if np.shape(self.state) != np.shape(self.next_state):
            raise InvalidArgumentError("state and next_state dimensions differ")


class Dataset:
    """Append-only store of physical transitions ``(s, a, s')``.

    Transitions are grouped into episodes; ``episode_starts`` holds the
    sample index at which each episode begins.
    """

    def __init__(self, state_dim: int):
        self.state_dim = int(state_dim)
        self._states: list[np.ndarray] = []
        self._next: list[np.ndarray] = []
        self._index: list[int] = []
        self._b: list[float] = []
        self._episode: list[int] = []
        self.episode_starts: list[int] = []

    def __len__(self):
        return len(self._states)

    def start_episode(self):
        n = len(self)
        if self.episode_starts and self.episode_starts[-1] == n:
            return
        self.episode_starts.append(n)

    def append(self, state, action: ActionValue, next_state):
        state = np.asarray(state, dtype=float)
        next_state = np.asarray(next_state, dtype=float)
        if state.shape != (self.state_dim,) or next_state.shape != (self.state_dim,):
            raise InvalidArgumentError(
                f"expected states of dimension {self.state_dim}, got {state.shape} / {next_state.shape}"
            )
        if not self.episode_starts:
            self.episode_starts.append(0)
        self._states.append(state.copy())
        self._next.append(next_state.copy())
        self._index.append(int(action.index))
        self._b.append(float(action.b))
        self._episode.append(len(self.episode_starts) - 1)

    def extend(self, other: "Dataset"):
        for i in range(len(other)):
            if i in other.episode_starts:
                self.start_episode()
            self.append(other._states[i], ActionValue(other._index[i], other._b[i]), other._next[i])

    @property
    def states(self):
        return np.array(self._states).reshape(-1, self.state_dim)

    @property
    def next_states(self):
        return np.array(self._next).reshape(-1, self.state_dim)

    @property
    def b(self):
        return np.array(self._b, dtype=float)

    @property
    def action_indices(self):
        return np.array(self._index, dtype=int)

    @property
    def episodes(self):
        return np.array(self._episode, dtype=int)

    @property
    def samples(self) -> list[TransitionSample]:
        return [
            TransitionSample(s, ActionValue(i, b), sp)
            for s, i, b, sp in zip(self._states, self._index, self._b, self._next)
        ]

    def subset(self, mask) -> "Dataset":
        mask = np.asarray(mask, dtype=bool)
        out = Dataset(self.state_dim)
        last = None
        for i in np.flatnonzero(mask):
            if self._episode[i] != last:
                out.start_episode()
                last = self._episode[i]
            out.append(self._states[i], ActionValue(self._index[i], self._b[i]), self._next[i])
        return out

    @classmethod
    def from_arrays(cls, states, b, next_states, action_indices=None, episodes=None):
        states = np.atleast_2d(np.asarray(states, dtype=float))
        next_states = np.atleast_2d(np.asarray(next_states, dtype=float))
        b = np.asarray(b, dtype=float).ravel()
        n = states.shape[0]
        if action_indices is None:
            action_indices = np.zeros(n, dtype=int)
        if episodes is None:
            episodes = np.zeros(n, dtype=int)
        data = cls(states.shape[1])
        last = None
        for i in range(n):
            if episodes[i] != last:
                data.start_episode()
                last = episodes[i]
            data.append(states[i], ActionValue(int(action_indices[i]), float(b[i])), next_states[i])
        return data

    def to_csv(self, path, state_names: Sequence[str] | None = None):
        d = self.state_dim
        header = (
            ["episode", "step"]
            + [f"s_{j}" for j in range(d)]
            + ["action_index", "b"]
            + [f"sprime_{j}" for j in range(d)]
        )
        steps = np.arange(len(self)) - np.array(self.episode_starts)[self.episodes] if len(self) else []
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for i in range(len(self)):
                w.writerow(
                    [self._episode[i], int(steps[i])]
                    + [repr(float(x)) for x in self._states[i]]
                    + [self._index[i], repr(self._b[i])]
                    + [repr(float(x)) for x in self._next[i]]
                )

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        s_cols = [i for i, h in enumerate(header) if h.startswith("s_")]
        sp_cols = [i for i, h in enumerate(header) if h.startswith("sprime_")]
        if len(s_cols) != len(sp_cols) or not s_cols:
            raise InvalidArgumentError(f"{path}: malformed dataset header")
        col = {h: i for i, h in enumerate(header)}
        arr = np.array([[float(x) for x in r] for r in body]) if body else np.zeros((0, len(header)))
        return cls.from_arrays(
            arr[:, s_cols],
            arr[:, col["b"]],
            arr[:, sp_cols],
            action_indices=arr[:, col["action_index"]].astype(int),
            episodes=arr[:, col["episode"]].astype(int),
        )


class Policy(Protocol):
    grid: ActionGrid

    def act(self, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Grid action indices for a batch of states."""


class PolicyBase:
    """Convenience base: single-state :meth:`action` on top of batched :meth:`act`."""

    grid: ActionGrid

    def act(self, states, rng):
        raise NotImplementedError

    def action(self, state, rng) -> ActionValue:
        idx = self.act(np.asarray(state, dtype=float)[None, :], rng)[0]
        return self.grid[idx]


class ConstantPolicy(PolicyBase):
    def __init__(self, grid: ActionGrid, index: int = 0):
        self.grid = grid
        self.index = int(index)
        grid[self.index]  # validates

    def act(self, states, rng):
        return np.full(np.shape(states)[0], self.index, dtype=int)


class RandomPolicy(PolicyBase):
    """``b ~ Uniform(0, 1)`` mapped to the nearest grid point."""

    def __init__(self, grid: ActionGrid):
        self.grid = grid

    def act(self, states, rng):
        return self.grid.nearest(rng.uniform(0.0, 1.0, size=np.shape(states)[0]))


class TablePolicy(PolicyBase):
    """Policy over integer-coded states (first state component is the index).

    ``probs[s, a]`` is the probability of grid action ``a`` in state ``s``.
    """

    def __init__(self, grid: ActionGrid, probs):
        self.grid = grid
        self.probs = np.asarray(probs, dtype=float)

    def act(self, states, rng):
        s = np.asarray(states)[:, 0].astype(int)
        cdf = np.cumsum(self.probs[s], axis=1)
        u = rng.uniform(size=(s.size, 1))
        return np.minimum((u > cdf).sum(axis=1), self.probs.shape[1] - 1)


@dataclass
class Trajectory:
    states: np.ndarray  # (T + 1, d), states[0] is the initial state
    actions: np.ndarray  # (T,) grid indices
    b: np.ndarray  # (T,)
    rewards: np.ndarray  # (T,)
    gamma: float
    discounted_return: float = field(init=False)

    def __post_init__(self):
        self.discounted_return = discounted_return(self.rewards, self.gamma)

    @property
    def initial(self):
        return self.states[0]

    def __len__(self):
        return len(self.rewards)

    def steps(self):
        for t in range(len(self)):
            yield self.states[t], ActionValue(int(self.actions[t]), float(self.b[t])), self.rewards[t], self.states[t + 1]


def _check_gamma(gamma):
    if not 0.0 <= gamma < 1.0:
        raise InvalidArgumentError(f"discount factor must lie in [0, 1), got {gamma}")


def discounted_return(rewards, gamma: float) -> float:
    """Sum of ``gamma**t * r_t`` over a finite reward sequence."""
    _check_gamma(gamma)
    r = np.asarray(rewards, dtype=float)
    if r.size == 0:
        return 0.0
    if not np.isfinite(r).all():
        raise InvalidArgumentError("rewards must be finite")
    return float(np.sum(r * gamma ** np.arange(r.size)))


RewardFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def simulate_batch(model, policy, reward_fn, initial_states, horizon, rng):
    """Roll a batch of episodes forward in lock-step.

    Returns ``states (B, T+1, d)``, ``actions (B, T)``, ``b (B, T)`` and
    ``rewards (B, T)``.
    """
    if horizon < 1:
        raise InvalidArgumentError("horizon must be >= 1")
    s = np.atleast_2d(np.asarray(initial_states, dtype=float))
    n, d = s.shape
    states = np.empty((n, horizon + 1, d))
    actions = np.empty((n, horizon), dtype=int)
    bs = np.empty((n, horizon))
    rewards = np.empty((n, horizon))
    states[:, 0] = s
    for t in range(horizon):
        a = np.asarray(policy.act(s, rng), dtype=int)
        b = policy.grid.b(a)
        nxt = model.sample(s, b, rng)
        if not np.isfinite(nxt).all():
            bad = np.argwhere(~np.isfinite(nxt))[0]
            raise DivergedSimulationError(
                f"non-finite state at step {t} (component {bad[1]})", step=t, index=int(bad[1])
            )
        rewards[:, t] = reward_fn(s, b, nxt)
        actions[:, t] = a
        bs[:, t] = b
        states[:, t + 1] = nxt
        s = nxt
    return states, actions, bs, rewards


def rollout(model, policy, reward_fn, initial, horizon: int, gamma: float, rng) -> Trajectory:
    """Simulate one trajectory of exactly ``horizon`` steps."""
    _check_gamma(gamma)
    states, actions, bs, rewards = simulate_batch(
        model, policy, reward_fn, np.asarray(initial, dtype=float)[None, :], horizon, rng
    )
    return Trajectory(states[0], actions[0], bs[0], rewards[0], gamma)


def batch_returns(rewards, gamma):
    _check_gamma(gamma)
    rewards = np.atleast_2d(rewards)
    return rewards @ (gamma ** np.arange(rewards.shape[1]))


def evaluate_policy(model, policy, reward_fn, initial_sampler, episodes: int, horizon: int,
                    gamma: float, rng, return_rewards=False):
    """Monte Carlo estimate of the discounted return of ``policy``.

    ``initial_sampler(n, rng)`` draws ``n`` initial states.  Returns the
    mean return and its standard error (sample stdev / sqrt(episodes)).
    """
    if episodes < 1:
        raise InvalidArgumentError("episodes must be >= 1")
    init = initial_sampler(episodes, rng)
    _, _, _, rewards = simulate_batch(model, policy, reward_fn, init, horizon, rng)
    returns = batch_returns(rewards, gamma)
    se = float(returns.std(ddof=1) / np.sqrt(episodes)) if episodes > 1 else 0.0
    if return_rewards:
        return float(returns.mean()), se, rewards
    return float(returns.mean()), se


def write_trajectories_csv(path, trajectories: Sequence[Trajectory], rewards_column="reward"):
    """Rows: episode, step, state components, action index, b, reward."""
    if not trajectories:
        raise InvalidArgumentError("no trajectories to write")
    d = trajectories[0].states.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "step"] + [f"s_{j}" for j in range(d)] + ["action_index", "b", rewards_column])
        for e, traj in enumerate(trajectories):
            for t in range(len(traj)):
                w.writerow(
                    [e, t]
                    + [repr(float(x)) for x in traj.states[t]]
                    + [int(traj.actions[t]), repr(float(traj.b[t])), repr(float(traj.rewards[t]))]
                )
