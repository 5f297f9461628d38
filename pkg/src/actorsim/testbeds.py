"""Small models with closed-form answers, used as oracles.

``LinearGaussianModel`` has a mean that is linear in the parameters, so
maximum likelihood reduces to per-component least squares.
``TabularMDP`` is a finite MDP with categorical transitions whose values
come from a linear solve.
"""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

from . import dual
from .exceptions import InvalidArgumentError
from .mdp import ActionGrid, ActionValue, Dataset, PolicyBase
from .models import GaussianTransitionModel


class LinearGaussianModel(GaussianTransitionModel):
    """``s'_j = beta_j * s_j * (1 + gain * b) + eps_j``.

    With ``gain = 0`` this is the plain ``s' = beta * s`` testbed.  The
    parameter dimension equals the state dimension.
    """

    def __init__(self, dim=3, noise_sd=1.0, gain=0.0, lower=1e-6, upper=10.0):
        self.state_dim = int(dim)
        self.n_params = int(dim)
        self.noise_sd = np.broadcast_to(np.asarray(noise_sd, dtype=float), (dim,)).copy()
        self.gain = float(gain)
        self.lower = np.broadcast_to(np.asarray(lower, dtype=float), (dim,)).copy()
        self.upper = np.broadcast_to(np.asarray(upper, dtype=float), (dim,)).copy()

    def features(self, states, b):
        states = np.atleast_2d(np.asarray(states, dtype=float))
        b = np.broadcast_to(np.asarray(b, dtype=float), (states.shape[0],))
        return states * (1.0 + self.gain * b)[:, None]

    def _mean(self, states, b, beta):
        phi = self.features(states, b)
        if isinstance(beta, list):
            return phi * dual.stack(beta, axis=-1)
        return phi * beta

    def ols(self, data: Dataset) -> np.ndarray:
        """Closed-form maximiser of the likelihood: ``sum(phi s') / sum(phi^2)``."""
        phi = self.features(data.states, data.b)
        return (phi * data.next_states).sum(axis=0) / (phi**2).sum(axis=0)

    def ols_covariance(self, data: Dataset) -> np.ndarray:
        """Per-sample-normalised asymptotic covariance ``diag(sigma^2 / mean(phi^2))``."""
        phi = self.features(data.states, data.b)
        return np.diag(self.noise_sd**2 / (phi**2).mean(axis=0))

    def generate(self, beta, n_episodes, horizon, rng, initial=None, b_sampler=None):
        """Dataset of ``n_episodes`` trajectories under random actions in [0, 1]."""
        data = Dataset(self.state_dim)
        beta = np.asarray(beta, dtype=float)
        for _ in range(n_episodes):
            data.start_episode()
            s = np.ones(self.state_dim) if initial is None else initial(rng)
            for _ in range(horizon):
                b = float(rng.uniform()) if b_sampler is None else float(b_sampler(rng))
                nxt = self.sample(s[None], b, beta, rng)[0]
                data.append(s, ActionValue(0, b), nxt)
                s = nxt
        return data


def linear_reward(states, b, next_states):
    """Bounded reward in (0, 1]: ``exp(-mean(s'^2))``."""
    nxt = np.atleast_2d(next_states)
    return np.exp(-np.mean(nxt**2, axis=1))


class TabularMDP:
    """Finite MDP with transition tensor ``P[s, a, s']`` and rewards ``R[s, a]``.

    States are encoded for the generic rollout code as ``(B, 1)`` float
    arrays holding the state index; actions map to grid indices.
    """

    def __init__(self, P, R, gamma, mu0=None, grid: ActionGrid | None = None):
        self.P = np.asarray(P, dtype=float)
        self.R = np.asarray(R, dtype=float)
        n_s, n_a, n_s2 = self.P.shape
        if n_s != n_s2 or self.R.shape != (n_s, n_a):
            raise InvalidArgumentError("inconsistent transition / reward shapes")
        if not np.allclose(self.P.sum(axis=2), 1.0):
            raise InvalidArgumentError("transition rows must sum to one")
        if not 0.0 <= gamma < 1.0:
            raise InvalidArgumentError("gamma must lie in [0, 1)")
        self.gamma = float(gamma)
        self.mu0 = np.full(n_s, 1.0 / n_s) if mu0 is None else np.asarray(mu0, dtype=float)
        self.grid = grid if grid is not None else ActionGrid(np.linspace(0.0, 1.0, n_a))
        if len(self.grid) != n_a:
            raise InvalidArgumentError("grid size must match the number of actions")
        self.state_dim = 1

    @property
    def n_states(self):
        return self.P.shape[0]

    @property
    def n_actions(self):
        return self.P.shape[1]

    @classmethod
    def random(cls, n_states, n_actions, gamma, rng, concentration=1.0):
        """Random instance with full-support Dirichlet rows and rewards in [0, 1]."""
        P = rng.dirichlet(np.full(n_states, concentration), size=(n_states, n_actions))
        R = rng.uniform(size=(n_states, n_actions))
        return cls(P, R, gamma)

    # -- exact dynamic programming ----------------------------------------
    def policy_matrices(self, probs, reward=None):
        probs = np.asarray(probs, dtype=float)
        R = self.R if reward is None else np.asarray(reward, dtype=float)
        P_pi = np.einsum("sa,sat->st", probs, self.P)
        r_pi = (probs * R).sum(axis=1)
        return P_pi, r_pi

    def policy_value(self, probs, reward=None) -> np.ndarray:
        """``V = (I - gamma P_pi)^{-1} r_pi``."""
        P_pi, r_pi = self.policy_matrices(probs, reward)
        return np.linalg.solve(np.eye(self.n_states) - self.gamma * P_pi, r_pi)

    def objective(self, probs, reward=None) -> float:
        return float(self.mu0 @ self.policy_value(probs, reward))

    def q_values(self, V, reward=None):
        R = self.R if reward is None else reward
        return R + self.gamma * self.P @ V

    def value_iteration(self, tol=1e-12, max_iter=100_000):
        V = np.zeros(self.n_states)
        for _ in range(max_iter):
            Q = self.q_values(V)
            V_new = Q.max(axis=1)
            if np.max(np.abs(V_new - V)) < tol:
                V = V_new
                break
            V = V_new
        return V, self.q_values(V)

    def finite_horizon_value(self, probs, horizon):
        """Expected truncated return ``sum_{t < horizon} gamma^t r_t`` per start state."""
        P_pi, r_pi = self.policy_matrices(probs)
        V = np.zeros(self.n_states)
        for _ in range(horizon):
            V = r_pi + self.gamma * P_pi @ V
        return V

    # -- simulator interface ----------------------------------------------
    def sample(self, states, b, rng):
        s = np.asarray(states)[:, 0].astype(int)
        a = self.grid.nearest(b)
        cdf = np.cumsum(self.P[s, a], axis=1)
        u = rng.uniform(size=(s.size, 1))
        nxt = np.minimum((u > cdf).sum(axis=1), self.n_states - 1)
        return nxt[:, None].astype(float)

    def reward_fn(self, states, b, next_states):
        s = np.asarray(states)[:, 0].astype(int)
        return self.R[s, self.grid.nearest(b)]

    def initial_sampler(self, n, rng):
        return rng.choice(self.n_states, size=n, p=self.mu0)[:, None].astype(float)


def categorical_kl(p, q) -> np.ndarray:
    """``KL(p || q)`` along the last axis; zero-probability entries of ``p`` drop out."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return terms.sum(axis=-1)


def tabular_uncertainty(physical: TabularMDP, twin: TabularMDP, probs) -> np.ndarray:
    """Exact oracle uncertainty ``u[s, a]`` between two tabular MDPs.

    Uses the physical-system value of ``probs`` in the weight (expectation
    under the twin's next-state law) and ``KL(P_phys || P_twin)``.
    """
    V = physical.policy_value(probs)
    log_w = logsumexp(np.log(np.maximum(twin.P, 1e-300)) + (V**2)[None, None, :], axis=2)
    kl = np.maximum(categorical_kl(physical.P, twin.P), 0.0)
    return np.sqrt(2.0) * np.sqrt(1.0 + log_w) * np.sqrt(kl)


def penalized_objective(physical: TabularMDP, twin: TabularMDP, probs, lam) -> float:
    """``J(pi; M~)``: twin dynamics, reward ``r - lam * u``."""
    u = tabular_uncertainty(physical, twin, probs)
    return twin.objective(probs, reward=twin.R - lam * u)


class IndexPolicy(PolicyBase):
    """Deterministic policy over tabular states: ``action = table[state]``."""

    def __init__(self, grid: ActionGrid, table):
        self.grid = grid
        self.table = np.asarray(table, dtype=int)

    def act(self, states, rng):
        return self.table[np.asarray(states)[:, 0].astype(int)]
