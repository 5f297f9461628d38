"""Comparison arms: random medium exchange and GP expected-improvement selection.

The GP models the twin's one-step prediction error as a function of the
concatenated ``(s, b)`` input and picks the action where the expected
improvement over the largest observed error is highest.
"""

from __future__ import annotations

import itertools

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.stats import norm
from sklearn.base import BaseEstimator, RegressorMixin

from .exceptions import FitFailedError, InvalidArgumentError
from .mdp import ActionGrid, ActionValue


def random_action(grid: ActionGrid, rng) -> ActionValue:
    """Uniform ``b`` in [0, 1] mapped to the nearest grid point."""
    return grid[int(grid.nearest(rng.uniform()))]


def prediction_mse(model, beta, states, b, next_states):
    """Per-sample ``||f(s, b; beta) - s'||^2 / d``."""
    pred = model.mean(states, b, beta)
    return ((pred - np.atleast_2d(next_states)) ** 2).mean(axis=1)


class GPSurrogate(BaseEstimator, RegressorMixin):
    """Exact GP regression with a squared-exponential kernel.

    Inputs are standardised per column and targets standardised before
    fitting.  When ``hyper_grid`` is given (a dict of candidate
    ``length_scale``, ``signal_variance`` and ``jitter`` lists) the
    combination with the best held-out log marginal likelihood on the
    most recent ``validation_fraction`` of samples is used.

    Parameters
    ----------
    length_scale : float or array
        Per-dimension length scales in standardised units.
    signal_variance : float
        Kernel amplitude on the standardised target scale.
    jitter : float
        Diagonal term added to the kernel matrix; escalated tenfold up to
        ``max_jitter_tries`` times if the Cholesky factorisation fails.
    capacity : int
        Only the most recent ``capacity`` samples are kept.
    """

    def __init__(self, length_scale=1.0, signal_variance=1.0, jitter=1e-6, hyper_grid=None, capacity=500,
                 validation_fraction=0.2, max_jitter_tries=6, normalize_y=True):
        self.length_scale = length_scale
        self.signal_variance = signal_variance
        self.jitter = jitter
        self.hyper_grid = hyper_grid
        self.capacity = capacity
        self.validation_fraction = validation_fraction
        self.max_jitter_tries = max_jitter_tries
        self.normalize_y = normalize_y

    # -- kernel ------------------------------------------------------------
    @staticmethod
    def kernel(A, B, length_scale, signal_variance):
        A = np.atleast_2d(A) / length_scale
        B = np.atleast_2d(B) / length_scale
        sq = (A**2).sum(1)[:, None] + (B**2).sum(1)[None, :] - 2.0 * A @ B.T
        return signal_variance * np.exp(-0.5 * np.maximum(sq, 0.0))

    def _factor(self, Z, ls, sv, jitter):
        K = self.kernel(Z, Z, ls, sv)
        jit = jitter
        for _ in range(self.max_jitter_tries + 1):
            try:
                return cholesky(K + jit * np.eye(len(Z)), lower=True), jit
            except np.linalg.LinAlgError:
                jit = 10.0 * jit if jit > 0 else 1e-10
        raise FitFailedError(f"kernel Cholesky failed up to jitter {jit / 10:.3g}")

    def _standardize(self, X):
        return (np.atleast_2d(X) - self.x_mean_) / self.x_scale_

    def _heldout_lml(self, Z, t, ls, sv, jit):
        n_val = max(1, int(round(self.validation_fraction * len(Z))))
        if len(Z) - n_val < 2:
            return -np.inf
        Zt, tt, Zv, tv = Z[:-n_val], t[:-n_val], Z[-n_val:], t[-n_val:]
        try:
            L, jit = self._factor(Zt, ls, sv, jit)
        except FitFailedError:
            return -np.inf
        alpha = cho_solve((L, True), tt)
        Ks = self.kernel(Zv, Zt, ls, sv)
        mu = Ks @ alpha
        V = solve_triangular(L, Ks.T, lower=True)
        C = self.kernel(Zv, Zv, ls, sv) - V.T @ V + jit * np.eye(n_val)
        try:
            Lc = cholesky(0.5 * (C + C.T), lower=True)
        except np.linalg.LinAlgError:
            return -np.inf
        r = solve_triangular(Lc, tv - mu, lower=True)
        return float(-0.5 * r @ r - np.log(np.diag(Lc)).sum() - 0.5 * n_val * np.log(2 * np.pi))

    def fit(self, X, y):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float).ravel()
        if X.shape[0] != y.size:
            raise InvalidArgumentError("X and y lengths differ")
        if y.size < 2:
            raise InvalidArgumentError("GP fit needs at least 2 samples")
        X, y = X[-self.capacity :], y[-self.capacity :]
        self.x_mean_ = X.mean(axis=0)
        sd = X.std(axis=0)
        self.x_scale_ = np.where(sd > 0, sd, 1.0)
        self.y_mean_ = float(y.mean()) if self.normalize_y else 0.0
        ys = float(y.std()) if self.normalize_y else 1.0
        self.y_scale_ = ys if ys > 0 else 1.0
        Z = self._standardize(X)
        t = (y - self.y_mean_) / self.y_scale_

        ls, sv, jit = self.length_scale, self.signal_variance, self.jitter
        if self.hyper_grid:
            g = self.hyper_grid
            best = -np.inf
            for c_ls, c_sv, c_jit in itertools.product(g.get("length_scale", [ls]),
                                                       g.get("signal_variance", [sv]), g.get("jitter", [jit])):
                score = self._heldout_lml(Z, t, c_ls, c_sv, c_jit)
                if score > best:
                    best, (ls, sv, jit) = score, (c_ls, c_sv, c_jit)
        self.length_scale_ = np.broadcast_to(np.asarray(ls, dtype=float), (X.shape[1],)).copy()
        self.signal_variance_ = float(sv)
        self.L_, self.jitter_ = self._factor(Z, self.length_scale_, self.signal_variance_, jit)
        self.alpha_ = cho_solve((self.L_, True), t)
        self.Z_train_ = Z
        self.X_train_ = X
        self.y_train_ = y
        return self

    def predict(self, X, return_std=False):
        Zq = self._standardize(np.asarray(X, dtype=float))
        Ks = self.kernel(Zq, self.Z_train_, self.length_scale_, self.signal_variance_)
        mean = self.y_mean_ + self.y_scale_ * (Ks @ self.alpha_)
        if not return_std:
            return mean
        V = solve_triangular(self.L_, Ks.T, lower=True)
        var = np.maximum(self.signal_variance_ - (V**2).sum(axis=0), 0.0)
        return mean, self.y_scale_ * np.sqrt(var)

    @property
    def is_fitted(self):
        return hasattr(self, "alpha_")


def default_hyper_grid(input_dim):
    root = np.sqrt(input_dim)
    return {
        "length_scale": [0.25 * root, 0.5 * root, root, 2.0 * root],
        "signal_variance": [0.5, 1.0, 2.0],
        "jitter": [1e-6, 1e-2, 1e-1],
    }


def ei_from_moments(mean, std, best):
    """Expected improvement ``E[max(0, Y - best)]`` for ``Y ~ N(mean, std^2)``."""
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    gap = mean - best
    safe = np.where(std > 0, std, 1.0)
    z = np.clip(gap / safe, -40.0, 40.0)  # norm.pdf is 0 beyond this anyway
    ei = gap * norm.cdf(z) + safe * norm.pdf(z)
    return np.where(std > 0, np.maximum(ei, 0.0), np.maximum(gap, 0.0))


def expected_improvement(surrogate: GPSurrogate, query, best_observed):
    m, s = surrogate.predict(query, return_std=True)
    return ei_from_moments(m, s, best_observed)


def gp_inputs(states, b):
    states = np.atleast_2d(np.asarray(states, dtype=float))
    b = np.broadcast_to(np.asarray(b, dtype=float), (states.shape[0],))
    return np.column_stack([states, b])


def gp_select_action(surrogate: GPSurrogate | None, state, grid: ActionGrid, rng=None, best_observed=None):
    """Grid action maximising EI at ``state``; random before the surrogate exists."""
    if surrogate is None or not surrogate.is_fitted:
        if rng is None:
            raise InvalidArgumentError("cold-start selection needs an rng")
        return random_action(grid, rng)
    best = float(np.max(surrogate.y_train_)) if best_observed is None else best_observed
    X = gp_inputs(np.repeat(np.atleast_2d(state), len(grid), axis=0), grid.values)
    ei = expected_improvement(surrogate, X, best)
    return grid[int(np.argmax(ei))]
