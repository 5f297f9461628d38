"""Parametric Gaussian transition models ``s' = f(s, a; beta) + eps``."""

from __future__ import annotations

import numpy as np

from . import dual
from .exceptions import DivergedModelError, InvalidArgumentError


class GaussianTransitionModel:
    """Base class for ``mu(s' | s, a; beta) = N(f(s, a; beta), diag(noise_sd**2))``.

    Subclasses implement :meth:`_mean`, which must accept either a plain
    parameter array or a list of :class:`~actorsim.dual.Dual` seeds and be
    written only with operations :mod:`actorsim.dual` supports.  The
    Jacobian with respect to ``beta`` then comes from forward-mode
    propagation; :meth:`finite_difference_jacobian` is the independent
    cross-check.
    """

    state_dim: int
    n_params: int
    noise_sd: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    nonnegative_states = False

    # -- subclasses -------------------------------------------------------
    def _mean(self, states, b, beta):
        raise NotImplementedError

    # -- public API -------------------------------------------------------
    def _prep(self, states, b):
        states = np.atleast_2d(np.asarray(states, dtype=float))
        b = np.broadcast_to(np.asarray(b, dtype=float), (states.shape[0],))
        if states.shape[1] != self.state_dim:
            raise InvalidArgumentError(f"expected state dimension {self.state_dim}, got {states.shape[1]}")
        return states, b

    def _check_beta(self, beta):
        beta = np.asarray(beta, dtype=float).ravel()
        if beta.size != self.n_params:
            raise InvalidArgumentError(f"expected {self.n_params} parameters, got {beta.size}")
        return beta

    def mean(self, states, b, beta) -> np.ndarray:
        states, b = self._prep(states, b)
        out = np.asarray(self._mean(states, b, self._check_beta(beta)))
        if not np.isfinite(out).all():
            raise DivergedModelError("non-finite mean transition")
        return out

    def mean_and_jacobian(self, states, b, beta):
        """Mean ``(B, d)`` and Jacobian ``d f / d beta`` of shape ``(B, d, p)``."""
        states, b = self._prep(states, b)
        beta = self._check_beta(beta)
        out = self._mean(states, b, dual.seed(beta))
        if not isinstance(out, dual.Dual):
            # mean does not depend on beta
            return np.asarray(out), np.zeros(np.shape(out) + (beta.size,))
        if not dual.all_finite(out):
            raise DivergedModelError("non-finite mean transition or Jacobian")
        tan = np.broadcast_to(out.tan, out.val.shape + (beta.size,))
        return out.val, np.array(tan)

    def jacobian(self, states, b, beta):
        return self.mean_and_jacobian(states, b, beta)[1]

    def finite_difference_jacobian(self, states, b, beta, rel_step=1e-6):
        """Central-difference Jacobian with relative step ``rel_step``."""
        states, b = self._prep(states, b)
        beta = self._check_beta(beta)
        cols = []
        for j in range(beta.size):
            h = rel_step * max(abs(beta[j]), 1e-12)
            up, dn = beta.copy(), beta.copy()
            up[j] += h
            dn[j] -= h
            cols.append((self.mean(states, b, up) - self.mean(states, b, dn)) / (2 * h))
        return np.stack(cols, axis=-1)

    def sample(self, states, b, beta, rng) -> np.ndarray:
        m = self.mean(states, b, beta)
        out = m + self.noise_sd * rng.standard_normal(m.shape)
        if self.nonnegative_states:
            np.maximum(out, 0.0, out=out)
        return out

    @property
    def precision(self):
        sd = np.asarray(self.noise_sd, dtype=float)
        if np.any(sd <= 0):
            raise InvalidArgumentError("noise standard deviations must be > 0 to evaluate a likelihood")
        return 1.0 / sd**2

    def at(self, beta) -> "BoundModel":
        return BoundModel(self, self._check_beta(beta).copy())

    def clip_to_bounds(self, beta):
        return np.clip(beta, self.lower, self.upper)


class BoundModel:
    """A transition model with its parameters fixed; what rollouts consume."""

    def __init__(self, model: GaussianTransitionModel, beta):
        self.model = model
        self.beta = np.asarray(beta, dtype=float)

    @property
    def state_dim(self):
        return self.model.state_dim

    def mean(self, states, b):
        return self.model.mean(states, b, self.beta)

    def sample(self, states, b, rng):
        return self.model.sample(states, b, self.beta, rng)
