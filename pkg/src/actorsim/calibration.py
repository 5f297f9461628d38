"""Maximum-likelihood calibration of a Gaussian transition model.

The log-likelihood of a transition under ``N(f(s, a; beta), diag(sd**2))``
is ``-0.5 * r' Sigma^-1 r - 0.5 * log det(2 pi Sigma)``.  Gradients come
from the model's forward-mode Jacobian.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import (
    DivergedModelError, DivergedSimulationError, FitFailedError, IllConditionedError, InvalidArgumentError,
)
from .mdp import Dataset
from .models import GaussianTransitionModel

LOG_2PI = np.log(2.0 * np.pi)


def _arrays(data):
    if isinstance(data, Dataset):
        return data.states, data.b, data.next_states
    states, b, nxt = data
    return np.atleast_2d(states), np.asarray(b, dtype=float), np.atleast_2d(nxt)


def log_likelihood(state, b, next_state, beta, model: GaussianTransitionModel):
    """Per-transition Gaussian log-likelihood.

    Accepts a single transition (1-D states, returns a float) or a batch
    (``(n, d)`` states, returns ``(n,)``).
    """
    single = np.ndim(state) == 1
    prec = model.precision
    f = model.mean(state, b, beta)
    r = np.atleast_2d(next_state) - f
    ll = -0.5 * (r**2 * prec).sum(axis=1) - 0.5 * np.sum(LOG_2PI - np.log(prec))
    return float(ll[0]) if single else ll


def mean_log_likelihood(data, beta, model) -> float:
    s, b, sp = _arrays(data)
    return float(np.mean(log_likelihood(s, b, sp, beta, model)))


def mean_log_likelihood_and_grad(data, beta, model):
    """Mean log-likelihood and its gradient in ``beta``."""
    s, b, sp = _arrays(data)
    prec = model.precision
    f, J = model.mean_and_jacobian(s, b, beta)
    r = sp - f
    ll = -0.5 * (r**2 * prec).sum(axis=1) - 0.5 * np.sum(LOG_2PI - np.log(prec))
    grad = np.einsum("ndp,nd->p", J, r * prec) / s.shape[0]
    return float(ll.mean()), grad


@dataclass
class MLEOptions:
    """Optimiser settings for :func:`mle_fit`.

    Adam runs in box-normalised coordinates ``z = (beta - lo) / (hi - lo)``
    so one step size suits parameters of very different scales.
    ``polish`` runs a bounded trust-region least-squares refinement on the
    full dataset afterwards; it is kept only if it raises the mean
    log-likelihood.
    """

    lr: float = 1e-3
    max_epochs: int = 2000
    patience: int = 50
    tol: float = 1e-8
    validation_fraction: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    polish: bool = True
    polish_max_nfev: int = 50


@dataclass
class MLEResult:
    beta: np.ndarray
    mean_log_likelihood: float
    epochs: int
    stop_reason: str
    polished: bool = False
    history: list = field(default_factory=list)  # (epoch, train ll, validation ll, grad norm)


def episode_split(data: Dataset, validation_fraction: float):
    """Boolean training mask holding out whole episodes.

    Every ``round(1 / fraction)``-th episode goes to validation, so the
    split is deterministic.  Returns ``None`` when no split is possible.
    """
    if validation_fraction <= 0:
        return None
    ep = data.episodes
    n_ep = len(np.unique(ep))
    if n_ep < 2:
        return None
    stride = max(2, int(round(1.0 / validation_fraction)))
    val_eps = np.unique(ep)[stride - 1 :: stride]
    if val_eps.size == 0:
        return None
    return ~np.isin(ep, val_eps)


def _polish(data, beta, model, max_nfev):
    s, b, sp = _arrays(data)
    sd = np.sqrt(1.0 / model.precision)
    cache = {}

    def eval_at(x):
        key = x.tobytes()
        if key not in cache:
            cache.clear()
            cache[key] = model.mean_and_jacobian(s, b, x)
        return cache[key]

    def fun(x):
        return ((sp - eval_at(x)[0]) / sd).ravel()

    def jac(x):
        return (-eval_at(x)[1] / sd[None, :, None]).reshape(-1, x.size)

    lo, hi = model.lower, model.upper
    x0 = np.clip(beta, lo, hi)
    res = least_squares(fun, x0, jac=jac, bounds=(lo, hi), method="trf", x_scale="jac",
                        max_nfev=max_nfev)
    return np.clip(res.x, lo, hi)


def mle_fit(data: Dataset, init, model: GaussianTransitionModel, opts: MLEOptions | None = None) -> MLEResult:
    """Approximate maximiser of the mean log-likelihood within the bounds.

    Projected Adam ascent with early stopping on held-out episodes, then an
    optional least-squares polish.  The returned point never has a lower
    full-data mean log-likelihood than ``init``.
    """
    opts = opts or MLEOptions()
    if len(data) == 0:
        raise InvalidArgumentError("cannot fit on an empty dataset")
    lo, hi = np.asarray(model.lower, float), np.asarray(model.upper, float)
    span = hi - lo
    init = np.clip(np.asarray(init, dtype=float), lo, hi)

    mask = episode_split(data, opts.validation_fraction) if isinstance(data, Dataset) else None
    train = data.subset(mask) if mask is not None else data
    val = data.subset(~mask) if mask is not None else None

    init_ll = _safe_ll(data, init, model)
    z = (init - lo) / span
    m = np.zeros_like(z)
    v = np.zeros_like(z)
    best_beta, best_score = init.copy(), -np.inf
    history = []
    since_best, epoch, stop = 0, 0, "max-epochs"
    n_ok = 0
    for epoch in range(1, opts.max_epochs + 1):
        beta = lo + z * span
        try:
            ll, g = mean_log_likelihood_and_grad(train, beta, model)
            val_ll = mean_log_likelihood(val, beta, model) if val is not None else ll
        except DivergedSimulationError:
            # step into a non-finite region: halve back toward the best point
            z = 0.5 * (z + (best_beta - lo) / span)
            history.append((epoch, np.nan, np.nan, np.nan))
            continue
        n_ok += 1
        gz = g * span
        gnorm = float(np.linalg.norm(gz))
        history.append((epoch, ll, val_ll, gnorm))
        if val_ll > best_score:
            best_score, best_beta, since_best = val_ll, beta.copy(), 0
        else:
            since_best += 1
        if gnorm < opts.tol:
            stop = "gradient-tolerance"
            break
        if since_best >= opts.patience:
            stop = "early-stopping"
            break
        m = opts.beta1 * m + (1 - opts.beta1) * gz
        v = opts.beta2 * v + (1 - opts.beta2) * gz**2
        mh = m / (1 - opts.beta1**epoch)
        vh = v / (1 - opts.beta2**epoch)
        z = np.clip(z + opts.lr * mh / (np.sqrt(vh) + opts.eps), 0.0, 1.0)

    if n_ok == 0 and not np.isfinite(init_ll):
        raise FitFailedError("every likelihood evaluation diverged", best=init)

    result_beta, polished = best_beta, False
    best_full = _safe_ll(data, best_beta, model)
    if opts.polish:
        try:
            cand = _polish(data, best_beta, model, opts.polish_max_nfev)
            cand_ll = _safe_ll(data, cand, model)
            if cand_ll > best_full:
                result_beta, best_full, polished = cand, cand_ll, True
        except DivergedSimulationError:
            pass
    if not best_full >= init_ll:
        result_beta, best_full, stop = init, init_ll, stop + "+reverted-to-init"
    if not np.isfinite(best_full):
        raise FitFailedError("no finite likelihood found", best=result_beta)
    return MLEResult(result_beta, best_full, epoch, stop, polished, history)


def _safe_ll(data, beta, model):
    try:
        return mean_log_likelihood(data, beta, model)
    except DivergedSimulationError:
        return -np.inf


@dataclass
class CovarianceEstimate:
    """``Sigma(beta_hat)``: inverse of the ridge-regularised mean negative Hessian.

    ``matrix`` is per-sample normalised; ``parameter_covariance`` divides
    by ``n`` to give the covariance of the estimator itself.
    """

    matrix: np.ndarray
    n: int
    mode: str
    ridge: float
    condition_number: float = float("nan")

    @property
    def parameter_covariance(self):
        return self.matrix / max(self.n, 1)


def jacobian_mean(state, b, beta, model, method="forward"):
    """``d f / d beta`` at one ``(s, a)`` (``(d, p)``) or a batch (``(B, d, p)``)."""
    single = np.ndim(state) == 1
    if method == "forward":
        J = model.jacobian(state, b, beta)
    elif method == "finite-difference":
        J = model.finite_difference_jacobian(state, b, beta)
    else:
        raise InvalidArgumentError(f"unknown Jacobian method {method!r}")
    if not np.isfinite(J).all():
        raise DivergedModelError("non-finite Jacobian")
    return J[0] if single else J


def conditional_fisher_info(state, b, beta, model, jac=None):
    """Gram-form information ``J' Sigma^-1 J`` per ``(s, a)``."""
    single = np.ndim(state) == 1
    J = np.asarray(jacobian_mean(state, b, beta, model) if jac is None else jac)
    if J.ndim == 2:
        J = J[None]
    info = np.einsum("bdp,d,bdq->bpq", J, model.precision, J)
    return info[0] if single else info


def _negative_hessian_fd(data, beta, model, rel_step=1e-5):
    p = beta.size
    H = np.empty((p, p))
    for k in range(p):
        h = rel_step * max(abs(beta[k]), 1e-8)
        up, dn = beta.copy(), beta.copy()
        up[k] += h
        dn[k] -= h
        H[:, k] = -(mean_log_likelihood_and_grad(data, up, model)[1]
                    - mean_log_likelihood_and_grad(data, dn, model)[1]) / (2 * h)
    return 0.5 * (H + H.T)


def estimate_covariance(data, beta_hat, model, mode="gauss-newton", ridge_rel=1e-6, ridge_floor=1e-10,
                        max_condition=1e14) -> CovarianceEstimate:
    """Invert the average negative Hessian of the log-likelihood at ``beta_hat``.

    ``mode`` is ``"gauss-newton"`` (mean of ``J' Sigma^-1 J``) or
    ``"hessian"`` (finite differences of the analytic gradient).  A ridge
    ``max(ridge_rel * trace / d, ridge_floor)`` is added before inversion.
    """
    s, b, sp = _arrays(data)
    beta_hat = np.asarray(beta_hat, dtype=float)
    n = s.shape[0]
    if n < beta_hat.size:
        raise InvalidArgumentError(f"need at least {beta_hat.size} samples, got {n}")
    if mode == "gauss-newton":
        H = conditional_fisher_info(s, b, beta_hat, model).mean(axis=0)
    elif mode == "hessian":
        H = _negative_hessian_fd((s, b, sp), beta_hat, model)
    else:
        raise InvalidArgumentError(f"unknown covariance mode {mode!r}")
    H = 0.5 * (H + H.T)
    d = H.shape[0]
    delta = max(ridge_rel * np.trace(H) / d, ridge_floor)
    A = H + delta * np.eye(d)
    cond = float(np.linalg.cond(A))
    if not np.isfinite(cond) or cond > max_condition:
        raise IllConditionedError(f"regularised information matrix has condition number {cond:.3g}",
                                  condition_number=cond)
    cov = np.linalg.inv(A)
    return CovarianceEstimate(0.5 * (cov + cov.T), n, mode, float(delta), cond)


def write_fit_diagnostics(path, result: MLEResult):
    """CSV: epoch, train mean log-likelihood, validation mean log-likelihood, gradient norm."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_mean_ll", "validation_mean_ll", "grad_norm"])
        for row in result.history:
            w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])


class TwinCalibrator(BaseEstimator):
    """Estimator wrapper around :func:`mle_fit` and :func:`estimate_covariance`.

    Parameters
    ----------
    model : GaussianTransitionModel
    init : array_like, optional
        Starting point; defaults to the mid-point of the bounds.
    lr, max_epochs, patience, tol, validation_fraction, polish
        See :class:`MLEOptions`.
    covariance_mode : {"gauss-newton", "hessian"}
    warm_start : bool
        Start the next ``fit`` from the previous ``beta_``.

    Attributes
    ----------
    beta_ : ndarray
    covariance_ : CovarianceEstimate
    result_ : MLEResult
    """

    def __init__(self, model=None, init=None, lr=1e-3, max_epochs=2000, patience=50, tol=1e-8,
                 validation_fraction=0.2, polish=True, polish_max_nfev=50,
                 covariance_mode="gauss-newton", warm_start=True):
        self.model = model
        self.init = init
        self.lr = lr
        self.max_epochs = max_epochs
        self.patience = patience
        self.tol = tol
        self.validation_fraction = validation_fraction
        self.polish = polish
        self.polish_max_nfev = polish_max_nfev
        self.covariance_mode = covariance_mode
        self.warm_start = warm_start

    def _options(self):
        return MLEOptions(lr=self.lr, max_epochs=self.max_epochs, patience=self.patience, tol=self.tol,
                          validation_fraction=self.validation_fraction, polish=self.polish,
                          polish_max_nfev=self.polish_max_nfev)

    def fit(self, data: Dataset, y=None):
        if self.model is None:
            raise InvalidArgumentError("TwinCalibrator needs a model")
        if self.warm_start and hasattr(self, "beta_"):
            start = self.beta_
        elif self.init is not None:
            start = np.asarray(self.init, dtype=float)
        else:
            start = 0.5 * (np.asarray(self.model.lower) + np.asarray(self.model.upper))
        self.result_ = mle_fit(data, start, self.model, self._options())
        self.beta_ = self.result_.beta
        self.covariance_ = estimate_covariance(data, self.beta_, self.model, mode=self.covariance_mode)
        self.n_samples_ = len(data)
        return self

    def predict(self, states, b):
        check_is_fitted(self, "beta_")
        return self.model.mean(states, b, self.beta_)

    def score(self, data, y=None):
        check_is_fitted(self, "beta_")
        return mean_log_likelihood(data, self.beta_, self.model)
