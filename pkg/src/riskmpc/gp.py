"""Exact Gaussian-process regression with an ARD squared-exponential kernel.

Inputs are z-scored with training-set statistics inside :func:`fit` and
:func:`predict` unless ``standardize=False``; hyperparameters always refer to
the (possibly standardized) coordinates the kernel actually sees. The prior
mean is zero and targets are used as given.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.optimize import minimize

from .errors import ContractViolation, NumericalError

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)
JITTER_START = 1e-10
JITTER_MAX = 1e-6
# box on every log-hyperparameter during optimization
LOG_BOUNDS = (-16.0, 12.0)


@dataclass(frozen=True)
class GpHyperparams:
    signal_var: float
    length_scales: np.ndarray
    noise_var: float

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.length_scales, dtype=float))
        if self.signal_var <= 0 or self.noise_var <= 0 or np.any(ls <= 0):
            raise ContractViolation("GP hyperparameters must be strictly positive")
        object.__setattr__(self, "length_scales", ls)
        object.__setattr__(self, "signal_var", float(self.signal_var))
        object.__setattr__(self, "noise_var", float(self.noise_var))

    @property
    def dim(self) -> int:
        return self.length_scales.size

    def to_log(self) -> np.ndarray:
        return np.concatenate([[np.log(self.signal_var)], np.log(self.length_scales), [np.log(self.noise_var)]])

    @classmethod
    def from_log(cls, theta) -> "GpHyperparams":
        theta = np.asarray(theta, dtype=float)
        return cls(float(np.exp(theta[0])), np.exp(theta[1:-1]), float(np.exp(theta[-1])))

    @classmethod
    def default(cls, dim: int) -> "GpHyperparams":
        return cls(1.0, np.ones(dim), 1e-2)


def kernel_matrix(x1, x2, hyper: GpHyperparams) -> np.ndarray:
    """ARD squared-exponential Gram matrix between the rows of ``x1`` and ``x2``."""
    a = np.atleast_2d(np.asarray(x1, dtype=float)) / hyper.length_scales
    b = np.atleast_2d(np.asarray(x2, dtype=float)) / hyper.length_scales
    sq = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * a @ b.T
    return hyper.signal_var * np.exp(-0.5 * np.maximum(sq, 0.0))


def kernel(f_i, f_j, hyper: GpHyperparams) -> float:
    f_i = np.asarray(f_i, dtype=float)
    f_j = np.asarray(f_j, dtype=float)
    if f_i.shape != (hyper.dim,) or f_j.shape != (hyper.dim,):
        raise ContractViolation("feature dimension does not match the length scales")
    r = (f_i - f_j) / hyper.length_scales
    return float(hyper.signal_var * np.exp(-0.5 * r @ r))


@dataclass(frozen=True)
class GpModel:
    x_train: np.ndarray
    y_train: np.ndarray
    hyper: GpHyperparams
    chol_factor: np.ndarray = field(repr=False)
    alpha_vec: np.ndarray = field(repr=False)
    x_mean: np.ndarray = field(repr=False)
    x_scale: np.ndarray = field(repr=False)
    jitter: float = 0.0
    standardized: bool = True
    # constant prior mean; targets are fitted as residuals around it
    y_mean: float = 0.0

    @property
    def n(self) -> int:
        return self.y_train.size

    def transform(self, x) -> np.ndarray:
        return (np.atleast_2d(np.asarray(x, dtype=float)) - self.x_mean) / self.x_scale

    def to_dict(self) -> dict:
        """JSON-ready snapshot; :func:`model_from_dict` rebuilds an identical model."""
        return {
            "x_train": self.x_train.tolist(),
            "y_train": self.y_train.tolist(),
            "signal_var": self.hyper.signal_var,
            "length_scales": self.hyper.length_scales.tolist(),
            "noise_var": self.hyper.noise_var,
            "standardize": self.standardized,
            "y_mean": self.y_mean,
        }


def model_from_dict(data: dict) -> GpModel:
    hyper = GpHyperparams(data["signal_var"], data["length_scales"], data["noise_var"])
    return fit(np.asarray(data["x_train"]), np.asarray(data["y_train"]), hyper, standardize=data["standardize"],
               prior_mean=data.get("y_mean", 0.0))


def _standardizer(x: np.ndarray, standardize: bool):
    if not standardize:
        return np.zeros(x.shape[1]), np.ones(x.shape[1])
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    return mean, scale


def _factor(k: np.ndarray, noise_var: float):
    """Cholesky of ``k + noise_var I`` with escalating jitter; returns ``(L, jitter)``."""
    n = k.shape[0]
    jitter = 0.0
    while True:
        try:
            low = np.linalg.cholesky(k + (noise_var + jitter) * np.eye(n))
            return low, jitter
        except np.linalg.LinAlgError:
            jitter = JITTER_START if jitter == 0.0 else jitter * 10.0
            if jitter > JITTER_MAX * (1 + 1e-9):
                raise NumericalError("kernel matrix numerically singular")


def fit(x_train, y_train, hyper: GpHyperparams, standardize: bool = True, prior_mean: float = 0.0) -> GpModel:
    """Factorize the training kernel; ``prior_mean`` is the constant GP prior mean."""
    x = np.atleast_2d(np.asarray(x_train, dtype=float))
    y = np.atleast_1d(np.asarray(y_train, dtype=float))
    if x.shape[0] != y.size or x.shape[0] < 1:
        raise ContractViolation("need at least one training point and one target per row")
    if x.shape[1] != hyper.dim:
        raise ContractViolation("feature dimension does not match the length scales")
    mean, scale = _standardizer(x, standardize)
    xs = (x - mean) / scale
    low, jitter = _factor(kernel_matrix(xs, xs, hyper), hyper.noise_var)
    alpha = sla.cho_solve((low, True), y - prior_mean)
    return GpModel(x.copy(), y.copy(), hyper, low, alpha, mean, scale, jitter, standardize, float(prior_mean))


def predict(model: GpModel, f_star) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance at one query (scalars) or many (vectors)."""
    f = np.asarray(f_star, dtype=float)
    single = f.ndim == 1
    xs = model.transform(model.x_train)
    qs = model.transform(f)
    k_star = kernel_matrix(xs, qs, model.hyper)
    mean = model.y_mean + k_star.T @ model.alpha_vec
    w = sla.solve_triangular(model.chol_factor, k_star, lower=True)
    var = np.maximum(model.hyper.signal_var - np.sum(w * w, axis=0), 0.0)
    if single:
        return float(mean[0]), float(var[0])
    return mean, var


def log_marginal_likelihood(model: GpModel) -> float:
    y = model.y_train - model.y_mean
    return float(-0.5 * y @ model.alpha_vec - np.sum(np.log(np.diag(model.chol_factor))) - 0.5 * y.size * LOG_2PI)


def lml_and_grad(theta, xs: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Log marginal likelihood and its gradient in log-hyperparameter space.

    ``xs`` are the coordinates seen by the kernel (already standardized).
    """
    hyper = GpHyperparams.from_log(theta)
    n = y.size
    k = kernel_matrix(xs, xs, hyper)
    low, jitter = _factor(k, hyper.noise_var)
    alpha = sla.cho_solve((low, True), y)
    lml = -0.5 * y @ alpha - np.sum(np.log(np.diag(low))) - 0.5 * n * LOG_2PI
    k_inv = sla.cho_solve((low, True), np.eye(n))
    w = np.outer(alpha, alpha) - k_inv
    s = w * k
    grad = np.empty(theta.size)
    grad[0] = 0.5 * np.sum(s)
    # sum_ij S_ij (a_i - a_j)^2 = 2 sum_i a_i^2 (S 1)_i - 2 a' S a, per dimension
    a = xs / hyper.length_scales
    row = s.sum(axis=1)
    sq_terms = 2.0 * (a * a).T @ row - 2.0 * np.sum(a * (s @ a), axis=0)
    grad[1:-1] = 0.5 * sq_terms
    grad[-1] = 0.5 * hyper.noise_var * np.trace(w)
    return float(lml), grad


@dataclass
class OptimizeResult:
    hyper: GpHyperparams
    lml: float
    init_lml: list
    fell_back: bool = False


def optimize_hyperparams(
    x, y, restarts: int = 5, max_iter: int = 200, rng: np.random.Generator | None = None,
    standardize: bool = True,
    prior_mean: float = 0.0,
) -> OptimizeResult:
    """Maximize the log marginal likelihood from ``restarts`` random initializations.

    Each restart runs L-BFGS-B on the negative LML with analytic gradients
    inside a box on the log-hyperparameters. Initializations are log-uniform
    around data-derived scales: length scales around ``sqrt(d)`` times the
    per-dimension spread (typical pairwise distances grow like ``sqrt(d)``, so
    unscaled draws leave every kernel entry near zero in high dimension) and
    signal and noise variances relative to the target variance.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float)) - prior_mean
    if y.size < 2:
        raise ContractViolation("hyperparameter optimization needs at least two points")
    rng = rng or np.random.default_rng(0)
    y_var = float(np.mean(y * y))
    y_var = y_var if y_var > 1e-12 else 1.0
    mean, scale = _standardizer(x, standardize)
    xs = (x - mean) / scale
    spread = xs.std(axis=0)
    spread = np.where(spread > 1e-12, spread, 1.0)
    d = x.shape[1]

    def neg(theta):
        try:
            val, g = lml_and_grad(theta, xs, y)
        except NumericalError:
            return 1e300, np.zeros_like(theta)
        return -val, -g

    best = None
    init_lml = []
    for _ in range(restarts):
        theta0 = np.concatenate([
            [np.log(10.0 ** rng.uniform(-1, 1) * y_var)],
            np.log(10.0 ** rng.uniform(-1, 1, size=d) * spread * np.sqrt(d)),
            [np.log(10.0 ** rng.uniform(-4, -1) * y_var)],
        ])
        theta0 = np.clip(theta0, *LOG_BOUNDS)
        f0, _ = neg(theta0)
        init_lml.append(-f0)
        res = minimize(neg, theta0, jac=True, method="L-BFGS-B",
                       bounds=[LOG_BOUNDS] * theta0.size, options={"maxiter": max_iter})
        theta, f = (res.x, res.fun) if res.fun <= f0 else (theta0, f0)
        if f < 1e299 and (best is None or f < best[1]):
            best = (theta, f)
    if best is None:
        log.warning("all GP restarts failed to factorize; keeping default hyperparameters")
        return OptimizeResult(GpHyperparams.default(d), float("nan"), init_lml, fell_back=True)
    return OptimizeResult(GpHyperparams.from_log(best[0]), -best[1], init_lml)


class GpSurrogate:
    """Growing GP training set with FIFO eviction and amortized re-optimization.

    Hyperparameters are re-optimized only when the training set has grown by
    ``regrow_ratio`` since the last optimization; otherwise the model is refit
    with the current hyperparameters. The prior mean is the mean of the current
    targets, so far from the data the surrogate predicts a typical value rather
    than zero.
    """

    def __init__(self, dim: int, capacity: int = 512, regrow_ratio: float = 1.25,
                 restarts: int = 5, max_iter: int = 200, rng: np.random.Generator | None = None):
        self.dim = dim
        self.capacity = capacity
        self.regrow_ratio = regrow_ratio
        self.restarts = restarts
        self.max_iter = max_iter
        self.rng = rng or np.random.default_rng(0)
        self.x = np.zeros((0, dim))
        self.y = np.zeros(0)
        self.hyper = GpHyperparams.default(dim)
        self.model: GpModel | None = None
        self.n_at_last_opt = 0
        self.fell_back = False

    @property
    def trained(self) -> bool:
        return self.model is not None

    def add(self, x, y):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        self.x = np.vstack([self.x, x])[-self.capacity:]
        self.y = np.concatenate([self.y, y])[-self.capacity:]

    def refit(self) -> GpModel:
        n = self.y.size
        grown = self.n_at_last_opt == 0 or n >= self.regrow_ratio * self.n_at_last_opt
        prior_mean = float(np.mean(self.y)) if n else 0.0
        if n >= 2 and grown:
            res = optimize_hyperparams(self.x, self.y, self.restarts, self.max_iter, self.rng,
                                       prior_mean=prior_mean)
            self.hyper = res.hyper
            self.fell_back = res.fell_back
            self.n_at_last_opt = n
        self.model = fit(self.x, self.y, self.hyper, prior_mean=prior_mean)
        return self.model
