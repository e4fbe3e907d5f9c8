"""Risk assessment engine: candidate scenarios, UCB ranking and LPES construction.

Every ``update_period_m`` control steps the engine draws a pool of candidate
scenarios, scores them with the GP surrogate's pessimistic criticality
estimate (posterior mean plus ``kappa_ucb`` standard deviations), simulates
the top ``k_crit`` exactly along the latest nominal plan, and turns their
error trajectories into per-step bounding boxes. The exact criticalities of
the simulated winners become new GP training data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .criticality import (
    ScenarioBatch,
    criticality_batch,
    extract_features_batch,
    feature_dim,
    simulate_error_batch,
)
from .errors import ContractViolation
from .gp import GpHyperparams, GpModel, GpSurrogate, fit, log_marginal_likelihood, optimize_hyperparams, predict
from .system import Box, UncertainLinearSystem
from .tube import AncillaryDesign, LpesSupport, MpcPlan


@dataclass(frozen=True)
class RiskEngineConfig:
    n_cand: int = 500
    k_crit: int = 10
    kappa_ucb: float = 2.0
    update_period_m: int = 50
    n_seed_train: int = 50
    inflation: float = 1.25
    history_w: int = 100
    gp_capacity: int = 512
    cold_start_pool: int = 100
    gp_restarts: int = 5
    gp_max_iter: int = 200

    def __post_init__(self):
        if not 1 <= self.k_crit <= self.n_cand:
            raise ContractViolation("need 1 <= k_crit <= n_cand")
        if self.update_period_m < 1:
            raise ContractViolation("update_period_m must be at least 1")
        if self.kappa_ucb < 0:
            raise ContractViolation("kappa_ucb must be non-negative")
        if self.n_seed_train < 2:
            raise ContractViolation("n_seed_train must be at least 2")
        if self.inflation < 1.0:
            raise ContractViolation("inflation must be at least 1")


@dataclass(frozen=True)
class EngineCycle:
    """Diagnostics of one LPES update."""

    update_step: int
    s_max: np.ndarray
    selected_gamma: np.ndarray
    gp_lml: float
    n_train: int
    cold_start: bool
    half_width: np.ndarray


def candidate_half_width(base_support: Box, recent=None, inflation: float = 1.25) -> np.ndarray:
    """Per-channel sampling half-width: inflated recent peak, floored at the base support."""
    floor = np.maximum(np.abs(base_support.lower), np.abs(base_support.upper))
    if recent is None or len(recent) == 0:
        return floor
    peak = np.max(np.abs(np.atleast_2d(recent)), axis=0)
    return np.maximum(inflation * peak, floor)


def _random_matrices(sys: UncertainLinearSystem, m: int, n: int, rng: np.random.Generator):
    a_hw = sys.delta_rel * np.abs(sys.a_nom)
    b_hw = sys.delta_rel * np.abs(sys.b_nom)
    n_vert = (m + 1) // 2
    # first half: one random vertex held over the whole horizon
    sa = rng.choice((-1.0, 1.0), size=(n_vert, 1) + sys.a_nom.shape)
    sb = rng.choice((-1.0, 1.0), size=(n_vert, 1) + sys.b_nom.shape)
    a_v = np.broadcast_to(sys.a_nom + sa * a_hw, (n_vert, n) + sys.a_nom.shape)
    b_v = np.broadcast_to(sys.b_nom + sb * b_hw, (n_vert, n) + sys.b_nom.shape)
    # second half: independent uniform draws inside the box at every step
    n_int = m - n_vert
    a_i = sys.a_nom + rng.uniform(-1.0, 1.0, size=(n_int, n) + sys.a_nom.shape) * a_hw
    b_i = sys.b_nom + rng.uniform(-1.0, 1.0, size=(n_int, n) + sys.b_nom.shape) * b_hw
    return np.concatenate([a_v, a_i]), np.concatenate([b_v, b_i])


def generate_candidates(
    sys: UncertainLinearSystem, half_width, horizon: int, n_cand: int, rng: np.random.Generator
) -> ScenarioBatch:
    """Random candidate scenarios.

    Disturbances are uniform on ``[-half_width, half_width]`` per channel. The
    first half of the pool (rounded up) uses a random interval vertex held
    constant over the horizon, the rest draws the matrices uniformly in the
    interval box at every step.
    """
    if n_cand < 1:
        raise ContractViolation("n_cand must be at least 1")
    hw = np.asarray(half_width, dtype=float)
    d = rng.uniform(-1.0, 1.0, size=(n_cand, horizon, sys.n_d)) * hw
    a, b = _random_matrices(sys, n_cand, horizon, rng)
    return ScenarioBatch(d, np.ascontiguousarray(a), np.ascontiguousarray(b))


def pce(model: GpModel, f, kappa_ucb: float):
    """Pessimistic criticality estimate ``mu + kappa * sigma`` (scalar or vector)."""
    mean, var = predict(model, f)
    return mean + kappa_ucb * np.sqrt(var)


def rank_desc(scores) -> np.ndarray:
    """Indices by descending score, ties broken by ascending index."""
    scores = np.asarray(scores, dtype=float)
    return np.lexsort((np.arange(scores.size), -scores))


def lpes_from_errors(e_traj, horizon: int, update_step: int = 0) -> LpesSupport:
    """Per-dimension peak magnitude of the errors at steps ``0 .. N-1``."""
    e = np.asarray(e_traj, dtype=float)
    s = np.max(np.abs(e[:, :horizon]), axis=0)
    return LpesSupport(s, update_step)


def lpes_coverage(lpes: LpesSupport, e_traj, tol: float = 1e-12) -> float:
    """Fraction of trajectories whose errors at steps ``0 .. N-1`` stay in the boxes."""
    e = np.asarray(e_traj, dtype=float)[:, : lpes.horizon]
    inside = np.all(np.abs(e) <= lpes.s[None] + tol, axis=(1, 2))
    return float(np.mean(inside))


def select_critical(batch: ScenarioBatch, model: GpModel | None, cfg: RiskEngineConfig, plan: MpcPlan,
                    anc: AncillaryDesign, sys: UncertainLinearSystem, rng: np.random.Generator):
    """Pick the ``k_crit`` most critical candidates and simulate them exactly.

    With a trained ``model`` the pool is ranked by PCE. Without one (cold
    start) a random subsample of ``min(n_cand, cold_start_pool)`` candidates is
    ranked by its exact criticality instead. Returns
    ``(winners, gamma, e_traj, cold)``.
    """
    n = len(batch)
    cold = model is None
    if cold:
        pool = np.sort(rng.choice(n, size=min(n, cfg.cold_start_pool), replace=False))
        gamma_pool, _ = criticality_batch(batch.take(pool), plan, anc, sys)
        order = pool[rank_desc(gamma_pool)]
    else:
        order = rank_desc(pce(model, extract_features_batch(batch, sys), cfg.kappa_ucb))
    winners = batch.take(order[: cfg.k_crit])
    gamma, e = criticality_batch(winners, plan, anc, sys)
    return winners, gamma, e, cold


def bootstrap_gp(sys: UncertainLinearSystem, plan: MpcPlan, cfg: RiskEngineConfig, rng: np.random.Generator,
                 anc: AncillaryDesign, half_width=None) -> GpModel:
    """GP fitted (with optimized hyperparameters) to ``n_seed_train`` random scenarios."""
    hw = candidate_half_width(sys.d_support) if half_width is None else half_width
    batch = generate_candidates(sys, hw, plan.horizon, cfg.n_seed_train, rng)
    gamma, _ = criticality_batch(batch, plan, anc, sys)
    x = extract_features_batch(batch, sys)
    mean = float(np.mean(gamma))
    res = optimize_hyperparams(x, gamma, cfg.gp_restarts, cfg.gp_max_iter, rng, prior_mean=mean)
    return fit(x, gamma, res.hyper, prior_mean=mean)


def update_lpes(plan: MpcPlan, model: GpModel | None, cfg: RiskEngineConfig, sys: UncertainLinearSystem,
                anc: AncillaryDesign, rng: np.random.Generator, half_width=None, step: int = 0,
                reoptimize: bool = False) -> tuple[LpesSupport, GpModel]:
    """One stateless LPES cycle: candidates, ranking, exact simulation, GP refit.

    The winners' exact criticalities are appended to the model's training set
    (oldest points dropped beyond ``gp_capacity``) and the prior mean is reset
    to their average. Hyperparameters are kept unless ``reoptimize`` is set or
    there was no model yet; a single training point gets the defaults.
    """
    hw = candidate_half_width(sys.d_support) if half_width is None else half_width
    batch = generate_candidates(sys, hw, plan.horizon, cfg.n_cand, rng)
    winners, gamma, e, _ = select_critical(batch, model, cfg, plan, anc, sys, rng)
    lpes = lpes_from_errors(e, plan.horizon, step)
    feats = extract_features_batch(winners, sys)
    if model is None:
        x, y = feats, gamma
    else:
        x = np.vstack([model.x_train, feats])[-cfg.gp_capacity:]
        y = np.concatenate([model.y_train, gamma])[-cfg.gp_capacity:]
    mean = float(np.mean(y))
    if len(y) < 2:
        hyper = GpHyperparams.default(x.shape[1])  # nothing to optimize against
    elif model is None or reoptimize:
        hyper = optimize_hyperparams(x, y, cfg.gp_restarts, cfg.gp_max_iter, rng, prior_mean=mean).hyper
    else:
        hyper = model.hyper
    return lpes, fit(x, y, hyper, prior_mean=mean)


class RiskEngine:
    """Owns the GP surrogate, the disturbance history and the engine RNG."""

    def __init__(self, sys: UncertainLinearSystem, anc: AncillaryDesign, cfg: RiskEngineConfig,
                 base_support: Box, horizon: int, rng: np.random.Generator):
        self.sys = sys
        self.anc = anc
        self.cfg = cfg
        self.base_support = base_support
        self.horizon = horizon
        self.rng = rng
        self.surrogate = GpSurrogate(
            feature_dim(sys.n_d), cfg.gp_capacity, restarts=cfg.gp_restarts,
            max_iter=cfg.gp_max_iter, rng=rng,
        )
        self.history: list = []

    def observe(self, d_est):
        """Record one disturbance estimate; only the last ``history_w`` are kept."""
        self.history.append(np.asarray(d_est, dtype=float))
        if len(self.history) > self.cfg.history_w:
            del self.history[0]

    def half_width(self) -> np.ndarray:
        recent = np.array(self.history) if self.history else None
        return candidate_half_width(self.base_support, recent, self.cfg.inflation)

    def candidates(self, n: int) -> ScenarioBatch:
        return generate_candidates(self.sys, self.half_width(), self.horizon, n, self.rng)

    def bootstrap(self, plan: MpcPlan) -> GpModel:
        """Seed the surrogate with exact criticalities of random scenarios."""
        batch = self.candidates(self.cfg.n_seed_train)
        gamma, _ = criticality_batch(batch, plan, self.anc, self.sys)
        self.surrogate.add(extract_features_batch(batch, self.sys), gamma)
        return self.surrogate.refit()

    def update(self, plan: MpcPlan, step: int = 0) -> tuple[LpesSupport, EngineCycle]:
        cfg = self.cfg
        hw = self.half_width()
        batch = generate_candidates(self.sys, hw, self.horizon, cfg.n_cand, self.rng)
        winners, gamma, e, cold = select_critical(batch, self.surrogate.model, cfg, plan, self.anc,
                                                  self.sys, self.rng)
        lpes = lpes_from_errors(e, self.horizon, step)
        self.surrogate.add(extract_features_batch(winners, self.sys), gamma)
        model = self.surrogate.refit()
        cycle = EngineCycle(step, lpes.s.max(axis=0), gamma, log_marginal_likelihood(model),
                            model.n, cold, hw)
        return lpes, cycle

    def coverage(self, lpes: LpesSupport, plan: MpcPlan, n: int, rng: np.random.Generator) -> float:
        """Empirical LPES coverage on ``n`` fresh scenarios from the candidate law."""
        batch = generate_candidates(self.sys, self.half_width(), self.horizon, n, rng)
        return lpes_coverage(lpes, simulate_error_batch(batch, plan, self.anc, self.sys))
