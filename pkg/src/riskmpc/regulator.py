"""Self-correcting stochastic approximation of the adaptive safety margin.

Every control step the regulator observes the chance-constraint value ``h``
of the new state and nudges the margin ``beta``. A learning event fires when
``h`` crosses a boundary ``c_m * beta`` below the constraint, which happens far
more often than a physical violation. The extra events from the buffer zone
``-c_m beta < h <= 0`` are compensated by raising the target from ``delta``
to ``delta + P(buffer)``, with the buffer probability estimated over a
sliding window. The margin then moves as::

    beta <- clip(beta + alpha * (1[learning] - delta_L) - gamma * (beta - beta_bar), 0, beta_max)

so learning events above target enlarge the margin and quiet periods shrink it.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace

from .errors import ContractViolation


@dataclass(frozen=True)
class RegulatorConfig:
    delta: float
    c_m: float = 1.0
    alpha_rate: float = 0.05
    gamma_rate: float = 1e-4
    beta_bar: float = 0.05
    beta_max: float = 0.5
    window_w: int = 100
    dynamic_target: bool = True

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ContractViolation(f"delta must lie in (0, 1), got {self.delta}")
        if self.c_m < 0:
            raise ContractViolation("c_m must be non-negative")
        if self.alpha_rate <= 0:
            raise ContractViolation("alpha_rate must be positive")
        if self.gamma_rate < 0 or self.gamma_rate > self.alpha_rate / 10.0:
            raise ContractViolation("gamma_rate must lie in [0, alpha_rate / 10]")
        if self.beta_max <= 0 or not 0.0 <= self.beta_bar <= self.beta_max:
            raise ContractViolation("need beta_max > 0 and 0 <= beta_bar <= beta_max")
        if self.window_w < 1:
            raise ContractViolation("window_w must be at least 1")

    @classmethod
    def naive(cls, delta: float, alpha_rate: float = 0.05, beta_bar: float = 0.05,
              beta_max: float = 0.5, window_w: int = 100) -> "RegulatorConfig":
        """Plain violation-driven update: no buffer, no target compensation, no reversion."""
        return cls(delta, 0.0, alpha_rate, 0.0, beta_bar, beta_max, window_w, dynamic_target=False)


@dataclass
class RegulatorState:
    beta: float
    window: deque = field(default_factory=deque)
    t: int = 0

    @classmethod
    def initial(cls, cfg: RegulatorConfig, beta0: float | None = None) -> "RegulatorState":
        beta0 = cfg.beta_bar if beta0 is None else beta0
        if not 0.0 <= beta0 <= cfg.beta_max:
            raise ContractViolation("initial beta must lie in [0, beta_max]")
        return cls(float(beta0), deque(maxlen=cfg.window_w), 0)


@dataclass(frozen=True)
class RegulatorStep:
    """What happened during one update (one row of the per-step log)."""

    h_val: float
    m_s: float
    violation: bool
    buffer: bool
    learning: bool
    buffer_prob: float
    delta_l: float
    beta_before: float
    beta_after: float


def learning_event(h_val: float, beta: float, c_m: float) -> bool:
    if beta < 0:
        raise ContractViolation("beta must be non-negative")
    return bool(h_val > -c_m * beta)


def buffer_probability(window) -> float:
    """Fraction of ``(h, m_s)`` pairs inside their own buffer ``-m_s < h <= 0``."""
    if len(window) == 0:
        return 0.0
    hits = sum(1 for h, m in window if -m < h <= 0.0)
    return hits / len(window)


def update_with_info(state: RegulatorState, cfg: RegulatorConfig, h_val: float):
    """Advance the regulator by one step; returns ``(new_state, RegulatorStep)``."""
    h_val = float(h_val)
    beta = state.beta
    m_s = cfg.c_m * beta
    learn = learning_event(h_val, beta, cfg.c_m)
    viol = h_val > 0.0
    buf = -m_s < h_val <= 0.0
    if int(learn) != int(viol) + int(buf):
        raise AssertionError(f"event decomposition broken at t={state.t}: h={h_val}, m_s={m_s}")

    window = deque(state.window, maxlen=cfg.window_w)
    window.append((h_val, m_s))
    p_buf = buffer_probability(window) if cfg.dynamic_target else 0.0
    delta_l = min(max(cfg.delta + p_buf, cfg.delta), 1.0)
    e_sa = float(learn) - delta_l
    raw = beta + cfg.alpha_rate * e_sa - cfg.gamma_rate * (beta - cfg.beta_bar)
    new_beta = min(max(raw, 0.0), cfg.beta_max)
    info = RegulatorStep(h_val, m_s, viol, buf, learn, p_buf, delta_l, beta, new_beta)
    return replace(state, beta=new_beta, window=window, t=state.t + 1), info


def update(state: RegulatorState, cfg: RegulatorConfig, h_val: float) -> RegulatorState:
    return update_with_info(state, cfg, h_val)[0]


class Regulator:
    """Mutable convenience wrapper used by the closed-loop simulator."""

    def __init__(self, cfg: RegulatorConfig, beta0: float | None = None, frozen: bool = False):
        self.cfg = cfg
        self.state = RegulatorState.initial(cfg, beta0)
        self.frozen = frozen

    @property
    def beta(self) -> float:
        return self.state.beta

    def step(self, h_val: float) -> RegulatorStep:
        new, info = update_with_info(self.state, self.cfg, h_val)
        if self.frozen:
            # keep the bookkeeping but hold the margin fixed
            new = replace(new, beta=self.state.beta)
            info = replace(info, beta_after=self.state.beta)
        self.state = new
        return info
