import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from riskmpc.errors import ContractViolation
from riskmpc.regulator import (
    Regulator,
    RegulatorConfig,
    RegulatorState,
    buffer_probability,
    learning_event,
    update,
    update_with_info,
)
from riskmpc.simulator import run_synthetic, synthetic_h


def test_learning_event_examples():
    for beta in (0.0, 0.1, 0.5):
        assert learning_event(0.01, beta, 1.0)
    assert not learning_event(-0.5, 0.1, 1.0)
    # beta = 0 collapses to the violation trigger
    assert learning_event(1e-12, 0.0, 1.0)
    assert not learning_event(0.0, 0.0, 1.0)
    assert not learning_event(-1e-12, 0.0, 1.0)
    with pytest.raises(ContractViolation):
        learning_event(0.0, -0.1, 1.0)


def test_buffer_probability_examples():
    assert buffer_probability([]) == 0.0
    assert buffer_probability([(-0.5, 0.1), (-0.3, 0.2)]) == 0.0
    assert buffer_probability([(-0.05, 0.1), (0.02, 0.1), (-0.2, 0.1)]) == pytest.approx(1 / 3)
    # each entry is judged against its own recorded boundary
    assert buffer_probability([(-0.15, 0.2), (-0.15, 0.1)]) == 0.5


def test_buffer_probability_monte_carlo():
    rng = np.random.default_rng(0)
    window = [(h, 0.25) for h in rng.uniform(-1.0, 0.0, 10_000)]
    assert abs(buffer_probability(window) - 0.25) <= 0.02


def test_saturated_target_moves_only_by_reversion():
    cfg = RegulatorConfig(0.1, alpha_rate=0.05, gamma_rate=1e-3, beta_bar=0.05, window_w=1)
    state = RegulatorState.initial(cfg, beta0=0.3)
    new, info = update_with_info(state, cfg, -0.1)  # inside the buffer: learning event
    assert info.learning and info.delta_l == 1.0
    assert new.beta == pytest.approx(0.3 - 1e-3 * (0.3 - 0.05), abs=1e-15)


def test_quiet_step_shrinks_margin_by_alpha_delta():
    cfg = RegulatorConfig(0.1, alpha_rate=0.05, beta_bar=0.05)
    state = RegulatorState.initial(cfg)
    new, info = update_with_info(state, cfg, -1.0)
    assert not info.learning and info.delta_l == pytest.approx(0.1)
    assert new.beta == pytest.approx(0.05 - 0.005, abs=1e-15)
    assert new.t == 1 and len(new.window) == 1


def test_projection_clamps_both_ends():
    cfg = RegulatorConfig(0.1, alpha_rate=0.05, beta_max=0.5)
    assert update(RegulatorState.initial(cfg, 0.0), cfg, -1.0).beta == 0.0
    assert update(RegulatorState.initial(cfg, 0.5), cfg, 1.0).beta == 0.5


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1.0, 1.0, allow_nan=False), min_size=1, max_size=60),
       st.floats(0.0, 0.5), st.floats(0.0, 2.0))
def test_decomposition_and_bounds_hold_every_step(hs, beta0, c_m):
    cfg = RegulatorConfig(0.1, c_m=c_m, window_w=7)
    state = RegulatorState.initial(cfg, beta0)
    for h in hs:
        state, info = update_with_info(state, cfg, h)
        assert int(info.learning) == int(info.violation) + int(info.buffer)
        assert 0.0 <= state.beta <= cfg.beta_max
        assert len(state.window) <= cfg.window_w


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 0.5), st.floats(-0.3, 0.3))
def test_event_step_differs_by_exactly_alpha(beta, h_safe):
    cfg = RegulatorConfig(0.1, alpha_rate=0.05, beta_max=10.0, window_w=1, dynamic_target=False)
    s0 = RegulatorState.initial(cfg, beta + 1.0)  # keep clear of the projection
    quiet = update(s0, cfg, -100.0).beta
    event = update(s0, cfg, 100.0).beta
    assert event - quiet == pytest.approx(cfg.alpha_rate, abs=1e-12)


def test_frozen_regulator_keeps_margin():
    reg = Regulator(RegulatorConfig(0.1), beta0=0.2, frozen=True)
    for h in (1.0, -1.0, 0.5):
        info = reg.step(h)
        assert info.beta_after == 0.2
    assert reg.beta == 0.2 and reg.state.t == 3


def test_config_validation():
    with pytest.raises(ContractViolation):
        RegulatorConfig(0.0)
    with pytest.raises(ContractViolation):
        RegulatorConfig(0.1, alpha_rate=0.01, gamma_rate=0.01)
    with pytest.raises(ContractViolation):
        RegulatorConfig(0.1, beta_bar=0.6, beta_max=0.5)
    with pytest.raises(ContractViolation):
        RegulatorState.initial(RegulatorConfig(0.1), beta0=0.9)


def test_synthetic_law():
    rng = np.random.default_rng(1)
    for beta in (0.0, 0.2, 0.45):
        h = np.array([synthetic_h(beta, rng) for _ in range(20_000)])
        assert abs(np.mean(h > 0) - max(0.0, 0.5 - beta)) < 0.015


@pytest.mark.parametrize("delta", [0.05, 0.1, 0.2])
def test_full_scheme_converges_on_synthetic_plant(delta):
    betas = run_synthetic(RegulatorConfig(delta), 100_000, seed=3)
    assert abs(np.mean(betas[-10_000:]) - (0.5 - delta)) <= 0.05
