import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from riskmpc.criticality import (
    ScenarioBatch,
    UncertaintyScenario,
    criticality,
    criticality_batch,
    extract_features,
    extract_features_batch,
    feature_dim,
    simulate_error,
    violation_index,
)
from riskmpc.engine import generate_candidates
from riskmpc.errors import ContractViolation
from riskmpc.tube import MpcPlan, design_ancillary

N = 10


@pytest.fixture
def anc(dcdc_sys):
    return design_ancillary(dcdc_sys, np.diag([1.0, 10.0]), np.eye(1))


def rollout_plan(sys, x0, v):
    z = np.zeros((len(v) + 1, sys.n_x))
    z[0] = x0
    for k in range(len(v)):
        z[k + 1] = sys.a_nom @ z[k] + sys.b_nom @ v[k]
    return MpcPlan(z, np.asarray(v, dtype=float), 0.0, "solved")


def zero_plan(sys, n=N):
    return MpcPlan(np.zeros((n + 1, sys.n_x)), np.zeros((n, sys.n_u)), 0.0, "solved")


def random_scenario(sys, rng, n=N):
    batch = generate_candidates(sys, np.array([0.3, 0.3]), n, 2, rng)
    return batch[int(rng.integers(2))]


def test_zero_scenario_gives_zero_error(dcdc_sys, anc):
    plan = rollout_plan(dcdc_sys, [-1.0, 0.3], np.full((N, 1), 0.1))
    e = simulate_error(UncertaintyScenario.zero(dcdc_sys, N), plan, anc, dcdc_sys)
    assert np.array_equal(e, np.zeros((N + 1, 2)))
    assert criticality(UncertaintyScenario.zero(dcdc_sys, N), plan, anc, dcdc_sys) == 0.0


def test_single_impulse(dcdc_sys, anc):
    d = np.zeros((N, 2))
    d[0] = [0.1, 0.0]
    e = simulate_error(UncertaintyScenario.nominal(dcdc_sys, d), zero_plan(dcdc_sys), anc, dcdc_sys)
    a_cl = dcdc_sys.a_nom + dcdc_sys.b_nom @ anc.k_e
    assert np.array_equal(e[0], [0.0, 0.0])
    assert np.allclose(e[1], [0.1, 0.0], atol=1e-15)
    assert np.allclose(e[2], a_cl @ e[1], atol=1e-15)


def test_dual_simulation_oracle(dcdc_sys, anc):
    rng = np.random.default_rng(3)
    for _ in range(20):
        plan = rollout_plan(dcdc_sys, rng.normal(size=2), rng.uniform(-0.2, 0.2, size=(N, 1)))
        zeta = random_scenario(dcdc_sys, rng)
        # true and nominal plants simulated separately
        x = plan.z_seq[0].copy()
        oracle = [x - plan.z_seq[0]]
        for k in range(N):
            u = plan.v_seq[k] + anc.k_e @ (x - plan.z_seq[k])
            x = zeta.a_seq[k] @ x + zeta.b_seq[k] @ u + dcdc_sys.g @ zeta.d_seq[k]
            oracle.append(x - plan.z_seq[k + 1])
        e = simulate_error(zeta, plan, anc, dcdc_sys)
        assert np.max(np.abs(e - np.array(oracle))) <= 1e-10


def test_length_mismatch(dcdc_sys, anc):
    with pytest.raises(ContractViolation):
        simulate_error(UncertaintyScenario.zero(dcdc_sys, 5), zero_plan(dcdc_sys), anc, dcdc_sys)


def test_violation_index_examples(anc):
    assert np.array_equal(violation_index(np.zeros((N + 1, 2)), anc.p_e, anc.alpha_e), np.zeros(N))
    v = np.array([1.0, 0.0]) / np.sqrt(anc.p_e[0, 0])
    e = np.zeros((3, 2))
    e[1] = v
    assert violation_index(e, anc.p_e, anc.alpha_e)[0] == pytest.approx(1.0, abs=1e-14)


def test_undriven_trajectory_decays(dcdc_sys, anc):
    d = np.zeros((N, 2))
    d[0] = [0.2, -0.1]
    e = simulate_error(UncertaintyScenario.nominal(dcdc_sys, d), zero_plan(dcdc_sys), anc, dcdc_sys)
    assert np.all(violation_index(e, anc.p_e, anc.alpha_e)[1:] <= 1e-14)


def test_criticality_scales_quadratically(dcdc_sys, anc):
    rng = np.random.default_rng(0)
    d = rng.uniform(-0.1, 0.1, size=(N, 2))
    g1 = criticality(UncertaintyScenario.nominal(dcdc_sys, d), zero_plan(dcdc_sys), anc, dcdc_sys)
    g2 = criticality(UncertaintyScenario.nominal(dcdc_sys, 2 * d), zero_plan(dcdc_sys), anc, dcdc_sys)
    assert g2 == pytest.approx(4 * g1, rel=1e-10)


def test_criticality_is_max_of_index(dcdc_sys, anc):
    rng = np.random.default_rng(1)
    plan = rollout_plan(dcdc_sys, [-1.0, 0.0], rng.uniform(-0.2, 0.2, size=(N, 1)))
    batch = generate_candidates(dcdc_sys, np.array([0.2, 0.2]), N, 30, rng)
    gam, e = criticality_batch(batch, plan, anc, dcdc_sys)
    for i in range(len(batch)):
        single = criticality(batch[i], plan, anc, dcdc_sys)
        assert single == pytest.approx(gam[i], rel=1e-13)
        assert single == np.max(violation_index(simulate_error(batch[i], plan, anc, dcdc_sys), anc.p_e, anc.alpha_e))


def test_zero_padding_leaves_criticality(dcdc_sys, anc):
    rng = np.random.default_rng(2)
    d = rng.uniform(-0.1, 0.1, size=(N, 2))
    d[-3:] = 0.0
    short = UncertaintyScenario.nominal(dcdc_sys, d[:-3])
    full = UncertaintyScenario.nominal(dcdc_sys, d)
    g_short = criticality(short, zero_plan(dcdc_sys, N - 3), anc, dcdc_sys)
    g_full = criticality(full, zero_plan(dcdc_sys), anc, dcdc_sys)
    # the undriven tail only decays, so it cannot raise the maximum
    assert g_full == pytest.approx(g_short, abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5, allow_nan=False), st.integers(0, 2**31))
def test_error_linear_in_disturbance(alpha, seed):
    from riskmpc.simulator import DCDC_A, DCDC_B
    from riskmpc.system import Box, UncertainLinearSystem

    sys = UncertainLinearSystem(np.array(DCDC_A), np.array(DCDC_B), np.eye(2), 0.05, Box.symmetric([0.14, 0.14]))
    anc = design_ancillary(sys, np.diag([1.0, 10.0]), np.eye(1))
    d = np.random.default_rng(seed).uniform(-0.1, 0.1, size=(N, 2))
    plan = zero_plan(sys)
    e1 = simulate_error(UncertaintyScenario.nominal(sys, d), plan, anc, sys)
    e2 = simulate_error(UncertaintyScenario.nominal(sys, alpha * d), plan, anc, sys)
    assert np.max(np.abs(e2 - alpha * e1)) <= 1e-10 * max(1.0, abs(alpha))


def test_scenario_check(dcdc_sys):
    zeta = UncertaintyScenario.zero(dcdc_sys, N)
    zeta.check(dcdc_sys, dcdc_sys.d_support)
    bad = UncertaintyScenario(np.zeros((N, 2)), np.repeat(2 * dcdc_sys.a_nom[None], N, 0),
                              np.repeat(dcdc_sys.b_nom[None], N, 0))
    with pytest.raises(ContractViolation):
        bad.check(dcdc_sys)
    with pytest.raises(ContractViolation):
        UncertaintyScenario.nominal(dcdc_sys, np.full((N, 2), 1.0)).check(dcdc_sys, dcdc_sys.d_support)


# -- features ---------------------------------------------------------------------


def test_feature_dim():
    assert feature_dim(2) == 27


def test_zero_scenario_features(dcdc_sys):
    f = extract_features(UncertaintyScenario.zero(dcdc_sys, N), dcdc_sys)
    assert f.shape == (27,) and np.array_equal(f, np.zeros(27))


def test_constant_signal_features(dcdc_sys):
    d = np.tile([0.05, -0.02], (N, 1))
    f = extract_features(UncertaintyScenario.nominal(dcdc_sys, d), dcdc_sys)
    mean, std, spec = f[16:18], f[18:20], f[22:25]
    assert np.allclose(mean, [0.05, -0.02], atol=1e-15)
    assert np.all(std <= 1e-15) and np.all(spec <= 1e-14)
    assert np.array_equal(f[0:8], np.full(8, 0.05)) and np.array_equal(f[8:16], np.full(8, -0.02))


def test_statistics_match_streaming_oracle(dcdc_sys):
    rng = np.random.default_rng(4)
    zeta = random_scenario(dcdc_sys, rng)
    f = extract_features(zeta, dcdc_sys)
    for ch in range(2):
        # Welford one-pass mean and variance
        mean, m2 = 0.0, 0.0
        for i, x in enumerate(zeta.d_seq[:, ch], start=1):
            delta = x - mean
            mean += delta / i
            m2 += delta * (x - mean)
        assert f[16 + ch] == pytest.approx(mean, abs=1e-12)
        assert f[18 + ch] == pytest.approx(np.sqrt(m2 / N), abs=1e-12)
        assert f[20 + ch] == np.max(np.abs(zeta.d_seq[:, ch]))


def test_parametric_features(dcdc_sys):
    rng = np.random.default_rng(5)
    zeta = random_scenario(dcdc_sys, rng)
    f = extract_features(zeta, dcdc_sys)
    da = np.mean([np.linalg.norm(a - dcdc_sys.a_nom) for a in zeta.a_seq])
    db = np.mean([np.linalg.norm(b - dcdc_sys.b_nom) for b in zeta.b_seq])
    assert f[25] == pytest.approx(da, rel=1e-12) and f[26] == pytest.approx(db, rel=1e-12)


def test_short_horizon_rejected(dcdc_sys):
    with pytest.raises(ContractViolation):
        extract_features(UncertaintyScenario.zero(dcdc_sys, 3), dcdc_sys)


def test_batch_features_match_single(dcdc_sys):
    batch = generate_candidates(dcdc_sys, np.array([0.2, 0.2]), 6, 5, np.random.default_rng(6))
    fb = extract_features_batch(batch, dcdc_sys)
    assert fb.shape == (5, 27) and np.all(np.isfinite(fb))
    for i in range(5):
        assert np.array_equal(fb[i], extract_features(batch[i], dcdc_sys))
    # horizon 6 < 8: temporal block zero-padded
    assert np.array_equal(fb[:, 6:8], np.zeros((5, 2)))
    stacked = ScenarioBatch.stack([batch[i] for i in range(5)])
    assert np.array_equal(stacked.d, batch.d)
