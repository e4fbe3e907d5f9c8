"""Error propagation under uncertainty scenarios, Lyapunov criticality and features.

A scenario fixes the disturbance sequence and the plant matrices over one
prediction horizon. Propagating the tube error along a nominal plan and
measuring how far the Lyapunov function ``V(e) = e' P_e e`` grows beyond its
certified decay gives the scenario's criticality.

Most functions come in two flavours: a single-scenario form operating on an
:class:`UncertaintyScenario` and a vectorized ``*_batch`` form operating on a
:class:`ScenarioBatch`, which the risk engine uses for its candidate pools.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .system import Box, UncertainLinearSystem
from .tube import AncillaryDesign, MpcPlan

N_TEMPORAL = 8
N_SPECTRAL = 3


@dataclass(frozen=True)
class UncertaintyScenario:
    """Disturbances and plant matrices for the ``N`` steps of one horizon."""

    d_seq: np.ndarray
    a_seq: np.ndarray
    b_seq: np.ndarray

    def __post_init__(self):
        d = np.atleast_2d(np.asarray(self.d_seq, dtype=float))
        a = np.asarray(self.a_seq, dtype=float)
        b = np.asarray(self.b_seq, dtype=float)
        n = d.shape[0]
        if a.ndim != 3 or b.ndim != 3 or a.shape[0] != n or b.shape[0] != n:
            raise ContractViolation("a_seq and b_seq must hold one matrix per disturbance step")
        object.__setattr__(self, "d_seq", d)
        object.__setattr__(self, "a_seq", a)
        object.__setattr__(self, "b_seq", b)

    @property
    def horizon(self) -> int:
        return self.d_seq.shape[0]

    @classmethod
    def nominal(cls, sys: UncertainLinearSystem, d_seq) -> "UncertaintyScenario":
        d = np.atleast_2d(np.asarray(d_seq, dtype=float))
        n = d.shape[0]
        return cls(d, np.repeat(sys.a_nom[None], n, 0), np.repeat(sys.b_nom[None], n, 0))

    @classmethod
    def zero(cls, sys: UncertainLinearSystem, horizon: int) -> "UncertaintyScenario":
        return cls.nominal(sys, np.zeros((horizon, sys.n_d)))

    def check(self, sys: UncertainLinearSystem, d_support: Box | None = None, tol: float = 1e-12):
        """Raise if the scenario leaves the uncertainty box or the disturbance support."""
        if self.d_seq.shape[1] != sys.n_d:
            raise ContractViolation("disturbance dimension does not match the system")
        if self.a_seq.shape[1:] != sys.a_nom.shape or self.b_seq.shape[1:] != sys.b_nom.shape:
            raise ContractViolation("scenario matrices do not match the system")
        for a, b in zip(self.a_seq, self.b_seq):
            if not sys.contains(a, b, tol):
                raise ContractViolation("scenario matrices leave the interval uncertainty box")
        if d_support is not None and not all(d_support.contains(d, tol) for d in self.d_seq):
            raise ContractViolation("scenario disturbance leaves the sampling support")


@dataclass(frozen=True)
class ScenarioBatch:
    """``M`` scenarios stacked along a leading axis."""

    d: np.ndarray  # (M, N, n_d)
    a: np.ndarray  # (M, N, n_x, n_x)
    b: np.ndarray  # (M, N, n_x, n_u)

    def __len__(self) -> int:
        return self.d.shape[0]

    def __getitem__(self, i: int) -> UncertaintyScenario:
        return UncertaintyScenario(self.d[i], self.a[i], self.b[i])

    def take(self, idx) -> "ScenarioBatch":
        idx = np.asarray(idx, dtype=int)
        return ScenarioBatch(self.d[idx], self.a[idx], self.b[idx])

    @classmethod
    def stack(cls, scenarios) -> "ScenarioBatch":
        scenarios = list(scenarios)
        return cls(
            np.stack([s.d_seq for s in scenarios]),
            np.stack([s.a_seq for s in scenarios]),
            np.stack([s.b_seq for s in scenarios]),
        )


def _plan_arrays(plan: MpcPlan, horizon: int):
    if plan.horizon != horizon:
        raise ContractViolation(f"plan horizon {plan.horizon} does not match scenario length {horizon}")
    return np.asarray(plan.z_seq, dtype=float), np.asarray(plan.v_seq, dtype=float)


def simulate_error_batch(batch: ScenarioBatch, plan: MpcPlan, anc: AncillaryDesign, sys) -> np.ndarray:
    """Error trajectories ``(M, N+1, n_x)`` of the ancillary-controlled plant.

    The true state ``x = z + e`` is driven with ``u = v + K_e e`` through each
    scenario's matrices, so every mismatch term is kept, including the one
    acting on the error itself.
    """
    m, n = batch.d.shape[:2]
    z, v = _plan_arrays(plan, n)
    k_e = anc.k_e
    a_cl = sys.a_nom + sys.b_nom @ k_e
    e = np.zeros((m, n + 1, sys.n_x))
    for k in range(n):
        da = batch.a[:, k] - sys.a_nom
        db = batch.b[:, k] - sys.b_nom
        ek = e[:, k]
        nxt = ek @ a_cl.T
        nxt += np.einsum("mij,mj->mi", da, ek + z[k])
        nxt += np.einsum("mij,mj->mi", db, v[k] + ek @ k_e.T)
        nxt += batch.d[:, k] @ sys.g.T
        e[:, k + 1] = nxt
    return e


def simulate_error(zeta: UncertaintyScenario, plan: MpcPlan, anc: AncillaryDesign, sys) -> np.ndarray:
    """Error trajectory ``e_0 .. e_N`` (with ``e_0 = 0``) for a single scenario."""
    batch = ScenarioBatch(zeta.d_seq[None], zeta.a_seq[None], zeta.b_seq[None])
    return simulate_error_batch(batch, plan, anc, sys)[0]


def violation_index(e_traj, p_e, alpha_e: float) -> np.ndarray:
    """One-step Lyapunov violation ``V(e_{k+1}) - (1 - alpha_e) V(e_k)`` for ``k < N``.

    Accepts a single trajectory ``(N+1, n_x)`` or a batch ``(M, N+1, n_x)``.
    """
    e = np.asarray(e_traj, dtype=float)
    v = np.einsum("...i,ij,...j->...", e, p_e, e)
    return v[..., 1:] - (1.0 - alpha_e) * v[..., :-1]


def criticality(zeta: UncertaintyScenario, plan: MpcPlan, anc: AncillaryDesign, sys) -> float:
    """Largest one-step violation over the horizon."""
    e = simulate_error(zeta, plan, anc, sys)
    return float(np.max(violation_index(e, anc.p_e, anc.alpha_e)))


def criticality_batch(batch: ScenarioBatch, plan: MpcPlan, anc: AncillaryDesign, sys):
    """Criticality values and error trajectories for every scenario in ``batch``."""
    e = simulate_error_batch(batch, plan, anc, sys)
    return np.max(violation_index(e, anc.p_e, anc.alpha_e), axis=1), e


def feature_dim(n_d: int) -> int:
    return N_TEMPORAL * n_d + 3 * n_d + N_SPECTRAL + 2


def extract_features_batch(batch: ScenarioBatch, sys: UncertainLinearSystem) -> np.ndarray:
    """Feature matrix ``(M, d_f)`` for a batch of scenarios.

    Columns, in order: the first eight samples of every disturbance channel
    (zero-padded for short horizons), per-channel mean, standard deviation and
    peak magnitude, the magnitudes of the three lowest nonzero DFT bins of the
    first channel, and the horizon-averaged Frobenius deviations of ``A`` and
    ``B`` from nominal.
    """
    m, n, n_d = batch.d.shape
    if n < 4:
        raise ContractViolation("feature extraction needs a horizon of at least 4 steps")
    temporal = np.zeros((m, N_TEMPORAL, n_d))
    keep = min(N_TEMPORAL, n)
    temporal[:, :keep] = batch.d[:, :keep]
    # channel-major flattening: all samples of channel 0, then channel 1, ...
    temporal = temporal.transpose(0, 2, 1).reshape(m, -1)
    mean = batch.d.mean(axis=1)
    std = batch.d.std(axis=1)
    peak = np.abs(batch.d).max(axis=1)
    spec = np.abs(np.fft.fft(batch.d[:, :, 0], axis=1))[:, 1 : 1 + N_SPECTRAL]
    da = np.linalg.norm(batch.a - sys.a_nom, axis=(2, 3)).mean(axis=1)
    db = np.linalg.norm(batch.b - sys.b_nom, axis=(2, 3)).mean(axis=1)
    return np.hstack([temporal, mean, std, peak, spec, da[:, None], db[:, None]])


def extract_features(zeta: UncertaintyScenario, sys: UncertainLinearSystem) -> np.ndarray:
    batch = ScenarioBatch(zeta.d_seq[None], zeta.a_seq[None], zeta.b_seq[None])
    return extract_features_batch(batch, sys)[0]
