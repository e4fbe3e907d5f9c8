"""Uncertain discrete-time LTI plant, constraint polytopes and disturbance process.

The true plant evolves as ``x+ = A x + B u + G d`` where ``(A, B)`` lies in an
entry-wise relative interval box around the nominal pair and ``d`` is drawn
uniformly from an axis-aligned box whose size changes between epochs.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import ContractViolation


def _as_matrix(m, name: str) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(m, dtype=float))
    if arr.ndim != 2:
        raise ContractViolation(f"{name} must be a matrix, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``{x : lower <= x <= upper}``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ContractViolation("box bounds must be vectors of equal length")
        if np.any(lo > hi):
            raise ContractViolation("box lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def symmetric(cls, half_width) -> "Box":
        hw = np.atleast_1d(np.asarray(half_width, dtype=float))
        return cls(-hw, hw)

    @property
    def dim(self) -> int:
        return self.lower.size

    def scaled(self, factor: float) -> "Box":
        return Box(self.lower * factor, self.upper * factor)

    def contains(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))


@dataclass(frozen=True)
class UncertainLinearSystem:
    """Nominal model plus an interval box of admissible ``(A, B)`` realizations.

    Every entry of ``A`` and ``B`` may deviate from its nominal value by at most
    ``delta_rel`` times the magnitude of that nominal entry.
    """

    a_nom: np.ndarray
    b_nom: np.ndarray
    g: np.ndarray
    delta_rel: float
    d_support: Box

    def __post_init__(self):
        a = _as_matrix(self.a_nom, "a_nom")
        b = np.asarray(self.b_nom, dtype=float)
        if b.ndim == 1:
            b = b.reshape(-1, 1)
        g = _as_matrix(self.g, "g")
        n_x = a.shape[0]
        if a.shape != (n_x, n_x) or n_x < 1:
            raise ContractViolation(f"a_nom must be square, got {a.shape}")
        if b.shape[0] != n_x or b.shape[1] < 1:
            raise ContractViolation(f"b_nom shape {b.shape} inconsistent with n_x={n_x}")
        if g.shape[0] != n_x or g.shape[1] < 1:
            raise ContractViolation(f"g shape {g.shape} inconsistent with n_x={n_x}")
        if not 0.0 <= self.delta_rel < 1.0:
            raise ContractViolation(f"delta_rel must lie in [0, 1), got {self.delta_rel}")
        if not isinstance(self.d_support, Box):
            raise ContractViolation("d_support must be a Box")
        if self.d_support.dim != g.shape[1]:
            raise ContractViolation("d_support dimension does not match g")
        if not self.d_support.contains(np.zeros(g.shape[1])):
            raise ContractViolation("d_support must contain the origin")
        object.__setattr__(self, "a_nom", a)
        object.__setattr__(self, "b_nom", b)
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "delta_rel", float(self.delta_rel))

    @property
    def n_x(self) -> int:
        return self.a_nom.shape[0]

    @property
    def n_u(self) -> int:
        return self.b_nom.shape[1]

    @property
    def n_d(self) -> int:
        return self.g.shape[1]

    def a_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        hw = self.delta_rel * np.abs(self.a_nom)
        return self.a_nom - hw, self.a_nom + hw

    def b_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        hw = self.delta_rel * np.abs(self.b_nom)
        return self.b_nom - hw, self.b_nom + hw

    def contains(self, a, b, tol: float = 1e-12) -> bool:
        """Whether ``(a, b)`` lies inside the interval box."""
        a_lo, a_hi = self.a_bounds()
        b_lo, b_hi = self.b_bounds()
        return bool(
            np.all(a >= a_lo - tol) and np.all(a <= a_hi + tol)
            and np.all(b >= b_lo - tol) and np.all(b <= b_hi + tol)
        )

    def n_uncertain_entries(self) -> int:
        return int(np.count_nonzero(self.a_nom) + np.count_nonzero(self.b_nom))

    def vertices(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Enumerate the interval vertices of the uncertainty box.

        Entries whose nominal value is zero have zero width and are not
        branched on, so the count is ``2 ** n_uncertain_entries()``.
        """
        a_idx = np.flatnonzero(self.a_nom)
        b_idx = np.flatnonzero(self.b_nom)
        a_hw = (self.delta_rel * np.abs(self.a_nom)).ravel()
        b_hw = (self.delta_rel * np.abs(self.b_nom)).ravel()
        for signs in itertools.product((-1.0, 1.0), repeat=a_idx.size + b_idx.size):
            s = np.asarray(signs)
            a = self.a_nom.ravel().copy()
            b = self.b_nom.ravel().copy()
            a[a_idx] += s[: a_idx.size] * a_hw[a_idx]
            b[b_idx] += s[a_idx.size:] * b_hw[b_idx]
            yield a.reshape(self.a_nom.shape), b.reshape(self.b_nom.shape)

    def random_vertex(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        sa = rng.choice((-1.0, 1.0), size=self.a_nom.shape)
        sb = rng.choice((-1.0, 1.0), size=self.b_nom.shape)
        a = self.a_nom + sa * self.delta_rel * np.abs(self.a_nom)
        b = self.b_nom + sb * self.delta_rel * np.abs(self.b_nom)
        return a, b

    def random_interior(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        ua = rng.uniform(-1.0, 1.0, size=self.a_nom.shape)
        ub = rng.uniform(-1.0, 1.0, size=self.b_nom.shape)
        a = self.a_nom + ua * self.delta_rel * np.abs(self.a_nom)
        b = self.b_nom + ub * self.delta_rel * np.abs(self.b_nom)
        return a, b


@dataclass(frozen=True)
class PolytopeConstraint:
    """Half-space description ``{x : c_mat @ x <= c_vec}``.

    The origin must be feasible. Rows with ``c_vec == 0`` are allowed because
    the converter benchmark places its chance-constrained row through the origin.
    """

    c_mat: np.ndarray
    c_vec: np.ndarray

    def __post_init__(self):
        c = _as_matrix(self.c_mat, "c_mat")
        v = np.atleast_1d(np.asarray(self.c_vec, dtype=float))
        if v.shape != (c.shape[0],):
            raise ContractViolation("c_vec length must equal number of rows of c_mat")
        if np.any(v < 0):
            raise ContractViolation("origin must be feasible (c_vec >= 0)")
        object.__setattr__(self, "c_mat", c)
        object.__setattr__(self, "c_vec", v)

    @property
    def n_rows(self) -> int:
        return self.c_mat.shape[0]

    @property
    def dim(self) -> int:
        return self.c_mat.shape[1]

    def contains(self, x, tol: float = 0.0) -> bool:
        return bool(np.all(self.c_mat @ np.asarray(x, dtype=float) <= self.c_vec + tol))

    def h(self, x) -> np.ndarray:
        """Constraint function values ``C x - c`` (positive means violated)."""
        return self.c_mat @ np.asarray(x, dtype=float) - self.c_vec

    @classmethod
    def symmetric_box(cls, bound) -> "PolytopeConstraint":
        bound = np.atleast_1d(np.asarray(bound, dtype=float))
        n = bound.size
        return cls(np.vstack([np.eye(n), -np.eye(n)]), np.concatenate([bound, bound]))


@dataclass(frozen=True)
class DisturbanceSchedule:
    """Piecewise-constant scaling of a base disturbance box over time."""

    epochs: tuple[tuple[int, float], ...]
    base_support: Box

    def __post_init__(self):
        epochs = tuple((int(s), float(c)) for s, c in self.epochs)
        if not epochs or epochs[0][0] != 0:
            raise ContractViolation("first epoch must start at step 0")
        starts = [s for s, _ in epochs]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ContractViolation("epoch start steps must be strictly increasing")
        if any(c < 0 for _, c in epochs):
            raise ContractViolation("epoch scales must be non-negative")
        object.__setattr__(self, "epochs", epochs)

    @classmethod
    def stationary(cls, base_support: Box, scale: float = 1.0) -> "DisturbanceSchedule":
        return cls(((0, scale),), base_support)

    @classmethod
    def equal_epochs(cls, base_support: Box, scales: Sequence[float], total_steps: int):
        n = len(scales)
        length = total_steps // n
        return cls(tuple((i * length, s) for i, s in enumerate(scales)), base_support)

    def epoch_index(self, k: int) -> int:
        if k < 0:
            raise ContractViolation("step index must be non-negative")
        idx = 0
        for i, (start, _) in enumerate(self.epochs):
            if k >= start:
                idx = i
        return idx

    def scale_at(self, k: int) -> float:
        return self.epochs[self.epoch_index(k)][1]

    def support_at(self, k: int) -> Box:
        return self.base_support.scaled(self.scale_at(k))

    @property
    def max_scale(self) -> float:
        return max(c for _, c in self.epochs)


@dataclass(frozen=True)
class TrueRealization:
    a_true: np.ndarray
    b_true: np.ndarray
    rng_seed: int | None = None
    time_varying: bool = False


def step_true_plant(real: TrueRealization, sys: UncertainLinearSystem, x, u, d) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    d = np.atleast_1d(np.asarray(d, dtype=float))
    if x.shape != (sys.n_x,) or u.shape != (sys.n_u,) or d.shape != (sys.n_d,):
        raise ContractViolation(
            f"dimension mismatch: x{x.shape} u{u.shape} d{d.shape} for "
            f"n_x={sys.n_x}, n_u={sys.n_u}, n_d={sys.n_d}"
        )
    return real.a_true @ x + real.b_true @ u + sys.g @ d


def sample_disturbance(sched: DisturbanceSchedule, k: int, rng: np.random.Generator) -> np.ndarray:
    box = sched.support_at(k)
    # uniform(lo, hi) with lo == hi returns lo exactly
    return rng.uniform(box.lower, box.upper)


def sample_true_realization(
    sys: UncertainLinearSystem, rng: np.random.Generator, time_varying: bool = False
) -> TrueRealization:
    a, b = sys.random_interior(rng)
    if sys.delta_rel == 0.0:
        a, b = sys.a_nom.copy(), sys.b_nom.copy()
    return TrueRealization(a, b, time_varying=time_varying)


@dataclass
class Plant:
    """Stateful wrapper used by the simulator; owns the realization draw."""

    sys: UncertainLinearSystem
    real: TrueRealization
    rng: np.random.Generator = field(repr=False)

    def step(self, x, u, d) -> np.ndarray:
        if self.real.time_varying:
            self.real = sample_true_realization(self.sys, self.rng, time_varying=True)
        return step_true_plant(self.real, self.sys, x, u, d)
