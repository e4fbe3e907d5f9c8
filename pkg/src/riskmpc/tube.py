"""Tube MPC with adaptive constraint tightening.

The nominal trajectory ``(z, v)`` is optimized under constraints shrunk by the
support function of the total uncertainty set, i.e. the learned per-step box
``S_k`` (support vector ``s_k``) enlarged by an l-infinity ball of radius
``beta``. A single non-negative slack relaxes every soft row and is penalized
linearly so the QP is always feasible.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla
from scipy.optimize import linprog

from .errors import ContractViolation, DesignError
from .qp import INF, SOLVED, QpSettings, QpSolver
from .system import PolytopeConstraint, UncertainLinearSystem

log = logging.getLogger(__name__)

L1_MAX = "l1_max"
EXACT_SUPPORT = "exact_support"
TIGHTENING_MODES = (L1_MAX, EXACT_SUPPORT)

# Which learned box tightens which predicted step. "aligned": z_k and v_k use
# S_k. "lagged": z_{k+1} and v_{k+1} use S_k, so the first predicted state is
# protected by the margin alone and the newest one-step innovation is left to
# the risk regulator.
ALIGNED = "aligned"
LAGGED = "lagged"


@dataclass(frozen=True)
class AncillaryDesign:
    k_e: np.ndarray
    p_e: np.ndarray
    alpha_e: float


@dataclass(frozen=True)
class TerminalIngredients:
    p_f: np.ndarray
    k_f: np.ndarray
    x_f: PolytopeConstraint | None


@dataclass(frozen=True)
class MpcConfig:
    horizon_n: int
    q_mat: np.ndarray
    r_mat: np.ndarray
    p_mat: np.ndarray
    rho_slack: float = 1e6
    tightening_mode: str = L1_MAX
    alignment: str = ALIGNED
    input_tightening: bool = True
    terminal_set: str = "mcais"

    def __post_init__(self):
        q = np.atleast_2d(np.asarray(self.q_mat, dtype=float))
        r = np.atleast_2d(np.asarray(self.r_mat, dtype=float))
        p = np.atleast_2d(np.asarray(self.p_mat, dtype=float))
        object.__setattr__(self, "q_mat", q)
        object.__setattr__(self, "r_mat", r)
        object.__setattr__(self, "p_mat", p)
        if self.horizon_n < 1:
            raise ContractViolation("horizon_n must be positive")
        if np.linalg.eigvalsh(0.5 * (q + q.T)).min() < -1e-10:
            raise ContractViolation("q_mat must be positive semidefinite")
        if np.linalg.eigvalsh(0.5 * (r + r.T)).min() <= 0:
            raise ContractViolation("r_mat must be positive definite")
        if np.linalg.eigvalsh(0.5 * (p + p.T)).min() <= 0:
            raise ContractViolation("p_mat must be positive definite")
        if self.rho_slack < 1e4 * np.trace(q):
            raise ContractViolation("rho_slack must be at least 1e4 * trace(q_mat)")
        if self.tightening_mode not in TIGHTENING_MODES:
            raise ContractViolation(f"unknown tightening_mode {self.tightening_mode!r}")
        if self.alignment not in (ALIGNED, LAGGED):
            raise ContractViolation(f"unknown alignment {self.alignment!r}")
        if self.terminal_set not in ("mcais", "none"):
            raise ContractViolation(f"unknown terminal_set {self.terminal_set!r}")


@dataclass
class MpcPlan:
    z_seq: np.ndarray
    v_seq: np.ndarray
    slack: float
    qp_status: str
    fallback: bool = False
    iterations: int = 0
    cost: float = float("nan")
    y_dual: np.ndarray | None = field(default=None, repr=False)

    @property
    def horizon(self) -> int:
        return self.v_seq.shape[0]


@dataclass(frozen=True)
class LpesSupport:
    """Per-step support vectors of the learned prediction-error box."""

    s: np.ndarray
    update_step: int = 0

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.s, dtype=float))
        if np.any(s < 0) or not np.all(np.isfinite(s)):
            raise ContractViolation("LPES support vectors must be finite and non-negative")
        object.__setattr__(self, "s", s)

    @classmethod
    def zeros(cls, horizon: int, n_x: int) -> "LpesSupport":
        return cls(np.zeros((horizon, n_x)))

    @property
    def horizon(self) -> int:
        return self.s.shape[0]


def dare_gain(a, b, q, r) -> tuple[np.ndarray, np.ndarray]:
    """Riccati solution ``P`` and LQR gain ``K`` with ``u = K x``."""
    p = sla.solve_discrete_are(a, b, q, r)
    k = -np.linalg.solve(r + b.T @ p @ b, b.T @ p @ a)
    return p, k


def _lyapunov_test(mats, p, alpha, tol=1e-8) -> bool:
    for m in mats:
        if np.linalg.eigvalsh(m.T @ p @ m - (1.0 - alpha) * p).max() > tol:
            return False
    return True


def design_ancillary(
    sys: UncertainLinearSystem,
    q_mat,
    r_mat,
    vertex_cap: int = 4096,
    n_samples: int = 1000,
    rng: np.random.Generator | None = None,
) -> AncillaryDesign:
    """Error feedback gain, Lyapunov matrix and decay rate common to all of Delta.

    The gain is the nominal LQR gain for the MPC weights and ``P_e`` solves the
    Lyapunov equation of the nominal closed loop. The decay rate is the largest
    ``alpha`` (16 bisection steps) for which the Lyapunov inequality holds at
    every interval vertex, or at ``n_samples`` random vertices when there are
    more than ``vertex_cap`` of them.
    """
    q = np.atleast_2d(np.asarray(q_mat, dtype=float))
    r = np.atleast_2d(np.asarray(r_mat, dtype=float))
    _, k = dare_gain(sys.a_nom, sys.b_nom, q, r)
    a_cl = sys.a_nom + sys.b_nom @ k
    if np.max(np.abs(np.linalg.eigvals(a_cl))) >= 1.0:
        raise DesignError("nominal pair is not stabilizable by the LQR design")
    p_e = sla.solve_discrete_lyapunov(a_cl.T, q + k.T @ r @ k)
    p_e = 0.5 * (p_e + p_e.T)

    n_vert = 2 ** sys.n_uncertain_entries()
    if n_vert <= vertex_cap:
        pairs = list(sys.vertices())
    else:
        rng = rng or np.random.default_rng(0)
        pairs = [sys.random_vertex(rng) for _ in range(n_samples)]
    mats = [a + b @ k for a, b in pairs]

    if not _lyapunov_test(mats, p_e, 1e-4):
        raise DesignError("Delta too large for common Lyapunov certificate")
    lo, hi = 1e-4, 1.0
    for _ in range(16):
        mid = 0.5 * (lo + hi)
        if _lyapunov_test(mats, p_e, mid):
            lo = mid
        else:
            hi = mid
    return AncillaryDesign(k, p_e, lo)


def tightening_amount(row, s_k, beta: float, mode: str = L1_MAX) -> float:
    """Tightening of one constraint row by ``S_k (+) beta * B_inf``.

    ``l1_max`` bounds the box by its largest half-width, ``||row||_1 (max s + beta)``;
    ``exact_support`` is the exact support function and never exceeds it.
    """
    row = np.asarray(row, dtype=float)
    s_k = np.asarray(s_k, dtype=float)
    if np.any(s_k < 0) or beta < 0:
        raise ContractViolation("support vector and margin must be non-negative")
    norm1 = float(np.sum(np.abs(row)))
    if mode == L1_MAX:
        return norm1 * (float(np.max(s_k, initial=0.0)) + beta)
    if mode == EXACT_SUPPORT:
        return float(np.abs(row) @ s_k) + beta * norm1
    raise ContractViolation(f"unknown tightening mode {mode!r}")


def _row_tightenings(c_mat, s_k, beta, mode) -> np.ndarray:
    return np.array([tightening_amount(row, s_k, beta, mode) for row in c_mat])


def max_admissible_set(a_cl, h_mat, h_vec, max_iter: int = 50, tol: float = 1e-9) -> PolytopeConstraint:
    """Maximal constraint-admissible invariant set of ``x+ = a_cl x`` in ``{h x <= g}``."""
    h_mat = np.atleast_2d(np.asarray(h_mat, dtype=float))
    h_vec = np.asarray(h_vec, dtype=float)
    n = a_cl.shape[0]
    big_h = h_mat.copy()
    big_g = h_vec.copy()
    power = a_cl.copy()
    for _ in range(max_iter):
        cand = h_mat @ power
        redundant = True
        for row, bound in zip(cand, h_vec):
            res = linprog(-row, A_ub=big_h, b_ub=big_g, bounds=[(None, None)] * n, method="highs")
            if res.status != 0 or -res.fun > bound + tol:
                redundant = False
                break
        if redundant:
            return _prune(PolytopeConstraint(big_h, big_g), tol)
        big_h = np.vstack([big_h, cand])
        big_g = np.concatenate([big_g, h_vec])
        power = power @ a_cl
    raise DesignError(f"invariant set iteration did not converge in {max_iter} steps")


def _prune(poly: PolytopeConstraint, tol: float) -> PolytopeConstraint:
    keep = list(range(poly.n_rows))
    n = poly.dim
    i = 0
    while i < len(keep):
        idx = keep[i]
        others = [j for j in keep if j != idx]
        if not others:
            break
        res = linprog(
            -poly.c_mat[idx], A_ub=poly.c_mat[others], b_ub=poly.c_vec[others],
            bounds=[(None, None)] * n, method="highs",
        )
        if res.status == 0 and -res.fun <= poly.c_vec[idx] + tol:
            keep.pop(i)
        else:
            i += 1
    return PolytopeConstraint(poly.c_mat[keep], poly.c_vec[keep])


def is_invariant(poly: PolytopeConstraint, a_cl, tol: float = 1e-9) -> bool:
    n = poly.dim
    for row, bound in zip(poly.c_mat @ a_cl, poly.c_vec):
        res = linprog(-row, A_ub=poly.c_mat, b_ub=poly.c_vec, bounds=[(None, None)] * n, method="highs")
        if res.status != 0 or -res.fun > bound + tol:
            return False
    return True


def control_action(plan: MpcPlan, x_t, k_e) -> np.ndarray:
    """Applied input ``v_0 + K_e (x_t - z_0)``."""
    x_t = np.asarray(x_t, dtype=float)
    return plan.v_seq[0] + np.asarray(k_e) @ (x_t - plan.z_seq[0])


class TubeMpc:
    """Robust MPC with per-step tightening from an LPES and a scalar margin.

    The QP matrix structure is built once; every call to :meth:`build_and_solve`
    only rewrites the bound vectors, so the solver's factorizations are reused.
    """

    def __init__(
        self,
        sys: UncertainLinearSystem,
        state_con: PolytopeConstraint,
        input_con: PolytopeConstraint,
        cfg: MpcConfig,
        anc: AncillaryDesign | None = None,
        init_lpes: LpesSupport | None = None,
        init_beta: float = 0.0,
        qp_settings: QpSettings | None = None,
    ):
        self.sys = sys
        self.state_con = state_con
        self.input_con = input_con
        self.cfg = cfg
        self.anc = anc or design_ancillary(sys, cfg.q_mat, cfg.r_mat)
        n = cfg.horizon_n
        init_lpes = init_lpes or LpesSupport.zeros(n, sys.n_x)
        self.terminal = self._design_terminal(init_lpes, init_beta)
        self._build_structure()
        # the exact-penalty weight would dominate the cost scaling and stall ADMM
        q_ref = self.q_qp.copy()
        q_ref[self.i_eps] = 0.0
        self.solver = QpSolver(self.p_qp, self.a_qp, q_ref, qp_settings)

    # -- offline ingredients -------------------------------------------------

    def _step_box(self, lpes: LpesSupport, step: int) -> np.ndarray | None:
        """Learned box that tightens quantities at prediction step ``step``."""
        if self.cfg.alignment == ALIGNED:
            return lpes.s[step] if step < lpes.horizon else None
        return lpes.s[step - 1] if step >= 1 else None

    def _design_terminal(self, lpes: LpesSupport, beta: float) -> TerminalIngredients:
        k_f = self.anc.k_e
        p_f = self.cfg.p_mat
        if self.cfg.terminal_set == "none":
            return TerminalIngredients(p_f, k_f, None)
        mode = self.cfg.tightening_mode
        s_last = lpes.s[-1]
        x_bound = self.state_con.c_vec - _row_tightenings(self.state_con.c_mat, s_last, beta, mode)
        ck = self.input_con.c_mat @ k_f
        u_bound = self.input_con.c_vec
        if self.cfg.input_tightening:
            u_bound = u_bound - _row_tightenings(ck, s_last, beta, mode)
        rows = [(self.state_con.c_mat[i], x_bound[i]) for i in range(self.state_con.n_rows)]
        rows += [(ck[i], u_bound[i]) for i in range(self.input_con.n_rows)]
        # rows through or beyond the origin admit no invariant neighbourhood of it
        rows = [(r, b) for r, b in rows if b > 1e-9]
        if not rows:
            return TerminalIngredients(p_f, k_f, None)
        a_cl = self.sys.a_nom + self.sys.b_nom @ k_f
        x_f = max_admissible_set(a_cl, np.array([r for r, _ in rows]), np.array([b for _, b in rows]))
        return TerminalIngredients(p_f, k_f, x_f)

    def _build_structure(self):
        sys, cfg = self.sys, self.cfg
        n, nx, nu = cfg.horizon_n, sys.n_x, sys.n_u
        self.nz = nx * (n + 1)
        self.nv = nu * n
        self.n_var = self.nz + self.nv + 1
        self.i_eps = self.n_var - 1

        def zi(k):
            return slice(k * nx, (k + 1) * nx)

        def vi(k):
            return slice(self.nz + k * nu, self.nz + (k + 1) * nu)

        self._zi, self._vi = zi, vi
        rows = []
        # initial condition and dynamics
        for i in range(nx):
            r = np.zeros(self.n_var)
            r[i] = 1.0
            rows.append(r)
        for k in range(n):
            blk = np.zeros((nx, self.n_var))
            blk[:, zi(k + 1)] = np.eye(nx)
            blk[:, zi(k)] = -sys.a_nom
            blk[:, vi(k)] = -sys.b_nom
            rows.extend(blk)
        self.n_eq = len(rows)

        # soft state rows
        self.state_steps = list(range(1, n)) if cfg.alignment == ALIGNED else list(range(1, n + 1))
        self.state_row_start = len(rows)
        for k in self.state_steps:
            blk = np.zeros((self.state_con.n_rows, self.n_var))
            blk[:, zi(k)] = self.state_con.c_mat
            blk[:, self.i_eps] = -1.0
            rows.extend(blk)

        # hard input rows
        self.input_row_start = len(rows)
        for k in range(n):
            blk = np.zeros((self.input_con.n_rows, self.n_var))
            blk[:, vi(k)] = self.input_con.c_mat
            rows.extend(blk)

        # soft tightened input rows
        self.tight_input_steps = []
        if cfg.input_tightening:
            first = 0 if cfg.alignment == ALIGNED else 1
            self.tight_input_steps = list(range(first, n))
        self.tight_input_start = len(rows)
        for k in self.tight_input_steps:
            blk = np.zeros((self.input_con.n_rows, self.n_var))
            blk[:, vi(k)] = self.input_con.c_mat
            blk[:, self.i_eps] = -1.0
            rows.extend(blk)

        # terminal set
        self.terminal_start = len(rows)
        x_f = self.terminal.x_f
        if x_f is not None:
            blk = np.zeros((x_f.n_rows, self.n_var))
            blk[:, zi(n)] = x_f.c_mat
            blk[:, self.i_eps] = -1.0
            rows.extend(blk)

        # slack non-negativity
        r = np.zeros(self.n_var)
        r[self.i_eps] = 1.0
        rows.append(r)
        self.a_qp = np.array(rows)
        self.m = self.a_qp.shape[0]

        h = np.zeros((self.n_var, self.n_var))
        for k in range(n):
            h[zi(k), zi(k)] = 2.0 * cfg.q_mat
            h[vi(k), vi(k)] = 2.0 * cfg.r_mat
        h[zi(n), zi(n)] = 2.0 * cfg.p_mat
        self.p_qp = 0.5 * (h + h.T)
        self.q_qp = np.zeros(self.n_var)
        self.q_qp[self.i_eps] = cfg.rho_slack

        # bounds that never change
        self.l_base = np.full(self.m, -INF)
        self.u_base = np.full(self.m, INF)
        self.l_base[: self.n_eq] = 0.0
        self.u_base[: self.n_eq] = 0.0
        n_in = self.input_con.n_rows
        for j, k in enumerate(range(n)):
            s0 = self.input_row_start + j * n_in
            self.u_base[s0 : s0 + n_in] = self.input_con.c_vec
        if x_f is not None:
            self.u_base[self.terminal_start : self.terminal_start + x_f.n_rows] = x_f.c_vec
        self.l_base[-1] = 0.0

    # -- online --------------------------------------------------------------

    def bounds(self, x_t, lpes: LpesSupport, beta: float) -> tuple[np.ndarray, np.ndarray]:
        cfg = self.cfg
        nx = self.sys.n_x
        if lpes.horizon != cfg.horizon_n or lpes.s.shape[1] != nx:
            raise ContractViolation("LPES horizon or dimension does not match the controller")
        if beta < 0:
            raise ContractViolation("margin beta must be non-negative")
        l = self.l_base.copy()
        u = self.u_base.copy()
        l[:nx] = x_t
        u[:nx] = x_t
        mode = cfg.tightening_mode
        nr = self.state_con.n_rows
        zero = np.zeros(nx)
        for j, k in enumerate(self.state_steps):
            box = self._step_box(lpes, k)
            box = zero if box is None else box
            t = _row_tightenings(self.state_con.c_mat, box, beta, mode)
            s0 = self.state_row_start + j * nr
            u[s0 : s0 + nr] = self.state_con.c_vec - t
        ni = self.input_con.n_rows
        ck = self.input_con.c_mat @ self.anc.k_e
        for j, k in enumerate(self.tight_input_steps):
            box = self._step_box(lpes, k)
            box = zero if box is None else box
            t = _row_tightenings(ck, box, beta, mode)
            s0 = self.tight_input_start + j * ni
            # an empty tightened input set collapses to the origin instead of
            # forcing the shared slack positive
            u[s0 : s0 + ni] = np.maximum(self.input_con.c_vec - t, 0.0)
        return l, u

    def build_and_solve(self, x_t, lpes: LpesSupport, beta: float, warm: MpcPlan | None = None) -> MpcPlan:
        x_t = np.asarray(x_t, dtype=float)
        if x_t.shape != (self.sys.n_x,):
            raise ContractViolation("state dimension mismatch")
        l, u = self.bounds(x_t, lpes, beta)
        warm_x = warm_y = None
        if warm is not None and not warm.fallback:
            warm_x = self._pack(self._shift(warm))
            warm_y = warm.y_dual
        sol = self.solver.solve(self.q_qp, l, u, warm_x, warm_y)
        if sol.status != SOLVED:
            log.debug("QP returned %s after %d iterations", sol.status, sol.iterations)
            return self.fallback_plan(x_t, warm, sol.status)
        z_seq, v_seq, eps = self._unpack(sol.z_star)
        # ADMM tolerances can leave v a hair outside the hard input set
        v_seq = np.array([self._clip_input(v) for v in v_seq])
        z_seq = self._rollout(x_t, v_seq)
        eps = max(eps, 0.0)
        if eps < 1e-7:
            eps = 0.0
        return MpcPlan(z_seq, v_seq, eps, sol.status, False, sol.iterations, self.plan_cost(z_seq, v_seq), sol.y)

    def fallback_plan(self, x_t, warm: MpcPlan | None, status: str) -> MpcPlan:
        """Shifted previous plan with the terminal law appended."""
        if warm is not None:
            shifted = self._shift(warm)
            return replace(shifted, qp_status=status, fallback=True, y_dual=None)
        n = self.cfg.horizon_n
        z = np.zeros((n + 1, self.sys.n_x))
        v = np.zeros((n, self.sys.n_u))
        z[0] = x_t
        for k in range(n):
            v[k] = self._clip_input(self.terminal.k_f @ z[k])
            z[k + 1] = self.sys.a_nom @ z[k] + self.sys.b_nom @ v[k]
        return MpcPlan(z, v, 0.0, status, True, 0, self.plan_cost(z, v))

    def _clip_input(self, v):
        # scale toward the origin until the hard input polytope holds
        ratio = self.input_con.c_mat @ v / np.maximum(self.input_con.c_vec, 1e-12)
        worst = float(np.max(ratio, initial=0.0))
        return v / worst if worst > 1.0 else v

    def _shift(self, plan: MpcPlan) -> MpcPlan:
        k_f = self.terminal.k_f
        z_n = plan.z_seq[-1]
        v_new = k_f @ z_n
        z_new = self.sys.a_nom @ z_n + self.sys.b_nom @ v_new
        z_seq = np.vstack([plan.z_seq[1:], z_new])
        v_seq = np.vstack([plan.v_seq[1:], v_new])
        return MpcPlan(z_seq, v_seq, plan.slack, plan.qp_status, plan.fallback, 0, plan.cost, plan.y_dual)

    def _pack(self, plan: MpcPlan) -> np.ndarray:
        return np.concatenate([plan.z_seq.ravel(), plan.v_seq.ravel(), [plan.slack]])

    def _unpack(self, w):
        n, nx, nu = self.cfg.horizon_n, self.sys.n_x, self.sys.n_u
        z = w[: self.nz].reshape(n + 1, nx)
        v = w[self.nz : self.nz + self.nv].reshape(n, nu)
        return z, v, float(w[self.i_eps])

    def _rollout(self, x_t, v_seq) -> np.ndarray:
        z = np.empty((v_seq.shape[0] + 1, self.sys.n_x))
        z[0] = x_t
        for k in range(v_seq.shape[0]):
            z[k + 1] = self.sys.a_nom @ z[k] + self.sys.b_nom @ v_seq[k]
        return z

    def plan_cost(self, z_seq, v_seq) -> float:
        cfg = self.cfg
        c = sum(float(z @ cfg.q_mat @ z) for z in z_seq[:-1])
        c += sum(float(v @ cfg.r_mat @ v) for v in v_seq)
        return c + float(z_seq[-1] @ cfg.p_mat @ z_seq[-1])

    def dynamics_residual(self, plan: MpcPlan) -> float:
        z, v = plan.z_seq, plan.v_seq
        pred = z[:-1] @ self.sys.a_nom.T + v @ self.sys.b_nom.T
        return float(np.max(np.abs(z[1:] - pred), initial=0.0))

