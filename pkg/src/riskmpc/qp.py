"""Dense convex QP solver based on operator splitting.

Solves::

    minimize    0.5 z' P z + q' z
    subject to  l <= A z <= u

with an ADMM iteration in the style of OSQP: Ruiz equilibration, over-relaxation,
a residual-balancing penalty update, a primal-infeasibility certificate and a
final active-set polishing step. Infinite bounds are stored as ``+-INF`` with
``INF = 1e30``.

The problems solved here are small and dense (a few dozen variables), so the
reduced KKT matrix is inverted explicitly and cached per penalty value; the
factorization is reused across calls that only change ``q``, ``l`` and ``u``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import ContractViolation

INF = 1e30

SOLVED = "solved"
MAX_ITER = "max_iter"
PRIMAL_INFEASIBLE = "primal_infeasible"


@dataclass
class QpProblem:
    p_mat: np.ndarray
    q_vec: np.ndarray
    a_mat: np.ndarray
    l_vec: np.ndarray
    u_vec: np.ndarray

    def __post_init__(self):
        self.p_mat = np.atleast_2d(np.asarray(self.p_mat, dtype=float))
        self.q_vec = np.atleast_1d(np.asarray(self.q_vec, dtype=float))
        self.a_mat = np.atleast_2d(np.asarray(self.a_mat, dtype=float))
        self.l_vec = np.clip(np.atleast_1d(np.asarray(self.l_vec, dtype=float)), -INF, INF)
        self.u_vec = np.clip(np.atleast_1d(np.asarray(self.u_vec, dtype=float)), -INF, INF)
        n = self.q_vec.size
        m = self.l_vec.size
        if self.p_mat.shape != (n, n):
            raise ContractViolation(f"P must be {n}x{n}, got {self.p_mat.shape}")
        if self.a_mat.shape != (m, n) or self.u_vec.shape != (m,):
            raise ContractViolation("A, l, u dimensions are inconsistent")
        if np.max(np.abs(self.p_mat - self.p_mat.T), initial=0.0) > 1e-10:
            raise ContractViolation("P must be symmetric")
        if np.any(self.l_vec > self.u_vec):
            raise ContractViolation("l must not exceed u")

    @property
    def n(self) -> int:
        return self.q_vec.size

    @property
    def m(self) -> int:
        return self.l_vec.size

    def objective(self, z) -> float:
        z = np.asarray(z, dtype=float)
        return float(0.5 * z @ self.p_mat @ z + self.q_vec @ z)


@dataclass
class QpSettings:
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    eps_prim_inf: float = 1e-5
    max_iter: int = 20000
    check_every: int = 10
    adaptive_rho: bool = True
    adaptive_rho_interval: int = 50
    adaptive_rho_tolerance: float = 5.0
    scaling_iter: int = 10
    polish: bool = True
    # attempt an early polish once the ADMM residuals fall below this relative level
    early_polish_tol: float = 1e-2
    polish_refine_iter: int = 3
    polish_active_set_iter: int = 4
    polish_delta: float = 1e-9


@dataclass
class QpSolution:
    z_star: np.ndarray
    status: str
    primal_residual: float
    dual_residual: float
    iterations: int
    y: np.ndarray = field(repr=False)
    objective: float = float("nan")
    polished: bool = False


def check_kkt(prob: QpProblem, z, y) -> tuple[float, float, float]:
    """Infinity-norm KKT residuals of a primal-dual pair.

    Returns ``(primal_residual, dual_residual, complementarity_gap)`` where the
    dual sign convention is ``y_i > 0`` on an active upper bound and ``y_i < 0``
    on an active lower bound.
    """
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)
    if z.shape != (prob.n,) or y.shape != (prob.m,):
        raise ContractViolation("z and y must match the problem dimensions")
    az = prob.a_mat @ z
    prim = np.max(np.maximum(np.maximum(prob.l_vec - az, az - prob.u_vec), 0.0), initial=0.0)
    dual = np.max(np.abs(prob.p_mat @ z + prob.q_vec + prob.a_mat.T @ y), initial=0.0)
    y_up = np.maximum(y, 0.0)
    y_lo = np.maximum(-y, 0.0)
    with np.errstate(invalid="ignore"):
        gap_up = np.where(y_up > 0, y_up * np.abs(prob.u_vec - az), 0.0)
        gap_lo = np.where(y_lo > 0, y_lo * np.abs(az - prob.l_vec), 0.0)
    gap_up = np.where((y_up > 0) & (prob.u_vec >= INF), np.inf, gap_up)
    gap_lo = np.where((y_lo > 0) & (prob.l_vec <= -INF), np.inf, gap_lo)
    comp = np.max(np.maximum(gap_up, gap_lo), initial=0.0)
    return float(prim), float(dual), float(comp)


def _ruiz(p, a, q, iters):
    n = p.shape[0]
    m = a.shape[0]
    d = np.ones(n)
    e = np.ones(m)
    ps, as_ = p.copy(), a.copy()
    for _ in range(iters):
        col_p = np.max(np.abs(ps), axis=0, initial=0.0)
        col_a = np.max(np.abs(as_), axis=0, initial=0.0)
        nd = np.maximum(col_p, col_a)
        ne = np.max(np.abs(as_), axis=1, initial=0.0)
        nd = np.where(nd < 1e-4, 1.0, nd)
        ne = np.where(ne < 1e-4, 1.0, ne)
        dd = 1.0 / np.sqrt(nd)
        de = 1.0 / np.sqrt(ne)
        ps = dd[:, None] * ps * dd[None, :]
        as_ = de[:, None] * as_ * dd[None, :]
        d *= dd
        e *= de
    qs = d * q
    mean_col = np.mean(np.max(np.abs(ps), axis=0, initial=0.0))
    c_norm = max(mean_col, np.max(np.abs(qs), initial=0.0))
    c = 1.0 / c_norm if c_norm > 1e-4 else 1.0
    c = min(c, 1e4)
    return d, e, c


class QpSolver:
    """ADMM solver bound to a fixed ``(P, A)`` pair.

    ``q``, ``l`` and ``u`` are supplied per call so repeated solves (e.g. one
    per MPC step) reuse the equilibration and the cached KKT inverses.
    """

    def __init__(self, p_mat, a_mat, q_ref=None, settings: QpSettings | None = None):
        self.settings = settings or QpSettings()
        self.p = np.atleast_2d(np.asarray(p_mat, dtype=float))
        self.a = np.atleast_2d(np.asarray(a_mat, dtype=float))
        self.n = self.p.shape[0]
        self.m = self.a.shape[0]
        q_ref = np.zeros(self.n) if q_ref is None else np.asarray(q_ref, dtype=float)
        s = self.settings
        if s.scaling_iter > 0:
            self.d, self.e, self.c = _ruiz(self.p, self.a, q_ref, s.scaling_iter)
        else:
            self.d, self.e, self.c = np.ones(self.n), np.ones(self.m), 1.0
        self.ps = self.c * (self.d[:, None] * self.p * self.d[None, :])
        self.as_ = self.e[:, None] * self.a * self.d[None, :]
        self._inv_cache: dict = {}

    def _kkt_inverse(self, rho_vec: np.ndarray) -> np.ndarray:
        key = rho_vec.tobytes()
        inv = self._inv_cache.get(key)
        if inv is None:
            mat = self.ps + self.settings.sigma * np.eye(self.n) + self.as_.T @ (rho_vec[:, None] * self.as_)
            inv = sla.cho_solve(sla.cho_factor(mat), np.eye(self.n))
            if len(self._inv_cache) > 32:
                self._inv_cache.clear()
            self._inv_cache[key] = inv
        return inv

    def _rho_vector(self, rho, ls, us):
        rho_vec = np.full(self.m, rho)
        eq = np.abs(us - ls) < 1e-10
        rho_vec[eq] = rho * 1e3
        free = (ls <= -INF * 0.5) & (us >= INF * 0.5)
        rho_vec[free] = 1e-6
        return rho_vec

    def solve(self, q, l, u, warm_x=None, warm_y=None) -> QpSolution:
        s = self.settings
        q = np.asarray(q, dtype=float)
        l = np.clip(np.asarray(l, dtype=float), -INF, INF)
        u = np.clip(np.asarray(u, dtype=float), -INF, INF)
        d, e, c = self.d, self.e, self.c
        ps, as_ = self.ps, self.as_
        qs = c * d * q
        # keep the infinity sentinel unscaled so projections stay meaningful
        ls = np.where(l <= -INF, -INF, e * l)
        us = np.where(u >= INF, INF, e * u)

        x = np.zeros(self.n) if warm_x is None else np.asarray(warm_x, dtype=float) / d
        y = np.zeros(self.m) if warm_y is None else c * np.asarray(warm_y, dtype=float) / e
        z = np.clip(as_ @ x, ls, us)

        rho = s.rho
        rho_vec = self._rho_vector(rho, ls, us)
        kinv = self._kkt_inverse(rho_vec)
        alpha, sigma = s.alpha, s.sigma
        dinv_c = 1.0 / (c * d)
        einv = 1.0 / e

        status = MAX_ITER
        it = 0
        r_p = r_d = np.inf
        y_prev = y.copy()
        tried: set = set()
        for it in range(1, s.max_iter + 1):
            y_prev[:] = y
            xt = kinv @ (sigma * x - qs + as_.T @ (rho_vec * z - y))
            zt = as_ @ xt
            x = alpha * xt + (1.0 - alpha) * x
            zr = alpha * zt + (1.0 - alpha) * z
            z_new = np.minimum(np.maximum(zr + y / rho_vec, ls), us)
            y = y + rho_vec * (zr - z_new)
            z = z_new

            if it % s.check_every == 0 or it == s.max_iter:
                ax = as_ @ x
                px = ps @ x
                aty = as_.T @ y
                r_p = np.max(np.abs(einv * (ax - z)), initial=0.0)
                r_d = np.max(np.abs(dinv_c * (px + qs + aty)), initial=0.0)
                prim_scale = max(np.max(np.abs(einv * ax), initial=0.0), np.max(np.abs(einv * z), initial=0.0))
                dual_scale = max(
                    np.max(np.abs(dinv_c * px), initial=0.0),
                    np.max(np.abs(dinv_c * aty), initial=0.0),
                    np.max(np.abs(dinv_c * qs), initial=0.0),
                )
                if r_p <= s.eps_abs + s.eps_rel * prim_scale and r_d <= s.eps_abs + s.eps_rel * dual_scale:
                    status = SOLVED
                    break
                if (
                    s.polish
                    and r_p <= s.early_polish_tol * max(prim_scale, 1.0)
                    and r_d <= s.early_polish_tol * max(dual_scale, 1.0)
                ):
                    early = self._try_polish(q, l, u, d * x, e * y / c, tried)
                    if early is not None:
                        xp, yp, pp, dp, obj = early
                        return QpSolution(xp, SOLVED, pp, dp, it, yp, obj, polished=True)
                if self._primal_infeasible(y - y_prev, ls, us):
                    status = PRIMAL_INFEASIBLE
                    break
                if s.adaptive_rho and it % s.adaptive_rho_interval == 0:
                    num = r_p / max(prim_scale, 1e-10)
                    den = r_d / max(dual_scale, 1e-10)
                    rho_new = float(np.clip(rho * np.sqrt(num / max(den, 1e-20)), 1e-6, 1e6))
                    if rho_new > rho * s.adaptive_rho_tolerance or rho_new < rho / s.adaptive_rho_tolerance:
                        rho = rho_new
                        rho_vec = self._rho_vector(rho, ls, us)
                        kinv = self._kkt_inverse(rho_vec)

        x_out = d * x
        y_out = e * y / c
        prob = QpProblem(self.p, q, self.a, l, u)
        if status == PRIMAL_INFEASIBLE:
            prim, dual, _ = check_kkt(prob, x_out, y_out)
            return QpSolution(x_out, status, prim, dual, it, y_out, prob.objective(x_out))

        prim, dual, _ = check_kkt(prob, x_out, y_out)
        polished = False
        if s.polish:
            res = self._polish(prob, x_out, y_out)
            if res is not None:
                xp, yp, pp, dp = res
                if max(pp, dp) < max(prim, dual) or (pp <= s.eps_abs and dp <= s.eps_abs):
                    x_out, y_out, prim, dual = xp, yp, pp, dp
                    polished = True
        final = SOLVED if (prim <= s.eps_abs and dual <= s.eps_abs) else MAX_ITER
        return QpSolution(x_out, final, prim, dual, it, y_out, prob.objective(x_out), polished)

    def _try_polish(self, q, l, u, x, y, tried):
        prob = QpProblem(self.p, q, self.a, l, u)
        res = self._polish(prob, x, y, tried)
        if res is None:
            return None
        xp, yp, pp, dp = res
        if pp > self.settings.eps_abs or dp > self.settings.eps_abs:
            return None
        return xp, yp, pp, dp, prob.objective(xp)

    def _primal_infeasible(self, dy, ls, us) -> bool:
        norm_dy = np.max(np.abs(dy), initial=0.0)
        if norm_dy < 1e-12:
            return False
        eps = self.settings.eps_prim_inf
        dy_unscaled = self.e * dy
        norm_u = np.max(np.abs(dy_unscaled), initial=0.0)
        if np.max(np.abs(self.a.T @ dy_unscaled), initial=0.0) > eps * norm_u:
            return False
        pos = np.maximum(dy, 0.0)
        neg = np.minimum(dy, 0.0)
        if np.any((pos > 0) & (us >= INF)) or np.any((neg < 0) & (ls <= -INF)):
            return False
        support = np.sum(us * pos) + np.sum(ls * neg)
        return bool(support < -eps * norm_dy)

    def _polish(self, prob: QpProblem, x, y, tried: set | None = None):
        """Solve the equality-constrained QP on a guessed active set.

        The guess comes from the ADMM iterate. If the result violates an
        inactive row or carries a wrong-sign dual, the active set is corrected
        and the solve repeated a few times before giving up. Active sets in
        ``tried`` are known failures and are not solved again.
        """
        tried = set() if tried is None else tried
        s = self.settings
        ax = prob.a_mat @ x
        eq = np.abs(prob.u_vec - prob.l_vec) < 1e-10
        lower = ~eq & (ax - prob.l_vec < -y) & (prob.l_vec > -INF)
        upper = ~eq & (prob.u_vec - ax < y) & (prob.u_vec < INF)
        lower &= ~(upper & (y > 0))
        upper &= ~lower
        for _ in range(s.polish_active_set_iter):
            key = lower.tobytes() + upper.tobytes()
            if key in tried:
                return None
            tried.add(key)
            res = self._polish_once(prob, eq, lower, upper)
            if res is None:
                return None
            xp, yp = res
            axp = prob.a_mat @ xp
            ytol = 1e-7 * max(1.0, np.max(np.abs(yp), initial=0.0))
            bad_up = upper & (yp < -ytol)
            bad_lo = lower & (yp > ytol)
            viol_up = ~eq & ~upper & (axp > prob.u_vec + s.eps_abs)
            viol_lo = ~eq & ~lower & (axp < prob.l_vec - s.eps_abs)
            if not (bad_up.any() or bad_lo.any() or viol_up.any() or viol_lo.any()):
                pp, dp, _ = check_kkt(prob, xp, yp)
                return xp, yp, pp, dp
            upper = (upper & ~bad_up) | viol_up
            lower = (lower & ~bad_lo) | viol_lo
        return None

    def _polish_once(self, prob: QpProblem, eq, lower, upper):
        delta = self.settings.polish_delta
        act = eq | lower | upper
        a_act = prob.a_mat[act]
        b_act = np.where(lower[act], prob.l_vec[act], prob.u_vec[act])
        n, k = prob.n, a_act.shape[0]
        kkt = np.block([[prob.p_mat, a_act.T], [a_act, np.zeros((k, k))]])
        reg = np.block([[prob.p_mat + delta * np.eye(n), a_act.T], [a_act, -delta * np.eye(k)]])
        rhs = np.concatenate([-prob.q_vec, b_act])
        try:
            lu = sla.lu_factor(reg, check_finite=False)
        except (ValueError, np.linalg.LinAlgError):
            return None
        sol = sla.lu_solve(lu, rhs)
        for _ in range(self.settings.polish_refine_iter):
            sol = sol + sla.lu_solve(lu, rhs - kkt @ sol)
        if not np.all(np.isfinite(sol)):
            return None
        yp = np.zeros(prob.m)
        yp[act] = sol[n:]
        return sol[:n], yp


def solve(prob: QpProblem, settings: QpSettings | None = None, warm_x=None, warm_y=None) -> QpSolution:
    """Solve a single QP from scratch."""
    solver = QpSolver(prob.p_mat, prob.a_mat, prob.q_vec, settings)
    return solver.solve(prob.q_vec, prob.l_vec, prob.u_vec, warm_x, warm_y)
