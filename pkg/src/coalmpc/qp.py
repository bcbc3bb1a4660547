"""Dense convex QP solver: operator splitting (ADMM) followed by active-set polishing.

Solves

    minimize    0.5 z'Hz + g'z + c0
    subject to  A_ineq z <= b_ineq
                A_eq z    = b_eq

The ADMM iterations follow the splitting used by OSQP (all constraints written
as ``l <= C z <= u``, equality rows get a stiffer penalty).  Every few dozen
iterations the dual iterate is used to guess the active set and an
equality-constrained KKT system is solved on it; the polished point is
accepted once its KKT residuals are below tolerance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

log = logging.getLogger(__name__)

SOLVED = "solved"
INFEASIBLE = "infeasible"
MAX_ITER = "max_iterations"

RHO_EQ_SCALE = 1e3
SIGMA = 1e-6
ALPHA = 1.6


@dataclass
class QuadraticProgram:
    H: np.ndarray
    g: np.ndarray
    c0: float = 0.0
    A_ineq: np.ndarray | None = None
    b_ineq: np.ndarray | None = None
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        n = self.H.shape[0]
        if self.H.shape != (n, n):
            raise ValueError("H must be square")
        self.H = 0.5 * (self.H + self.H.T)
        self.g = np.asarray(self.g, dtype=float).reshape(n)
        self.c0 = float(self.c0)
        self.A_ineq, self.b_ineq = _rows(self.A_ineq, self.b_ineq, n, "inequality")
        self.A_eq, self.b_eq = _rows(self.A_eq, self.b_eq, n, "equality")

    @property
    def n(self) -> int:
        return self.H.shape[0]

    def objective(self, z) -> float:
        return float(0.5 * z @ self.H @ z + self.g @ z + self.c0)


def _rows(A, b, n, what):
    if A is None or np.size(A) == 0:
        return np.zeros((0, n)), np.zeros(0)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float).reshape(-1)
    if A.shape[1] != n or A.shape[0] != b.shape[0]:
        raise ValueError(f"{what} constraint dimensions inconsistent")
    return A, b


@dataclass
class QPResult:
    z: np.ndarray
    objective: float
    status: str
    iterations: int
    y_ineq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    y_eq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    residuals: dict = field(default_factory=dict)

    @property
    def solved(self) -> bool:
        return self.status == SOLVED


def kkt_residuals(qp: QuadraticProgram, z, y_ineq, y_eq) -> dict:
    """Infinity-norm KKT residuals of a primal-dual pair."""
    stat = qp.H @ z + qp.g + qp.A_ineq.T @ y_ineq + qp.A_eq.T @ y_eq
    slack = qp.A_ineq @ z - qp.b_ineq
    prim = max(np.max(slack, initial=0.0), np.max(np.abs(qp.A_eq @ z - qp.b_eq), initial=0.0))
    return {
        "stationarity": float(np.max(np.abs(stat), initial=0.0)),
        "primal": float(prim),
        "dual": float(np.max(-y_ineq, initial=0.0)),
        "complementarity": float(np.max(np.abs(y_ineq * np.minimum(slack, 0.0)), initial=0.0)),
    }


def _scale(qp, z, y_ineq, y_eq):
    return max(1.0, np.max(np.abs(qp.g), initial=0.0), np.max(np.abs(qp.H @ z), initial=0.0),
               np.max(np.abs(qp.b_ineq), initial=0.0), np.max(np.abs(qp.b_eq), initial=0.0))


def _kkt_ok(qp, z, y_ineq, y_eq, tol):
    r = kkt_residuals(qp, z, y_ineq, y_eq)
    bound = tol * _scale(qp, z, y_ineq, y_eq)
    return all(v <= bound for v in r.values()), r


def _solve_on_active(qp: QuadraticProgram, active):
    """Solve the equality-constrained QP with ``active`` inequality rows tight."""
    Ca = np.vstack([qp.A_eq, qp.A_ineq[active]])
    ba = np.concatenate([qp.b_eq, qp.b_ineq[active]])
    n, m = qp.n, Ca.shape[0]
    K = np.zeros((n + m, n + m))
    K[:n, :n] = qp.H
    K[:n, n:] = Ca.T
    K[n:, :n] = Ca
    rhs = np.concatenate([-qp.g, ba])
    sol = _linsolve(K, rhs)
    sol = sol + _linsolve(K, rhs - K @ sol)
    z = sol[:n]
    y_eq = sol[n:n + qp.A_eq.shape[0]]
    y_ineq = np.zeros(qp.A_ineq.shape[0])
    y_ineq[active] = sol[n + qp.A_eq.shape[0]:]
    return z, y_ineq, y_eq


def _linsolve(K, r):
    try:
        sol = np.linalg.solve(K, r)
        if np.all(np.isfinite(sol)) and np.allclose(K @ sol, r, rtol=1e-9, atol=1e-12):
            return sol
    except np.linalg.LinAlgError:
        pass
    return np.linalg.lstsq(K, r, rcond=None)[0]


def _polish(qp, active, tol, max_passes=25):
    """Active-set cleanup starting from a guessed set; returns (z, y_ineq, y_eq, ok)."""
    active = np.asarray(active, dtype=bool).copy()
    seen = set()
    z = y_ineq = y_eq = None
    for _ in range(max_passes):
        key = active.tobytes()
        if key in seen:
            break
        seen.add(key)
        z, y_ineq, y_eq = _solve_on_active(qp, active)
        ok, _ = _kkt_ok(qp, z, y_ineq, y_eq, tol)
        if ok:
            return z, y_ineq, y_eq, True
        scale = _scale(qp, z, y_ineq, y_eq)
        viol = qp.A_ineq @ z - qp.b_ineq
        worst_v = np.argmax(np.where(active, -np.inf, viol)) if viol.size else None
        worst_y = np.argmin(np.where(active, y_ineq, np.inf)) if viol.size else None
        changed = False
        if worst_y is not None and active[worst_y] and y_ineq[worst_y] < -tol * scale:
            active[worst_y] = False
            changed = True
        if worst_v is not None and not active[worst_v] and viol[worst_v] > tol * scale:
            active[worst_v] = True
            changed = True
        if not changed:
            break
    return z, y_ineq, y_eq, False


def solve_qp(qp: QuadraticProgram, tolerance: float = 1e-8, max_iterations: int = 20000,
             rho: float = 0.1, check_every: int = 25, warm_start=None) -> QPResult:
    """Solve ``qp``; see module docstring.

    ``warm_start`` may be a previous :class:`QPResult`; its active set seeds the
    first polish attempt.
    """
    if not tolerance > 0:
        raise ValueError("tolerance must be positive")
    n = qp.n
    m_eq, m_in = qp.A_eq.shape[0], qp.A_ineq.shape[0]

    # try the warm-start / unconstrained active set first
    if warm_start is not None and getattr(warm_start, "y_ineq", np.zeros(0)).shape == (m_in,):
        guess = warm_start.y_ineq > 0
    else:
        guess = np.zeros(m_in, dtype=bool)
    z, y_in, y_eq, ok = _polish(qp, guess, tolerance, max_passes=3 if m_in else 1)
    if ok:
        return _result(qp, z, y_in, y_eq, SOLVED, 0)
    if m_in == 0:
        # equality-only problem: KKT system is all there is
        ok, r = _kkt_ok(qp, z, y_in, y_eq, max(tolerance, 1e-6))
        return _result(qp, z, y_in, y_eq, SOLVED if ok else INFEASIBLE, 0)

    C = np.vstack([qp.A_eq, qp.A_ineq])
    lo = np.concatenate([qp.b_eq, np.full(m_in, -np.inf)])
    hi = np.concatenate([qp.b_eq, qp.b_ineq])
    scale_rows = np.concatenate([np.full(m_eq, RHO_EQ_SCALE), np.ones(m_in)])

    def factor(r):
        rv = r * scale_rows
        M = qp.H + SIGMA * np.eye(n) + C.T @ (rv[:, None] * C)
        return rv, cho_factor(M)

    rv, fac = factor(rho)
    x = z if z is not None and np.all(np.isfinite(z)) else np.zeros(n)
    zc = np.clip(C @ x, lo, hi)
    y = np.zeros(C.shape[0])
    best = (x, y)
    it = 0
    eps_inf = 1e-9
    while it < max_iterations:
        it += 1
        rhs = SIGMA * x - qp.g + C.T @ (rv * zc - y)
        xt = cho_solve(fac, rhs)
        zt = C @ xt
        x = ALPHA * xt + (1 - ALPHA) * x
        zr = ALPHA * zt + (1 - ALPHA) * zc
        zn = np.clip(zr + y / rv, lo, hi)
        y_prev = y
        y = y + rv * (zr - zn)
        zc = zn
        if it % check_every:
            continue
        best = (x, y)
        # polish on the ADMM active-set guess
        act = (hi[m_eq:] - zc[m_eq:]) < y[m_eq:] / rv[m_eq:]
        pz, pyi, pye, ok = _polish(qp, act, tolerance)
        if ok:
            return _result(qp, pz, pyi, pye, SOLVED, it)
        # primal infeasibility certificate
        dy = y - y_prev
        ndy = np.max(np.abs(dy))
        if ndy > 0:
            dyi = dy[m_eq:]
            cert = qp.b_eq @ dy[:m_eq] + qp.b_ineq @ np.maximum(dyi, 0.0)
            if np.max(np.abs(C.T @ dy)) <= eps_inf * ndy and cert < -eps_inf * ndy:
                return _result(qp, x, np.maximum(y[m_eq:], 0), y[:m_eq], INFEASIBLE, it)
        prim = np.max(np.abs(C @ x - zc))
        dual = np.max(np.abs(qp.H @ x + qp.g + C.T @ y))
        if prim > 0 and dual > 0:
            pn = max(np.max(np.abs(C @ x)), np.max(np.abs(zc)), 1e-12)
            dn = max(np.max(np.abs(qp.H @ x)), np.max(np.abs(C.T @ y)), np.max(np.abs(qp.g)), 1e-12)
            new_rho = float(np.clip(rho * np.sqrt((prim / pn) / (dual / dn)), 1e-6, 1e6))
            if new_rho > 5 * rho or new_rho < rho / 5:
                rho = new_rho
                rv, fac = factor(rho)
        # stalled far from feasibility: the constraints are likely incompatible
        if it >= 2000 and prim > 1e3 * max(1.0, np.max(np.abs(hi[np.isfinite(hi)]), initial=1.0)):
            return _result(qp, x, np.maximum(y[m_eq:], 0), y[:m_eq], INFEASIBLE, it)
    x, y = best
    yi = np.maximum(y[m_eq:], 0.0)
    status = MAX_ITER
    r = kkt_residuals(qp, x, yi, y[:m_eq])
    if r["primal"] > 1e-4 * _scale(qp, x, yi, y[:m_eq]):
        status = INFEASIBLE
    log.warning("QP solver stopped after %d iterations (%s)", it, status)
    return _result(qp, x, yi, y[:m_eq], status, it)


def _result(qp, z, y_in, y_eq, status, it):
    return QPResult(z=z, objective=qp.objective(z), status=status, iterations=it,
                    y_ineq=y_in, y_eq=y_eq, residuals=kkt_residuals(qp, z, y_in, y_eq))


def dump_qp(qp: QuadraticProgram, path) -> None:
    """Write the QP as coordinate-format matrix blocks for external checking."""
    def block(f, name, M):
        M = np.atleast_2d(M)
        nz = np.argwhere(M != 0)
        f.write(f"%%MatrixMarket matrix coordinate real general\n% {name}\n")
        f.write(f"{M.shape[0]} {M.shape[1]} {len(nz)}\n")
        for i, j in nz:
            f.write(f"{i + 1} {j + 1} {M[i, j]:.17g}\n")

    with open(path, "w") as f:
        f.write(f"% c0 {qp.c0:.17g}\n")
        block(f, "H", qp.H)
        block(f, "g", qp.g[:, None])
        block(f, "A_ineq", qp.A_ineq)
        block(f, "b_ineq", qp.b_ineq[:, None])
        block(f, "A_eq", qp.A_eq)
        block(f, "b_eq", qp.b_eq[:, None])
