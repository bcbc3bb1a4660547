"""Coalition tracking MPC in sparse (multiple-shooting) form.

Decision vector ``z = (u_0, ..., u_{Np-1}, x_1, ..., x_Np[, s_1, ..., s_{Np-1}])``
where the optional ``s_t`` are slacks for soft state constraints.  The
prediction model is the coalition model with a known affine term per step
(load forecast, and for unilateral strategies the opponent's fixed
trajectories); coupling to anyone else is ignored.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .lti import CoalitionModel, ModelSet, aggregate_coalition, cross_blocks
from .qp import QuadraticProgram, QPResult, solve_qp, dump_qp, SOLVED

SOFT_PENALTY = 1e6


@dataclass
class MpcWeights:
    """Stage-cost weights.

    ``Q_blocks[(i, i)]`` is agent ``i``'s own state weight; ``Q_blocks[(i, j)]``
    for ``i != j`` is a cross block, used only when both agents share a
    coalition.  ``Q_aug[(i, j)]`` is added to agent ``i``'s diagonal block when
    ``j`` is a coalition partner (the angle-difference penalty of the
    power-grid example needs this).
    """

    Q_blocks: Mapping[tuple[int, int], np.ndarray]
    R_blocks: Mapping[int, np.ndarray]
    Qf_scale: float = 20.0
    Q_aug: Mapping[tuple[int, int], np.ndarray] = field(default_factory=dict)

    def matrices(self, members) -> tuple[np.ndarray, np.ndarray]:
        members = tuple(sorted(members))
        ns = [np.atleast_2d(self.Q_blocks[(i, i)]).shape[0] for i in members]
        qs = [np.atleast_2d(self.R_blocks[i]).shape[0] for i in members]
        xo = np.concatenate([[0], np.cumsum(ns)])
        uo = np.concatenate([[0], np.cumsum(qs)])
        Q = np.zeros((xo[-1], xo[-1]))
        R = np.zeros((uo[-1], uo[-1]))
        mset = set(members)
        for a, i in enumerate(members):
            blk = np.array(np.atleast_2d(self.Q_blocks[(i, i)]), dtype=float)
            for (p, j), aug in self.Q_aug.items():
                if p == i and j in mset:
                    blk = blk + np.atleast_2d(aug)
            Q[xo[a]:xo[a + 1], xo[a]:xo[a + 1]] = blk
            R[uo[a]:uo[a + 1], uo[a]:uo[a + 1]] = np.atleast_2d(self.R_blocks[i])
            for b, j in enumerate(members):
                if j != i and (i, j) in self.Q_blocks:
                    Q[xo[a]:xo[a + 1], xo[b]:xo[b + 1]] = np.atleast_2d(self.Q_blocks[(i, j)])
        return 0.5 * (Q + Q.T), R


@dataclass
class ReferenceTrajectory:
    """``state_refs`` has ``Np + 1`` rows (terminal last); ``input_refs`` has ``Np``."""

    state_refs: np.ndarray
    input_refs: np.ndarray

    @classmethod
    def constant(cls, x_ref, u_ref, Np) -> "ReferenceTrajectory":
        x_ref = np.asarray(x_ref, dtype=float)
        u_ref = np.asarray(u_ref, dtype=float)
        return cls(np.tile(x_ref, (Np + 1, 1)), np.tile(u_ref, (Np, 1)))

    @classmethod
    def zeros(cls, n, q, Np) -> "ReferenceTrajectory":
        return cls(np.zeros((Np + 1, n)), np.zeros((Np, q)))


@dataclass
class MpcSolution:
    members: tuple
    input_sequence: np.ndarray
    state_trajectory: np.ndarray
    predicted_cost: float
    objective: float
    status: str
    x0: np.ndarray
    qp_result: QPResult | None = None

    @property
    def solved(self) -> bool:
        return self.status == SOLVED

    @property
    def first_input(self) -> np.ndarray:
        return self.input_sequence[0]

    def states_from_zero(self) -> np.ndarray:
        """Predicted states ``x(0..Np-1)``, the form opponents consume."""
        return np.vstack([self.x0, self.state_trajectory[:-1]])


def stage_cost(x, u, x_ref, u_ref, Q, R) -> float:
    dx = np.asarray(x) - x_ref
    du = np.asarray(u) - u_ref
    return float(dx @ Q @ dx + du @ R @ du)


class TrackingProblem:
    """Cached QP structure for one coalition model, weights and horizon.

    Only the right-hand sides depend on the initial state, references and
    affine terms, so the matrices are built once.
    """

    def __init__(self, cm: CoalitionModel, weights: MpcWeights, Np: int,
                 hard_state: bool = False, soft_penalty: float = SOFT_PENALTY,
                 terminal_box: tuple | None = None, tolerance: float = 1e-8,
                 max_iterations: int = 20000, dump_path=None):
        if Np < 1:
            raise ValueError("Np must be >= 1")
        self.cm, self.Np = cm, Np
        self.Q, self.R = weights.matrices(cm.members)
        if self.Q.shape[0] != cm.n or self.R.shape[0] != cm.q:
            raise ValueError("weight dimensions do not match coalition model")
        self.Qf = weights.Qf_scale * self.Q
        self.tolerance, self.max_iterations = tolerance, max_iterations
        self.dump_path = dump_path
        n, q = cm.n, cm.q
        self.nu, self.nx = Np * q, Np * n
        fin = np.isfinite(cm.x_lo) | np.isfinite(cm.x_hi)
        self.soft_idx = np.flatnonzero(fin) if not hard_state else np.zeros(0, dtype=int)
        ns = len(self.soft_idx) * (Np - 1)
        self.nz = self.nu + self.nx + ns

        H = np.zeros((self.nz, self.nz))
        for t in range(Np):
            H[t * q:(t + 1) * q, t * q:(t + 1) * q] = 2 * self.R
        for t in range(1, Np + 1):
            W = self.Qf if t == Np else self.Q
            sl = self._xs(t)
            H[sl, sl] = 2 * W
        if ns:
            H[self.nu + self.nx:, self.nu + self.nx:] = 2 * soft_penalty * np.eye(ns)
        self.H = H

        Aeq = np.zeros((self.nx, self.nz))
        for t in range(Np):
            rows = slice(t * n, (t + 1) * n)
            Aeq[rows, self._xs(t + 1)] = np.eye(n)
            Aeq[rows, t * q:(t + 1) * q] = -cm.B
            if t > 0:
                Aeq[rows, self._xs(t)] = -cm.A
        self.Aeq = Aeq

        rows, rhs = [], []
        for t in range(Np):
            for k in range(q):
                col = t * q + k
                if np.isfinite(cm.u_hi[k]):
                    r = np.zeros(self.nz); r[col] = 1.0
                    rows.append(r); rhs.append(cm.u_hi[k])
                if np.isfinite(cm.u_lo[k]):
                    r = np.zeros(self.nz); r[col] = -1.0
                    rows.append(r); rhs.append(-cm.u_lo[k])
        state_rows_t = range(1, Np)
        for t in state_rows_t:
            for k in np.flatnonzero(fin):
                col = self.nu + (t - 1) * n + k
                scol = None
                if not hard_state:
                    pos = np.searchsorted(self.soft_idx, k)
                    scol = self.nu + self.nx + (t - 1) * len(self.soft_idx) + pos
                for sign, bound in ((1.0, cm.x_hi[k]), (-1.0, -cm.x_lo[k])):
                    if np.isfinite(bound):
                        r = np.zeros(self.nz); r[col] = sign
                        if scol is not None:
                            r[scol] = -1.0
                        rows.append(r); rhs.append(bound)
        if terminal_box is not None:
            lo, hi = (np.asarray(b, dtype=float) for b in terminal_box)
            for k in range(n):
                col = self.nu + (Np - 1) * n + k
                for sign, bound in ((1.0, hi[k]), (-1.0, -lo[k])):
                    if np.isfinite(bound):
                        r = np.zeros(self.nz); r[col] = sign
                        rows.append(r); rhs.append(bound)
        self.Ain = np.array(rows).reshape(-1, self.nz)
        self.bin = np.array(rhs, dtype=float)
        self._last = None

    def _xs(self, t):
        """Columns of x_t (t >= 1)."""
        n = self.cm.n
        return slice(self.nu + (t - 1) * n, self.nu + t * n)

    def build(self, x0, refs: ReferenceTrajectory, affine=None) -> QuadraticProgram:
        """``affine`` is a ``(Np, n)`` array of known additive terms per step."""
        cm, Np, n, q = self.cm, self.Np, self.cm.n, self.cm.q
        x0 = np.asarray(x0, dtype=float).reshape(n)
        xr = np.asarray(refs.state_refs, dtype=float).reshape(Np + 1, n)
        ur = np.asarray(refs.input_refs, dtype=float).reshape(Np, q)
        c = np.zeros((Np, n)) if affine is None else np.asarray(affine, dtype=float).reshape(Np, n)
        g = np.zeros(self.nz)
        c0 = 0.0
        for t in range(Np):
            g[t * q:(t + 1) * q] = -2 * self.R @ ur[t]
            c0 += ur[t] @ self.R @ ur[t]
        for t in range(1, Np + 1):
            W = self.Qf if t == Np else self.Q
            g[self._xs(t)] = -2 * W @ xr[t]
            c0 += xr[t] @ W @ xr[t]
        c0 += (x0 - xr[0]) @ self.Q @ (x0 - xr[0])
        beq = c.reshape(-1).copy()
        beq[:n] += cm.A @ x0
        return QuadraticProgram(self.H, g, c0, self.Ain, self.bin, self.Aeq, beq)

    def solve(self, x0, refs: ReferenceTrajectory, affine=None) -> MpcSolution:
        qp = self.build(x0, refs, affine)
        if self.dump_path is not None:
            dump_qp(qp, self.dump_path)
        res = solve_qp(qp, self.tolerance, self.max_iterations, warm_start=self._last)
        if res.solved:
            self._last = res
        return self._solution(np.asarray(x0, dtype=float), refs, res)

    def _solution(self, x0, refs, res) -> MpcSolution:
        n, q, Np = self.cm.n, self.cm.q, self.Np
        u = res.z[:self.nu].reshape(Np, q)
        x = res.z[self.nu:self.nu + self.nx].reshape(Np, n)
        xs = np.vstack([x0, x])
        xr = np.asarray(refs.state_refs, dtype=float).reshape(Np + 1, n)
        ur = np.asarray(refs.input_refs, dtype=float).reshape(Np, q)
        pred = sum(stage_cost(xs[t], u[t], xr[t], ur[t], self.Q, self.R) for t in range(Np))
        obj = pred + float((x[-1] - xr[Np]) @ self.Qf @ (x[-1] - xr[Np]))
        return MpcSolution(self.cm.members, u, x, pred, obj, res.status, x0, res)


def build_tracking_qp(cm: CoalitionModel, x0, refs: ReferenceTrajectory, weights: MpcWeights,
                      Np: int, affine=None, **options) -> QuadraticProgram:
    return TrackingProblem(cm, weights, Np, **options).build(x0, refs, affine)


def mpc_control(cm: CoalitionModel, x0, refs: ReferenceTrajectory, weights: MpcWeights, Np: int,
                d_forecast=None, **options) -> MpcSolution:
    """Solve the coalition MPC; ``d_forecast`` is an ``(Np, nd)`` known-disturbance preview."""
    affine = None
    if d_forecast is not None and cm.D.size:
        affine = np.asarray(d_forecast, dtype=float).reshape(Np, -1) @ cm.D.T
    return TrackingProblem(cm, weights, Np, **options).solve(x0, refs, affine)


def opponent_affine(A_po, B_po, opp_states, opp_inputs, Np) -> np.ndarray:
    """Per-step additive term ``A_po x~_o(t) + B_po u~_o(t)`` for ``t = 0..Np-1``."""
    xs = np.asarray(opp_states, dtype=float).reshape(Np, -1)
    us = np.asarray(opp_inputs, dtype=float).reshape(Np, -1)
    if xs.shape[1] != A_po.shape[1] or (B_po.size and us.shape[1] != B_po.shape[1]):
        raise ValueError("opponent trajectory inconsistent with cross blocks")
    out = xs @ A_po.T
    if B_po.size:
        out = out + us @ B_po.T
    return out


def unilateral_best_response(player: CoalitionModel, A_po, B_po, opp_states, opp_inputs, x0,
                             refs: ReferenceTrajectory, weights: MpcWeights, Np: int,
                             d_forecast=None, problem: TrackingProblem | None = None,
                             **options) -> MpcSolution:
    """MPC of ``player`` with the opponent's state/input sequences as known inputs."""
    affine = opponent_affine(A_po, B_po, opp_states, opp_inputs, Np)
    if d_forecast is not None and player.D.size:
        affine = affine + np.asarray(d_forecast, dtype=float).reshape(Np, -1) @ player.D.T
    problem = problem or TrackingProblem(player, weights, Np, **options)
    return problem.solve(x0, refs, affine)


def simulate_open_loop(cm: CoalitionModel, x0, inputs, affine=None) -> np.ndarray:
    """States ``x(0..len(inputs)-1)`` of ``cm`` under ``inputs``."""
    inputs = np.asarray(inputs, dtype=float)
    Np = inputs.shape[0]
    xs = np.zeros((Np, cm.n))
    x = np.asarray(x0, dtype=float)
    for t in range(Np):
        xs[t] = x
        x = cm.A @ x + cm.B @ inputs[t]
        if affine is not None:
            x = x + affine[t]
    return xs


@dataclass
class BestResponseResult:
    first: MpcSolution
    second: MpcSolution
    costs: list = field(default_factory=list)
    feasible: bool = True


def best_response_iteration(model_set: ModelSet, P1, P2, x, refs1: ReferenceTrajectory,
                            refs2: ReferenceTrajectory, weights: MpcWeights, Np: int,
                            initial=None, max_iter: int = 3, d_forecast=None,
                            problems=None, **options) -> BestResponseResult:
    """Jacobi best-response iteration between two disjoint players.

    ``x`` is the global state.  ``initial`` optionally maps each player to
    ``(states x(0..Np-1), inputs)``; otherwise the opponent is assumed to apply
    zero input.  ``max_iter = 0`` still evaluates once against the initial
    trajectories.  ``d_forecast`` is the global ``(Np, nd)`` disturbance
    preview.  ``problems`` optionally maps a player tuple to a cached
    :class:`TrackingProblem`.
    """
    P1, P2 = tuple(sorted(P1)), tuple(sorted(P2))
    if set(P1) & set(P2):
        raise ValueError("players must be disjoint")
    cms = {P1: aggregate_coalition(model_set, P1), P2: aggregate_coalition(model_set, P2)}
    x = np.asarray(x, dtype=float)
    x0s = {p: x[cms[p].x_index] for p in (P1, P2)}
    dfs = {p: None if d_forecast is None else np.asarray(d_forecast, dtype=float)[:, cms[p].d_index]
           for p in (P1, P2)}
    refs = {P1: refs1, P2: refs2}
    cross = {P1: cross_blocks(model_set, P1, P2), P2: cross_blocks(model_set, P2, P1)}
    probs = {}
    for p in (P1, P2):
        probs[p] = (problems or {}).get(p) or TrackingProblem(cms[p], weights, Np, **options)

    traj = {}
    for p in (P1, P2):
        if initial is not None and p in initial and initial[p] is not None:
            xs0, us0 = initial[p]
            traj[p] = (np.asarray(xs0, dtype=float), np.asarray(us0, dtype=float))
        else:
            us0 = np.zeros((Np, cms[p].q))
            aff = None if dfs[p] is None or not cms[p].D.size else dfs[p] @ cms[p].D.T
            traj[p] = (simulate_open_loop(cms[p], x0s[p], us0, aff), us0)

    sols, costs, feasible = None, [], True
    for _ in range(max(1, max_iter)):
        new = {}
        for p, o in ((P1, P2), (P2, P1)):
            A_po, B_po = cross[p]
            new[p] = unilateral_best_response(cms[p], A_po, B_po, traj[o][0], traj[o][1], x0s[p],
                                              refs[p], weights, Np, dfs[p], problem=probs[p])
        if not (new[P1].solved and new[P2].solved):
            feasible = False
            break
        sols = new
        costs.append((new[P1].predicted_cost, new[P2].predicted_cost))
        traj = {p: (s.states_from_zero(), s.input_sequence) for p, s in new.items()}
    if sols is None:
        sols = new
    return BestResponseResult(sols[P1], sols[P2], costs, feasible)
