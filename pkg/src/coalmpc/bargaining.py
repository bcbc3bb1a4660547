"""Coalition formation by bargaining: mergers, utility transfers and splits.

A round visits coupled coalition pairs and merges them when the joint value
does not exceed the sum of their unilateral values.  Inside each coalition,
randomly drawn bipartitions either trigger a transfer that satisfies the
dissatisfied side or, when cooperation no longer pays, a split.  Between
rounds the allocation proportions are kept and rescaled to realized costs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .game import CooperationCostFn, CostGame, merger_test, satisfy_demand
from .lti import CoalitionStructure, ModelSet, aggregate_coalition
from .mpc import (MpcSolution, MpcWeights, ReferenceTrajectory, TrackingProblem, best_response_iteration,
                  simulate_open_loop)

log = logging.getLogger(__name__)

PAIR_MODES = ("all", "random")


@dataclass(frozen=True)
class BargainingConfig:
    dwell_time: int = 2
    max_iter: int = 3
    max_loops: int = 10
    pair_selection: str = "all"
    pairs_per_round: int | None = None
    rng_seed: int = 0
    allow_split: bool = True
    tolerance: float = 1e-9

    def __post_init__(self):
        if self.dwell_time < 1:
            raise ValueError("dwell_time must be >= 1")
        if self.max_iter < 0:
            raise ValueError("max_iter must be >= 0")
        if self.max_loops < 1:
            raise ValueError("max_loops must be >= 1")
        if self.pair_selection not in PAIR_MODES:
            raise ValueError(f"pair_selection must be one of {PAIR_MODES}")
        if self.pairs_per_round is not None and self.pairs_per_round < 1:
            raise ValueError("pairs_per_round must be >= 1")


@dataclass
class BargainingOutcome:
    new_structure: CoalitionStructure
    allocations: dict
    event_log: list


@dataclass
class DeviationRecord:
    coalition: tuple
    predicted_cost: float
    realized_cost: float
    deviation: float
    partial: bool = False


@dataclass
class BoundCheck:
    status: str
    slack: float | None

    @property
    def satisfied(self) -> bool:
        return self.status == "satisfied"


class BargainingContext:
    """Everything a round needs to evaluate coalition values at the current step.

    ``refs_fn(members)`` gives the tracking references of a coalition;
    ``plans`` maps agent id to its shifted ``(states, inputs)`` plan used to
    warm-start best responses.  ``problems`` persists across rounds since the
    QP matrices depend only on the member set.
    """

    def __init__(self, model_set: ModelSet, weights: MpcWeights, Np: int, x,
                 refs_fn: Callable[[tuple], ReferenceTrajectory], coop: CooperationCostFn,
                 config: BargainingConfig, d_forecast=None, plans: Mapping | None = None,
                 problems: dict | None = None, step: int = 0, qp_options: Mapping | None = None):
        self.model_set, self.weights, self.Np = model_set, weights, Np
        self.x = np.asarray(x, dtype=float)
        self.refs_fn, self.coop, self.config = refs_fn, coop, config
        self.d_forecast = d_forecast
        self.plans = dict(plans or {})
        self.problems = problems if problems is not None else {}
        self.step = step
        self.qp_options = dict(qp_options or {})
        self.events: list = []
        self.games: dict = {}
        self._solutions: dict = {}
        self.values: dict = {}

    def problem(self, members) -> TrackingProblem:
        members = tuple(sorted(members))
        if members not in self.problems:
            cm = aggregate_coalition(self.model_set, members)
            self.problems[members] = TrackingProblem(cm, self.weights, self.Np, **self.qp_options)
        return self.problems[members]

    def solve_coalition(self, members) -> MpcSolution:
        members = tuple(sorted(members))
        if members not in self._solutions:
            prob = self.problem(members)
            cm = prob.cm
            affine = None
            if self.d_forecast is not None and cm.D.size:
                affine = np.asarray(self.d_forecast)[:, cm.d_index] @ cm.D.T
            self._solutions[members] = prob.solve(self.x[cm.x_index], self.refs_fn(members), affine)
        return self._solutions[members]

    def coalition_value(self, members) -> float | None:
        sol = self.solve_coalition(members)
        if not sol.solved:
            return None
        return sol.predicted_cost + self.coop(len(members))

    def initial_trajectory(self, members):
        if not all(i in self.plans for i in members):
            return None
        xs = np.hstack([self.plans[i][0] for i in members])
        us = np.hstack([self.plans[i][1] for i in members])
        return xs, us

    def unilateral_values(self, P1, P2):
        """``(v(P1), v(P2))`` for the unilateral strategies of the pair, or None.

        Each player plays its best response to the other's trajectory.  The
        outcome is then scored with the stage cost of the union, each player
        taking the rows of its own states, so coupling terms between the two
        count for both; this puts ``v(P1) + v(P2)`` on the same footing as the
        joint value.
        """
        P1, P2 = tuple(sorted(P1)), tuple(sorted(P2))
        key = (P1, P2) if P1 < P2 else (P2, P1)
        if key not in self.values:
            initial = {P1: self.initial_trajectory(P1), P2: self.initial_trajectory(P2)}
            br = best_response_iteration(self.model_set, P1, P2, self.x, self.refs_fn(P1),
                                         self.refs_fn(P2), self.weights, self.Np, initial=initial,
                                         max_iter=self.config.max_iter, d_forecast=self.d_forecast,
                                         problems={P1: self.problem(P1), P2: self.problem(P2)})
            if br.feasible:
                costs = self._joint_shares(P1, P2, br.first, br.second)
                self.values[key] = {P: costs[P] + self.coop(len(P)) for P in (P1, P2)}
            else:
                self.values[key] = None
        vals = self.values[key]
        return None if vals is None else (vals[P1], vals[P2])

    def _joint_shares(self, P1, P2, sol1, sol2):
        union = tuple(sorted(P1 + P2))
        prob = self.problem(union)
        cm, Np = prob.cm, self.Np
        ms = self.model_set
        x0 = self.x[cm.x_index]
        us = np.zeros((Np, cm.q))
        xr = np.zeros((Np + 1, cm.n))
        ur = np.zeros((Np, cm.q))
        for P, sol in ((P1, sol1), (P2, sol2)):
            refs = self.refs_fn(P)
            xo = po = 0
            for j in P:
                xu = _local_index(ms, union, j, "x")
                uu = _local_index(ms, union, j, "u")
                us[:, uu] = sol.input_sequence[:, po:po + len(uu)]
                xr[:, xu] = refs.state_refs[:, xo:xo + len(xu)]
                ur[:, uu] = refs.input_refs[:, po:po + len(uu)]
                xo, po = xo + len(xu), po + len(uu)
        affine = None
        if self.d_forecast is not None and cm.D.size:
            affine = np.asarray(self.d_forecast)[:, cm.d_index] @ cm.D.T
        xs = simulate_open_loop(cm, x0, us, affine)
        out = {}
        for P in (P1, P2):
            xi = np.concatenate([_local_index(ms, union, j, "x") for j in P])
            ui = np.concatenate([_local_index(ms, union, j, "u") for j in P])
            total = 0.0
            for t in range(Np):
                dx, du = xs[t] - xr[t], us[t] - ur[t]
                total += float(dx[xi] @ (prob.Q @ dx)[xi] + du[ui] @ (prob.R @ du)[ui])
            out[P] = total
        return out

    def game(self, P, v_P: float) -> CostGame:
        """Per-round game of coalition ``P``; subsets valued against their complement in ``P``."""
        P = tuple(sorted(P))
        g = self.games.get(P)
        if g is None or abs(g.value(P) - v_P) > 0:
            pset = frozenset(P)

            def evaluator(S, pset=pset):
                vals = self.unilateral_values(S, pset - S)
                if vals is None:
                    raise _Infeasible(S)
                return {frozenset(S): vals[0], pset - S: vals[1]}

            g = CostGame(P, {P: v_P}, evaluator)
            self.games[P] = g
        return g

    def emit(self, kind: str, participants, **data):
        rec = {"step": self.step, "kind": kind,
               "participants": [sorted(int(i) for i in p) for p in participants]}
        rec.update(data)
        self.events.append(rec)


class _Infeasible(Exception):
    pass


def _local_index(model_set, members, j, kind):
    """Positions of agent ``j``'s states (``kind='x'``) or inputs in the stacked vector of ``members``."""
    off = 0
    for i in members:
        size = model_set[i].n if kind == "x" else model_set[i].q
        if i == j:
            return np.arange(off, off + size)
        off += size
    raise KeyError(j)


def _alloc_dict(allocation, members):
    return {int(j): float(allocation[j]) for j in sorted(members)}


def coupled(model_set: ModelSet, P1, P2) -> bool:
    return any(j in model_set[i].neighbors or i in model_set[j].neighbors for i in P1 for j in P2)


def rescale_allocations(allocation: Mapping, members, value: float) -> dict:
    """Proportional rescaling so the members' allocations sum to ``value``."""
    members = tuple(sorted(members))
    total = sum(allocation.get(j, 0.0) for j in members)
    if any(j not in allocation for j in members) or total == 0:
        return {j: value / len(members) for j in members}
    return {j: allocation[j] * value / total for j in members}


def attempt_merger(structure: CoalitionStructure, allocation: dict, P1, P2,
                   ctx: BargainingContext, rng: np.random.Generator):
    """One bilateral merger negotiation; returns the updated structure and allocation."""
    P1, P2 = tuple(sorted(P1)), tuple(sorted(P2))
    merged = tuple(sorted(P1 + P2))
    v12 = ctx.coalition_value(merged)
    pair = ctx.unilateral_values(P1, P2)
    if v12 is None or pair is None:
        ctx.emit("reject", [P1, P2], reason="infeasible")
        log.info("step %d: merger %s+%s rejected (infeasible)", ctx.step, P1, P2)
        return structure, allocation
    v1, v2 = pair
    if merger_test(v1, v2, v12):
        structure = structure.merge(P1, P2)
        allocation = dict(allocation)
        allocation.update({j: v12 / len(merged) for j in merged})
        ctx.emit("merge", [P1, P2], values={"v1": v1, "v2": v2, "v12": v12},
                 allocations=_alloc_dict(allocation, merged))
        return transfer_or_split(structure, allocation, merged, v12, ctx, rng)
    ctx.emit("reject", [P1, P2], values={"v1": v1, "v2": v2, "v12": v12})
    for P, v in ((P1, v1), (P2, v2)):
        if len(P) > 1:
            vP = ctx.coalition_value(P)
            if vP is not None:
                allocation = dict(allocation)
                allocation.update(rescale_allocations(allocation, P, vP))
                structure, allocation = transfer_or_split(structure, allocation, P, vP, ctx, rng)
    return structure, allocation


def _n_bipartitions(P):
    """Unordered pairs ``{S, P - S}`` indexed by a bitmask over ``P[1:]``."""
    n = len(P)
    return (1 << (n - 1)) - 1


def _draw_subset(P, index):
    # index in 0..2^(n-1)-2; bit pattern over P[1:], P[0] always in the complement
    mask = index + 1
    S = frozenset(P[b + 1] for b in range(len(P) - 1) if mask >> b & 1)
    return S


def transfer_or_split(structure: CoalitionStructure, allocation: dict, P, v_P: float,
                      ctx: BargainingContext, rng: np.random.Generator):
    """Demand checks inside coalition ``P`` whose allocation sums to ``v_P``."""
    P = tuple(sorted(P))
    if len(P) < 2:
        return structure, allocation
    cfg = ctx.config
    game = ctx.game(P, v_P)
    pset = frozenset(P)
    n_pairs = _n_bipartitions(P)
    order = rng.permutation(n_pairs)[:cfg.max_loops]
    alloc = {j: allocation[j] for j in P}
    for idx in order:
        S1 = _draw_subset(P, int(idx))
        S2 = pset - S1
        try:
            vS1, vS2 = game.value(S1), game.value(S2)
        except _Infeasible:
            ctx.emit("skip", [S1, S2], reason="infeasible")
            continue
        p1 = sum(alloc[j] for j in S1)
        p2 = sum(alloc[j] for j in S2)
        tol = cfg.tolerance * max(1.0, abs(v_P))
        if cfg.allow_split and p1 + p2 > vS1 + vS2 + tol:
            parts = [tuple(sorted(S1)), tuple(sorted(S2))]
            structure = structure.replace(P, parts)
            allocation = dict(allocation)
            # each part now runs its own MPC, so its value is re-evaluated on its own metric
            own = []
            for S, v in zip(parts, (vS1, vS2)):
                vo = ctx.coalition_value(S) if len(S) > 1 else v
                own.append(v if vo is None else vo)
                allocation.update({j: own[-1] / len(S) for j in S})
            ctx.emit("split", parts, values={"v_P": v_P, "v1": vS1, "v2": vS2},
                     allocations=_alloc_dict(allocation, P))
            for S, v in zip(parts, own):
                structure, allocation = transfer_or_split(structure, allocation, S, v, ctx, rng)
            return structure, allocation
        for S, pS, vS in ((S1, p1, vS1), (S2, p2, vS2)):
            if pS > vS + tol:
                alloc = satisfy_demand(alloc, S, pS - vS)
                ctx.emit("transfer", [S, pset - S], values={"excess": pS - vS, "v_S": vS},
                         allocations=_alloc_dict(alloc, P))
                break
    allocation = dict(allocation)
    allocation.update(alloc)
    return structure, allocation


def _next_pair(structure, ctx, tried, rng):
    cands = []
    coals = list(structure)
    for a in range(len(coals)):
        for b in range(a + 1, len(coals)):
            key = (coals[a], coals[b])
            if key not in tried and coupled(ctx.model_set, *key):
                cands.append(key)
    if not cands:
        return None
    if ctx.config.pair_selection == "random":
        return cands[int(rng.integers(len(cands)))]
    return min(cands, key=lambda k: (k[0][0], k[1][0]))


def run_bargaining_round(structure: CoalitionStructure, allocation: Mapping, ctx: BargainingContext,
                         rng: np.random.Generator) -> BargainingOutcome:
    """One bargaining round at the current step.

    Persisted allocations are first rescaled to the current coalition values.
    With several coalitions every coupled pair is tried once (merges are
    visible to later pairs); a grand coalition only runs the demand checks.
    """
    allocation = dict(allocation)
    for P in structure:
        vP = ctx.coalition_value(P)
        if vP is None:
            vP = sum(allocation.get(j, 0.0) for j in P)
        allocation.update(rescale_allocations(allocation, P, vP))
    n = len(structure.agents)
    if len(structure) > 1:
        tried = set()
        budget = ctx.config.pairs_per_round or 4 * n * n
        while budget > 0:
            pair = _next_pair(structure, ctx, tried, rng)
            if pair is None:
                break
            tried.add(pair)
            budget -= 1
            P1, P2 = pair
            if P1 not in structure.coalitions or P2 not in structure.coalitions:
                continue
            structure, allocation = attempt_merger(structure, allocation, P1, P2, ctx, rng)
    else:
        P = structure.coalitions[0]
        if len(P) > 1:
            vP = ctx.coalition_value(P)
            if vP is not None:
                structure, allocation = transfer_or_split(structure, allocation, P, vP, ctx, rng)
    if not structure.is_partition_of(ctx.model_set.ids):
        raise RuntimeError("bargaining produced an invalid partition")
    return BargainingOutcome(structure, allocation, ctx.events)


def update_allocations(allocation_at_kprime: Mapping, v_at_kprime: float, realized_stage_cost: float,
                       coop_cost: float) -> dict:
    """Scale the bargained proportions to the realized bracket ``stage cost + coop cost``."""
    bracket = float(realized_stage_cost) + float(coop_cost)
    members = sorted(allocation_at_kprime)
    if v_at_kprime == 0:
        return {j: bracket / len(members) for j in members}
    return {j: allocation_at_kprime[j] / v_at_kprime * bracket for j in members}


def prediction_deviation(realized_stage_costs, predicted_cost: float, coalition=(), Np: int | None = None,
                         partial: bool = False) -> DeviationRecord:
    realized = np.asarray(realized_stage_costs, dtype=float)
    if Np is not None and realized.size < Np:
        partial = True
    total = float(realized.sum())
    return DeviationRecord(tuple(coalition), float(predicted_cost), total,
                           total - float(predicted_cost), partial)


def switch_cost_bound_check(deviations_before, deviations_after, merged_deviations, chi_terms) -> BoundCheck:
    """Diagnostic for the cost bound at a merger.

    Checks ``sum(after) <= sum(before) - 2(|w1| + |w2|) + chi12 - chi1 - chi2``
    where ``merged_deviations = (w1, w2)`` belong to the two merging
    coalitions and ``chi_terms = (chi12, chi1, chi2)``.  Returns the slack
    ``rhs - lhs``.
    """
    vals = list(deviations_before) + list(deviations_after) + list(merged_deviations) + list(chi_terms)
    if any(v is None for v in vals) or len(merged_deviations) != 2 or len(chi_terms) != 3:
        return BoundCheck("inconclusive", None)
    w1, w2 = merged_deviations
    chi12, chi1, chi2 = chi_terms
    rhs = sum(deviations_before) - 2 * (abs(w1) + abs(w2)) + chi12 - chi1 - chi2
    slack = float(rhs - sum(deviations_after))
    return BoundCheck("satisfied" if slack >= -1e-12 else "violated", slack)
