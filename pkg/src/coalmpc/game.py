"""Transferable-utility cost games: values, transfers, core and least-core, Shapley value.

Cost convention throughout: ``v(S)`` is what ``S`` would pay on its own (lower
is better) and the excess ``e(S, p) = sum_{j in S} p_j - v(S)`` is positive
when ``S`` overpays under allocation ``p``.  The core is the set of efficient
allocations where no subcoalition overpays.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
from scipy.optimize import linprog

from .qp import QuadraticProgram, solve_qp

EXHAUSTIVE_LIMIT = 16
SHAPLEY_LIMIT = 12


@dataclass(frozen=True)
class CooperationCostFn:
    c_coal: float = 0.0
    exponent: float = 2.0
    threshold: int = 2

    def __post_init__(self):
        if self.c_coal < 0:
            raise ValueError("c_coal must be nonnegative")

    def __call__(self, size: int) -> float:
        return cooperation_cost(self, size)


def cooperation_cost(fn: CooperationCostFn, coalition_size: int) -> float:
    if coalition_size < 1:
        raise ValueError("coalition size must be >= 1")
    if coalition_size < fn.threshold:
        return 0.0
    return fn.c_coal * coalition_size ** fn.exponent


def coalition_value(predicted_control_cost: float, coop_cost: float) -> float:
    return float(predicted_control_cost) + float(coop_cost)


def merger_test(v1: float, v2: float, v12: float) -> bool:
    return v12 <= v1 + v2


def egalitarian_split(v1: float, v2: float, v12: float) -> tuple[float, float]:
    surplus = 0.5 * (v1 + v2 - v12)
    return v1 - surplus, v2 - surplus


class CostGame:
    """Characteristic cost function over subsets of ``players``, filled lazily.

    ``evaluator(S)`` must return a mapping ``frozenset -> value`` containing at
    least ``S``; any extra entries (e.g. the complement evaluated in the same
    best-response run) are cached too.
    """

    def __init__(self, players, values: Mapping | None = None,
                 evaluator: Callable[[frozenset], Mapping] | None = None):
        self.players = tuple(sorted(players))
        self._pset = frozenset(self.players)
        self.values: dict[frozenset, float] = {frozenset(): 0.0}
        self.evaluator = evaluator
        self.evaluations = 0
        for s, v in (values or {}).items():
            self._store(frozenset(s), v)

    def _store(self, s, v):
        if not s <= self._pset:
            raise ValueError(f"subset {sorted(s)} not within players")
        v = float(v)
        if not np.isfinite(v):
            raise ValueError(f"non-finite value for {sorted(s)}")
        if s:
            self.values[s] = v

    def __len__(self):
        return len(self.players)

    def has(self, S) -> bool:
        return frozenset(S) in self.values

    def value(self, S) -> float:
        s = frozenset(S)
        if s not in self.values:
            if not s <= self._pset:
                raise ValueError(f"subset {sorted(s)} not within players")
            if self.evaluator is None:
                raise KeyError(f"value of {sorted(s)} not available")
            self.evaluations += 1
            for t, v in self.evaluator(s).items():
                self._store(frozenset(t), v)
        return self.values[s]

    v = value

    def proper_subsets(self):
        for r in range(1, len(self.players)):
            for s in itertools.combinations(self.players, r):
                yield frozenset(s)

    def export_table(self) -> str:
        """Tab-separated ``members<TAB>value`` lines for every cached subset."""
        rows = sorted(self.values.items(), key=lambda kv: (len(kv[0]), sorted(kv[0])))
        return "\n".join(f"{','.join(map(str, sorted(s))) or '-'}\t{v:.17g}" for s, v in rows) + "\n"

    @classmethod
    def from_function(cls, players, f) -> "CostGame":
        """Fully enumerated game with ``v(S) = f(S)``."""
        players = tuple(sorted(players))
        vals = {frozenset(s): f(frozenset(s))
                for r in range(1, len(players) + 1) for s in itertools.combinations(players, r)}
        return cls(players, vals)


def _check_size(game, limit):
    if len(game) > limit:
        raise ValueError(f"game too large for exhaustive computation ({len(game)} > {limit})")


def excess(game: CostGame, S, allocation: Mapping) -> float:
    s = frozenset(S)
    if not s:
        return 0.0
    return sum(allocation[j] for j in s) - game.value(s)


def satisfy_demand(allocation: Mapping, S, e: float) -> dict:
    """Egalitarian transfer zeroing the excess ``e`` of ``S``: ``S`` pays ``e`` less, the rest ``e`` more."""
    s = frozenset(S)
    players = set(allocation)
    rest = players - s
    if not s or not rest or not s <= players:
        raise ValueError("S must be a nonempty proper subset of the allocation's players")
    out = dict(allocation)
    for j in s:
        out[j] -= e / len(s)
    for j in rest:
        out[j] += e / len(rest)
    return out


def is_efficient(game: CostGame, allocation: Mapping, tol: float = 1e-9) -> bool:
    return abs(sum(allocation[j] for j in game.players) - game.value(game.players)) <= tol


def core_membership(game: CostGame, allocation: Mapping, tol: float = 1e-9) -> bool:
    _check_size(game, EXHAUSTIVE_LIMIT)
    if not is_efficient(game, allocation, tol):
        return False
    return all(excess(game, s, allocation) <= tol for s in game.proper_subsets())


def least_core_epsilon(game: CostGame) -> tuple[float, dict]:
    """Smallest ``eps >= 0`` for which some efficient ``p`` has all excesses ``<= eps``."""
    _check_size(game, EXHAUSTIVE_LIMIT)
    players = game.players
    n = len(players)
    if n == 1:
        return 0.0, {players[0]: game.value(players)}
    idx = {j: k for k, j in enumerate(players)}
    subsets = list(game.proper_subsets())
    A = np.zeros((len(subsets), n + 1))
    b = np.zeros(len(subsets))
    for r, s in enumerate(subsets):
        for j in s:
            A[r, idx[j]] = 1.0
        A[r, n] = -1.0
        b[r] = game.value(s)
    Aeq = np.zeros((1, n + 1))
    Aeq[0, :n] = 1.0
    c = np.zeros(n + 1)
    c[n] = 1.0
    bounds = [(None, None)] * n + [(0, None)]
    res = linprog(c, A_ub=A, b_ub=b, A_eq=Aeq, b_eq=[game.value(players)], bounds=bounds,
                  method="highs")
    if not res.success:
        raise RuntimeError(f"least-core LP failed: {res.message}")
    eps = float(res.x[n])
    return (0.0 if eps < 1e-12 else eps), {j: float(res.x[idx[j]]) for j in players}


def core_projection(game: CostGame, allocation: Mapping) -> tuple[dict, float]:
    """Euclidean projection of ``allocation`` onto the core.

    When the core is empty the least-core polytope is used instead; the
    returned ``eps`` is then positive.
    """
    _check_size(game, EXHAUSTIVE_LIMIT)
    players = game.players
    eps, _ = least_core_epsilon(game)
    eps = 0.0 if eps <= 1e-9 else eps
    n = len(players)
    p = np.array([allocation[j] for j in players], dtype=float)
    idx = {j: k for k, j in enumerate(players)}
    subsets = list(game.proper_subsets())
    A = np.zeros((len(subsets), n))
    b = np.zeros(len(subsets))
    for r, s in enumerate(subsets):
        for j in s:
            A[r, idx[j]] = 1.0
        b[r] = game.value(s) + eps
    qp = QuadraticProgram(2 * np.eye(n), -2 * p, float(p @ p), A, b, np.ones((1, n)),
                          [game.value(players)])
    res = solve_qp(qp, tolerance=1e-11)
    return {j: float(res.z[idx[j]]) for j in players}, eps


def core_distance(game: CostGame, allocation: Mapping) -> float:
    z, _ = core_projection(game, allocation)
    return float(np.sqrt(sum((allocation[j] - z[j]) ** 2 for j in game.players)))


def shapley_value(game: CostGame) -> dict:
    _check_size(game, SHAPLEY_LIMIT)
    players = game.players
    n = len(players)
    fact = [math.factorial(k) for k in range(n + 1)]
    phi = {}
    for j in players:
        others = [i for i in players if i != j]
        total = 0.0
        for r in range(n):
            w = fact[r] * fact[n - r - 1] / fact[n]
            for s in itertools.combinations(others, r):
                s = frozenset(s)
                total += w * (game.value(s | {j}) - game.value(s))
        phi[j] = total
    return phi


def alpha_condition_check(alpha_values) -> bool:
    """Finite-n check on the size discount ``alpha(1..n)``.

    Requires ``alpha`` non-increasing, at most one, and
    ``alpha(m) <= 2 alpha(m-1) - alpha(1)`` for ``2 < m <= n``.
    """
    a = [float(x) for x in alpha_values]
    if any(x > 1 for x in a):
        return False
    if any(a[k] > a[k - 1] for k in range(1, len(a))):
        return False
    # a[m-1] is alpha(m)
    return all(a[m - 1] <= 2 * a[m - 2] - a[0] for m in range(3, len(a) + 1))


def _marginal_pairs(game):
    players = game.players
    for j in players:
        others = [i for i in players if i != j]
        subsets = [frozenset(s) for r in range(len(others) + 1) for s in itertools.combinations(others, r)]
        for S in subsets:
            mS = game.value(S | {j}) - game.value(S)
            for T in subsets:
                if T <= S:
                    yield mS, game.value(T | {j}) - game.value(T)


def supermodularity_check(game: CostGame, tol: float = 1e-12) -> bool:
    """``v(S+j) - v(S) >= v(T+j) - v(T)`` for all ``T <= S <= C - {j}``."""
    _check_size(game, EXHAUSTIVE_LIMIT)
    return all(mS >= mT - tol for mS, mT in _marginal_pairs(game))


def submodularity_check(game: CostGame, tol: float = 1e-12) -> bool:
    """Reverse inequality; a submodular cost game has a nonempty core."""
    _check_size(game, EXHAUSTIVE_LIMIT)
    return all(mS <= mT + tol for mS, mT in _marginal_pairs(game))


def _member_slices(weights, members):
    out, xo, uo = {}, 0, 0
    for i in members:
        n = np.atleast_2d(weights.Q_blocks[(i, i)]).shape[0]
        q = np.atleast_2d(weights.R_blocks[i]).shape[0]
        out[i] = (np.arange(xo, xo + n), np.arange(uo, uo + q))
        xo, uo = xo + n, uo + q
    return out


def player_cost_share(joint_solution, player_members, weights, coop_cost_total: float,
                      refs=None) -> float:
    """Part of a joint coalition's predicted value attributed to one player.

    Each stage term ``dx' Q dx`` is split by rows: the player keeps the rows of
    its own states, so its own block plus half of every symmetric cross term
    with the other player.  Inputs are weighted block-diagonally.  The
    cooperation cost is split equally per agent.  Shares of complementary
    players therefore add up to the joint value.
    """
    members = tuple(sorted(joint_solution.members))
    player = tuple(sorted(player_members))
    if not player or not set(player) <= set(members):
        raise ValueError("player members must be a nonempty subset of the joint coalition")
    Q, R = weights.matrices(members)
    sl = _member_slices(weights, members)
    xi = np.concatenate([sl[i][0] for i in player])
    ui = np.concatenate([sl[i][1] for i in player])
    Np = joint_solution.input_sequence.shape[0]
    xs = np.vstack([joint_solution.x0, joint_solution.state_trajectory])
    us = joint_solution.input_sequence
    if refs is None:
        xr, ur = np.zeros_like(xs), np.zeros_like(us)
    else:
        xr, ur = np.asarray(refs.state_refs, dtype=float), np.asarray(refs.input_refs, dtype=float)
    share = 0.0
    for t in range(Np):
        dx = xs[t] - xr[t]
        du = us[t] - ur[t]
        share += float(dx[xi] @ (Q @ dx)[xi] + du[ui] @ (R @ du)[ui])
    return share + coop_cost_total * len(player) / len(members)
