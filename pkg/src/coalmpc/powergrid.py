"""Five-area load-frequency-control benchmark.

Each area has state ``(dtheta, domega, dPm, dPv)``, one input (the governor
setpoint ``dPref``) and one load channel.  Areas are coupled through the
tie-line synchronizing coefficients ``P0_ij``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .lti import ContinuousAreaModel, ModelSet, aggregate_coalition, discretize_area
from .mpc import MpcWeights, ReferenceTrajectory
from .qp import QuadraticProgram, solve_qp

N_AREAS = 5
AREA_IDS = (1, 2, 3, 4, 5)
DEFAULT_EDGES = ((1, 2), (2, 3), (3, 4), (4, 5), (2, 5))
# generation bound |u_i| per area: ample local capacity (S1), impaired (S2)
S1_BOUNDS = (0.2310, 0.1680, 0.1050, 0.0840, 0.1050)
S2_BOUNDS = (0.3465, 0.1512, 0.0945, 0.1260, 0.0945)
SCENARIO_BOUNDS = {"S1": S1_BOUNDS, "S2": S2_BOUNDS}

BASE_DIAG = (500.0, 0.01, 0.01, 10.0)
R_LOCAL = 10.0
Q_COOP = 1000.0
RTO_Q_DIAG = (10.0, 0.0, 100.0, 100.0)
RTO_R = 100.0


@dataclass(frozen=True)
class AreaParams:
    H: float = 5.0
    r_v: float = 0.05
    rho_f: float = 0.8
    tau_t: float = 0.5
    tau_g: float = 0.2
    sync_coeffs: Mapping[int, float] = field(default_factory=dict)
    u_max: float = np.inf

    def __post_init__(self):
        for name in ("H", "r_v", "tau_t", "tau_g"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.rho_f < 0 or self.u_max < 0:
            raise ValueError("rho_f and u_max must be nonnegative")
        if any(p < 0 for p in self.sync_coeffs.values()):
            raise ValueError("synchronizing coefficients must be nonnegative")


def build_area_model(params: AreaParams, area_id: int = 1) -> ContinuousAreaModel:
    H, tt, tg = params.H, params.tau_t, params.tau_g
    total = sum(params.sync_coeffs.values())
    A = np.array([
        [0.0, 1.0, 0.0, 0.0],
        [-total / (2 * H), -params.rho_f / (2 * H), 1 / (2 * H), 0.0],
        [0.0, 0.0, -1 / tt, 1 / tt],
        [0.0, -1 / (params.r_v * tg), 0.0, -1 / tg],
    ])
    B = np.array([[0.0], [0.0], [0.0], [1 / tg]])
    D = np.array([[0.0], [-1 / (2 * H)], [0.0], [0.0]])
    couplings = {}
    for j, p in params.sync_coeffs.items():
        if p != 0:
            Ac = np.zeros((4, 4))
            Ac[1, 0] = p / (2 * H)
            couplings[int(j)] = Ac
    box = (np.array([-params.u_max]), np.array([params.u_max]))
    return ContinuousAreaModel(area_id, A, B, D, couplings, box, None)


def benchmark_params(scenario: str = "S1", edges=DEFAULT_EDGES, P0: float = 2.0,
                     overrides: Mapping | None = None, bounds: Sequence[float] | None = None) -> dict:
    """Per-area parameters; ``overrides`` maps area id to a dict of field values."""
    if bounds is None:
        if scenario not in SCENARIO_BOUNDS:
            raise ValueError(f"unknown scenario {scenario!r}")
        bounds = SCENARIO_BOUNDS[scenario]
    if len(bounds) != N_AREAS:
        raise ValueError("need one input bound per area")
    sync = {i: {} for i in AREA_IDS}
    for a, b in edges:
        if a == b or a not in sync or b not in sync:
            raise ValueError(f"invalid edge {(a, b)}")
        sync[a][b] = P0
        sync[b][a] = P0
    out = {}
    for k, i in enumerate(AREA_IDS):
        kw = {"sync_coeffs": sync[i], "u_max": float(bounds[k])}
        kw.update((overrides or {}).get(i, {}))
        out[i] = AreaParams(**kw)
    return out


def benchmark_model_set(params: Mapping[int, AreaParams], Ts: float = 1.0) -> ModelSet:
    return ModelSet(discretize_area(build_area_model(p, i), Ts) for i, p in sorted(params.items()))


def tie_line_flow(theta_i, theta_j, P0_ij):
    """Power transferred from area ``i`` to area ``j``."""
    return P0_ij * (np.asarray(theta_i) - np.asarray(theta_j))


def tie_line_flows(params: Mapping[int, AreaParams], theta: Mapping[int, float]) -> dict:
    """All directed flows ``(i, j) -> dP_ij`` for coupled pairs."""
    return {(i, j): float(tie_line_flow(theta[i], theta[j], p))
            for i in sorted(params) for j, p in sorted(params[i].sync_coeffs.items())}


def coupling_weights(q_self_theta: float, q_cross_theta: Mapping[tuple[int, int], float],
                     base_diag=BASE_DIAG[1:], members=AREA_IDS, neighbor_map=None) -> dict:
    """State weight blocks for the areas in one coalition.

    ``q_cross_theta[(i, j)]`` is ``q_ij``; pairs not listed are zero.  Only
    neighbours inside ``members`` contribute, which is what the
    noncooperative (singleton) case needs.
    """
    members = tuple(sorted(members))
    mset = set(members)
    if neighbor_map is None:
        neighbor_map = {}
        for (i, j) in q_cross_theta:
            neighbor_map.setdefault(i, set()).add(j)
            neighbor_map.setdefault(j, set()).add(i)
    blocks = {}
    for i in members:
        inside = sorted(set(neighbor_map.get(i, ())) & mset)
        theta = q_self_theta
        for j in inside:
            qsum = q_cross_theta.get((i, j), 0.0) + q_cross_theta.get((j, i), 0.0)
            theta += qsum
            blk = np.zeros((4, 4))
            blk[0, 0] = -qsum
            blocks[(i, j)] = blk
        blocks[(i, i)] = np.diag([theta, *base_diag])
    return blocks


def benchmark_weights(edges=DEFAULT_EDGES, cooperative: bool = True, q_coop: float = Q_COOP,
                      base_diag=BASE_DIAG, r: float = R_LOCAL, Qf_scale: float = 20.0,
                      ids=AREA_IDS) -> MpcWeights:
    """Weights valid for every coalition: cross terms switch on with membership."""
    q = q_coop if cooperative else 0.0
    Q_blocks = {(i, i): np.diag(base_diag) for i in ids}
    Q_aug = {}
    for a, b in edges:
        for i, j in ((a, b), (b, a)):
            if q:
                blk = np.zeros((4, 4))
                blk[0, 0] = 2 * q
                Q_aug[(i, j)] = blk
                Q_blocks[(i, j)] = -blk
    return MpcWeights(Q_blocks, {i: np.array([[r]]) for i in ids}, Qf_scale, Q_aug)


def nominal_setpoint(delta_d: float) -> tuple[np.ndarray, np.ndarray]:
    d = float(delta_d)
    return np.array([0.0, 0.0, d, d]), np.array([d])


def nominal_references(members, demand_forecast, Np: int) -> ReferenceTrajectory:
    """Per-area nominal references; ``demand_forecast`` is ``(Np, |members|)``."""
    d = np.asarray(demand_forecast, dtype=float).reshape(Np, len(members))
    xs = np.zeros((Np + 1, 4 * len(members)))
    us = np.zeros((Np, len(members)))
    for t in range(Np):
        for a in range(len(members)):
            x, u = nominal_setpoint(d[t, a])
            xs[t + 1, 4 * a:4 * a + 4] = x
            us[t, a] = u[0]
    xs[0] = xs[1]
    return ReferenceTrajectory(xs, us)


@dataclass
class LoadProfile:
    """Piecewise-constant load deviation: ``steps[i]`` is a list of ``(k, value)``."""

    steps: Mapping[int, Sequence[tuple[int, float]]]
    ids: tuple = AREA_IDS

    def __post_init__(self):
        self.steps = {int(i): sorted((int(k), float(v)) for k, v in s) for i, s in self.steps.items()}
        for i, s in self.steps.items():
            if i not in self.ids:
                raise ValueError(f"load step for unknown area {i}")
            if any(k < 0 or not np.isfinite(v) for k, v in s):
                raise ValueError("load steps need k >= 0 and finite values")

    def at(self, k: int) -> np.ndarray:
        out = np.zeros(len(self.ids))
        for a, i in enumerate(self.ids):
            for kk, v in self.steps.get(i, ()):
                if kk <= k:
                    out[a] = v
        return out

    def window(self, k: int, Np: int) -> np.ndarray:
        return np.vstack([self.at(k + t) for t in range(Np)])

    @classmethod
    def constant(cls, values, start: int = 0, ids=AREA_IDS) -> "LoadProfile":
        return cls({i: [(start, float(v))] for i, v in zip(ids, values) if v != 0}, tuple(ids))

    @classmethod
    def random(cls, rng: np.random.Generator, T_sim: int, bounds=S1_BOUNDS, fraction=(0.3, 0.9),
               ids=AREA_IDS) -> "LoadProfile":
        """One step per area at a random time in the first half, magnitude a random fraction of capacity."""
        steps = {}
        for i, cap in zip(ids, bounds):
            k = int(rng.integers(0, max(1, T_sim // 2)))
            v = float(rng.uniform(*fraction)) * cap * float(rng.choice([-1.0, 1.0]))
            steps[i] = [(k, v)]
        return cls(steps, tuple(ids))


# default step: area 3 demand at its S1 capacity, a 10% deficit under S2
DEFAULT_LOADS = (0.10, 0.08, 0.105, 0.06, 0.08)


@dataclass(frozen=True)
class ScenarioSpec:
    scenario: str = "S1"
    input_bounds: tuple = S1_BOUNDS
    c_coal: float = 1e-3
    T_sim: int = 80
    edges: tuple = DEFAULT_EDGES

    @classmethod
    def default(cls, scenario: str = "S1", **kw) -> "ScenarioSpec":
        return cls(scenario, SCENARIO_BOUNDS[scenario], **kw)


@dataclass
class RtoResult:
    refs: ReferenceTrajectory
    feasible: bool


def rto_setpoints(model_set: ModelSet, members, demand_forecast, Np: int,
                  params: Mapping[int, AreaParams], q_diag=RTO_Q_DIAG, r: float = RTO_R,
                  tolerance: float = 1e-10, cache: dict | None = None) -> RtoResult:
    """Steady-state references balancing demand and supply inside a coalition.

    ``demand_forecast`` is ``(Np, |members|)``.  Singletons get the nominal
    setpoint.  Areas short of capacity must be covered by tie-line inflow from
    coalition partners; if that is impossible the references fall back to the
    capacity-saturated nominal setpoint and ``feasible`` is False.
    """
    members = tuple(sorted(members))
    m = len(members)
    d = np.asarray(demand_forecast, dtype=float).reshape(Np, m)
    if m == 1:
        return RtoResult(nominal_references(members, d, Np), True)
    cm = aggregate_coalition(model_set, members)
    u_max = cm.u_hi
    xs = np.zeros((Np + 1, 4 * m))
    us = np.zeros((Np, m))
    feasible = True
    for t in range(Np):
        key = (members, tuple(np.round(d[t], 15)))
        if cache is not None and key in cache:
            sol = cache[key]
        else:
            sol = _rto_step(model_set, cm, members, d[t], q_diag, r, params, tolerance)
            if cache is not None:
                cache[key] = sol
        if sol is None:
            feasible = False
            sat = np.clip(d[t], cm.u_lo, cm.u_hi)
            x = np.concatenate([nominal_setpoint(v)[0] for v in sat])
            u = sat
        else:
            x, u = sol
        xs[t + 1], us[t] = x, u
    xs[0] = xs[1]
    return RtoResult(ReferenceTrajectory(xs, us), feasible)


def _rto_step(model_set, cm, members, d, q_diag, r, params, tolerance):
    m = len(members)
    nx = 4 * m
    nz = nx + m
    xbar = np.concatenate([nominal_setpoint(v)[0] for v in d])
    ubar = d.copy()
    Q = np.kron(np.eye(m), np.diag(q_diag))
    H = np.zeros((nz, nz))
    H[:nx, :nx] = 2 * Q
    H[nx:, nx:] = 2 * r * np.eye(m)
    g = np.concatenate([-2 * Q @ xbar, -2 * r * ubar])
    c0 = float(xbar @ Q @ xbar + r * ubar @ ubar)
    # steady state x = A x + B u + D d
    rows = [np.hstack([np.eye(nx) - cm.A, -cm.B])]
    rhs = [cm.D @ d if cm.D.size else np.zeros(nx)]
    rows.append(np.concatenate([np.zeros(nx), np.ones(m)])[None, :])
    rhs.append(np.array([d.sum()]))
    mset = set(members)
    for a, j in enumerate(members):
        deficit = max(d[a] - cm.u_hi[a], 0.0)
        if deficit <= 0:
            continue
        row = np.zeros(nz)
        partners = sorted(model_set[j].neighbors & mset)
        if not partners:
            return None
        for rr in partners:
            p = params[rr].sync_coeffs[j]
            b = members.index(rr)
            row[4 * b] += p
            row[4 * a] -= p
        rows.append(row[None, :])
        rhs.append(np.array([deficit]))
    Aeq = np.vstack(rows)
    beq = np.concatenate(rhs)
    Ain = np.zeros((2 * m, nz))
    bin_ = np.zeros(2 * m)
    for a in range(m):
        Ain[2 * a, nx + a] = 1.0
        bin_[2 * a] = cm.u_hi[a]
        Ain[2 * a + 1, nx + a] = -1.0
        bin_[2 * a + 1] = -cm.u_lo[a]
    keep = np.isfinite(bin_)
    res = solve_qp(QuadraticProgram(H, g, c0, Ain[keep], bin_[keep], Aeq, beq), tolerance=tolerance)
    if not res.solved:
        return None
    z = res.z
    if np.max(np.abs(Aeq @ z - beq)) > 1e-7:
        return None
    return z[:nx], z[nx:]


def eta_index(omega, T_sim: int | None = None) -> float:
    """Mean over time of the summed squared frequency deviations."""
    w = np.atleast_2d(np.asarray(omega, dtype=float))
    T = w.shape[0] if T_sim is None else int(T_sim)
    if T < 1:
        raise ValueError("T_sim must be >= 1")
    return float(np.sum(w[:T] ** 2) / T)


def psi_index(theta, sync_coeffs: Mapping[int, Mapping[int, float]], Ts: float = 1.0,
              T_sim: int | None = None, ids=None) -> float:
    """Sum of squared transferred energies, both directions of every tie line."""
    th = np.atleast_2d(np.asarray(theta, dtype=float))
    T = th.shape[0] if T_sim is None else int(T_sim)
    ids = tuple(ids) if ids is not None else tuple(sorted(sync_coeffs))
    col = {i: a for a, i in enumerate(ids)}
    total = 0.0
    for i in ids:
        for j, p in sync_coeffs.get(i, {}).items():
            flow = tie_line_flow(th[:T, col[i]], th[:T, col[j]], p) * Ts
            total += float(np.sum(flow ** 2))
    return total
