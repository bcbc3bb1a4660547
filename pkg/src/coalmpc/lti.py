"""Coupled discrete-time LTI subsystems, communication graphs and coalition aggregation.

Each agent ``i`` owns a local model

    x_i(k+1) = A_ii x_i(k) + B_ii u_i(k) + D_i d_i(k) + sum_{j in M_i} A_ij x_j(k) + B_ij u_j(k)

where the neighbour set ``M_i`` is read off the nonzero cross blocks.  A coalition
stacks the models of its members (ascending id) and treats coupling to outsiders
as an unknown disturbance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
from scipy.linalg import expm


def _as_matrix(a, rows=None, cols=None, name="matrix"):
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if rows is not None and a.shape[0] != rows:
        raise ValueError(f"{name}: expected {rows} rows, got {a.shape[0]}")
    if cols is not None and a.shape[1] != cols:
        raise ValueError(f"{name}: expected {cols} columns, got {a.shape[1]}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name}: non-finite entries")
    return a


def _box(bounds, size, name):
    if bounds is None:
        lo = np.full(size, -np.inf)
        hi = np.full(size, np.inf)
    else:
        lo, hi = bounds
        lo = np.broadcast_to(np.asarray(lo, dtype=float), (size,)).copy()
        hi = np.broadcast_to(np.asarray(hi, dtype=float), (size,)).copy()
    if np.any(lo > hi):
        raise ValueError(f"{name}: empty box (lower > upper)")
    return lo, hi


@dataclass(frozen=True)
class SubsystemModel:
    """Local dynamics of one agent.

    ``couplings`` maps neighbour id to ``(A_cross, B_cross)``; zero pairs are
    dropped on construction so the key set is exactly the neighbour set.
    ``D_dist`` is an optional known-disturbance input (the load channel of the
    power-grid benchmark).
    """

    id: int
    A_self: np.ndarray
    B_self: np.ndarray
    couplings: Mapping[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    state_box: tuple[np.ndarray, np.ndarray] | None = None
    input_box: tuple[np.ndarray, np.ndarray] | None = None
    D_dist: np.ndarray | None = None

    def __post_init__(self):
        A = _as_matrix(self.A_self, name=f"A_self[{self.id}]")
        n = A.shape[0]
        if A.shape[1] != n:
            raise ValueError(f"A_self[{self.id}] must be square")
        B = _as_matrix(self.B_self, rows=n, name=f"B_self[{self.id}]")
        couplings = {}
        for j, (Ac, Bc) in sorted(self.couplings.items()):
            j = int(j)
            if j == self.id:
                raise ValueError(f"agent {self.id}: self-coupling entry")
            Ac = _as_matrix(Ac, rows=n, name=f"A_cross[{self.id},{j}]")
            Bc = np.zeros((n, 0)) if Bc is None else _as_matrix(Bc, rows=n, name=f"B_cross[{self.id},{j}]")
            if np.any(Ac != 0) or np.any(Bc != 0):
                couplings[j] = (Ac, Bc)
        object.__setattr__(self, "A_self", A)
        object.__setattr__(self, "B_self", B)
        object.__setattr__(self, "couplings", couplings)
        object.__setattr__(self, "state_box", _box(self.state_box, n, f"state_box[{self.id}]"))
        object.__setattr__(self, "input_box", _box(self.input_box, B.shape[1], f"input_box[{self.id}]"))
        D = np.zeros((n, 0)) if self.D_dist is None else _as_matrix(self.D_dist, rows=n, name=f"D_dist[{self.id}]")
        object.__setattr__(self, "D_dist", D)

    @property
    def n(self) -> int:
        return self.A_self.shape[0]

    @property
    def q(self) -> int:
        return self.B_self.shape[1]

    @property
    def nd(self) -> int:
        return self.D_dist.shape[1]

    @property
    def neighbors(self) -> frozenset[int]:
        return frozenset(self.couplings)


class ModelSet:
    """The collection of all subsystem models, indexed by ascending agent id."""

    def __init__(self, models: Iterable[SubsystemModel]):
        models = sorted(models, key=lambda m: m.id)
        self.models = {m.id: m for m in models}
        if len(self.models) != len(models):
            raise ValueError("duplicate agent ids")
        self.ids = tuple(self.models)
        for m in models:
            for j, (Ac, Bc) in m.couplings.items():
                if j not in self.models:
                    raise ValueError(f"agent {m.id} coupled to unknown agent {j}")
                if Ac.shape[1] != self.models[j].n:
                    raise ValueError(f"A_cross[{m.id},{j}] has wrong column count")
                if Bc.shape[1] not in (0, self.models[j].q):
                    raise ValueError(f"B_cross[{m.id},{j}] has wrong column count")
        self._x_off, self._u_off, self._d_off = {}, {}, {}
        nx = nu = nd = 0
        for i in self.ids:
            self._x_off[i], self._u_off[i], self._d_off[i] = nx, nu, nd
            nx += self.models[i].n
            nu += self.models[i].q
            nd += self.models[i].nd
        self.n, self.q, self.nd = nx, nu, nd
        self._glob = None

    def __getitem__(self, i) -> SubsystemModel:
        try:
            return self.models[i]
        except KeyError:
            raise KeyError(f"unknown agent id {i}") from None

    def __contains__(self, i) -> bool:
        return i in self.models

    def __iter__(self):
        return iter(self.models.values())

    def __len__(self):
        return len(self.models)

    def xs(self, i) -> slice:
        """Slice of agent ``i`` in the global state vector."""
        return slice(self._x_off[i], self._x_off[i] + self[i].n)

    def us(self, i) -> slice:
        return slice(self._u_off[i], self._u_off[i] + self[i].q)

    def ds(self, i) -> slice:
        return slice(self._d_off[i], self._d_off[i] + self[i].nd)

    def state_index(self, members) -> np.ndarray:
        return np.concatenate([np.arange(self.n)[self.xs(i)] for i in members]).astype(int)

    def input_index(self, members) -> np.ndarray:
        return np.concatenate([np.arange(self.q)[self.us(i)] for i in members]).astype(int)

    def global_matrices(self):
        """Assemble the global ``A``, ``B`` and disturbance matrix ``D``."""
        if self._glob is not None:
            return self._glob
        A = np.zeros((self.n, self.n))
        B = np.zeros((self.n, self.q))
        D = np.zeros((self.n, self.nd))
        for m in self:
            A[self.xs(m.id), self.xs(m.id)] = m.A_self
            B[self.xs(m.id), self.us(m.id)] = m.B_self
            D[self.xs(m.id), self.ds(m.id)] = m.D_dist
            for j, (Ac, Bc) in m.couplings.items():
                A[self.xs(m.id), self.xs(j)] = Ac
                if Bc.size:
                    B[self.xs(m.id), self.us(j)] = Bc
        for M in (A, B, D):
            M.setflags(write=False)
        self._glob = (A, B, D)
        return self._glob

    def edges(self) -> set[tuple[int, int]]:
        """Undirected dynamic-coupling edges ``(i, j)`` with ``i < j``."""
        return {(min(m.id, j), max(m.id, j)) for m in self for j in m.couplings}


def neighbors(model_set: ModelSet, i) -> frozenset[int]:
    return model_set[i].neighbors


@dataclass(frozen=True)
class CommGraph:
    agents: frozenset
    edges: frozenset

    def __init__(self, agents, edges=()):
        agents = frozenset(agents)
        norm = set()
        for a, b in edges:
            if a == b:
                raise ValueError(f"self-loop on agent {a}")
            if a not in agents or b not in agents:
                raise ValueError(f"edge ({a}, {b}) references unknown agent")
            norm.add((min(a, b), max(a, b)))
        object.__setattr__(self, "agents", agents)
        object.__setattr__(self, "edges", frozenset(norm))

    def has_edge(self, a, b) -> bool:
        return (min(a, b), max(a, b)) in self.edges


@dataclass(frozen=True)
class CoalitionStructure:
    """A partition of the agent set into nonempty disjoint coalitions.

    Coalitions are stored as sorted tuples, ordered by smallest member.
    """

    coalitions: tuple[tuple[int, ...], ...]

    def __init__(self, coalitions):
        cs = [tuple(sorted(c)) for c in coalitions]
        if any(len(c) == 0 for c in cs):
            raise ValueError("empty coalition")
        seen = set()
        for c in cs:
            if seen & set(c):
                raise ValueError("coalitions overlap")
            seen |= set(c)
        object.__setattr__(self, "coalitions", tuple(sorted(cs, key=lambda c: c[0])))

    @property
    def agents(self) -> frozenset:
        return frozenset(a for c in self.coalitions for a in c)

    def is_partition_of(self, agents) -> bool:
        return self.agents == frozenset(agents)

    def coalition_of(self, agent) -> tuple[int, ...]:
        for c in self.coalitions:
            if agent in c:
                return c
        raise KeyError(f"agent {agent} not in structure")

    def merge(self, c1, c2) -> "CoalitionStructure":
        c1, c2 = tuple(sorted(c1)), tuple(sorted(c2))
        rest = [c for c in self.coalitions if c not in (c1, c2)]
        if len(rest) != len(self.coalitions) - 2:
            raise ValueError("merge of coalitions not in structure")
        return CoalitionStructure(rest + [c1 + c2])

    def replace(self, old, parts) -> "CoalitionStructure":
        old = tuple(sorted(old))
        if old not in self.coalitions:
            raise ValueError(f"{old} not in structure")
        return CoalitionStructure([c for c in self.coalitions if c != old] + list(parts))

    def to_graph(self) -> CommGraph:
        edges = [(a, b) for c in self.coalitions for a in c for b in c if a < b]
        return CommGraph(self.agents, edges)

    def __len__(self):
        return len(self.coalitions)

    def __iter__(self):
        return iter(self.coalitions)


def connected_components(graph: CommGraph) -> CoalitionStructure:
    adj = {a: set() for a in graph.agents}
    for a, b in graph.edges:
        adj[a].add(b)
        adj[b].add(a)
    seen, comps = set(), []
    for start in sorted(graph.agents):
        if start in seen:
            continue
        stack, comp = [start], []
        seen.add(start)
        while stack:
            a = stack.pop()
            comp.append(a)
            for b in adj[a] - seen:
                seen.add(b)
                stack.append(b)
        comps.append(comp)
    return CoalitionStructure(comps)


@dataclass(frozen=True)
class CoalitionModel:
    """Stacked prediction model of a coalition.

    ``external`` maps each member to its couplings with non-members, which the
    coalition cannot see and which enter only as the disturbance ``w``.
    """

    members: tuple[int, ...]
    A: np.ndarray
    B: np.ndarray
    D: np.ndarray
    x_lo: np.ndarray
    x_hi: np.ndarray
    u_lo: np.ndarray
    u_hi: np.ndarray
    x_index: np.ndarray
    u_index: np.ndarray
    d_index: np.ndarray
    external: Mapping[int, Mapping[int, tuple[np.ndarray, np.ndarray]]]

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def q(self) -> int:
        return self.B.shape[1]

    @property
    def external_neighbors(self) -> frozenset[int]:
        return frozenset(j for ext in self.external.values() for j in ext)

    def local_slices(self, model_set: ModelSet):
        """Per-member (state slice, input slice) inside the coalition vectors."""
        out, xo, uo = {}, 0, 0
        for i in self.members:
            m = model_set[i]
            out[i] = (slice(xo, xo + m.n), slice(uo, uo + m.q))
            xo += m.n
            uo += m.q
        return out


def aggregate_coalition(model_set: ModelSet, members) -> CoalitionModel:
    members = tuple(sorted(set(members)))
    if not members:
        raise ValueError("empty coalition")
    for i in members:
        model_set[i]
    x_index = model_set.state_index(members)
    u_index = model_set.input_index(members)
    d_index = np.concatenate([np.arange(model_set.nd)[model_set.ds(i)] for i in members]).astype(int)
    A_g, B_g, D_g = model_set.global_matrices()
    A = A_g[np.ix_(x_index, x_index)]
    B = B_g[np.ix_(x_index, u_index)]
    D = D_g[np.ix_(x_index, d_index)]
    mset = set(members)
    external = {i: {j: c for j, c in model_set[i].couplings.items() if j not in mset} for i in members}
    lo = np.concatenate([model_set[i].state_box[0] for i in members])
    hi = np.concatenate([model_set[i].state_box[1] for i in members])
    ulo = np.concatenate([model_set[i].input_box[0] for i in members])
    uhi = np.concatenate([model_set[i].input_box[1] for i in members])
    return CoalitionModel(members, A, B, D, lo, hi, ulo, uhi, x_index, u_index, d_index, external)


def cross_blocks(model_set: ModelSet, rows, cols):
    """Coupling of coalition ``rows`` on the states/inputs of coalition ``cols``.

    Returns ``(A_rc, B_rc)`` sized for the stacked vectors of both coalitions.
    """
    rows = tuple(sorted(rows))
    cols = tuple(sorted(cols))
    A_g, B_g, _ = model_set.global_matrices()
    xr, ur = model_set.state_index(rows), model_set.input_index(rows)
    xc, uc = model_set.state_index(cols), model_set.input_index(cols)
    return A_g[np.ix_(xr, xc)], B_g[np.ix_(xr, uc)]


def external_coupling(model_set: ModelSet, coalition: CoalitionModel, x, u) -> np.ndarray:
    """Disturbance ``w_r`` felt by the coalition from outsiders at global ``(x, u)``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape != (model_set.n,) or u.shape != (model_set.q,):
        raise ValueError("global state/input dimension mismatch")
    w = np.zeros(coalition.n)
    for i, (xsl, _) in coalition.local_slices(model_set).items():
        for j, (Ac, Bc) in coalition.external[i].items():
            w[xsl] += Ac @ x[model_set.xs(j)]
            if Bc.size:
                w[xsl] += Bc @ u[model_set.us(j)]
    return w


def step_global(model_set: ModelSet, x, u, d=None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape != (model_set.n,) or u.shape != (model_set.q,):
        raise ValueError("global state/input dimension mismatch")
    A, B, D = model_set.global_matrices()
    xn = A @ x + B @ u
    if d is not None and model_set.nd:
        d = np.asarray(d, dtype=float)
        if d.shape != (model_set.nd,):
            raise ValueError("disturbance dimension mismatch")
        xn = xn + D @ d
    return xn


@dataclass(frozen=True)
class ContinuousAreaModel:
    """Continuous-time area model, used only as input to :func:`discretize_area`."""

    id: int
    A_self: np.ndarray
    B_self: np.ndarray
    D_load: np.ndarray
    couplings: Mapping[int, np.ndarray] = field(default_factory=dict)
    input_box: tuple | None = None
    state_box: tuple | None = None


def zoh_integral(A, Ts) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(exp(A Ts), int_0^Ts exp(A s) ds)`` via the augmented exponential."""
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    M = np.zeros((2 * n, 2 * n))
    M[:n, :n] = A
    M[:n, n:] = np.eye(n)
    E = expm(M * Ts)
    return E[:n, :n], E[:n, n:]


def discretize_area(cont: ContinuousAreaModel, Ts: float) -> SubsystemModel:
    """Zero-order-hold discretization treating inputs, load and neighbour states as exogenous.

    Only the local ``A_self`` is exponentiated, so every cross block maps to
    ``Gamma @ A_cross`` and keeps the sparsity pattern of the continuous model.
    """
    if not Ts > 0:
        raise ValueError("Ts must be positive")
    mats = [cont.A_self, cont.B_self, cont.D_load, *cont.couplings.values()]
    if not all(np.all(np.isfinite(np.asarray(m, dtype=float))) for m in mats):
        raise ValueError("non-finite matrix entries")
    Ad, Gamma = zoh_integral(cont.A_self, Ts)
    Bd = Gamma @ np.atleast_2d(np.asarray(cont.B_self, dtype=float))
    Dd = Gamma @ np.atleast_2d(np.asarray(cont.D_load, dtype=float))
    couplings = {}
    for j, Ac in cont.couplings.items():
        Ac = np.asarray(Ac, dtype=float)
        # keep structural zeros exact; rounding in Gamma must not densify
        Acd = Gamma @ Ac
        Acd[:, ~np.any(Ac != 0, axis=0)] = 0.0
        Acd[np.abs(Acd) < 1e-14 * max(1.0, np.abs(Acd).max())] = 0.0
        couplings[j] = (Acd, np.zeros((Ac.shape[0], 0)))
    return SubsystemModel(cont.id, Ad, Bd, couplings, cont.state_box, cont.input_box, Dd)


def model_set_to_dict(model_set: ModelSet) -> dict:
    def box(b):
        return [[None if not np.isfinite(v) else float(v) for v in b[0]],
                [None if not np.isfinite(v) else float(v) for v in b[1]]]

    return {
        "subsystems": [
            {
                "id": m.id,
                "A_self": m.A_self.tolist(),
                "B_self": m.B_self.tolist(),
                "D_dist": m.D_dist.tolist() if m.nd else None,
                "couplings": [
                    {"neighbor": j, "A_cross": Ac.tolist(), "B_cross": Bc.tolist() if Bc.size else None}
                    for j, (Ac, Bc) in m.couplings.items()
                ],
                "state_box": box(m.state_box),
                "input_box": box(m.input_box),
            }
            for m in model_set
        ]
    }


def model_set_from_dict(data: dict) -> ModelSet:
    def box(b):
        if b is None:
            return None
        lo = [-np.inf if v is None else v for v in b[0]]
        hi = [np.inf if v is None else v for v in b[1]]
        return np.array(lo, dtype=float), np.array(hi, dtype=float)

    models = []
    for s in data["subsystems"]:
        couplings = {
            int(c["neighbor"]): (np.array(c["A_cross"], dtype=float),
                                 None if c.get("B_cross") is None else np.array(c["B_cross"], dtype=float))
            for c in s.get("couplings", [])
        }
        models.append(SubsystemModel(
            int(s["id"]), np.array(s["A_self"], dtype=float), np.array(s["B_self"], dtype=float),
            couplings, box(s.get("state_box")), box(s.get("input_box")),
            None if s.get("D_dist") is None else np.array(s["D_dist"], dtype=float),
        ))
    return ModelSet(models)
