"""Random model and game builders shared by the tests."""

import itertools

import numpy as np

from coalmpc.lti import ModelSet, SubsystemModel


def stable_matrix(rng, n, radius=0.9):
    A = rng.normal(size=(n, n))
    return A * radius / max(1e-9, np.max(np.abs(np.linalg.eigvals(A))))


def chain_model_set(rng, n_agents=3, n=2, q=1, coupling=0.1, input_bound=None):
    """Agents ``1..n_agents`` coupled in a line."""
    models = []
    for i in range(1, n_agents + 1):
        couplings = {}
        for j in (i - 1, i + 1):
            if 1 <= j <= n_agents:
                couplings[j] = (coupling * rng.normal(size=(n, n)), None)
        box = None if input_bound is None else (-input_bound * np.ones(q), input_bound * np.ones(q))
        models.append(SubsystemModel(i, stable_matrix(rng, n, 0.7), rng.normal(size=(n, q)),
                                     couplings, input_box=box))
    return ModelSet(models)


def random_core_game(rng, n):
    """Cost game with a known core point: every coalition value is at least its share of ``p*``."""
    players = tuple(range(1, n + 1))
    p_star = rng.normal(size=n)
    values = {}
    for r in range(1, n + 1):
        for s in itertools.combinations(players, r):
            base = sum(p_star[j - 1] for j in s)
            values[frozenset(s)] = base if r == n else base + rng.exponential(1.0)
    return players, values, {j: float(p_star[j - 1]) for j in players}


def enumerate_qp(H, g, A, b, Aeq=None, beq=None):
    """Optimum of a strictly convex QP by trying every active set.

    For each candidate set the equality-constrained minimizer is computed; the
    best primal-feasible one is the optimum.
    """
    n = H.shape[0]
    Aeq = np.zeros((0, n)) if Aeq is None else Aeq
    beq = np.zeros(0) if beq is None else beq
    best_z, best_f = None, np.inf
    m = A.shape[0]
    for r in range(0, min(m, n - Aeq.shape[0]) + 1):
        for act in itertools.combinations(range(m), r):
            E = np.vstack([Aeq, A[list(act)]])
            e = np.concatenate([beq, b[list(act)]])
            k = E.shape[0]
            K = np.block([[H, E.T], [E, np.zeros((k, k))]])
            try:
                sol = np.linalg.solve(K, np.concatenate([-g, e]))
            except np.linalg.LinAlgError:
                continue
            z = sol[:n]
            if not np.allclose(K @ sol, np.concatenate([-g, e]), atol=1e-9):
                continue
            if np.all(A @ z <= b + 1e-9):
                f = 0.5 * z @ H @ z + g @ z
                if f < best_f:
                    best_z, best_f = z, f
    return best_z, best_f


def random_qp(rng, n_max=8, m_max=10):
    """Strictly convex QP with a box on some variables plus general rows; feasible by construction."""
    n = int(rng.integers(2, n_max + 1))
    M = rng.normal(size=(n, n))
    H = M @ M.T + 0.1 * np.eye(n)
    g = rng.normal(size=n) * 3
    rows, rhs = [], []
    boxed = rng.choice(n, size=int(rng.integers(0, min(n, m_max // 2) + 1)), replace=False)
    for j in boxed:
        e = np.zeros(n)
        e[j] = 1.0
        rows.append(e); rhs.append(rng.uniform(0.1, 1.0))
        if len(rows) < m_max:
            rows.append(-e); rhs.append(rng.uniform(0.1, 1.0))
    target = int(rng.integers(len(rows), m_max)) + 1 if len(rows) < m_max else m_max
    while len(rows) < target:
        rows.append(rng.normal(size=n)); rhs.append(rng.uniform(0.0, 1.0))
    return H, g, np.array(rows).reshape(-1, n), np.array(rhs)


def riccati_inputs(A, B, Q, R, Qf, x0, Np):
    """Finite-horizon LQR input sequence by backward Riccati recursion."""
    P = Qf
    gains = []
    for _ in range(Np):
        K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        P = Q + A.T @ P @ (A - B @ K)
        gains.append(K)
    gains.reverse()
    x, us = np.asarray(x0, dtype=float), []
    for K in gains:
        u = -K @ x
        us.append(u)
        x = A @ x + B @ u
    return np.array(us)
