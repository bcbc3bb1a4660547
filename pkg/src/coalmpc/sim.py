"""Closed-loop simulation, Monte Carlo batches and result files."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bargaining import (BargainingContext, DeviationRecord, prediction_deviation, rescale_allocations,
                         run_bargaining_round, switch_cost_bound_check, update_allocations)
from .config import OutputConfig, SimulationConfig
from .game import CooperationCostFn, shapley_value
from .lti import CoalitionStructure, model_set_from_dict, step_global
from .mpc import MpcWeights, ReferenceTrajectory
from .powergrid import (AREA_IDS, DEFAULT_EDGES, DEFAULT_LOADS, S1_BOUNDS, LoadProfile,
                        benchmark_model_set, benchmark_params, benchmark_weights, eta_index,
                        nominal_references, psi_index, rto_setpoints)
from .qp import INFEASIBLE

log = logging.getLogger(__name__)


class SolverFailure(RuntimeError):
    pass


@dataclass
class SimulationReport:
    ids: tuple
    mode: str
    c_coal: float
    seed: int
    eta: float | None
    psi: float | None
    local_cost: dict
    reallocated_cost: dict
    shapley_cost: dict | None
    grid_cost: dict
    coalition_sizes: list
    structures: list
    events: list
    deviations: list
    monitors: dict
    states: np.ndarray
    inputs: np.ndarray
    loads: np.ndarray
    flows: list = field(default_factory=list)
    rto_infeasible: int = 0

    @property
    def mean_coalition_size(self) -> float:
        return float(np.mean(self.coalition_sizes)) if self.coalition_sizes else 0.0

    @property
    def mean_coalition_lifetime(self) -> float:
        return coalition_lifetime(self.structures)

    def summary(self) -> dict:
        return {
            "mode": self.mode, "c_coal": self.c_coal, "seed": self.seed,
            "eta": self.eta, "psi": self.psi,
            "mean_coalition_size": self.mean_coalition_size,
            "mean_coalition_lifetime": self.mean_coalition_lifetime,
            "local_cost": {str(k): v for k, v in self.local_cost.items()},
            "reallocated_cost": {str(k): v for k, v in self.reallocated_cost.items()},
            "grid_cost": {str(k): v for k, v in self.grid_cost.items()},
            "shapley_cost": None if self.shapley_cost is None else {str(k): v for k, v in self.shapley_cost.items()},
            "events": {k: sum(e["kind"] == k for e in self.events)
                       for k in ("merge", "split", "transfer", "reject", "skip")},
            "monitors": self.monitors,
            "rto_infeasible": self.rto_infeasible,
        }


def coalition_lifetime(structures) -> float:
    """Mean number of steps a multi-agent coalition persists (runs at the end are censored)."""
    spans, alive = [], {}
    for k, st in enumerate(structures):
        current = {c for c in st if len(c) > 1}
        for c in list(alive):
            if c not in current:
                spans.append(k - alive.pop(c))
        for c in current:
            alive.setdefault(c, k)
    spans.extend(len(structures) - s for s in alive.values())
    return float(np.mean(spans)) if spans else 0.0


class _DeviationMonitor:
    """Compares the predicted cost at each round with the cost realized over the next ``Np`` steps."""

    def __init__(self, Np):
        self.Np = Np
        self.open: list = []
        self.records: list = []

    def start(self, k, predicted: dict):
        for c, pred in predicted.items():
            self.open.append({"coalition": c, "start": k, "predicted": pred, "realized": []})

    def record(self, structure, realized: dict):
        still = []
        for w in self.open:
            if w["coalition"] not in structure.coalitions:
                self._close(w, partial=True)
                continue
            w["realized"].append(realized[w["coalition"]])
            if len(w["realized"]) == self.Np:
                self._close(w, partial=False)
            else:
                still.append(w)
        self.open = still

    def finish(self):
        for w in self.open:
            self._close(w, partial=True)
        self.open = []

    def _close(self, w, partial):
        rec = prediction_deviation(w["realized"], w["predicted"], w["coalition"], self.Np, partial)
        self.records.append((w["start"], rec))

    def complete(self, start) -> dict:
        return {r.coalition: r.deviation for s, r in self.records if s == start and not r.partial}


def _merge_diagnostics(monitor: _DeviationMonitor, events, round_steps, coop) -> dict:
    """Prediction-deviation and cost-bound monitors evaluated at each merge."""
    checks, violations, dev_checked, dev_viol = [], 0, 0, 0
    prev = {k: p for p, k in zip(round_steps, round_steps[1:])}
    for ev in events:
        if ev["kind"] != "merge" or ev["step"] not in prev:
            continue
        k, kp = ev["step"], prev[ev["step"]]
        P1, P2 = (tuple(p) for p in ev["participants"])
        merged = tuple(sorted(P1 + P2))
        before, after = monitor.complete(kp), monitor.complete(k)
        w1, w2, w12 = before.get(P1), before.get(P2), after.get(merged)
        if None not in (w1, w2, w12):
            dev_checked += 1
            dev_viol += abs(w12) > abs(w1) + abs(w2) + 1e-12
        chi = (coop(len(merged)), coop(len(P1)), coop(len(P2)))
        res = switch_cost_bound_check(list(before.values()) if before else [None],
                                      list(after.values()) if after else [None], (w1, w2), chi)
        checks.append({"step": k, "status": res.status, "slack": res.slack})
        violations += res.status == "violated"
    return {"deviation_checked": dev_checked, "deviation_violations": dev_viol,
            "bound_checks": checks, "bound_violations": violations}


def _row_split(dx, du, Q, R, slices):
    Qdx, Rdu = Q @ dx, R @ du
    return {j: float(dx[xs] @ Qdx[xs] + du[us] @ Rdu[us]) for j, (xs, us) in slices.items()}


def _initial_structure(cfg: SimulationConfig, ids) -> CoalitionStructure:
    if cfg.mode == "centralized":
        return CoalitionStructure([ids])
    if cfg.mode == "decentralized":
        return CoalitionStructure([(i,) for i in ids])
    init = cfg.initial_structure
    if init == "grand":
        return CoalitionStructure([ids])
    if init == "singletons":
        return CoalitionStructure([(i,) for i in ids])
    st = CoalitionStructure(init)
    if not st.is_partition_of(ids):
        raise ValueError("initial_structure is not a partition of the agents")
    return st


def build_setup(cfg: SimulationConfig):
    """Model set, weights, load profile, area parameters (benchmark only) and scenario."""
    m = cfg.model
    if m.source == "file":
        data = json.loads(Path(m.path).read_text())
        ms = model_set_from_dict(data)
        weights = MpcWeights({(i, i): np.eye(ms[i].n) for i in ms.ids},
                             {i: np.eye(ms[i].q) for i in ms.ids}, cfg.weights.Qf_scale)
        return ms, weights, None, None, None
    edges = tuple(tuple(e) for e in (m.edges or DEFAULT_EDGES))
    overrides = {int(k): v for k, v in m.area_params.items()}
    params = benchmark_params(m.scenario, edges, m.P0, overrides, m.input_bounds)
    ms = benchmark_model_set(params, cfg.Ts)
    w = cfg.weights
    weights = benchmark_weights(edges, True, w.q_coop, tuple(w.base_diag), w.r, w.Qf_scale)
    lc = cfg.loads
    if lc.kind == "default":
        load = LoadProfile.constant(DEFAULT_LOADS, start=lc.step_time)
    elif lc.kind == "steps":
        load = LoadProfile({int(k): v for k, v in lc.steps.items()})
    else:
        seed = cfg.rng_seed if cfg.randomize_loads else 0
        load = LoadProfile.random(np.random.default_rng([seed, 1]), cfg.T_sim, S1_BOUNDS, tuple(lc.fraction))
    return ms, weights, load, params, m.scenario


def run_simulation(cfg: SimulationConfig) -> SimulationReport:
    ms, weights, load, params, scenario = build_setup(cfg)
    ids = tuple(ms.ids)
    Np, T = cfg.Np, cfg.T_sim
    bcfg = cfg.bargaining_config
    coop = CooperationCostFn(cfg.c_coal, cfg.coop_exponent)
    subset_seed = cfg.rng_seed if cfg.randomize_subsets else bcfg.rng_seed
    rng = np.random.default_rng([subset_seed, 2])
    structure = _initial_structure(cfg, ids)

    x = np.zeros(ms.n) if cfg.x0 is None else np.asarray(cfg.x0, dtype=float).reshape(ms.n)
    problems, rto_cache, plans = {}, {}, {}
    alloc, v_round, shap_prop = {}, {}, {}
    local = {i: 0.0 for i in ids}
    realloc = {i: 0.0 for i in ids}
    shap_acc = {i: 0.0 for i in ids} if cfg.track_shapley else None
    grid = {i: 0.0 for i in ids}
    states, inputs, loads, flows = [x.copy()], [], [], []
    structures, sizes, events = [], [], []
    monitor = _DeviationMonitor(Np)
    round_steps = []
    rto_bad = 0

    for k in range(T):
        dw = load.window(k, Np) if load is not None else np.zeros((Np, ms.nd))
        d = dw[0]
        refs_cache = {}

        def refs_fn(members, dw=dw, refs_cache=refs_cache):
            nonlocal rto_bad
            members = tuple(sorted(members))
            if members not in refs_cache:
                if params is None:
                    cmn = sum(ms[i].n for i in members)
                    refs_cache[members] = ReferenceTrajectory.zeros(cmn, sum(ms[i].q for i in members), Np)
                else:
                    cols = [ids.index(i) for i in members]
                    if scenario == "S2":
                        res = rto_setpoints(ms, members, dw[:, cols], Np, params, cache=rto_cache)
                        rto_bad += not res.feasible
                        refs_cache[members] = res.refs
                    else:
                        refs_cache[members] = nominal_references(members, dw[:, cols], Np)
            return refs_cache[members]

        ctx = BargainingContext(ms, weights, Np, x, refs_fn, coop, bcfg, dw if ms.nd else None,
                                plans, problems, k)
        on_grid = k % bcfg.dwell_time == 0
        if on_grid:
            round_steps.append(k)
        if cfg.mode == "coalitional" and on_grid:
            out = run_bargaining_round(structure, alloc, ctx, rng)
            structure, alloc = out.new_structure, dict(out.allocations)
            events.extend(out.event_log)
            v_round = {}
        for C in structure:
            if C not in v_round:
                vC = ctx.coalition_value(C)
                if vC is None:
                    raise SolverFailure(f"step {k}: coalition {C} MPC infeasible")
                alloc.update(rescale_allocations(alloc, C, vC))
                v_round[C] = vC
                if cfg.track_shapley:
                    shap_prop[C] = _shapley_shares(ctx, C, vC)

        u = np.zeros(ms.q)
        dx_all, du_all = np.zeros(ms.n), np.zeros(ms.q)
        realized = {}
        predicted = {}
        for C in structure:
            sol = ctx.solve_coalition(C)
            if sol.status == INFEASIBLE:
                raise SolverFailure(f"step {k}: coalition {C} MPC infeasible")
            prob = ctx.problem(C)
            cm = prob.cm
            u[cm.u_index] = sol.first_input
            refs = refs_fn(C)
            dx = x[cm.x_index] - refs.state_refs[0]
            du = sol.first_input - refs.input_refs[0]
            dx_all[cm.x_index], du_all[cm.u_index] = dx, du
            lam = float(dx @ prob.Q @ dx + du @ prob.R @ du)
            realized[C] = lam
            predicted[C] = sol.predicted_cost
            chi = coop(len(C))
            slices = {j: (np.arange(o, o + ms[j].n), np.arange(p, p + ms[j].q))
                      for j, o, p in _offsets(ms, C)}
            for j, c in _row_split(dx, du, prob.Q, prob.R, slices).items():
                local[j] += c + chi / len(C)
            for j, c in update_allocations({j: alloc[j] for j in C}, v_round[C], lam, chi).items():
                realloc[j] += c
            if shap_acc is not None:
                for j, c in update_allocations(shap_prop[C], sum(shap_prop[C].values()), lam, chi).items():
                    shap_acc[j] += c
            for j, o, p in _offsets(ms, C):
                xs = sol.state_trajectory[:, o:o + ms[j].n]
                us = sol.input_sequence[:, p:p + ms[j].q]
                plans[j] = (xs, np.vstack([us[1:], us[-1:]]))
        # common yardstick across modes: grand-coalition stage cost split by rows
        gp = ctx.problem(ids)
        gslices = {j: (np.arange(o, o + ms[j].n), np.arange(p, p + ms[j].q)) for j, o, p in _offsets(ms, ids)}
        for j, c in _row_split(dx_all[gp.cm.x_index], du_all[gp.cm.u_index], gp.Q, gp.R, gslices).items():
            grid[j] += c
        if on_grid:
            monitor.start(k, predicted)
        monitor.record(structure, realized)

        structures.append(structure.coalitions)
        sizes.append(len(ids) / len(structure))
        inputs.append(u.copy())
        loads.append(np.asarray(d, dtype=float).copy())
        x = step_global(ms, x, u, d if ms.nd else None)
        states.append(x.copy())
        if params is not None:
            th = {i: x[ms.xs(i)][0] for i in ids}
            for i in ids:
                for j, p in sorted(params[i].sync_coeffs.items()):
                    flows.append((k + 1, i, j, float(p * (th[i] - th[j]))))
        # shift plans so that row 0 is the next measured state
        for j in plans:
            xs, us = plans[j]
            plans[j] = (np.vstack([x[ms.xs(j)], xs[:-1]]), us)

    monitor.finish()
    states = np.array(states)
    eta = psi = None
    if params is not None:
        omega = np.array([[s[ms.xs(i)][1] for i in ids] for s in states[1:]])
        theta = np.array([[s[ms.xs(i)][0] for i in ids] for s in states[1:]])
        eta = eta_index(omega, T)
        psi = psi_index(theta, {i: dict(params[i].sync_coeffs) for i in ids}, cfg.Ts, T, ids)
    monitors = _merge_diagnostics(monitor, events, round_steps, coop)
    return SimulationReport(ids, cfg.mode, cfg.c_coal, cfg.rng_seed, eta, psi, local, realloc, shap_acc, grid,
                            sizes, structures, events, [r for _, r in monitor.records], monitors,
                            states, np.array(inputs), np.array(loads), flows, rto_bad)


def _offsets(ms, C):
    o = p = 0
    for j in C:
        yield j, o, p
        o += ms[j].n
        p += ms[j].q


def _shapley_shares(ctx, C, vC):
    if len(C) == 1:
        return {C[0]: vC}
    return shapley_value(ctx.game(C, vC))


def monte_carlo(cfg: SimulationConfig, n_runs: int, seed_base: int = 0) -> dict:
    """Runs with seeds ``seed_base .. seed_base + n_runs - 1``; quartiles of the main statistics."""
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    runs, failures = [], []
    for r in range(n_runs):
        seed = seed_base + r
        try:
            rep = run_simulation(cfg.replace(rng_seed=seed))
        except SolverFailure as exc:
            failures.append({"seed": seed, "error": str(exc)})
            continue
        runs.append({"seed": seed, "eta": rep.eta, "psi": rep.psi,
                     "mean_coalition_size": rep.mean_coalition_size,
                     "mean_coalition_lifetime": rep.mean_coalition_lifetime})
    stats = {}
    for key in ("eta", "psi", "mean_coalition_size", "mean_coalition_lifetime"):
        vals = np.array([r[key] for r in runs if r[key] is not None], dtype=float)
        if vals.size:
            q1, q2, q3 = np.percentile(vals, [25, 50, 75])
            stats[key] = {"mean": float(vals.mean()), "q1": float(q1), "median": float(q2), "q3": float(q3)}
    return {"c_coal": cfg.c_coal, "mode": cfg.mode, "n_runs": n_runs, "failed": len(failures),
            "failures": failures, "runs": runs, "stats": stats}


def sweep(cfg: SimulationConfig, c_values, n_runs: int, seed_base: int = 0) -> list:
    return [monte_carlo(cfg.replace(c_coal=float(c)), n_runs, seed_base) for c in c_values]


def _fmt(v) -> str:
    return repr(float(v))


def write_outputs(report: SimulationReport, out_dir, names: OutputConfig | None = None) -> dict:
    names = names or OutputConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: out / getattr(names, k) for k in ("states_csv", "flows_csv", "events_jsonl", "summary_json")}
    ids = report.ids
    with open(paths["states_csv"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "area", "theta", "omega", "pm", "pv", "u", "d", "coalition_id"])
        n_i = report.states.shape[1] // len(ids)
        for k in range(len(report.inputs)):
            st = report.structures[k]
            for a, i in enumerate(ids):
                xi = report.states[k, a * n_i:(a + 1) * n_i]
                coal = next(c for c in st if i in c)
                row = [k, i, *(_fmt(v) for v in np.pad(xi, (0, max(0, 4 - n_i)))[:4])]
                row += [_fmt(report.inputs[k][a]) if report.inputs.shape[1] == len(ids) else "",
                        _fmt(report.loads[k][a]) if report.loads.size and report.loads.shape[1] == len(ids) else "",
                        coal[0]]
                w.writerow(row)
    with open(paths["flows_csv"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "i", "j", "dP"])
        for k, i, j, v in report.flows:
            w.writerow([k, i, j, _fmt(v)])
    with open(paths["events_jsonl"], "w") as fh:
        for ev in report.events:
            fh.write(json.dumps(ev, sort_keys=True) + "\n")
    paths["summary_json"].write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
    return paths


def write_sweep_csv(results, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["c_coal", "statistic", "mean", "q1", "median", "q3", "n_ok", "n_failed"])
        for res in results:
            for key, s in res["stats"].items():
                w.writerow([_fmt(res["c_coal"]), key, _fmt(s["mean"]), _fmt(s["q1"]), _fmt(s["median"]),
                            _fmt(s["q3"]), res["n_runs"] - res["failed"], res["failed"]])
