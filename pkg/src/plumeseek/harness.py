"""Closed-loop episode execution, Monte Carlo campaigns, and numerical
verification of the planner's feasibility and descent guarantees."""

from __future__ import annotations

import dataclasses
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import WeightUnderflowError
from .estimator import (EstimatorConfig, InfoState, PosteriorSummary, bayes_update,
                        clamp_mean_step, init_prior, summarize)
from .geometry import Box2D
from .planner import (ActionSet, PlannerSpec, PlanResult, TerminalIngredients,
                      Weights, draw_scenarios, optimize, scenario_mass)
from .plume import EnvironmentParams, SensorModel, SourceTerm, measure

SCHEMA_VERSION = 1

STEPS_CSV_HEADER = ["run_id", "t", "x", "y", "reading", "mean_x", "mean_y",
                    "trace_P", "J", "J_ET", "J_ER", "feasible"]


@dataclass(frozen=True)
class ScenarioConfig:
    """One search scenario: world, sensor, agent start, and stop rules."""

    name: str = "default"
    domain: Box2D = Box2D()
    source: SourceTerm = SourceTerm(position=np.array([25.0, 37.5, 0.0]))
    env: EnvironmentParams = EnvironmentParams()
    sensor: SensorModel = SensorModel()
    start: tuple = (5.0, 5.0)
    agent_z: float = 1.0
    max_steps: int = 600
    step_period: float = 1.0            # seconds per decision
    success_radius: float = 2.0
    success_trace_max: float | None = 4.0   # m^2; None disables the confidence gate
    seed: int = 0

    def __post_init__(self):
        if not self.domain.contains(np.asarray(self.start, dtype=float)):
            raise ValueError("start position must lie inside the domain")
        if not self.domain.contains(self.source.position[:2]):
            raise ValueError("source must lie inside the domain")


@dataclass(frozen=True)
class StepPlan:
    """Per-step planner outcome kept in the run record."""

    t: int
    action_index: int
    cost: float | None
    cost_exploit: float | None
    cost_explore: float | None
    feasible: bool
    relaxed: bool
    n_candidates: int
    terminal_state: np.ndarray | None
    terminal_dev: float | None
    reference_xy: np.ndarray


@dataclass
class RunRecord:
    """Everything one closed-loop episode produced."""

    scenario_name: str
    planner_name: str
    seed: int
    max_steps: int
    step_period: float
    source_xy: np.ndarray
    positions: np.ndarray          # (T+1, 2)
    readings: np.ndarray           # (T+1,)
    mean_raw: np.ndarray           # (T+1, 2)
    mean_reported: np.ndarray      # (T+1, 2)
    cov: np.ndarray                # (T+1, d, d)
    trace_position: np.ndarray     # (T+1,)
    action_indices: np.ndarray     # (T,)
    plans: list                    # list[StepPlan], length T
    info: InfoState
    events: list
    used_terminal_constraint: bool
    arrival_step: int | None
    success_step: int | None
    success: bool
    run_id: str = ""

    @property
    def steps_executed(self) -> int:
        return len(self.action_indices)

    @property
    def final_error(self) -> float:
        return float(np.linalg.norm(self.mean_raw[-1] - self.source_xy))

    def error_series(self) -> np.ndarray:
        return np.linalg.norm(self.mean_raw - self.source_xy, axis=1)


def run_episode(cfg: ScenarioConfig, planner: PlannerSpec,
                est: EstimatorConfig = EstimatorConfig(),
                log_stream=None) -> RunRecord:
    """Run one closed loop: measure, update the belief, solve the planner,
    apply the first action. Stops at the step budget or once the success
    criterion holds. Fully deterministic for a given seed.

    Estimator divergence (total weight underflow) is logged and rescued by
    resetting to uniform weights rather than crashing the episode."""
    ss = np.random.SeedSequence(cfg.seed)
    ss_prior, ss_sensor, ss_filter, ss_plan = ss.spawn(4)
    rng_prior = np.random.default_rng(ss_prior)
    rng_sensor = np.random.default_rng(ss_sensor)
    rng_filter = np.random.default_rng(ss_filter)
    # One seed block per planner commitment window: re-seeding from the same
    # child gives every step of a block identical planner draws. Stale blocks
    # can be abandoned early, so spawn one child per step.
    period = max(1, planner.replan_period)
    plan_seeds = ss_plan.spawn(cfg.max_steps + 1)
    domain = cfg.domain
    src_xy = cfg.source.position[:2].copy()
    pinned = src_xy if planner.pin_mean_to_truth else None

    ps = init_prior(domain, est.n_particles, rng_prior,
                    source_z=float(cfg.source.position[2]),
                    rate=cfg.source.emission_rate,
                    rate_interval=est.rate_interval if est.estimate_rate else None)
    agent = np.asarray(cfg.start, dtype=float).copy()
    events: list = []

    reading = measure(_lift(agent, cfg.agent_z), cfg.source, cfg.env, cfg.sensor, rng_sensor)
    ps, summ = _update(ps, None, reading, agent, cfg, est, rng_filter, events, 0)
    info = InfoState(initial_reading=reading)
    reported = summ.mean_xy.copy()

    positions = [agent.copy()]
    readings = [reading]
    mean_raw = [summ.mean_xy.copy()]
    mean_reported = [reported.copy()]
    covs = [summ.cov.copy()]
    traces = [summ.trace_position]
    action_indices: list = []
    plans: list = []
    arrival_step = None
    success_step = None

    def _check_goal(t: int):
        nonlocal arrival_step, success_step
        dist = float(np.linalg.norm(agent - src_xy))
        if arrival_step is None and dist <= cfg.success_radius:
            arrival_step = t
        gate = cfg.success_trace_max
        confident = True if gate is None else traces[-1] <= gate
        if success_step is None and dist <= cfg.success_radius and confident:
            success_step = t

    _check_goal(0)
    held_scen = None
    held_mass = None
    opt_seed = None
    block = -1
    steps_in_block = period
    for t in range(cfg.max_steps):
        if success_step is not None:
            break
        stale = False
        if held_scen is not None and held_mass is not None:
            ratio = scenario_mass(ps, held_scen, planner.target_kill_radius) \
                / np.maximum(held_mass, 1e-300)
            stale = bool(np.min(ratio) < planner.target_stale_ratio)
        if steps_in_block >= period or stale:
            block += 1
            steps_in_block = 0
            scen_seed, opt_seed = plan_seeds[block].spawn(2)
            held_scen = None
            held_mass = None
            if planner.kind in ("dcee", "ipp"):
                # The hypothesised worlds stay fixed across the block so the
                # closed loop commits to inspecting them instead of retargeting
                # on every decision; a falsified hypothesis ends the block.
                held_scen = draw_scenarios(ps, planner.rollout.n_scenarios,
                                           planner.horizon(),
                                           np.random.default_rng(scen_seed))
                held_mass = scenario_mass(ps, held_scen, planner.target_kill_radius)
        rng_plan = np.random.default_rng(opt_seed)
        plan, relaxed = _plan_step(planner, agent, ps, summ, reported, pinned,
                                   rng_plan, t, cfg, held_scen)
        steps_in_block += 1
        if relaxed:
            events.append((t, "terminal_constraint_relaxed", ""))
        if log_stream is not None:
            log_stream(json.dumps({
                "t": t, "J": plan.cost, "J_ET": plan.cost_exploit,
                "J_ER": plan.cost_explore, "feasible": plan.feasible,
                "relaxed": relaxed, "n_candidates": plan.n_candidates},
                sort_keys=True))
        u = plan.actions[0]
        agent = agent + u
        reading = measure(_lift(agent, cfg.agent_z), cfg.source, cfg.env, cfg.sensor,
                          rng_sensor)
        ps, summ = _update(ps, u, reading, agent, cfg, est, rng_filter, events, t + 1)
        reported = clamp_mean_step(reported, summ.mean_xy, est.delta_max)
        info.append(u, reading)

        positions.append(agent.copy())
        readings.append(reading)
        mean_raw.append(summ.mean_xy.copy())
        mean_reported.append(reported.copy())
        covs.append(summ.cov.copy())
        traces.append(summ.trace_position)
        action_indices.append(int(plan.action_indices[0]))
        plans.append(StepPlan(
            t=t, action_index=int(plan.action_indices[0]), cost=plan.cost,
            cost_exploit=plan.cost_exploit, cost_explore=plan.cost_explore,
            feasible=plan.feasible, relaxed=relaxed, n_candidates=plan.n_candidates,
            terminal_state=None if plan.terminal_state is None else plan.terminal_state.copy(),
            terminal_dev=plan.terminal_dev,
            reference_xy=(pinned if pinned is not None else reported).copy()))
        _check_goal(t + 1)

    return RunRecord(
        scenario_name=cfg.name, planner_name=planner.name, seed=cfg.seed,
        max_steps=cfg.max_steps, step_period=cfg.step_period, source_xy=src_xy,
        positions=np.array(positions), readings=np.array(readings),
        mean_raw=np.array(mean_raw), mean_reported=np.array(mean_reported),
        cov=np.array(covs), trace_position=np.array(traces),
        action_indices=np.array(action_indices, dtype=int), plans=plans, info=info,
        events=events, used_terminal_constraint=planner.use_terminal_constraint,
        arrival_step=arrival_step, success_step=success_step,
        success=success_step is not None)


def _lift(xy: np.ndarray, z: float) -> np.ndarray:
    return np.array([xy[0], xy[1], z])


def _update(ps, action, reading, agent, cfg, est, rng, events, t):
    try:
        ps = bayes_update(ps, action, reading, _lift(agent, cfg.agent_z), cfg.env,
                          cfg.sensor, rng, ess_fraction=est.ess_fraction,
                          jitter_scale=est.jitter_scale)
    except WeightUnderflowError:
        events.append((t, "weight_underflow_rescued", ""))
        n = len(ps)
        ps = dataclasses.replace(ps, weights=np.full(n, 1.0 / n),
                                 generation=ps.generation + 1)
    return ps, summarize(ps)


def _plan_step(planner: PlannerSpec, agent, ps, summ: PosteriorSummary, reported,
               pinned, rng, t: int, cfg: ScenarioConfig, scenarios=None):
    if planner.kind == "scripted":
        acts = planner.scripted_actions
        idx = int(acts[t % len(acts)])
        moves = planner.actions.vectors()
        plan = PlanResult(action_indices=np.array([idx]), actions=moves[idx][None, :],
                          cost=None, cost_exploit=None, cost_explore=None,
                          feasible=True, n_candidates=1,
                          terminal_state=agent + moves[idx], terminal_dev=0.0)
        return plan, False
    reported_summary = dataclasses.replace(
        summ, mean=np.array([reported[0], reported[1], summ.mean[2]]))
    plan = optimize(agent, ps, planner.kind,
                    planner.weights if planner.weights is not None
                    else Weights.diagonal(1.0, 1.0, 1.0, 1),
                    rng, cfg.env, cfg.sensor, actions=planner.actions,
                    terminal=planner.terminal,
                    use_terminal_constraint=planner.use_terminal_constraint,
                    search=planner.search, rollout=planner.rollout,
                    domain=cfg.domain, agent_z=cfg.agent_z,
                    summary=reported_summary, pinned_mean_xy=pinned,
                    entropy_grid=planner.entropy_grid, scenarios=scenarios)
    relaxed = planner.use_terminal_constraint and not plan.feasible
    return plan, relaxed


# ---------------------------------------------------------------------------
# campaigns


@dataclass(frozen=True)
class CellStats:
    """Aggregate metrics for one (planner, scenario) cell."""

    planner: str
    scenario: str
    runs: int
    success_rate: float
    mean_arrival_steps: float
    mean_arrival_time: float
    mean_final_rmse: float
    rmse_curve: tuple


@dataclass
class CampaignResult:
    records: dict            # (planner_name, scenario_name) -> list[RunRecord]
    table: list              # list[CellStats]
    base_seed: int


def arrival_steps(rec: RunRecord) -> int:
    """First step within the success radius; the step budget when the agent
    never arrived."""
    return rec.arrival_step if rec.arrival_step is not None else rec.max_steps


def run_campaign(scenarios, planners, runs_per_cell: int,
                 est: EstimatorConfig = EstimatorConfig(), jobs: int = 1) -> CampaignResult:
    """Monte Carlo campaign over every (planner, scenario) cell. Run seeds
    are scenario seed + run index, so paired comparisons across planners see
    identical worlds. Episodes are independent; with jobs > 1 they execute in
    a process pool and merge deterministically by index."""
    tasks = []
    for scen in scenarios:
        for planner in planners:
            for i in range(runs_per_cell):
                cfg = dataclasses.replace(scen, seed=scen.seed + i)
                tasks.append((cfg, planner, est))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_task, tasks, chunksize=1))
    else:
        results = [_run_task(task) for task in tasks]

    records: dict = {}
    for (cfg, planner, _), rec in zip(tasks, results):
        key = (planner.name, cfg.name)
        cell = records.setdefault(key, [])
        rec.run_id = f"{planner.name}/{cfg.name}/{len(cell)}"
        cell.append(rec)
    table = [cell_stats(name, scen, recs)
             for (name, scen), recs in records.items()]
    base = scenarios[0].seed if scenarios else 0
    return CampaignResult(records=records, table=table, base_seed=base)


def _run_task(task):
    cfg, planner, est = task
    return run_episode(cfg, planner, est)


def cell_stats(planner: str, scenario: str, recs) -> CellStats:
    curve = rmse_curve(recs)
    period = recs[0].step_period
    arr = np.array([arrival_steps(r) for r in recs], dtype=float)
    return CellStats(
        planner=planner, scenario=scenario, runs=len(recs),
        success_rate=float(np.mean([r.success for r in recs])),
        mean_arrival_steps=float(arr.mean()),
        mean_arrival_time=float(arr.mean() * period),
        mean_final_rmse=float(curve[-1]),
        rmse_curve=tuple(curve.tolist()))


def rmse_curve(records) -> np.ndarray:
    """Root mean square estimate error at each step, averaged over runs.
    Runs that stopped early hold their final error; the curve spans the full
    step budget (max_steps + 1 points)."""
    horizon = max(r.max_steps for r in records) + 1
    sq = np.zeros(horizon)
    for rec in records:
        err = rec.error_series()
        padded = np.concatenate([err, np.full(horizon - len(err), err[-1])])
        sq += padded ** 2
    return np.sqrt(sq / len(records))


# ---------------------------------------------------------------------------
# artifacts


def steps_rows(records) -> list:
    """Flatten run records into steps.csv rows (strings)."""
    rows = []
    for rec in records:
        T = rec.steps_executed
        for t in range(T + 1):
            plan = rec.plans[t] if t < T else None
            rows.append([
                rec.run_id, str(t),
                _fmt(rec.positions[t, 0]), _fmt(rec.positions[t, 1]),
                _fmt(rec.readings[t]),
                _fmt(rec.mean_raw[t, 0]), _fmt(rec.mean_raw[t, 1]),
                _fmt(rec.trace_position[t]),
                _fmt(plan.cost) if plan else "",
                _fmt(plan.cost_exploit) if plan else "",
                _fmt(plan.cost_explore) if plan else "",
                ("1" if plan.feasible else "0") if plan else "",
            ])
    return rows


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def write_steps_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(STEPS_CSV_HEADER) + "\n")
        for row in steps_rows(records):
            fh.write(",".join(row) + "\n")


def write_summary_json(result: CampaignResult, path, seed: int) -> None:
    payload = {
        "schema_version": SCHEMA_VERSION,
        "seed": seed,
        "cells": [dataclasses.asdict(cell) for cell in result.table],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# numerical verification of the planner guarantees


@dataclass(frozen=True)
class TheoremCheckConfig:
    """Settings for the verification runs: the covariance bound (estimated
    from the runs when None), whether the posterior mean is pinned to the
    true source, and slack applied to the checked inequalities."""

    mse_bound: np.ndarray | None = None
    oracle_mode: bool = True
    bound_margin: float = 1.05
    slack: float = 1e-9


@dataclass
class DescentReport:
    checked_steps: int
    violations: list
    bound_violations: list          # steps where the covariance exceeds the bound
    omega_violations: list
    omega_level: float
    contraction: float
    cushion: float
    details: list


@dataclass
class FeasibilityReport:
    applicable: bool
    checked_steps: int
    violations: list
    details: list


def empirical_mse_bound(records, margin: float = 1.05) -> np.ndarray:
    """Isotropic covariance envelope: (1 + margin slack) * the largest
    eigenvalue seen across every recorded posterior covariance."""
    lam = 0.0
    d = records[0].cov.shape[-1]
    for rec in records:
        lam = max(lam, float(np.max(np.linalg.eigvalsh(rec.cov))))
    return margin * lam * np.eye(d)


def check_descent(record: RunRecord, W: np.ndarray, weights: Weights,
                  slack: float = 1e-9) -> DescentReport:
    """Verify the per-step value recursion of the pinned-mean planner:
    J*(t+1) <= J*(t) (1 - lmin(Q)/lmax(S)) + (lmin(Q)/lmax(S) N + 1) tr(S W),
    that the recorded covariances stay below the bound W, and that the value
    level set (N + lmax(S)/lmin(Q)) tr(S W) is invariant once entered."""
    W = np.asarray(W, dtype=float)
    lam_q = float(np.min(np.linalg.eigvalsh(weights.Q)))
    lam_s = float(np.max(np.linalg.eigvalsh(weights.S)))
    tsw = float(np.trace(weights.S @ W[:2, :2]))
    contraction = 1.0 - lam_q / lam_s
    cushion = (lam_q / lam_s * weights.horizon + 1.0) * tsw
    level = (weights.horizon + lam_s / lam_q) * tsw

    bound_violations = []
    for t in range(len(record.cov)):
        P = record.cov[t][:2, :2]
        if float(np.min(np.linalg.eigvalsh(W[:2, :2] - P))) < -slack * max(1.0, tsw):
            bound_violations.append(t)

    violations = []
    omega_violations = []
    details = []
    checked = 0
    plans = record.plans
    for t in range(len(plans) - 1):
        a, b = plans[t], plans[t + 1]
        if a.cost is None or b.cost is None or not a.feasible or not b.feasible:
            continue
        checked += 1
        rhs = contraction * a.cost + cushion
        ok = b.cost <= rhs + slack * max(1.0, abs(rhs))
        details.append({"t": t, "value": a.cost, "next_value": b.cost,
                        "rhs": rhs, "ok": bool(ok)})
        if not ok:
            violations.append(t)
        if a.cost <= level and b.cost > level + slack * max(1.0, level):
            omega_violations.append(t)
    return DescentReport(checked_steps=checked, violations=violations,
                         bound_violations=bound_violations,
                         omega_violations=omega_violations, omega_level=level,
                         contraction=contraction, cushion=cushion, details=details)


def check_recursive_feasibility(record: RunRecord, terminal: TerminalIngredients,
                                domain: Box2D, u_halfwidth: float,
                                oracle_mode: bool = True,
                                slack: float = 1e-9) -> FeasibilityReport:
    """Verify the shifted-candidate construction behind recursive
    feasibility: after a feasible solve, appending the terminal feedback step
    (evaluated in the continuous input box) keeps the terminal deviation in
    the ball, the input admissible, and the state inside the domain.

    With the mean pinned (oracle mode) the mean increment is exactly zero;
    otherwise the configured increment bound is charged against the input
    budget."""
    if not record.used_terminal_constraint:
        return FeasibilityReport(applicable=False, checked_steps=0, violations=[],
                                 details=[])
    K = terminal.K
    A = np.eye(2) + K
    g = 0.0 if oracle_mode else terminal.delta_bound
    violations = []
    details = []
    checked = 0
    for plan in record.plans:
        if not plan.feasible or plan.terminal_state is None:
            continue
        checked += 1
        e = plan.terminal_state - plan.reference_xy
        e_next = A @ e
        u_term = K @ e
        entry = {
            "t": plan.t,
            "dev": float(np.linalg.norm(e)),
            "dev_next": float(np.linalg.norm(e_next)),
            "input_inf_norm": float(np.abs(u_term).max() + g),
            "state_in_domain": bool(np.all(domain.contains(plan.reference_xy + e_next,
                                                           atol=slack + 1e-9))),
        }
        bad = []
        if entry["dev"] > terminal.radius + slack:
            bad.append("initial_terminal_constraint")
        if entry["dev_next"] > terminal.radius + slack:
            bad.append("shifted_terminal_constraint")
        if entry["input_inf_norm"] > u_halfwidth + slack:
            bad.append("input_bound")
        if not entry["state_in_domain"]:
            bad.append("state_constraint")
        entry["violations"] = bad
        details.append(entry)
        if bad:
            violations.append((plan.t, tuple(bad)))
    return FeasibilityReport(applicable=True, checked_steps=checked,
                             violations=violations, details=details)


# ---------------------------------------------------------------------------
# scripted trajectories


def lawnmower_actions(domain: Box2D, start, action_set: ActionSet,
                      row_spacing: float = 4.0, margin: float = 1.0) -> list:
    """Serpentine sweep covering the domain: straight runs along x with
    upward transitions of roughly row_spacing. Returns action indices."""
    step = action_set.step
    x = np.asarray(start, dtype=float).copy()
    seq = []
    going_right = True
    ups_per_row = max(1, int(round(row_spacing / step)))
    while True:
        limit = domain.x_max - margin if going_right else domain.x_min + margin
        move = 3 if going_right else 2           # right / left
        while (x[0] + step <= limit) if going_right else (x[0] - step >= limit):
            seq.append(move)
            x[0] += step if going_right else -step
        advanced = 0
        for _ in range(ups_per_row):
            if x[1] + step <= domain.y_max - margin:
                seq.append(0)                    # up
                x[1] += step
                advanced += 1
        if advanced == 0:
            break
        going_right = not going_right
    return seq
