"""Receding-horizon action selection.

Four planner kinds share one candidate-evaluation engine:

* ``smpc``   - track the current posterior mean; the belief is treated as
  control independent, so the uncertainty terms are constant offsets.
* ``dcee``   - dual cost: candidate sequences are scored on rollouts of the
  belief under hypothesised future measurements, so moving through
  informative regions is rewarded through the predicted covariance. With the
  terminal constraint enabled this is the certified multi-step variant; with
  horizon 1 and no terminal set it is the single-step variant.
* ``ipp``    - pure information seeking: maximise expected reduction of the
  posterior entropy over the same rollouts.
* ``greedy`` - move straight toward the reference mean (test baseline).

All planners search a discrete eight-move action set; the terminal-set
machinery is validated against a continuous input box that contains it,
because the terminal feedback law is continuous valued.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_discrete_are, solve_discrete_lyapunov

from .errors import GainInstabilityError, NoFeasibleRadiusError
from .estimator import (GridSpec, ParticleSet, PosteriorSummary, grid_cell_index,
                        summarize)
from .geometry import Box2D
from .plume import EnvironmentParams, SensorModel, log_concentration

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)

LYAPUNOV_RESIDUAL_TOL = 1e-10

# Candidates are evaluated in blocks to bound rollout memory.
_CANDIDATE_CHUNK = 512


# ---------------------------------------------------------------------------
# action set and weight matrices


@dataclass(frozen=True)
class ActionSet:
    """Eight compass moves scaled by the step length.

    Fixed ordering (used for deterministic tie-breaking):
    up, down, left, right, up-left, up-right, down-left, down-right.
    ``diagonal="euclidean"`` normalises diagonals so every move has the same
    displacement magnitude; ``diagonal="axis"`` uses +-step on each axis.
    """

    step: float = 2.0
    diagonal: str = "euclidean"

    def __post_init__(self):
        if self.step <= 0:
            raise ValueError("step must be > 0")
        if self.diagonal not in ("euclidean", "axis"):
            raise ValueError("diagonal must be 'euclidean' or 'axis'")

    def vectors(self) -> np.ndarray:
        d = self.step / np.sqrt(2.0) if self.diagonal == "euclidean" else self.step
        s = self.step
        return np.array([
            [0.0, s], [0.0, -s], [-s, 0.0], [s, 0.0],
            [-d, d], [d, d], [-d, -d], [d, -d],
        ])


@dataclass(frozen=True)
class Weights:
    """Stage, input, and terminal weight matrices plus the horizon length."""

    Q: np.ndarray
    R: np.ndarray
    S: np.ndarray
    horizon: int

    def __post_init__(self):
        for name in ("Q", "R", "S"):
            m = np.asarray(getattr(self, name), dtype=float)
            m = 0.5 * (m + m.T)
            m.flags.writeable = False
            object.__setattr__(self, name, m)
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if np.min(np.linalg.eigvalsh(self.Q)) <= 0:
            raise ValueError("Q must be positive definite")
        if np.min(np.linalg.eigvalsh(self.R)) <= 0:
            raise ValueError("R must be positive definite")
        if np.min(np.linalg.eigvalsh(self.S - self.Q)) < -1e-9:
            raise ValueError("S must dominate Q (S - Q positive semidefinite)")

    @classmethod
    def diagonal(cls, q: float, r: float, s: float, horizon: int) -> "Weights":
        eye = np.eye(2)
        return cls(Q=q * eye, R=r * eye, S=s * eye, horizon=horizon)


# ---------------------------------------------------------------------------
# terminal ingredients


@dataclass(frozen=True)
class TerminalIngredients:
    """Terminal feedback gain, ball radius, and mean-increment bound, with a
    record of the containment checks that produced the radius."""

    K: np.ndarray
    radius: float
    delta_bound: float
    checks: dict = field(default_factory=dict)


def solve_terminal_weight(K, Q, R) -> np.ndarray:
    """Terminal weight from the discrete Lyapunov identity
    (I+K)' S (I+K) - S = -(Q + K' R K).

    Requires (I+K) Schur stable; the returned S is symmetric positive
    definite with residual below LYAPUNOV_RESIDUAL_TOL."""
    K = np.asarray(K, dtype=float)
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    A = np.eye(K.shape[0]) + K
    _require_schur(A)
    C = Q + K.T @ R @ K
    S = solve_discrete_lyapunov(A.T, C)
    S = 0.5 * (S + S.T)
    residual = lyapunov_residual(K, Q, R, S)
    if residual > LYAPUNOV_RESIDUAL_TOL * max(1.0, float(np.abs(S).max())):
        raise ArithmeticError(f"Lyapunov solve residual {residual:.3e} too large")
    return S


def lyapunov_residual(K, Q, R, S) -> float:
    """Max-abs residual of the terminal-weight identity for the given S."""
    K = np.asarray(K, dtype=float)
    A = np.eye(K.shape[0]) + K
    return float(np.abs(A.T @ S @ A - S + Q + K.T @ R @ K).max())


def derive_feedback_gain(Q, R) -> np.ndarray:
    """Optimal feedback gain for the single-integrator plant under the given
    weights (Riccati solution); u = K e with (I+K) Schur stable."""
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    eye = np.eye(Q.shape[0])
    P = solve_discrete_are(eye, eye, Q, R)
    return -np.linalg.solve(R + P, P)


def validate_terminal_ingredients(K, Q, R, S, domain: Box2D, u_halfwidth: float,
                                  o_box: Box2D, delta_bound: float) -> TerminalIngredients:
    """Largest terminal-ball radius satisfying the containment conditions.

    Conditions: (i) the ball is invariant under (I+K) (automatic for a
    contraction); (ii) the terminal feedback plus a mean increment of norm
    <= delta_bound stays inside the input box of half-width u_halfwidth;
    (iii) the ball translated anywhere in o_box stays inside the domain.
    """
    K = np.asarray(K, dtype=float)
    A = np.eye(K.shape[0]) + K
    _require_schur(A)
    contraction = float(np.linalg.norm(A, 2))
    gain_norm = float(np.linalg.norm(K, 2))
    residual = lyapunov_residual(K, Q, R, S)
    if residual > LYAPUNOV_RESIDUAL_TOL * max(1.0, float(np.abs(np.asarray(S)).max())):
        raise ValueError(f"terminal weight does not satisfy the Lyapunov identity "
                         f"(residual {residual:.3e})")
    if contraction >= 1.0:
        # A Schur-stable but non-normal gain can still expand the ball.
        raise GainInstabilityError(
            f"(I+K) is not a contraction in the 2-norm (norm {contraction:.4f}); "
            "ball invariance fails")
    input_cap = (u_halfwidth - delta_bound) / gain_norm if gain_norm > 0 else np.inf
    domain_cap = domain.ball_margin(o_box)
    radius = float(min(input_cap, domain_cap))
    checks = {
        "schur_spectral_radius": float(np.max(np.abs(np.linalg.eigvals(A)))),
        "ball_contraction_norm": contraction,
        "lyapunov_residual": residual,
        "input_bound_radius_cap": float(input_cap),
        "domain_margin_cap": float(domain_cap),
        "radius": radius,
    }
    if radius <= 0.0:
        raise NoFeasibleRadiusError(
            f"containment conditions admit no positive radius "
            f"(input cap {input_cap:.4g} m, domain cap {domain_cap:.4g} m)")
    return TerminalIngredients(K=K, radius=radius, delta_bound=float(delta_bound),
                               checks=checks)


def _require_schur(A: np.ndarray) -> None:
    rho = float(np.max(np.abs(np.linalg.eigvals(A))))
    if rho >= 1.0:
        raise GainInstabilityError(f"(I+K) has spectral radius {rho:.4f} >= 1")


# ---------------------------------------------------------------------------
# candidate generation


@dataclass(frozen=True)
class SearchConfig:
    """Candidate-sequence generation strategy.

    "exhaustive" enumerates all 8^N sequences (only allowed for N <= 5);
    "sampled" keeps the 8 straight-line sequences plus n_random random
    admissible sequences. ``guided`` adds greedy runs toward the current
    reference mean so the terminal set stays reachable; the planner dedupes
    and orders everything lexicographically.
    """

    strategy: str = "sampled"
    n_random: int = 512
    include_straight: bool = True
    guided: bool = True
    # Extra greedy runs toward this many fresh posterior samples, giving the
    # cost a menu of plausible source visits to choose from.
    n_guided_samples: int = 0

    def __post_init__(self):
        if self.strategy not in ("exhaustive", "sampled"):
            raise ValueError("strategy must be 'exhaustive' or 'sampled'")


MAX_EXHAUSTIVE_HORIZON = 5


@dataclass(frozen=True)
class RolloutConfig:
    """Monte Carlo settings for belief rollouts: number of hypothesised
    measurement scenarios and the particle budget per rollout (clouds larger
    than the budget are resampled down)."""

    n_scenarios: int = 8
    n_particles: int = 512


def generate_candidates(x_t, actions: ActionSet, horizon: int, search: SearchConfig,
                        rng: np.random.Generator, domain: Box2D) -> np.ndarray:
    """Candidate action sequences as an (n, horizon) int array, deduplicated,
    lexicographically sorted, and pruned to sequences whose every predicted
    position stays inside the domain."""
    x = np.asarray(x_t, dtype=float).reshape(2)
    moves = actions.vectors()
    if search.strategy == "exhaustive":
        if horizon > MAX_EXHAUSTIVE_HORIZON:
            raise ValueError(
                f"exhaustive search limited to horizon <= {MAX_EXHAUSTIVE_HORIZON}")
        cand = np.array(list(itertools.product(range(8), repeat=horizon)), dtype=int)
    else:
        rows = []
        if search.include_straight:
            rows.extend(_straight_candidates(x, moves, horizon, domain))
        for _ in range(search.n_random):
            seq = _random_admissible_sequence(x, moves, horizon, domain, rng)
            if seq is not None:
                rows.append(seq)
        cand = np.array(rows, dtype=int).reshape(-1, horizon)
    cand = np.unique(cand, axis=0)
    keep = _admissible_mask(x, cand, moves, domain)
    return cand[keep]


def greedy_sequence(x_t, target_xy, actions: ActionSet, horizon: int,
                    domain: Box2D) -> np.ndarray | None:
    """Greedy admissible run toward a target; near the target it naturally
    settles into a hold pattern, which keeps the endpoint close."""
    x = np.asarray(x_t, dtype=float).reshape(2).copy()
    target = np.asarray(target_xy, dtype=float).reshape(2)
    moves = actions.vectors()
    seq = np.empty(horizon, dtype=int)
    for k in range(horizon):
        nxt = x + moves
        ok = domain.contains(nxt)
        if not np.any(ok):
            return None
        dist = np.where(ok, np.linalg.norm(nxt - target, axis=1), np.inf)
        seq[k] = int(np.argmin(dist))
        x = x + moves[seq[k]]
    return seq


def _straight_candidates(x, moves, horizon, domain) -> list:
    """Transit legs: repeat one action while admissible; when the wall
    blocks it, fall back to the admissible action closest in direction, so
    the leg slides along the boundary instead of being pruned away."""
    out = []
    for a in range(8):
        pos = x.copy()
        seq = np.empty(horizon, dtype=int)
        ok_all = True
        for k in range(horizon):
            if domain.contains(pos + moves[a]):
                seq[k] = a
            else:
                admissible = np.flatnonzero(domain.contains(pos + moves))
                if len(admissible) == 0:
                    ok_all = False
                    break
                align = moves[admissible] @ moves[a]
                seq[k] = int(admissible[np.argmax(align)])
            pos = pos + moves[seq[k]]
        if ok_all:
            out.append(seq)
    return out


def _random_admissible_sequence(x, moves, horizon, domain, rng) -> np.ndarray | None:
    pos = x.copy()
    seq = np.empty(horizon, dtype=int)
    for k in range(horizon):
        ok = domain.contains(pos + moves)
        choices = np.flatnonzero(ok)
        if len(choices) == 0:
            return None
        seq[k] = int(rng.choice(choices))
        pos = pos + moves[seq[k]]
    return seq


def _admissible_mask(x, cand: np.ndarray, moves: np.ndarray, domain: Box2D) -> np.ndarray:
    pos = x + np.cumsum(moves[cand], axis=1)      # (n, N, 2)
    return np.all(domain.contains(pos), axis=1)


# ---------------------------------------------------------------------------
# measurement scenarios and rollout subsampling


@dataclass(frozen=True)
class MeasurementScenarios:
    """Hypothesised worlds for belief rollouts: one source hypothesis drawn
    by weight per scenario, plus the standard-normal draws that perturb its
    synthetic readings. Shared across candidates so comparisons use common
    random numbers."""

    positions: np.ndarray    # (m, 3)
    rates: np.ndarray        # (m,)
    noise: np.ndarray        # (m, horizon)


def draw_scenarios(ps: ParticleSet, n_scenarios: int, horizon: int,
                   rng: np.random.Generator) -> MeasurementScenarios:
    idx = rng.choice(len(ps), size=n_scenarios, p=ps.weights)
    return MeasurementScenarios(positions=ps.positions3()[idx],
                                rates=ps.rates[idx],
                                noise=rng.standard_normal((n_scenarios, horizon)))


def scenario_mass(ps: ParticleSet, scen: MeasurementScenarios,
                  radius: float) -> np.ndarray:
    """Posterior mass within `radius` of each scenario's source hypothesis."""
    d = np.linalg.norm(ps.xy[None, :, :] - scen.positions[:, None, :2], axis=-1)
    return (ps.weights[None, :] * (d <= radius)).sum(axis=1)


@dataclass(frozen=True)
class _RolloutCloud:
    xy: np.ndarray
    rates: np.ndarray
    weights: np.ndarray
    z: float


def _rollout_cloud(ps: ParticleSet, budget: int, rng: np.random.Generator) -> _RolloutCloud:
    if len(ps) <= budget:
        return _RolloutCloud(ps.xy, ps.rates, ps.weights, ps.z)
    idx = rng.choice(len(ps), size=budget, p=ps.weights)
    return _RolloutCloud(ps.xy[idx], ps.rates[idx],
                         np.full(budget, 1.0 / budget), ps.z)


# ---------------------------------------------------------------------------
# costs


@dataclass(frozen=True)
class PlanResult:
    """Outcome of one receding-horizon solve."""

    action_indices: np.ndarray
    actions: np.ndarray
    cost: float
    cost_exploit: float | None
    cost_explore: float | None
    feasible: bool
    n_candidates: int
    terminal_state: np.ndarray
    terminal_dev: float
    diagnostics: dict | None = None


def smpc_cost(x_t, summary: PosteriorSummary, seq, weights: Weights):
    """Cost of one sequence when the belief is control independent: tracking
    and input terms about the fixed posterior mean, plus constant covariance
    penalties N*tr(Q P) + tr(S P).

    Returns (total, (exploit, explore))."""
    x = np.asarray(x_t, dtype=float).reshape(2)
    u = np.asarray(seq, dtype=float).reshape(-1, 2)
    if len(u) != weights.horizon:
        raise ValueError("sequence length must equal the horizon")
    m = summary.mean_xy
    pos = np.vstack([x, x + np.cumsum(u, axis=0)])
    d = pos - m
    exploit = float(np.einsum("kd,de,ke->", d[:-1], weights.Q, d[:-1]))
    exploit += float(np.einsum("kd,de,ke->", u, weights.R, u))
    exploit += float(d[-1] @ weights.S @ d[-1])
    P = summary.position_cov
    explore = weights.horizon * float(np.sum(weights.Q * P)) + float(np.sum(weights.S * P))
    return exploit + explore, (exploit, explore)


def dcee_cost(x_t, ps: ParticleSet, seq, weights: Weights,
              rollout: RolloutConfig, rng: np.random.Generator,
              env: EnvironmentParams, sensor: SensorModel, agent_z: float = 1.0,
              pinned_mean_xy=None):
    """Dual cost of one sequence: scenario-averaged tracking error against the
    rolled-out posterior mean plus the covariance penalties along the
    rollout. Returns (total, exploit, explore); total = exploit + explore by
    construction."""
    x = np.asarray(x_t, dtype=float).reshape(2)
    u = np.asarray(seq, dtype=float).reshape(-1, 2)
    if len(u) != weights.horizon:
        raise ValueError("sequence length must equal the horizon")
    scen = draw_scenarios(ps, rollout.n_scenarios, weights.horizon, rng)
    cloud = _rollout_cloud(ps, rollout.n_particles, rng)
    moves = u[None, :, :]  # evaluate as a single 'candidate' with explicit steps
    out = _evaluate_rollouts(x, moves, cloud, scen, weights, env, sensor, agent_z,
                             pinned_mean_xy=pinned_mean_xy)
    return float(out["cost"][0]), float(out["exploit"][0]), float(out["explore"][0])


def _evaluate_rollouts(x0: np.ndarray, steps: np.ndarray, cloud: _RolloutCloud,
                       scen: MeasurementScenarios, weights: Weights,
                       env: EnvironmentParams, sensor: SensorModel, agent_z: float,
                       pinned_mean_xy=None, entropy_grid: GridSpec | None = None,
                       entropy_domain: Box2D | None = None) -> dict:
    """Batched belief rollouts for a block of candidates.

    steps: (C, N, 2) displacement sequences. Returns per-candidate arrays:
    cost, exploit, explore, terminal_state, terminal_dev (max over
    scenarios), diverged, and mean terminal entropy when requested.
    """
    C, N, _ = steps.shape
    M = len(scen.rates)
    n = len(cloud.weights)
    pos = np.concatenate([np.broadcast_to(x0, (C, 1, 2)),
                          x0 + np.cumsum(steps, axis=1)], axis=1)  # (C, N+1, 2)
    input_cost = np.einsum("ckd,de,cke->c", steps, weights.R, steps)

    pinned = None if pinned_mean_xy is None else np.asarray(pinned_mean_xy, float).reshape(2)
    w0 = cloud.weights
    mean0 = w0 @ cloud.xy
    cov0 = _weighted_cov(cloud.xy, w0)
    ref0 = mean0 if pinned is None else pinned
    d0 = x0 - ref0
    track = np.full((C, M), float(d0 @ weights.Q @ d0))
    trace_pen = np.full((C, M), float(np.sum(weights.Q * cov0)))

    src3 = np.column_stack([cloud.xy, np.full(n, cloud.z)])
    xx = (cloud.xy[:, :, None] * cloud.xy[:, None, :]).reshape(n, 4)
    with np.errstate(divide="ignore"):
        logw = np.broadcast_to(np.log(w0), (C, M, n)).copy()
    diverged = np.zeros(C, dtype=bool)
    mean_k = np.broadcast_to(mean0, (C, M, 2))
    entropy_term = None

    for k in range(1, N + 1):
        xk3 = np.concatenate([pos[:, k], np.full((C, 1), agent_z)], axis=1)
        logm_pred = log_concentration(xk3[:, None, :], src3[None, :, :], cloud.rates, env)
        pred = np.exp(logm_pred)                      # (C, n)
        sig_pred = sensor.noise_std(pred)
        logm_true = log_concentration(xk3[:, None, :], scen.positions[None, :, :],
                                      scen.rates, env)
        strue = np.exp(logm_true)                     # (C, M)
        z_hat = np.maximum(0.0, strue + sensor.noise_std(strue) * scen.noise[:, k - 1])
        dz = (z_hat[:, :, None] - pred[:, None, :]) / sig_pred[:, None, :]
        logw += -0.5 * dz * dz - np.log(sig_pred)[:, None, :] - _LOG_SQRT_2PI
        shift = logw.max(axis=-1, keepdims=True)
        wk = np.exp(logw - shift)
        tot = wk.sum(axis=-1, keepdims=True)
        bad = ~np.isfinite(shift[..., 0]) | (tot[..., 0] <= 0.0)
        if np.any(bad):
            diverged |= np.any(bad, axis=-1)
            tot = np.where(tot > 0.0, tot, 1.0)
        wk = wk / tot                                  # (C, M, n)
        mean_k = wk @ cloud.xy                         # (C, M, 2)
        cov_k = (wk @ xx).reshape(C, M, 2, 2) - mean_k[..., :, None] * mean_k[..., None, :]
        Wm = weights.Q if k < N else weights.S
        ref = mean_k if pinned is None else pinned
        dk = pos[:, k][:, None, :] - ref
        track += np.einsum("cmd,de,cme->cm", dk, Wm, dk)
        trace_pen += np.einsum("de,cmde->cm", Wm, cov_k)
        if k == N and entropy_grid is not None:
            entropy_term = _cloud_entropies(wk, cloud.xy, entropy_domain, entropy_grid)

    exploit = track.mean(axis=1) + input_cost
    explore = trace_pen.mean(axis=1)
    cost = exploit + explore
    ref_n = mean_k if pinned is None else np.broadcast_to(pinned, (C, M, 2))
    dev = np.linalg.norm(pos[:, N][:, None, :] - ref_n, axis=-1)   # (C, M)
    out = {
        "cost": np.where(diverged, np.inf, cost),
        "exploit": exploit,
        "explore": explore,
        "terminal_state": pos[:, N],
        "terminal_dev": dev.max(axis=1),
        "dev_per_scenario": dev,
        "diverged": diverged,
    }
    if entropy_term is not None:
        out["terminal_entropy"] = entropy_term.mean(axis=1)
    return out


def _cloud_entropies(wk: np.ndarray, xy: np.ndarray, domain: Box2D,
                     grid: GridSpec) -> np.ndarray:
    """Entropy of each rolled-out cloud (C, M) on the histogram grid."""
    C, M, n = wk.shape
    cells = grid_cell_index(xy, domain, grid)
    ncells = grid.nx * grid.ny
    rows = np.repeat(np.arange(C * M), n)
    flat = np.bincount(rows * ncells + np.tile(cells, C * M),
                       weights=wk.reshape(-1), minlength=C * M * ncells)
    p = flat.reshape(C * M, ncells)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.sum(np.where(p > 0, p * np.log(p), 0.0), axis=1)
    return h.reshape(C, M)


def _weighted_cov(xy: np.ndarray, w: np.ndarray) -> np.ndarray:
    d = xy - w @ xy
    return (w[:, None] * d).T @ d


# ---------------------------------------------------------------------------
# top-level solves


def optimize(x_t, ps: ParticleSet, kind: str, weights: Weights,
             rng: np.random.Generator, env: EnvironmentParams, sensor: SensorModel,
             *, actions: ActionSet = ActionSet(), terminal: TerminalIngredients | None = None,
             use_terminal_constraint: bool = False, search: SearchConfig = SearchConfig(),
             rollout: RolloutConfig = RolloutConfig(), domain: Box2D | None = None,
             agent_z: float = 1.0, summary: PosteriorSummary | None = None,
             pinned_mean_xy=None, entropy_grid: GridSpec = GridSpec(),
             scenarios: MeasurementScenarios | None = None,
             collect_diagnostics: bool = False) -> PlanResult:
    """Evaluate candidate sequences and return the feasible minimiser.

    Candidates violating the state box are discarded up front. When the
    terminal constraint is enforced, a candidate passes only if its endpoint
    lies within the terminal ball of the rolled-out mean in every measurement
    scenario; if no candidate passes, the result carries the unconstrained
    minimiser with ``feasible=False`` so callers can log the relaxation.
    Ties break lexicographically over the fixed action ordering.
    """
    x = np.asarray(x_t, dtype=float).reshape(2)
    domain = domain if domain is not None else ps.domain
    if summary is None:
        summary = summarize(ps)
    ref_xy = np.asarray(pinned_mean_xy, float).reshape(2) if pinned_mean_xy is not None \
        else summary.mean_xy

    if kind == "greedy":
        seq = greedy_sequence(x, ref_xy, actions, 1, domain)
        moves = actions.vectors()
        return PlanResult(action_indices=seq, actions=moves[seq], cost=0.0,
                          cost_exploit=None, cost_explore=None, feasible=True,
                          n_candidates=1, terminal_state=x + moves[seq[0]],
                          terminal_dev=float(np.linalg.norm(x + moves[seq[0]] - ref_xy)))
    if kind not in ("smpc", "dcee", "ipp"):
        raise ValueError(f"unknown planner kind {kind!r}")

    scen_rng, cand_rng = rng.spawn(2)
    cand = generate_candidates(x, actions, weights.horizon, search, cand_rng, domain)
    scen = None
    if kind != "smpc":
        scen = scenarios if scenarios is not None else \
            draw_scenarios(ps, rollout.n_scenarios, weights.horizon, scen_rng)
    if search.guided and search.strategy != "exhaustive":
        # Greedy runs toward the reference mean (keeps the terminal set
        # reachable), toward each hypothesised world, and toward a spread of
        # fresh posterior samples, so the cost can choose among visits to
        # plausible source locations.
        targets = [ref_xy]
        if scen is not None:
            targets.extend(scen.positions[:, :2])
        if search.n_guided_samples > 0:
            idx = scen_rng.choice(len(ps), size=search.n_guided_samples, p=ps.weights)
            targets.extend(ps.xy[idx])
        extras = [greedy_sequence(x, tgt, actions, weights.horizon, domain)
                  for tgt in targets]
        extras = [e for e in extras if e is not None]
        if extras:
            cand = np.unique(np.vstack([cand] + [e[None, :] for e in extras]), axis=0)
    if len(cand) == 0:
        raise ValueError("no admissible candidate sequence from this state")
    moves = actions.vectors()

    if kind == "smpc":
        ev = _smpc_evaluate(x, cand, moves, summary, weights)
    else:
        cloud = _rollout_cloud(ps, rollout.n_particles, scen_rng)
        want_entropy = kind == "ipp"
        parts = []
        for lo in range(0, len(cand), _CANDIDATE_CHUNK):
            block = cand[lo:lo + _CANDIDATE_CHUNK]
            parts.append(_evaluate_rollouts(
                x, moves[block], cloud, scen, weights, env, sensor, agent_z,
                pinned_mean_xy=pinned_mean_xy,
                entropy_grid=entropy_grid if want_entropy else None,
                entropy_domain=domain if want_entropy else None))
        ev = {key: np.concatenate([p[key] for p in parts]) for key in parts[0]}
        if kind == "ipp":
            ev["objective"] = ev["terminal_entropy"]
        else:
            ev["objective"] = ev["cost"]
    if kind == "smpc":
        ev["objective"] = ev["cost"]

    feasible_mask = ~ev["diverged"]
    if use_terminal_constraint:
        if terminal is None:
            raise ValueError("terminal ingredients required to enforce the terminal set")
        in_ball = np.all(ev["dev_per_scenario"] <= terminal.radius + 1e-9, axis=1)
        constrained = feasible_mask & in_ball
    else:
        constrained = feasible_mask

    feasible = bool(np.any(constrained))
    pool = constrained if feasible else feasible_mask
    if not np.any(pool):
        pool = np.ones(len(cand), dtype=bool)   # every rollout diverged; surface the first
    obj = np.where(pool, ev["objective"], np.inf)
    best = int(np.argmin(obj))
    diagnostics = None
    if collect_diagnostics:
        diagnostics = {"candidates": cand, "objective": ev["objective"],
                       "cost": ev["cost"], "diverged": ev["diverged"],
                       "terminal_dev": ev["terminal_dev"]}
        if "terminal_entropy" in ev:
            diagnostics["terminal_entropy"] = ev["terminal_entropy"]

    exploit = ev.get("exploit")
    explore = ev.get("explore")
    return PlanResult(
        action_indices=cand[best].copy(),
        actions=moves[cand[best]],
        cost=float(ev["cost"][best]) if kind != "ipp" else float(ev["objective"][best]),
        cost_exploit=None if exploit is None else float(exploit[best]),
        cost_explore=None if explore is None else float(explore[best]),
        feasible=feasible,
        n_candidates=int(len(cand)),
        terminal_state=ev["terminal_state"][best].copy(),
        terminal_dev=float(ev["terminal_dev"][best]),
        diagnostics=diagnostics,
    )


def _smpc_evaluate(x, cand, moves, summary: PosteriorSummary, weights: Weights) -> dict:
    steps = moves[cand]                                   # (C, N, 2)
    pos = np.concatenate([np.broadcast_to(x, (len(cand), 1, 2)),
                          x + np.cumsum(steps, axis=1)], axis=1)
    m = summary.mean_xy
    d = pos - m
    exploit = np.einsum("ckd,de,cke->c", d[:, :-1], weights.Q, d[:, :-1])
    exploit += np.einsum("ckd,de,cke->c", steps, weights.R, steps)
    exploit += np.einsum("cd,de,ce->c", d[:, -1], weights.S, d[:, -1])
    P = summary.position_cov
    explore = weights.horizon * float(np.sum(weights.Q * P)) + float(np.sum(weights.S * P))
    dev = np.linalg.norm(pos[:, -1] - m, axis=1)
    return {
        "cost": exploit + explore,
        "exploit": exploit,
        "explore": np.full(len(cand), explore),
        "terminal_state": pos[:, -1],
        "terminal_dev": dev,
        "dev_per_scenario": dev[:, None],
        "diverged": np.zeros(len(cand), dtype=bool),
    }


def ipp_entropy_plan(x_t, ps: ParticleSet, horizon: int, search: SearchConfig,
                     rng: np.random.Generator, env: EnvironmentParams,
                     sensor: SensorModel, *, actions: ActionSet = ActionSet(),
                     rollout: RolloutConfig = RolloutConfig(), agent_z: float = 1.0,
                     entropy_grid: GridSpec = GridSpec(),
                     collect_diagnostics: bool = False) -> PlanResult:
    """Pick the candidate with the largest expected posterior-entropy drop
    over the rollout (equivalently, the smallest mean terminal entropy)."""
    weights = Weights.diagonal(1.0, 1.0, 1.0, horizon)
    return optimize(x_t, ps, "ipp", weights, rng, env, sensor, actions=actions,
                    search=search, rollout=rollout, agent_z=agent_z,
                    entropy_grid=entropy_grid, collect_diagnostics=collect_diagnostics)


# ---------------------------------------------------------------------------
# planner specification consumed by the episode harness


@dataclass(frozen=True)
class PlannerSpec:
    """Everything the closed loop needs to invoke one planner."""

    name: str
    kind: str                              # smpc | dcee | ipp | greedy | scripted
    weights: Weights | None = None
    actions: ActionSet = ActionSet()
    terminal: TerminalIngredients | None = None
    use_terminal_constraint: bool = False
    search: SearchConfig = SearchConfig()
    rollout: RolloutConfig = RolloutConfig()
    entropy_grid: GridSpec = GridSpec()
    pin_mean_to_truth: bool = False
    scripted_actions: tuple = ()
    # Steps between refreshes of the planner's random draws. With 1 every
    # solve samples fresh measurement scenarios; larger values hold the
    # hypothesised world fixed over a block of decisions so the closed loop
    # commits to it instead of dithering between redraws.
    replan_period: int = 1
    # A held scenario is abandoned early once the real posterior mass within
    # target_kill_radius of its source hypothesis falls below
    # target_stale_ratio of the mass at draw time (the hypothesis has been
    # inspected and falsified, so commitment to it is wasted motion).
    target_stale_ratio: float = 0.2
    target_kill_radius: float = 3.0

    def horizon(self) -> int:
        if self.kind in ("greedy", "scripted"):
            return 1
        return self.weights.horizon
