import logging
import math
import time
from dataclasses import dataclass, field
from typing import Annotated, Any, Dict, List, Tuple

import numpy as np

from gp.dyn_gp import (
    Dataset,
    DynamicsPosterior,
    DynamicsPrior,
    approx_state_derivatives,
    fit_posterior,
    posterior_mean_batch,
    predict_xdot,
)
from gp.kernels import ScalarKernel
from safety.barrier import BarrierFunction, cbc_moments, validate_kalpha
from safety.controller import ChanceSpec, chance_to_deterministic, solve_safe_control
from safety.trigger import TriggerParams, chi_bound, estimate_lipschitz, max_trigger_time, reachability_radius
from sim.config import SimConfig
from sim.pendulum import SimulationDivergedError, integrate_zoh, pendulum_barriers, true_drift_batch

# Set up logging
logger = logging.getLogger(__name__)

STATE_DIM = 2
CTRL_DIM = 1


@dataclass
class ExplorationState:
    rng: np.random.Generator
    previous: np.ndarray


def exploration_rate(step: int, cfg: SimConfig) -> float:
    decay = math.log(cfg.epsilon_start / cfg.epsilon_end) / cfg.epsilon_decay_steps
    return max(cfg.epsilon_end, cfg.epsilon_start * math.exp(-step * decay))


def reference_control(
    step: Annotated[int, "Step index"],
    cfg: Annotated[SimConfig, "Simulation configuration"],
    state: Annotated[ExplorationState, "Generator and previous commanded control"],
) -> np.ndarray:
    """
    Epsilon-greedy reference: uniform in the bounds with probability epsilon, otherwise the
    previous commanded control
    """
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    draw = state.rng.random()
    if draw < exploration_rate(step, cfg):
        return np.array([state.rng.uniform(*cfg.u_bounds)])
    return state.previous.copy()


@dataclass
class StepRecord:
    t: float
    state: np.ndarray
    u: np.ndarray
    u_ref: np.ndarray
    h: float
    cbc_mean: float
    cbc_var: float
    tau: float
    feasible: bool
    posterior_size: int
    margin: float
    iterations: int


@dataclass
class TrajectoryLog:
    records: List[StepRecord]
    final_state: np.ndarray
    final_time: float
    final_h: float
    posterior: DynamicsPosterior
    rmse_trace: List[Tuple[int, float]] = field(default_factory=list)
    aborted: bool = False
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def states(self) -> np.ndarray:
        return np.array([r.state for r in self.records] + [self.final_state])

    @property
    def h_values(self) -> np.ndarray:
        return np.array([r.h for r in self.records] + [self.final_h])

    def summary(self) -> Dict[str, Any]:
        records = self.records
        return {
            "steps": len(records),
            "min_h": float(np.min(self.h_values)),
            "final_rmse": self.rmse_trace[-1][1] if self.rmse_trace else None,
            "untrained_rmse": self.metadata.get("untrained_rmse"),
            "rmse_trace": [[step, value] for step, value in self.rmse_trace],
            "infeasible_steps": int(sum(not r.feasible for r in records)),
            "mean_solver_iterations": float(np.mean([r.iterations for r in records])) if records else 0.0,
            "posterior_size": self.posterior.size,
            "aborted": self.aborted,
        }


def build_prior(cfg: SimConfig) -> DynamicsPrior:
    gp = cfg.gp
    row_cov = np.eye(STATE_DIM) if gp.row_cov is None else np.asarray(gp.row_cov, dtype=float)
    ctrl_cov = np.eye(CTRL_DIM + 1) if gp.ctrl_cov is None else np.asarray(gp.ctrl_cov, dtype=float)
    return DynamicsPrior(row_cov, ctrl_cov, ScalarKernel(np.asarray(gp.lengthscales), gp.signal_variance))


def select_barrier(cfg: SimConfig) -> BarrierFunction:
    deg2, deg1 = pendulum_barriers(cfg.pendulum, alpha=cfg.barrier.alpha, k_alpha=cfg.barrier.k_alpha)
    return deg2 if cfg.barrier.kind == "deg2" else deg1


def _dataset(states: List[np.ndarray], controls: List[np.ndarray], times: List[float]) -> Dataset:
    derivs = approx_state_derivatives(np.array(states), np.array(times))
    return Dataset(np.array(states[:-1]), np.array(controls), derivs, np.array(times[:-1]))


def drift_rmse(post: DynamicsPosterior, states: np.ndarray, cfg: SimConfig) -> float:
    """RMSE of the posterior-mean drift over the given states."""
    predicted = posterior_mean_batch(post, states)[:, :, 0]
    return float(np.sqrt(np.mean((predicted - true_drift_batch(states, cfg.pendulum)) ** 2)))


def _trigger_time(post, bf, x, u, cfg: SimConfig) -> float:
    settings = cfg.trigger
    xdot_norm = float(np.linalg.norm(predict_xdot(post, x, u).mean))
    L = estimate_lipschitz(
        post, u, x, settings.lipschitz_radius, settings.lipschitz_samples, settings.lipschitz_floor
    )
    radius = reachability_radius(L, xdot_norm, settings.tau_cap)
    chi = max(chi_bound(bf, x, radius, settings.chi_samples), 1e-12)
    params = TriggerParams(L, settings.b, bf.alpha * chi, settings.tau_cap)
    tau = max_trigger_time(params, cfg.chance.zeta, chi, xdot_norm)
    if tau < cfg.tau_min:
        logger.debug(f"Trigger time {tau:.3e} raised to tau_min {cfg.tau_min:.3e}")
    return max(tau, cfg.tau_min)


def run_closed_loop(cfg: Annotated[SimConfig, "Simulation configuration"]) -> TrajectoryLog:
    """
    Learn the pendulum online while filtering an epsilon-greedy reference for safety

    Each step refits the posterior when refit_every new samples have arrived, turns the
    chance constraint into a cone constraint, solves for the control, picks the hold time
    (self-triggered for degree 1, dt for degree 2) and integrates the true pendulum.

    Returns:
        TrajectoryLog: one record per executed step; a diverged run returns the partial log
    """
    started = time.time()
    bf = select_barrier(cfg)
    x = np.asarray(cfg.x0, dtype=float)
    if bf.value(x) <= 0:
        raise ValueError(f"x0 = {x.tolist()} is not strictly inside the safe set (h = {bf.value(x):.4g})")

    prior = build_prior(cfg)
    spec = ChanceSpec(cfg.chance.zeta, cfg.chance.confidence, cfg.chance.method)
    Q = np.asarray(cfg.controller.Q, dtype=float)
    bounds = (np.array([cfg.u_bounds[0]]), np.array([cfg.u_bounds[1]]))
    exploration = ExplorationState(np.random.default_rng(cfg.seed), np.zeros(CTRL_DIM))

    post = fit_posterior(prior, Dataset.empty(STATE_DIM, CTRL_DIM), cfg.gp.jitter)
    untrained = post
    gains = bf.k_alpha if bf.relative_degree == 2 else np.array([bf.alpha])
    eta0 = [bf.value(x), float(bf.gradient(x) @ predict_xdot(post, x, np.zeros(CTRL_DIM)).mean)][: gains.size]
    kalpha = validate_kalpha(gains, eta0)
    metadata = {
        "barrier": bf.name,
        "relative_degree": bf.relative_degree,
        "kalpha_ok": kalpha.ok,
        "kalpha_poles": [[float(p.real), float(p.imag)] for p in kalpha.poles],
        "default_horizon": "horizon" not in cfg.model_fields_set,
        "default_unit_priors": cfg.gp.row_cov is None and cfg.gp.ctrl_cov is None,
        "greedy_reference": "previous_commanded_control",
    }
    if not kalpha.ok:
        logger.warning(f"Exponential gains flagged: poles {metadata['kalpha_poles']}")

    states, controls, times = [x.copy()], [], [0.0]
    records: List[StepRecord] = []
    rmse_trace: List[Tuple[int, float]] = []
    fitted = 0
    t = 0.0
    aborted = False

    for step in range(cfg.horizon):
        u_ref = reference_control(step, cfg, exploration)
        if len(controls) - fitted >= cfg.refit_every:
            post = fit_posterior(prior, _dataset(states, controls, times), cfg.gp.jitter, cfg.gp.max_train)
            fitted = len(controls)
            logger.debug(f"Refit posterior on {post.size} samples at step {step}")

        def moment_fn(v, x=x, post=post):
            moments = cbc_moments(post, bf, x, v)
            return moments.mean, moments.variance

        con = chance_to_deterministic(moment_fn, spec, CTRL_DIM)
        solution = solve_safe_control(Q, u_ref, con, bounds, cfg.controller.max_iterations)
        u = solution.u
        at_u = cbc_moments(post, bf, x, u)
        tau = _trigger_time(post, bf, x, u, cfg) if bf.relative_degree == 1 else cfg.dt
        substeps = max(1, math.ceil(cfg.substeps * tau / cfg.dt - 1e-9))

        try:
            x_next = integrate_zoh(cfg.pendulum, x, u, tau, substeps)
        except SimulationDivergedError as e:
            logger.error(f"Aborting run at step {step}: {e}")
            aborted = True
            break

        records.append(
            StepRecord(
                t, x.copy(), u.copy(), u_ref.copy(), bf.value(x), at_u.mean, at_u.variance, tau,
                solution.feasible, post.size, solution.margin, solution.iterations,
            )
        )
        t += tau
        x = x_next
        states.append(x.copy())
        controls.append(u.copy())
        times.append(t)
        exploration.previous = u.copy()
        if step % cfg.rmse_every == 0:
            rmse_trace.append((step, drift_rmse(post, np.array(states), cfg)))

    if controls:
        post = fit_posterior(prior, _dataset(states, controls, times), cfg.gp.jitter, cfg.gp.max_train)
        rmse_trace.append((len(records), drift_rmse(post, np.array(states), cfg)))
    metadata["untrained_rmse"] = drift_rmse(untrained, np.array(states), cfg)
    log = TrajectoryLog(records, x.copy(), t, bf.value(x), post, rmse_trace, aborted, metadata)
    summary = log.summary()
    logger.info(
        f"Closed loop finished: {summary['steps']} steps, min h {summary['min_h']:.4g}, "
        f"{summary['infeasible_steps']} infeasible, {time.time() - started:.1f}s"
    )
    return log
