"""Predict-then-plan contouring MPC.

The opponent is treated as a non-strategic dynamic obstacle under a constant
velocity model; the player's own K-step input sequence is optimized by a
projected damped Gauss-Newton iteration with backtracking, so every iterate
(including budget-exhausted ones) respects the input box exactly.
Convergence is measured by the projected-gradient residual in input space,
the same stationarity certificate used by the game solver.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .costs import CostParams, residual_model
from .dynamics import INPUT_DIM, POS, THETA, VEL, VTHETA, InputBounds, rollout
from .track import TrackSpline

CONVERGED = "converged"
BUDGET_EXHAUSTED = "budget_exhausted"
FAILED = "failed"


@dataclass
class PlannerParams:
    K: int = 20
    dt: float = 0.1
    bounds: InputBounds = field(default_factory=InputBounds)
    max_iters: int = 100
    time_budget: float = 0.05
    tol_grad: float = 1e-4

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("horizon K must be >= 1")
        if not (self.max_iters > 0 and self.time_budget > 0 and self.tol_grad > 0):
            raise ValueError("budgets and tolerance must be positive")


@dataclass
class Plan:
    """Receding-horizon strategy: states (K+1, 11) consistent with inputs (K, 4)."""

    states: np.ndarray
    inputs: np.ndarray
    t_stamp: float
    solve_time: float
    solver_status: str
    cost: float = np.nan
    cost_trace: list = None
    iters: int = 0
    # game-solver extras: the internally predicted opponent plan and the
    # joint stationarity residual, kept for trace auditing
    opp_states: np.ndarray = None
    residual: float = None

    @property
    def horizon(self) -> int:
        return self.inputs.shape[0]


def predict_opponent(x_opp: np.ndarray, K: int, dt: float) -> np.ndarray:
    """Constant velocity extrapolation, (K+1, 11): v, a frozen, p and theta linear."""
    x_opp = np.asarray(x_opp, dtype=float)
    traj = np.tile(x_opp, (K + 1, 1))
    steps = np.arange(K + 1)[:, None]
    traj[:, POS] = x_opp[POS] + steps * dt * x_opp[VEL]
    traj[:, THETA] = x_opp[THETA] + steps[:, 0] * dt * x_opp[VTHETA]
    return traj


def box_residual(u: np.ndarray, grad_u: np.ndarray, bound_vec: np.ndarray) -> float:
    """Projected-gradient stationarity residual for a box-constrained problem."""
    proj = np.clip(u - grad_u, -bound_vec, bound_vec)
    return float(np.abs(u - proj).max())


def cold_start_inputs(x0: np.ndarray, params: PlannerParams, v_max: float) -> np.ndarray:
    """Zero jerk; progress acceleration drives v_theta toward the speed limit."""
    u = np.zeros((params.K, INPUT_DIM))
    v = float(x0[VTHETA])
    for k in range(params.K):
        dv = np.clip((v_max - v) / params.dt, -params.bounds.dv_theta_max,
                     params.bounds.dv_theta_max)
        u[k, 3] = dv
        v += dv * params.dt
    return u


def shift_warm_start(u_prev: np.ndarray) -> np.ndarray:
    """One-stage receding-horizon shift with the last input repeated."""
    return np.vstack([u_prev[1:], u_prev[-1:]])


def solve_player(x0: np.ndarray, opp_traj: np.ndarray, role: str, u_init: np.ndarray,
                 track: TrackSpline, params: PlannerParams, cost: CostParams):
    """Inner box-constrained solve shared by plan_mpc and the best-response loop.

    Projected Levenberg-Marquardt Gauss-Newton: the cost is a sum of squares
    plus one linear term, so the GN normal matrix (from exact residual
    Jacobians through the linear rollout) captures the true curvature and
    typical solves take a handful of iterations. Steps are projected onto the
    input box with Armijo backtracking on the projected step.

    Returns (u, traj, J, status, iters, trace); trace holds the cost of each
    accepted iterate (monotone by construction).
    """
    K = params.K
    b = params.bounds.vector()
    bound_vec = np.tile(b, K)
    u = np.clip(np.asarray(u_init, dtype=float).ravel(), -bound_vec, bound_vec)
    t_start = time.perf_counter()
    n_u = u.size

    def model(u_flat):
        return residual_model(x0, u_flat.reshape(K, INPUT_DIM), opp_traj,
                              role, track, cost, params.dt)

    try:
        J, r, Jr, g = model(u)
    except (ValueError, FloatingPointError):
        traj = rollout(np.nan_to_num(x0), np.zeros((K, INPUT_DIM)), params.dt)
        return np.zeros((K, INPUT_DIM)), traj, np.nan, FAILED, 0, [np.nan]
    if not np.isfinite(J):
        return (u.reshape(K, INPUT_DIM), rollout(x0, u.reshape(K, INPUT_DIM), params.dt),
                J, FAILED, 0, [J])

    trace = [J]
    lam = 1e-6
    status = BUDGET_EXHAUSTED
    iters = 0
    eye = np.eye(n_u)
    for it in range(params.max_iters):
        if box_residual(u, g, bound_vec) <= params.tol_grad:
            status = CONVERGED
            break
        if time.perf_counter() - t_start > params.time_budget:
            break
        H = 2.0 * (Jr.T @ Jr)
        H[np.diag_indices_from(H)] += lam * (1.0 + H.diagonal())
        try:
            d = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError:
            d = -g
        accepted = False
        step = 1.0
        for _ in range(12):
            u_new = np.clip(u + step * d, -bound_vec, bound_vec)
            du = u_new - u
            if not np.any(du):
                break
            try:
                J_new, r_new, Jr_new, g_new = model(u_new)
            except (ValueError, FloatingPointError):
                status = FAILED
                break
            if np.isfinite(J_new) and J_new <= J + 1e-4 * (g @ du):
                accepted = True
                break
            step *= 0.5
        iters = it + 1
        if status == FAILED:
            break
        if accepted:
            u, J, r, Jr, g = u_new, J_new, r_new, Jr_new, g_new
            trace.append(J)
            lam = max(lam * 0.33, 1e-8)
        else:
            lam *= 10.0
            if lam > 1e8:
                break  # stuck at a nonsmooth/flat spot; report current iterate
    else:
        if box_residual(u, g, bound_vec) <= params.tol_grad:
            status = CONVERGED
    if status != FAILED and box_residual(u, g, bound_vec) <= params.tol_grad:
        status = CONVERGED

    u_mat = u.reshape(K, INPUT_DIM)
    traj = rollout(x0, u_mat, params.dt)
    return u_mat, traj, J, status, iters, trace


def plan_mpc(x_pair: np.ndarray, ego: int, role: str, warm: Plan | None,
             track: TrackSpline, params: PlannerParams, cost: CostParams,
             t_stamp: float = 0.0) -> Plan:
    """Single-player contouring MPC solve against a constant-velocity opponent."""
    t0 = time.perf_counter()
    x0 = np.asarray(x_pair[ego], dtype=float)
    opp_traj = predict_opponent(x_pair[1 - ego], params.K, params.dt)
    if warm is not None:
        if warm.horizon != params.K:
            raise ValueError("warm start horizon mismatch")
        u_init = shift_warm_start(warm.inputs)
    else:
        u_init = cold_start_inputs(x0, params, cost.v_max(role))
    u, traj, J, status, iters, trace = solve_player(
        x0, opp_traj, role, u_init, track, params, cost)
    return Plan(states=traj, inputs=u, t_stamp=t_stamp,
                solve_time=time.perf_counter() - t0, solver_status=status,
                cost=J, cost_trace=trace, iters=iters)


class MpcPlanner:
    """Stateful wrapper owning warm-start memory for one player."""

    name = "mpc"

    def __init__(self, player: int, params: PlannerParams, cost: CostParams):
        self.player = player
        self.params = params
        self.cost = cost
        self._warm: Plan | None = None

    def reset(self):
        self._warm = None

    def plan(self, x_pair, roles, t_stamp, track) -> Plan:
        p = plan_mpc(x_pair, self.player, roles[self.player], self._warm,
                     track, self.params, self.cost, t_stamp=t_stamp)
        if p.solver_status != FAILED:
            self._warm = p
        return p
