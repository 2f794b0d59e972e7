"""Online open-loop Nash equilibrium solver for the two-player racing game.

The equilibrium problem over both players' input sequences is solved as a
box-constrained variational inequality: iterate projected quasi-Newton steps
on the stacked pseudo-gradient (each player's cost gradient with the
opponent's rolled-out trajectory held fixed). Spectral Barzilai-Borwein
scaling per player plus damping on the early iterations keeps the
collision-coupled steps stable. An iterated-best-response solver built on
the MPC planner serves as the reference oracle.

The stationarity certificate for both solvers is the joint projected-gradient
residual r(u) = max |u - Proj(u - F(u))|.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .costs import ATTACKER, CostParams, cost_and_gradient, total_cost
from .dynamics import rollout
from .mpc_planner import (BUDGET_EXHAUSTED, CONVERGED, FAILED, Plan,
                          PlannerParams, cold_start_inputs, shift_warm_start,
                          solve_player)
from .track import TrackSpline


@dataclass
class MpgParams(PlannerParams):
    max_iters: int = 150
    time_budget: float = 0.5
    damping: float = 0.5
    damping_iters: int = 5
    inner_iters: int = 15       # quasi-Newton polish steps per player per iteration
    mode: str = "vi"            # "vi" | "ibr"
    ibr_max_rounds: int = 30
    # equilibrium selection: when attacking within engagement range, also
    # solve from lateral pass seeds and keep the own-cost-best equilibrium.
    # 0 disables multi-start (plain warm-started VI, used by solver oracles).
    pass_candidates: int = 2
    engage_range: float = 4.0

    def __post_init__(self):
        super().__post_init__()
        if self.mode not in ("vi", "ibr"):
            raise ValueError(f"unknown solver mode {self.mode!r}")


@dataclass
class GameIterate:
    """Joint input profile with its stationarity residual."""

    u_joint: np.ndarray         # (2, K, 4)
    residual: float
    iters: int


def pseudo_gradient(u_joint: np.ndarray, x_pair: np.ndarray, roles,
                    track: TrackSpline, cost: CostParams, dt: float) -> np.ndarray:
    """Stacked per-player gradients, each against the other's rolled trajectory."""
    u_joint = np.asarray(u_joint, dtype=float)
    trajs = [rollout(x_pair[i], u_joint[i], dt) for i in range(2)]
    F = np.empty_like(u_joint)
    for i in range(2):
        _, F[i] = cost_and_gradient(x_pair[i], u_joint[i], trajs[1 - i],
                                    roles[i], track, cost, dt)
    return F


def _joint_residual(u, F, bound_vec):
    proj = np.clip(u - F, -bound_vec, bound_vec)
    return float(np.abs(u - proj).max())


def _initial_joint(x_pair, roles, warm, params, cost):
    if warm is not None:
        return np.stack([shift_warm_start(warm[i]) for i in range(2)])
    return np.stack([cold_start_inputs(x_pair[i], params, cost.v_max(roles[i]))
                     for i in range(2)])


def _plans_from_joint(u_joint, x_pair, roles, track, params, cost, t_stamp,
                      solve_time, status, iters, residual):
    trajs = [rollout(x_pair[i], u_joint[i], params.dt) for i in range(2)]
    plans = []
    for i in range(2):
        J = total_cost(trajs[i], u_joint[i], trajs[1 - i], roles[i], track, cost)
        plans.append(Plan(states=trajs[i], inputs=u_joint[i].copy(), t_stamp=t_stamp,
                          solve_time=solve_time, solver_status=status, cost=J,
                          iters=iters, residual=residual))
    return plans[0], plans[1], residual


def pass_seed(x_ego, track: TrackSpline, side: float, v_max: float,
              params: PlannerParams) -> np.ndarray:
    """Full-speed lateral swing-and-return profile seeding an overtake.

    Built on the max-progress cold start (not the warm follow plan, whose
    braking profile would pull the candidate straight back into the follow
    equilibrium).
    """
    u = cold_start_inputs(x_ego, params, v_max)
    _, lat, _ = track.frame(float(x_ego[9]))
    j_amp = 0.4 * params.bounds.j_max
    n1 = max(2, int(round(0.5 / params.dt)))
    K = u.shape[0]
    for k in range(K):
        if k < n1:
            j = side * j_amp
        elif k < 2 * n1:
            j = -side * j_amp
        elif k < 3 * n1:
            j = 0.3 * side * j_amp
        else:
            j = 0.0
        u[k, 0:3] = u[k, 0:3] + j * lat
    return np.clip(u, -params.bounds.vector(), params.bounds.vector())


def solve_nash(x_pair: np.ndarray, roles, warm, track: TrackSpline,
               params: MpgParams, cost: CostParams, t_stamp: float = 0.0):
    """Projected simultaneous quasi-Newton iteration on the pseudo-gradient.

    Each outer iteration both players take a damped, projected quasi-Newton
    step on their own cost block with the opponent's trajectory frozen at the
    pre-update iterate (Jacobi, not alternating). The per-player scaling H is
    realized by a short warm-started bounded L-BFGS polish of the block, which
    keeps steps stable where the collision coupling is steep.

    Local equilibria are selected by multi-start: when a player attacks inside
    engagement range, lateral pass seeds are also solved and the equilibrium
    with the lowest attacker cost is kept (warm starts alone settle into the
    conservative follow equilibrium). warm is an optional (2, K, 4) array
    holding the previous joint solution (shifted one stage here).
    Returns (Plan_1, Plan_2, residual).
    """
    t0 = time.perf_counter()
    x_pair = np.asarray(x_pair, dtype=float)
    b = params.bounds.vector()
    bound_vec = np.tile(b, (params.K, 1))
    u0 = np.clip(_initial_joint(x_pair, roles, warm, params, cost),
                 -bound_vec, bound_vec)

    u, status, costs, iters, residual = _solve_nash_single(
        u0, x_pair, roles, track, params, cost, t0)

    att = 0 if roles[0] == ATTACKER else 1
    gap = float(x_pair[1 - att][9]) - float(x_pair[att][9])
    if track.closed:
        L = track.length
        gap = (gap + 0.5 * L) % L - 0.5 * L
    if (params.pass_candidates > 0 and status != FAILED
            and 0.0 <= gap < params.engage_range):
        # the defender block is decoupled, so alternative attacker equilibria
        # are exact best responses against the solved defender trajectory
        opp_traj = rollout(x_pair[1 - att], u[1 - att], params.dt)
        inner = PlannerParams(K=params.K, dt=params.dt, bounds=params.bounds,
                              max_iters=params.max_iters,
                              time_budget=params.time_budget,
                              tol_grad=params.tol_grad)
        best_J = costs[att]
        adopted = False
        for side in (1.0, -1.0)[:params.pass_candidates]:
            if time.perf_counter() - t0 > params.time_budget:
                break
            seed = pass_seed(x_pair[att], track, side, cost.v_max(roles[att]),
                             params)
            u_att, _, J_att, st, _, _ = solve_player(
                x_pair[att], opp_traj, roles[att], seed, track, inner, cost)
            if st != FAILED and J_att < best_J - 1e-9:
                best_J = J_att
                u = u.copy()
                u[att] = u_att
                adopted = True
        if adopted:
            F = pseudo_gradient(u, x_pair, roles, track, cost, params.dt)
            residual = _joint_residual(u, F, bound_vec)
            status = CONVERGED if residual <= params.tol_grad else BUDGET_EXHAUSTED
    return _plans_from_joint(u, x_pair, roles, track, params, cost, t_stamp,
                             time.perf_counter() - t0, status, iters, residual)


def _solve_nash_single(u, x_pair, roles, track, params, cost, t0):
    b = params.bounds.vector()
    bound_vec = np.tile(b, (params.K, 1))
    inner = PlannerParams(K=params.K, dt=params.dt, bounds=params.bounds,
                          max_iters=params.inner_iters,
                          time_budget=params.time_budget,
                          tol_grad=0.5 * params.tol_grad)

    status = BUDGET_EXHAUSTED
    residual = np.inf
    iters = 0
    for it in range(params.max_iters):
        F = pseudo_gradient(u, x_pair, roles, track, cost, params.dt)
        if not np.all(np.isfinite(F)):
            status = FAILED
            break
        residual = _joint_residual(u, F, bound_vec)
        if residual <= params.tol_grad:
            status = CONVERGED
            break
        if time.perf_counter() - t0 > params.time_budget:
            break
        damp = params.damping if it < params.damping_iters else 1.0
        trajs = [rollout(x_pair[i], u[i], params.dt) for i in range(2)]
        u_new = np.empty_like(u)
        failed = False
        for i in range(2):
            u_i, _, _, st, _, _ = solve_player(x_pair[i], trajs[1 - i], roles[i],
                                               u[i], track, inner, cost)
            if st == FAILED:
                failed = True
                break
            u_new[i] = u_i
        if failed:
            status = FAILED
            break
        u = np.clip(u + damp * (u_new - u), -bound_vec, bound_vec)
        iters = it + 1
    else:
        F = pseudo_gradient(u, x_pair, roles, track, cost, params.dt)
        residual = _joint_residual(u, F, bound_vec)
        if residual <= params.tol_grad:
            status = CONVERGED
    trajs = [rollout(x_pair[i], u[i], params.dt) for i in range(2)]
    costs = [total_cost(trajs[i], u[i], trajs[1 - i], roles[i], track, cost)
             for i in range(2)]
    return u, status, costs, iters, residual


def ibr_solve(x_pair: np.ndarray, roles, warm, track: TrackSpline,
              params: MpgParams, cost: CostParams, t_stamp: float = 0.0):
    """Iterated best response via the MPC inner solver; reference Nash oracle.

    Alternates full best-response solves (opponent trajectory fixed to the
    latest iterate) until the joint input change falls below tol_grad.
    Divergence guard: three consecutive growing round-to-round changes fail
    the solve.
    """
    t0 = time.perf_counter()
    x_pair = np.asarray(x_pair, dtype=float)
    b = params.bounds.vector()
    bound_vec = np.tile(b, (params.K, 1))
    u = np.clip(_initial_joint(x_pair, roles, warm, params, cost),
                -bound_vec, bound_vec)
    inner = PlannerParams(K=params.K, dt=params.dt, bounds=params.bounds,
                          max_iters=params.max_iters,
                          time_budget=params.time_budget,
                          tol_grad=params.tol_grad)

    status = BUDGET_EXHAUSTED
    changes = []
    rounds = 0
    for rnd in range(params.ibr_max_rounds):
        if time.perf_counter() - t0 > params.time_budget:
            break
        u_prev = u.copy()
        ok = True
        for i in range(2):
            opp_traj = rollout(x_pair[1 - i], u[1 - i], params.dt)
            u_i, _, _, st, _, _ = solve_player(x_pair[i], opp_traj, roles[i],
                                               u[i], track, inner, cost)
            if st == FAILED:
                ok = False
                break
            u[i] = u_i
        rounds = rnd + 1
        if not ok:
            status = FAILED
            break
        changes.append(float(np.abs(u - u_prev).max()))
        if changes[-1] <= params.tol_grad:
            status = CONVERGED
            break
        if len(changes) >= 4 and changes[-1] > changes[-2] > changes[-3] > changes[-4]:
            status = FAILED
            break
    F = pseudo_gradient(u, x_pair, roles, track, cost, params.dt)
    residual = _joint_residual(u, F, bound_vec)
    if status == BUDGET_EXHAUSTED and residual <= params.tol_grad:
        status = CONVERGED
    return _plans_from_joint(u, x_pair, roles, track, params, cost, t_stamp,
                             time.perf_counter() - t0, status, rounds, residual)


class MpgPlanner:
    """Decentralized game planner for one player: runs its own joint solve.

    Publishes only its own plan; the internally predicted opponent plan is
    kept for trace auditing (equilibrium certificates).
    """

    name = "mpg"

    def __init__(self, player: int, params: MpgParams, cost: CostParams):
        self.player = player
        self.params = params
        self.cost = cost
        self._warm = None

    def reset(self):
        self._warm = None

    def plan(self, x_pair, roles, t_stamp, track) -> Plan:
        solver = solve_nash if self.params.mode == "vi" else ibr_solve
        p1, p2, residual = solver(x_pair, roles, self._warm, track,
                                  self.params, self.cost, t_stamp=t_stamp)
        own = (p1, p2)[self.player]
        opp = (p1, p2)[1 - self.player]
        if own.solver_status != FAILED:
            self._warm = np.stack([p1.inputs, p2.inputs])
        own.opp_states = opp.states
        own.residual = residual
        return own
