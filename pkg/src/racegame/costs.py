"""Per-player receding-horizon racing objective and its exact input gradient.

Stage terms over k = 0..K-1:
  lag/contour tracking   q_l * e_l^2 + q_c(theta) * |e_c|^2
  input regularization   u' diag(q_u) u
  relative progress      mu * (v_theta_opp - v_theta_own)
  collision (attacker)   q_col * Omega(|p_own - p_opp|, r_pen)
  speed limit            q_vel * Psi(|v_own|, v_max(role))

The contour weight is boosted near gates: q_c(theta) = q_c_base * (1 + q_g *
sum_g exp(-d(theta, theta_g)^2 / sigma_g^2)) with d the periodic progress
distance. Omega and Psi are quadratic hinges, so every term is C1 and the
gradient with respect to the player's own input sequence is exact via the
adjoint of the linear rollout.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .dynamics import POS, VEL, THETA, VTHETA, rollout, zoh_matrices
from .track import TrackSpline, wrap_signed

ATTACKER = "attacker"
DEFENDER = "defender"
ROLES = (ATTACKER, DEFENDER)


@dataclass(frozen=True)
class CostParams:
    q_l: float = 100.0
    q_c_base: float = 50.0
    q_g: float = 2.0          # gate contour boost amplitude
    sigma_g: float = 0.5      # gate boost width (m of progress)
    q_u: tuple = (0.1, 0.1, 0.1, 0.5)
    mu: float = 1.0
    q_col: float = 500.0
    r_col: float = 0.35
    r_pen: float = 1.05       # collision penalty activation radius
    q_vel: float = 1000.0
    v_max_attacker: float = 2.0
    v_max_defender: float = 1.0

    def __post_init__(self):
        if not (self.r_pen >= self.r_col > 0):
            raise ValueError("need r_pen >= r_col > 0")
        if not (self.v_max_attacker > self.v_max_defender > 0):
            raise ValueError("need v_max_attacker > v_max_defender > 0")
        for w in (self.q_l, self.q_c_base, self.q_g, self.mu, self.q_col,
                  self.q_vel, *self.q_u):
            if w < 0:
                raise ValueError("cost weights must be non-negative")

    def v_max(self, role: str) -> float:
        if role == ATTACKER:
            return self.v_max_attacker
        if role == DEFENDER:
            return self.v_max_defender
        raise ValueError(f"unknown role {role!r}")

    @classmethod
    def low_speed(cls, **kw) -> "CostParams":
        return cls(v_max_attacker=2.0, v_max_defender=1.0, **kw)

    @classmethod
    def high_speed(cls, **kw) -> "CostParams":
        return cls(v_max_attacker=3.0, v_max_defender=2.0, **kw)

    def for_speed(self, speed: str) -> "CostParams":
        if speed == "low":
            return replace(self, v_max_attacker=2.0, v_max_defender=1.0)
        if speed == "high":
            return replace(self, v_max_attacker=3.0, v_max_defender=2.0)
        raise ValueError(f"unknown speed config {speed!r}")


def collision_penalty(d, r_pen: float):
    """Quadratic hinge: 1 at contact, 0 beyond the activation radius."""
    return np.square(np.maximum(0.0, 1.0 - np.asarray(d, dtype=float) / r_pen))


def velocity_penalty(s, v_max: float):
    """Quadratic hinge on speed above the role limit."""
    return np.square(np.maximum(0.0, np.asarray(s, dtype=float) - v_max))


def contour_weight(track: TrackSpline, theta, params: CostParams,
                   with_derivative: bool = False):
    """Gate-boosted contour weight q_c(theta), optionally with dq_c/dtheta."""
    theta = np.asarray(theta, dtype=float)
    gates = track.gates
    if not gates or params.q_g == 0.0:
        qc = np.full(theta.shape, params.q_c_base)
        return (qc, np.zeros(theta.shape)) if with_derivative else qc
    gate_thetas = np.array([g.theta for g in gates])
    diff = theta[..., None] - gate_thetas
    if track.closed:
        diff = wrap_signed(diff, track.length)
    w = np.exp(-np.square(diff) / params.sigma_g**2)
    qc = params.q_c_base * (1.0 + params.q_g * np.sum(w, axis=-1))
    if not with_derivative:
        return qc
    dqc = params.q_c_base * params.q_g * np.sum(
        w * (-2.0 * diff / params.sigma_g**2), axis=-1)
    return qc, dqc


def _stage_quantities(traj: np.ndarray, opp_traj: np.ndarray, track: TrackSpline):
    """Per-stage geometry shared by cost and gradient, over stages 0..K-1."""
    K = traj.shape[0] - 1
    xs = traj[:K]
    theta = xs[:, THETA]
    th = track.wrap(theta)
    r = track._pos(th)
    r1 = track._d1(th)
    r2 = track._d2(th)
    n = np.linalg.norm(r1, axis=1, keepdims=True)
    t = r1 / n
    e = xs[:, POS] - r
    e_l = np.sum(t * e, axis=1)
    e_sq = np.sum(e * e, axis=1)
    ec_sq = e_sq - e_l**2
    dp = xs[:, POS] - opp_traj[:K, POS]
    dist = np.linalg.norm(dp, axis=1)
    speed = np.linalg.norm(xs[:, VEL], axis=1)
    return dict(K=K, xs=xs, theta=theta, r=r, r1=r1, r2=r2, n=n[:, 0], t=t,
                e=e, e_l=e_l, ec_sq=ec_sq, dp=dp, dist=dist, speed=speed)


def total_cost(traj: np.ndarray, u_seq: np.ndarray, opp_traj: np.ndarray,
               role: str, track: TrackSpline, params: CostParams) -> float:
    """Horizon cost of one player's trajectory against a fixed opponent."""
    traj = np.asarray(traj, dtype=float)
    u_seq = np.asarray(u_seq, dtype=float)
    opp_traj = np.asarray(opp_traj, dtype=float)
    if traj.shape[0] != u_seq.shape[0] + 1 or opp_traj.shape[0] != traj.shape[0]:
        raise ValueError("trajectory/input length mismatch")
    if role not in ROLES:
        raise ValueError(f"unknown role {role!r}")
    q = _stage_quantities(traj, opp_traj, track)
    K = q["K"]
    qc = contour_weight(track, q["theta"], params)
    cost = float(np.sum(params.q_l * q["e_l"]**2 + qc * q["ec_sq"]))
    cost += float(np.sum(np.square(u_seq) @ np.asarray(params.q_u)))
    cost += params.mu * float(np.sum(opp_traj[:K, VTHETA] - q["xs"][:, VTHETA]))
    if role == ATTACKER:
        cost += params.q_col * float(np.sum(collision_penalty(q["dist"], params.r_pen)))
    cost += params.q_vel * float(np.sum(velocity_penalty(q["speed"], params.v_max(role))))
    return cost


def _stage_gradients(traj, u_seq, opp_traj, track, params, role):
    """Cost value plus per-stage d cost / d x_k and d cost / d u_k arrays."""
    q = _stage_quantities(traj, opp_traj, track)
    K = q["K"]
    qc, dqc = contour_weight(track, q["theta"], params, with_derivative=True)
    e, e_l, t, r1, r2, n = q["e"], q["e_l"], q["t"], q["r1"], q["r2"], q["n"]

    dc_dx = np.zeros((K, traj.shape[1]))
    dc_du = 2.0 * u_seq * np.asarray(params.q_u)

    # tracking terms
    cost = float(np.sum(params.q_l * e_l**2 + qc * q["ec_sq"]))
    dc_dx[:, POS] = (2.0 * params.q_l * e_l - 2.0 * qc * e_l)[:, None] * t \
        + 2.0 * qc[:, None] * e
    dt_dth = r2 / n[:, None] - r1 * (np.sum(r1 * r2, axis=1) / n**3)[:, None]
    de_l = np.sum(dt_dth * e, axis=1) - n
    de_sq = -2.0 * np.sum(e * r1, axis=1)
    dec_sq = de_sq - 2.0 * e_l * de_l
    dc_dx[:, THETA] = 2.0 * params.q_l * e_l * de_l + dqc * q["ec_sq"] + qc * dec_sq

    # relative progress
    cost += params.mu * float(np.sum(opp_traj[:K, VTHETA] - q["xs"][:, VTHETA]))
    dc_dx[:, VTHETA] = -params.mu

    # collision, attacker only
    if role == ATTACKER and params.q_col > 0:
        dist, dp = q["dist"], q["dp"]
        hinge = np.maximum(0.0, 1.0 - dist / params.r_pen)
        cost += params.q_col * float(np.sum(hinge**2))
        scale = params.q_col * (-2.0 * hinge / params.r_pen) / np.maximum(dist, 1e-12)
        dc_dx[:, POS] += scale[:, None] * dp

    # speed limit
    v_max = params.v_max(role)
    g = np.maximum(0.0, q["speed"] - v_max)
    cost += params.q_vel * float(np.sum(g**2))
    vscale = params.q_vel * 2.0 * g / np.maximum(q["speed"], 1e-12)
    dc_dx[:, VEL] = vscale[:, None] * q["xs"][:, VEL]

    # input regularization value
    cost += float(np.sum(np.square(u_seq) @ np.asarray(params.q_u)))
    return cost, dc_dx, dc_du


def cost_and_gradient(x0: np.ndarray, u_seq: np.ndarray, opp_traj: np.ndarray,
                      role: str, track: TrackSpline, params: CostParams,
                      dt: float) -> tuple[float, np.ndarray]:
    """Cost and its exact gradient w.r.t. the (K, 4) input sequence.

    The opponent trajectory is data: it contributes to the value through the
    progress and collision terms but never to the gradient.
    """
    u_seq = np.asarray(u_seq, dtype=float)
    traj = rollout(x0, u_seq, dt)
    cost, dc_dx, dc_du = _stage_gradients(traj, u_seq, opp_traj, track, params, role)
    A, B = zoh_matrices(dt)
    K = u_seq.shape[0]
    grad = dc_du.copy()
    lam = np.zeros(traj.shape[1])
    for k in range(K - 1, -1, -1):
        grad[k] += B.T @ lam          # lam = sum_{j>k} (A^T)^(j-k-1) dc/dx_j
        lam = dc_dx[k] + A.T @ lam
    return cost, grad


def cost_gradient(x0, u_seq, opp_traj, role, track, params, dt) -> np.ndarray:
    return cost_and_gradient(x0, u_seq, opp_traj, role, track, params, dt)[1]


def residual_model(x0: np.ndarray, u_seq: np.ndarray, opp_traj: np.ndarray,
                   role: str, track: TrackSpline, params: CostParams, dt: float):
    """Least-squares view of the cost for Gauss-Newton solvers.

    Every term except the (linear) relative-progress term is a square, so the
    cost is |r(u)|^2 + linear. Returns (J, r, Jr, grad) where r stacks the
    per-stage residuals, Jr = dr/du_flat via the constant rollout sensitivity,
    and grad = 2 Jr' r + g_lin is the exact cost gradient.
    """
    from .dynamics import input_map

    u_seq = np.asarray(u_seq, dtype=float)
    K = u_seq.shape[0]
    n_u = K * u_seq.shape[1]
    traj = rollout(x0, u_seq, dt)
    q = _stage_quantities(traj, opp_traj, track)
    qc, dqc = contour_weight(track, q["theta"], params, with_derivative=True)
    e, e_l, t, r1, r2, n = q["e"], q["e_l"], q["t"], q["r1"], q["r2"], q["n"]
    sqc = np.sqrt(qc)
    sql = np.sqrt(params.q_l)
    squ = np.sqrt(np.asarray(params.q_u))

    # residual layout per stage: [lag(1), contour(3), collision(1), speed(1)]
    # plus K*4 input-regularization rows appended at the end
    n_rows = 6
    r_state = np.zeros((K, n_rows))
    R_x = np.zeros((K, n_rows, traj.shape[1]))

    dt_dth = r2 / n[:, None] - r1 * (np.sum(r1 * r2, axis=1) / n**3)[:, None]
    de_l = np.sum(dt_dth * e, axis=1) - n

    r_state[:, 0] = sql * e_l
    R_x[:, 0, POS] = sql * t
    R_x[:, 0, THETA] = sql * de_l

    w = e - e_l[:, None] * t
    r_state[:, 1:4] = sqc[:, None] * w
    eye = np.eye(3)
    R_x[:, 1:4, POS] = sqc[:, None, None] * (eye - t[:, :, None] * t[:, None, :])
    dw = -r1 - de_l[:, None] * t - e_l[:, None] * dt_dth
    R_x[:, 1:4, THETA] = sqc[:, None] * dw + (dqc / (2.0 * np.maximum(sqc, 1e-12)))[:, None] * w

    if role == ATTACKER and params.q_col > 0:
        dist, dp = q["dist"], q["dp"]
        hinge = np.maximum(0.0, 1.0 - dist / params.r_pen)
        active = hinge > 0
        sq_col = np.sqrt(params.q_col)
        r_state[:, 4] = sq_col * hinge
        R_x[active, 4, POS] = (-sq_col / params.r_pen) \
            * dp[active] / np.maximum(dist[active], 1e-12)[:, None]

    v_max = params.v_max(role)
    over = np.maximum(0.0, q["speed"] - v_max)
    sq_vel = np.sqrt(params.q_vel)
    r_state[:, 5] = sq_vel * over
    act = over > 0
    R_x[act, 5, VEL] = sq_vel * q["xs"][act][:, VEL] \
        / np.maximum(q["speed"][act], 1e-12)[:, None]

    M = input_map(K, dt)[:K]                       # stages 0..K-1 enter the cost
    J_state = np.einsum("kri,kiu->kru", R_x, M).reshape(K * n_rows, n_u)

    r = np.concatenate([r_state.ravel(), (squ * u_seq).ravel()])
    Jr = np.zeros((r.size, n_u))
    Jr[:K * n_rows] = J_state
    idx = np.arange(n_u)
    Jr[K * n_rows + idx, idx] = np.tile(squ, K)

    # linear relative-progress term: constant gradient through the rollout map
    g_lin = -params.mu * np.sum(M[:, VTHETA, :], axis=0)
    J = float(r @ r) + params.mu * float(np.sum(opp_traj[:K, VTHETA] - q["xs"][:, VTHETA]))
    grad = 2.0 * (Jr.T @ r) + g_lin
    return J, r, Jr, grad
