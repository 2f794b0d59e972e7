"""Point-mass planner dynamics with exact zero-order-hold discretization.

The planning model is a triple integrator in Cartesian space (jerk input)
augmented with a double integrator for track progress. Both are linear and
time invariant, so one discrete step is exact under a zero-order hold and
rollout sensitivities are input independent.

State layout (11 scalars):  [px py pz vx vy vz ax ay az theta v_theta]
Input layout (4 scalars):   [jx jy jz dv_theta]
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

STATE_DIM = 11
INPUT_DIM = 4

# index helpers into the state vector
POS = slice(0, 3)
VEL = slice(3, 6)
ACC = slice(6, 9)
THETA = 9
VTHETA = 10


@dataclass(frozen=True)
class State:
    """Planner state: position, velocity, acceleration, progress and progress rate."""

    p: np.ndarray
    v: np.ndarray
    a: np.ndarray
    theta: float
    v_theta: float

    def as_array(self) -> np.ndarray:
        x = np.empty(STATE_DIM)
        x[POS] = self.p
        x[VEL] = self.v
        x[ACC] = self.a
        x[THETA] = self.theta
        x[VTHETA] = self.v_theta
        return x

    @staticmethod
    def from_array(x: np.ndarray) -> "State":
        x = np.asarray(x, dtype=float)
        return State(p=x[POS].copy(), v=x[VEL].copy(), a=x[ACC].copy(),
                     theta=float(x[THETA]), v_theta=float(x[VTHETA]))


@dataclass(frozen=True)
class Input:
    """Planner input: Cartesian jerk plus commanded progress acceleration."""

    j: np.ndarray
    dv_theta: float

    def as_array(self) -> np.ndarray:
        u = np.empty(INPUT_DIM)
        u[0:3] = self.j
        u[3] = self.dv_theta
        return u

    @staticmethod
    def from_array(u: np.ndarray) -> "Input":
        u = np.asarray(u, dtype=float)
        return Input(j=u[0:3].copy(), dv_theta=float(u[3]))


@dataclass(frozen=True)
class InputBounds:
    """Symmetric per-axis jerk bound and progress-acceleration bound."""

    j_max: float = 30.0
    dv_theta_max: float = 3.0

    def __post_init__(self):
        if not (self.j_max > 0 and self.dv_theta_max > 0):
            raise ValueError("input bounds must be strictly positive")

    def vector(self) -> np.ndarray:
        return np.array([self.j_max, self.j_max, self.j_max, self.dv_theta_max])


@lru_cache(maxsize=64)
def zoh_matrices(dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact discrete transition (A, B) for one zero-order-hold step of length dt."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    A = np.eye(STATE_DIM)
    I3 = np.eye(3)
    A[POS, VEL] = dt * I3
    A[POS, ACC] = 0.5 * dt * dt * I3
    A[VEL, ACC] = dt * I3
    A[THETA, VTHETA] = dt

    B = np.zeros((STATE_DIM, INPUT_DIM))
    B[POS, 0:3] = (dt**3 / 6.0) * I3
    B[VEL, 0:3] = (0.5 * dt * dt) * I3
    B[ACC, 0:3] = dt * I3
    B[THETA, 3] = 0.5 * dt * dt
    B[VTHETA, 3] = dt
    A.setflags(write=False)
    B.setflags(write=False)
    return A, B


def step(x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    """Advance one state by one exact ZOH step.

    Equivalent closed forms:
        p' = p + v dt + a dt^2/2 + j dt^3/6
        v' = v + a dt + j dt^2/2
        a' = a + j dt
        theta'   = theta + v_theta dt + dv_theta dt^2/2
        v_theta' = v_theta + dv_theta dt
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
        raise ValueError("non-finite state or input")
    A, B = zoh_matrices(dt)
    return A @ x + B @ u


def rollout(x0: np.ndarray, u_seq: np.ndarray, dt: float) -> np.ndarray:
    """Roll a K-step input sequence into a (K+1, 11) state trajectory."""
    u_seq = np.asarray(u_seq, dtype=float)
    if u_seq.ndim != 2 or u_seq.shape[1] != INPUT_DIM or u_seq.shape[0] < 1:
        raise ValueError(f"expected input sequence of shape (K>=1, {INPUT_DIM})")
    x0 = np.asarray(x0, dtype=float)
    if not (np.all(np.isfinite(x0)) and np.all(np.isfinite(u_seq))):
        raise ValueError("non-finite state or input")
    A, B = zoh_matrices(dt)
    K = u_seq.shape[0]
    traj = np.empty((K + 1, STATE_DIM))
    traj[0] = x0
    x = x0
    for k in range(K):
        x = A @ x + B @ u_seq[k]
        traj[k + 1] = x
    return traj


@lru_cache(maxsize=32)
def input_map(K: int, dt: float) -> np.ndarray:
    """Stacked rollout sensitivity d x_k / d u_flat, shape (K+1, 11, K*4).

    Input independent (linear dynamics); cached per horizon. Row block k is
    the Jacobian of state x_k with respect to the flattened input sequence.
    """
    A, B = zoh_matrices(dt)
    M = np.zeros((K + 1, STATE_DIM, K * INPUT_DIM))
    for k in range(K):
        M[k + 1] = A @ M[k]
        M[k + 1, :, k * INPUT_DIM:(k + 1) * INPUT_DIM] = B
    M.setflags(write=False)
    return M


def rollout_jacobians(x0: np.ndarray, u_seq: np.ndarray, dt: float) -> np.ndarray:
    """Sensitivities d x_k / d u_m of a rollout, shape (K+1, K, 11, 4).

    The dynamics are linear, so the Jacobians do not depend on x0 or on the
    input values: d x_k / d u_m = A^(k-1-m) B for m < k and zero otherwise.
    """
    u_seq = np.asarray(u_seq, dtype=float)
    K = u_seq.shape[0]
    A, B = zoh_matrices(dt)
    # A^n B for n = 0..K-1
    powers = np.empty((K, STATE_DIM, INPUT_DIM))
    powers[0] = B
    for n in range(1, K):
        powers[n] = A @ powers[n - 1]
    jac = np.zeros((K + 1, K, STATE_DIM, INPUT_DIM))
    for k in range(1, K + 1):
        for m in range(k):
            jac[k, m] = powers[k - 1 - m]
    return jac
