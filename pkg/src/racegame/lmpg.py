"""Learned model-predictive gameplay: amortized racing strategies.

Each player carries a small fully-connected policy (26 -> 128 -> 128 -> 4K,
tanh hidden layers) mapping a body-frame observation of the joint state to a
raw strategy. A differentiable feasibility layer squashes the raw output onto
the (optionally relaxed) input box and rolls the exact dynamics, so every
emitted plan is dynamically consistent and feasible by construction.

Training is simultaneous gradient play: policies race each other in closed
loop with randomized computation delays and input noise, every visited joint
state is aggregated into a dataset, and both players take gradient steps on
their own expected racing cost with the opponent's current policy output
treated as data. All gradients are hand-derived reverse accumulation through
cost -> rollout -> squash -> network; no autodiff framework is involved.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .costs import ATTACKER, CostParams, cost_and_gradient, total_cost
from .dynamics import INPUT_DIM, rollout
from .mpc_planner import Plan, PlannerParams
from .referee import RulesConfig, new_referee, referee_update
from .track import TrackSpline, sample_start_pairs

OBS_DIM = 26
REF_POINT_SPACING = 0.75     # meters between the three look-ahead reference points
WEIGHTS_VERSION = "lmpg-weights-v1"


@dataclass
class Observation:
    """Body-frame observation feeding the policy network (26 scalars).

    Layout of as_array(): [opp_p(3), opp_v(3), own_p(3), tau1(3), tau2(3),
    tau3(3), own_v(3), own_a(3), v_theta, is_attacker].
    own_p holds the (lag, lateral, vertical) centerline offsets; everything
    else is expressed in the ego frame (origin at the ego position, x along
    the track tangent at the ego progress, z near world-up).
    """

    opp_p: np.ndarray
    opp_v: np.ndarray
    own_p: np.ndarray
    ref_pts: np.ndarray          # (3, 3)
    own_v: np.ndarray
    own_a: np.ndarray
    v_theta: float
    is_attacker: float

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.opp_p, self.opp_v, self.own_p,
                               self.ref_pts.ravel(), self.own_v, self.own_a,
                               [self.v_theta, self.is_attacker]])


def encode_observation(x_pair, ego: int, role: str, track: TrackSpline) -> Observation:
    x = np.asarray(x_pair, dtype=float)
    own, opp = x[ego], x[1 - ego]
    theta = own[9]
    t, y, z = track.frame(theta)
    R = np.stack([t, y, z])                       # world -> ego rotation
    p_ego = own[0:3]
    e_l, e_c = track.errors(p_ego, theta)
    taus = np.stack([R @ (track.position(theta + REF_POINT_SPACING * m) - p_ego)
                     for m in (1, 2, 3)])
    return Observation(
        opp_p=R @ (opp[0:3] - p_ego),
        opp_v=R @ opp[3:6],
        own_p=np.array([e_l, e_c[0], e_c[1]]),
        ref_pts=taus,
        own_v=R @ own[3:6],
        own_a=R @ own[6:9],
        v_theta=float(own[10]),
        is_attacker=1.0 if role == ATTACKER else 0.0,
    )


# -- policy network ------------------------------------------------------------


@dataclass
class PolicyWeights:
    """Fully-connected policy parameters with a version tag."""

    layers: list                 # [(W, b), ...] with tanh on all but the last
    version: str = WEIGHTS_VERSION

    @property
    def arch(self) -> list:
        return [self.layers[0][0].shape[1]] + [w.shape[0] for w, _ in self.layers]

    @property
    def horizon(self) -> int:
        return self.layers[-1][0].shape[0] // INPUT_DIM

    def copy(self) -> "PolicyWeights":
        return PolicyWeights(layers=[(w.copy(), b.copy()) for w, b in self.layers],
                             version=self.version)


def init_policy(K: int, seed: int, hidden=(128, 128), out_scale: float = 0.01
                ) -> PolicyWeights:
    """Random policy; the output layer starts small so early play is gentle."""
    rng = np.random.default_rng(seed)
    sizes = [OBS_DIM, *hidden, INPUT_DIM * K]
    layers = []
    for i in range(len(sizes) - 1):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        w = rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(fan_out, fan_in))
        if i == len(sizes) - 2:
            w *= out_scale
        layers.append((w, np.zeros(fan_out)))
    return PolicyWeights(layers=layers)


def policy_forward(W: PolicyWeights, obs: np.ndarray) -> np.ndarray:
    """Deterministic forward pass producing the raw 4K strategy vector."""
    obs = np.asarray(obs, dtype=float)
    if obs.shape != (W.layers[0][0].shape[1],):
        raise ValueError(f"observation shape {obs.shape} does not match the "
                         f"policy input size {W.layers[0][0].shape[1]}")
    h = obs
    for w, b in W.layers[:-1]:
        h = np.tanh(w @ h + b)
    w, b = W.layers[-1]
    return w @ h + b


def _forward_cached(W: PolicyWeights, obs: np.ndarray):
    acts = [obs]
    h = obs
    for w, b in W.layers[:-1]:
        h = np.tanh(w @ h + b)
        acts.append(h)
    w, b = W.layers[-1]
    return w @ h + b, acts


def _backward(W: PolicyWeights, acts, d_raw: np.ndarray):
    """Gradients of a scalar with derivative d_raw at the output layer."""
    grads = [None] * len(W.layers)
    delta = d_raw
    for li in range(len(W.layers) - 1, -1, -1):
        w, _ = W.layers[li]
        grads[li] = (np.outer(delta, acts[li]), delta)
        if li > 0:
            delta = (w.T @ delta) * (1.0 - acts[li] ** 2)
    return grads


# -- feasibility layer ----------------------------------------------------------


def feasibility_layer(raw: np.ndarray, x0: np.ndarray, bounds, relax_factor: float,
                      dt: float, K: int, t_stamp: float = 0.0) -> Plan:
    """Smooth box squashing plus exact rollout: the closest-feasible strategy.

    Inputs are (relax_factor * bound) * tanh(raw) per component, so the plan
    always satisfies the dynamics exactly and the (relaxed) input box. The
    relaxation is 1 at deployment; training data collection may widen it.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.size != INPUT_DIM * K:
        raise ValueError("raw output length does not match the horizon")
    rb = relax_factor * bounds.vector()
    u = rb * np.tanh(raw.reshape(K, INPUT_DIM))
    states = rollout(x0, u, dt)
    return Plan(states=states, inputs=u, t_stamp=t_stamp, solve_time=0.0,
                solver_status="converged")


def squash_jacobian_diag(raw: np.ndarray, bounds, relax_factor: float,
                         K: int) -> np.ndarray:
    """d u / d raw for the feasibility squashing, as a (K, 4) diagonal."""
    rb = relax_factor * bounds.vector()
    return rb * (1.0 - np.tanh(np.asarray(raw, dtype=float).reshape(K, INPUT_DIM)) ** 2)


def lmpg_plan(W: PolicyWeights, x_pair, ego: int, role: str, track: TrackSpline,
              params: PlannerParams, t_stamp: float = 0.0) -> Plan:
    """Amortized plan: encode, forward pass, feasibility layer; wall clock logged."""
    t0 = time.perf_counter()
    obs = encode_observation(x_pair, ego, role, track).as_array()
    raw = policy_forward(W, obs)
    plan = feasibility_layer(raw, np.asarray(x_pair, dtype=float)[ego],
                             params.bounds, 1.0, params.dt, params.K,
                             t_stamp=t_stamp)
    plan.solve_time = time.perf_counter() - t0
    return plan


# -- training -------------------------------------------------------------------


@dataclass
class TrainConfig:
    alpha: float = 1e-4          # learning rate
    epochs: int = 30             # E
    episodes: int = 6            # M, per epoch
    nu_max: float = 0.05         # input noise scale, fraction of nominal bounds
    delay_prob: float = 0.5
    relax_factor: float = 1.25   # bound relaxation during data collection
    seed: int = 0
    episode_time_cap: float = 20.0   # sim seconds before an episode is cut
    start_radius: float = 0.15
    adam: bool = True

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ValueError("alpha must be non-negative")
        if not 0.0 <= self.delay_prob <= 1.0:
            raise ValueError("delay_prob must be in [0, 1]")
        if not self.relax_factor >= 1.0:
            raise ValueError("relax_factor must be >= 1")


class AdamState:
    """First/second-moment adaptive scaling for a PolicyWeights pytree."""

    def __init__(self, W: PolicyWeights, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = [(np.zeros_like(w), np.zeros_like(b)) for w, b in W.layers]
        self.v = [(np.zeros_like(w), np.zeros_like(b)) for w, b in W.layers]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def update(self, grads, alpha):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        steps = []
        for li, (gw, gb) in enumerate(grads):
            mw, mb = self.m[li]
            vw, vb = self.v[li]
            mw[:] = b1 * mw + (1 - b1) * gw
            mb[:] = b1 * mb + (1 - b1) * gb
            vw[:] = b2 * vw + (1 - b2) * gw ** 2
            vb[:] = b2 * vb + (1 - b2) * gb ** 2
            sw = alpha * (mw / bias1) / (np.sqrt(vw / bias2) + self.eps)
            sb = alpha * (mb / bias1) / (np.sqrt(vb / bias2) + self.eps)
            steps.append((sw, sb))
        return steps


def policy_cost_and_grads(W_i: PolicyWeights, W_opp: PolicyWeights, x_pair,
                          roles, ego: int, track: TrackSpline,
                          params: PlannerParams, cost: CostParams):
    """Cost of player ego's policy output at one joint state, with dJ/dW.

    Both plans come from the current policies at relax = 1; the opponent's
    plan enters the cost as data (no differentiation through W_opp).
    """
    x = np.asarray(x_pair, dtype=float)
    obs = encode_observation(x, ego, roles[ego], track).as_array()
    raw, acts = _forward_cached(W_i, obs)
    plan = feasibility_layer(raw, x[ego], params.bounds, 1.0, params.dt, params.K)
    opp_plan = lmpg_plan(W_opp, x, 1 - ego, roles[1 - ego], track, params)
    J, dJ_du = cost_and_gradient(x[ego], plan.inputs, opp_plan.states,
                                 roles[ego], track, cost, params.dt)
    d_raw = (dJ_du * squash_jacobian_diag(raw, params.bounds, 1.0, params.K)).ravel()
    grads = _backward(W_i, acts, d_raw)
    return J, grads


def batch_cost_and_grads(W_i, W_opp, x_batch, roles_batch, ego, track, params, cost):
    """Mean cost and mean weight gradient over a batch of joint states."""
    total = None
    mean_J = 0.0
    for x_pair, roles in zip(x_batch, roles_batch):
        J, grads = policy_cost_and_grads(W_i, W_opp, x_pair, roles, ego,
                                         track, params, cost)
        mean_J += J
        if total is None:
            total = [(gw, gb) for gw, gb in grads]
        else:
            total = [(tw + gw, tb + gb) for (tw, tb), (gw, gb) in zip(total, grads)]
    n = len(x_batch)
    return mean_J / n, [(tw / n, tb / n) for tw, tb in total]


def grad_step(W_i: PolicyWeights, W_opp: PolicyWeights, x_batch, roles_batch,
              ego: int, track: TrackSpline, params: PlannerParams,
              cost: CostParams, alpha: float, optimizer: AdamState | None = None):
    """One simultaneous-gradient-play update of player ego's weights.

    Returns (updated weights, mean batch cost). Non-finite gradients skip the
    step. The opponent weights are read only (pre-update within a training
    pass).
    """
    J, grads = batch_cost_and_grads(W_i, W_opp, x_batch, roles_batch, ego,
                                    track, params, cost)
    finite = np.isfinite(J) and all(np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))
                                    for gw, gb in grads)
    if not finite:
        return W_i, J
    if optimizer is not None:
        steps = optimizer.update(grads, alpha)
    else:
        steps = [(alpha * gw, alpha * gb) for gw, gb in grads]
    new_layers = [(w - sw, b - sb)
                  for (w, b), (sw, sb) in zip(W_i.layers, steps)]
    return PolicyWeights(layers=new_layers, version=W_i.version), J


def _random_start_state(track, rng, radius):
    pair = sample_start_pairs(track, 1, radius, rng)[0]
    x = np.zeros((2, 11))
    for i in range(2):
        x[i, 0:3] = pair[i]
        x[i, 9] = track.project(pair[i])
    return x


def collect_episode(policies, track, params, cost, config: TrainConfig, rng,
                    rules: RulesConfig):
    """Closed-loop self-play rollout with simulated delays and input noise.

    Returns a list of (joint state, roles) samples visited by the episode.
    """
    x = _random_start_state(track, rng, config.start_radius)
    ref = new_referee(x, track)
    rb = config.relax_factor * params.bounds.vector()
    noise_scale = config.nu_max * params.bounds.vector()
    u_prev = [np.zeros((params.K, INPUT_DIM)) for _ in range(2)]
    stage = [0, 0]
    data = [(x.copy(), ref.roles)]
    t = 0.0
    max_steps = int(round(config.episode_time_cap / params.dt))
    for _ in range(max_steps):
        for i in range(2):
            obs = encode_observation(x, i, ref.roles[i], track).as_array()
            raw = policy_forward(policies[i], obs)
            u_fresh = rb * np.tanh(raw.reshape(params.K, INPUT_DIM))
            delayed = rng.uniform() < config.delay_prob
            noise = rng.normal(0.0, 1.0, size=(params.K, INPUT_DIM)) * noise_scale
            if delayed:
                stage[i] += 1
            else:
                u_prev[i] = np.clip(u_fresh + noise, -rb, rb)
                stage[i] = 0
            k = stage[i]
            u_k = u_prev[i][k] if k < params.K else np.zeros(INPUT_DIM)
            x[i] = rollout(x[i], u_k[None, :], params.dt)[1]
        t += params.dt
        ref, _ = referee_update(ref, x, t, params.dt, track, rules, cost)
        data.append((x.copy(), ref.roles))
        if ref.finished:
            break
    return data


def train(track_set, cost: CostParams, config: TrainConfig,
          params: PlannerParams, rules: RulesConfig | None = None,
          log_fn=None):
    """Simultaneous gradient play over self-play data (the training loop).

    Per epoch: collect episodes from the current policies (with delay and
    noise randomization, relaxed feasibility bounds), then take per-sample
    simultaneous gradient steps for both players over the shuffled dataset.
    If the mean cost grows five epochs running, the learning rate is halved;
    after three halvings training aborts.

    Returns (W1, W2, log) where log is a list of per-epoch dict rows.
    """
    if isinstance(track_set, TrackSpline):
        track_set = [track_set]
    rules = rules or RulesConfig()
    rng = np.random.default_rng(config.seed)
    W = [init_policy(params.K, seed=config.seed + i) for i in range(2)]
    opt = [AdamState(W[i]) if config.adam else None for i in range(2)]
    alpha = config.alpha
    log = []
    grow_streak = 0
    halvings = 0
    prev_mean = np.inf
    for epoch in range(config.epochs):
        data = []
        track_ids = []
        for m in range(config.episodes):
            track = track_set[(epoch * config.episodes + m) % len(track_set)]
            episode = collect_episode(W, track, params, cost, config, rng, rules)
            data.extend((track, x, roles) for x, roles in episode)
        order = rng.permutation(len(data))
        epoch_cost = np.zeros(2)
        counted = 0
        for idx in order:
            track, x_pair, roles = data[idx]
            # simultaneous: both gradients read pre-update weights
            W0_snapshot = (W[0], W[1])
            new_W = [None, None]
            costs_now = [0.0, 0.0]
            for i in range(2):
                new_W[i], costs_now[i] = grad_step(
                    W0_snapshot[i], W0_snapshot[1 - i], [x_pair], [roles], i,
                    track, params, cost, alpha, optimizer=opt[i])
            W = new_W
            epoch_cost += costs_now
            counted += 1
        mean_costs = epoch_cost / max(counted, 1)
        row = {"epoch": epoch, "mean_cost_p1": float(mean_costs[0]),
               "mean_cost_p2": float(mean_costs[1]), "alpha": alpha,
               "samples": counted}
        log.append(row)
        if log_fn is not None:
            log_fn(row)
        combined = float(np.sum(mean_costs))
        if combined > prev_mean:
            grow_streak += 1
            if grow_streak >= 5:
                halvings += 1
                grow_streak = 0
                alpha *= 0.5
                if halvings > 3:
                    row["aborted"] = True
                    break
        else:
            grow_streak = 0
        prev_mean = combined
    return W[0], W[1], log


# -- persistence -----------------------------------------------------------------


def save_weights(W: PolicyWeights, path) -> None:
    payload = {
        "version": W.version,
        "arch": W.arch,
        "layers": [{"w": w.ravel().tolist(), "b": b.tolist()}
                   for w, b in W.layers],
    }
    with open(path, "w") as f:
        json.dump(payload, f)


def load_weights(path) -> PolicyWeights:
    with open(path) as f:
        try:
            payload = json.load(f)
        except json.JSONDecodeError as e:
            raise ValueError(f"malformed weights file {path}: {e}") from e
    if payload.get("version") != WEIGHTS_VERSION:
        raise ValueError(f"weights version mismatch: expected {WEIGHTS_VERSION}, "
                         f"got {payload.get('version')!r}")
    arch = payload["arch"]
    layers = []
    for i, layer in enumerate(payload["layers"]):
        w = np.asarray(layer["w"], dtype=float)
        if w.size != arch[i + 1] * arch[i]:
            raise ValueError("weights file layer shape inconsistent with arch")
        layers.append((w.reshape(arch[i + 1], arch[i]),
                       np.asarray(layer["b"], dtype=float)))
    if len(layers) != len(arch) - 1:
        raise ValueError("weights file layer count inconsistent with arch")
    W = PolicyWeights(layers=layers, version=payload["version"])
    if not all(np.all(np.isfinite(w)) and np.all(np.isfinite(b)) for w, b in W.layers):
        raise ValueError("weights file contains non-finite values")
    return W


class LmpgPlanner:
    """Engine-facing wrapper around a trained policy (pure, reentrant)."""

    name = "lmpg"

    def __init__(self, player: int, params: PlannerParams, cost: CostParams,
                 weights: PolicyWeights):
        self.player = player
        self.params = params
        self.cost = cost
        self.weights = weights
        if weights.horizon != params.K:
            raise ValueError("policy horizon does not match planner params")

    def reset(self):
        pass

    def plan(self, x_pair, roles, t_stamp, track) -> Plan:
        return lmpg_plan(self.weights, x_pair, self.player, roles[self.player],
                         track, self.params, t_stamp=t_stamp)
