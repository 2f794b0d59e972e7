"""Closed-loop race execution, trace recording, and replay verification.

Three execution modes run on one deterministic virtual-time core:

  sync        both players replan every planner tick on the frozen clock and
              plans take effect immediately.
  sync_delay  identical, but each fresh plan activates a fixed artificial
              delay after its planning tick; the previous plan stays active.
  async       planners are event sources: each reads the joint state at its
              request tick, is charged a latency (drawn from an injected
              distribution, or the measured solve wall clock), and publishes
              at request + latency. Replanning happens at the planner period
              or slower if the solve is slower.

All times live on the simulation tick grid (t = n * dt_sim), which makes
injected-latency runs bit-reproducible and zero-latency async identical to
sync_delay(0). A PD tracking layer executes the active plan between planning
ticks and holds zero input (a "plan_starved" event) once a plan's horizon is
exhausted, so latency-induced failures stay observable.
"""

from __future__ import annotations

import gzip
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import __version__
from .costs import CostParams
from .dynamics import INPUT_DIM, POS, VEL, InputBounds, step
from .lmpg import LmpgPlanner, load_weights
from .mpc_planner import FAILED, MpcPlanner, Plan, PlannerParams
from .mpg_solver import MpgParams, MpgPlanner
from .referee import (RulesConfig, decide_winner, finish_timeout, new_referee,
                      referee_update)
from .track import TrackSpline, preset_track, track_from_config

TRACKER_KP = 40.0
TRACKER_KD = 12.0


@dataclass
class RaceConfig:
    track: str = "lemniscate"
    speed: str = "low"                   # "low" | "high"
    mode: str = "sync"                   # "sync" | "sync_delay" | "async"
    delays_s: tuple = (0.0, 0.0)         # per-player artificial delay (sync_delay)
    latency: dict | None = None          # async latency source spec
    dt_sim: float = 0.01
    max_sim_time: float = 120.0
    seed: int = 0
    planners: tuple = ("mpg", "mpc")
    planner_params: dict = field(default_factory=dict)
    mpg: dict = field(default_factory=dict)
    cost: dict = field(default_factory=dict)
    rules: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "RaceConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown race config keys: {sorted(unknown)}")
        cfg = cls(**d)
        if cfg.mode not in ("sync", "sync_delay", "async"):
            raise ValueError(f"unknown mode {cfg.mode!r}")
        if any(x < 0 for x in cfg.delays_s):
            raise ValueError("delays must be non-negative")
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["delays_s"] = list(self.delays_s)
        d["planners"] = [p if isinstance(p, str) else dict(p) for p in self.planners]
        return d


def cost_params_from_config(config: RaceConfig) -> CostParams:
    base = CostParams().for_speed(config.speed)
    return replace(base, **config.cost) if config.cost else base


def planner_params_from_config(config: RaceConfig) -> PlannerParams:
    d = dict(config.planner_params)
    bounds = InputBounds(j_max=d.pop("j_max", 30.0),
                         dv_theta_max=d.pop("dv_theta_max", 3.0))
    return PlannerParams(bounds=bounds, **d)


def mpg_params_from_config(config: RaceConfig) -> MpgParams:
    base = planner_params_from_config(config)
    d = dict(config.mpg)
    return MpgParams(K=base.K, dt=base.dt, bounds=base.bounds,
                     max_iters=d.pop("max_iters", 150),
                     time_budget=d.pop("time_budget", 0.5),
                     tol_grad=d.pop("tol_grad", base.tol_grad), **d)


def rules_from_config(config: RaceConfig) -> RulesConfig:
    return replace(RulesConfig(), **config.rules) if config.rules else RulesConfig()


def make_planner(spec, player: int, config: RaceConfig, cost: CostParams):
    """Planner factory: "mpc", "mpg", "lmpg:<weights path>" or a dict spec."""
    if isinstance(spec, dict):
        kind, args = next(iter(spec.items()))
    elif isinstance(spec, str) and spec.startswith("lmpg:"):
        kind, args = "lmpg", {"weights": spec.split(":", 1)[1]}
    else:
        kind, args = spec, {}
    if kind == "mpc":
        return MpcPlanner(player, planner_params_from_config(config), cost)
    if kind == "mpg":
        return MpgPlanner(player, mpg_params_from_config(config), cost)
    if kind == "lmpg":
        weights = args["weights"]
        if isinstance(weights, str):
            weights = load_weights(weights)
        return LmpgPlanner(player, planner_params_from_config(config), cost, weights)
    raise ValueError(f"unknown planner spec {spec!r}")


def build_track(config: RaceConfig) -> TrackSpline:
    if isinstance(config.track, dict):
        return track_from_config(config.track)
    return preset_track(config.track)[0]


# -- latency injection ----------------------------------------------------------


class LatencySource:
    """Charged-latency model for async mode: injected or measured."""

    def __init__(self, spec: dict | None, rng: np.random.Generator):
        self.spec = spec or {"kind": "measured"}
        self.rng = rng
        kind = self.spec["kind"]
        if kind not in ("measured", "constant", "lognormal"):
            raise ValueError(f"unknown latency source {kind!r}")

    def charge(self, player: int, plan: Plan) -> float:
        kind = self.spec["kind"]
        if kind == "measured":
            return plan.solve_time
        if kind == "constant":
            v = self.spec["value_s"]
            return v[player] if isinstance(v, (list, tuple)) else v
        mu = self.spec["mu"][player] if isinstance(self.spec["mu"], (list, tuple)) \
            else self.spec["mu"]
        sigma = self.spec["sigma"][player] if isinstance(self.spec["sigma"], (list, tuple)) \
            else self.spec["sigma"]
        return float(self.rng.lognormal(mu, sigma))


# -- plan tracking ---------------------------------------------------------------


def tracker(plan: Plan, x_now: np.ndarray, t_now: float, dt_plan: float,
            bounds: InputBounds, kp: float = TRACKER_KP, kd: float = TRACKER_KD):
    """Feedback-corrected input from the active plan at simulation time t_now.

    Returns (input, stage_index, starved). The plan reference is propagated
    exactly inside the current stage so a perfectly tracking state sees zero
    correction at every sub-tick. Past the plan horizon the input is zero and
    starved is flagged.
    """
    k = int(math.floor((t_now - plan.t_stamp) / dt_plan + 1e-9))
    if k < 0:
        k = 0
    if k >= plan.horizon:
        return np.zeros(INPUT_DIM), k, True
    t_in_stage = (t_now - plan.t_stamp) - k * dt_plan
    if t_in_stage > 1e-9:
        x_ref = step(plan.states[k], plan.inputs[k], t_in_stage)
    else:
        x_ref = plan.states[k]
    u = plan.inputs[k].copy()
    u[0:3] += kp * (x_ref[POS] - x_now[POS]) + kd * (x_ref[VEL] - x_now[VEL])
    b = bounds.vector()
    return np.clip(u, -b, b), k, False


# -- traces ----------------------------------------------------------------------


class RaceTrace:
    """Header plus typed records (plan | tick | event | outcome), JSONL on disk."""

    def __init__(self, header: dict, records: list | None = None):
        self.header = header
        self.records = records if records is not None else []

    def add(self, record: dict):
        self.records.append(record)

    def ticks(self):
        return [r for r in self.records if r["kind"] == "tick"]

    def plans(self):
        return [r for r in self.records if r["kind"] == "plan"]

    def events(self):
        return [r for r in self.records if r["kind"] == "event"]

    def outcome(self):
        for r in self.records:
            if r["kind"] == "outcome":
                return r
        return None

    def save(self, path) -> None:
        opener = gzip.open if str(path).endswith(".gz") else open
        with opener(path, "wt") as f:
            f.write(json.dumps(self.header) + "\n")
            for r in self.records:
                f.write(json.dumps(r) + "\n")

    @classmethod
    def load(cls, path) -> "RaceTrace":
        opener = gzip.open if str(path).endswith(".gz") else open
        with opener(path, "rt") as f:
            lines = [line for line in f if line.strip()]
        if not lines:
            raise ValueError(f"empty trace file {path}")
        return cls(header=json.loads(lines[0]),
                   records=[json.loads(line) for line in lines[1:]])


def _plan_record(plan: Plan, player: int, plan_id: int, req_tick: int,
                 act_tick: int, latency: float, x_pair) -> dict:
    rec = {
        "kind": "plan", "player": player, "id": plan_id,
        "req_tick": req_tick, "act_tick": act_tick,
        "t_stamp": plan.t_stamp, "latency": latency,
        "solve_time": plan.solve_time, "status": plan.solver_status,
        "iters": plan.iters, "cost": None if plan.cost is None else float(plan.cost),
        "inputs": np.asarray(plan.inputs).tolist(),
        "states": np.asarray(plan.states).tolist(),
        "x_init": np.asarray(x_pair).tolist(),
    }
    if plan.residual is not None:
        rec["residual"] = float(plan.residual)
    if plan.opp_states is not None:
        rec["opp_states"] = np.asarray(plan.opp_states).tolist()
    return rec


# -- race loop ---------------------------------------------------------------------


def run_race(config: RaceConfig, x_init_pair, planners=None,
             track: TrackSpline | None = None) -> RaceTrace:
    """Run one head-to-head race to referee finish or the sim-time cap.

    x_init_pair is the (2, 11) joint start state. Planner failures keep the
    previous plan active and are logged as events; they never abort a race.
    """
    track = track if track is not None else build_track(config)
    cost = cost_params_from_config(config)
    rules = rules_from_config(config)
    if planners is None:
        planners = [make_planner(config.planners[i], i, config, cost)
                    for i in range(2)]
    for p in planners:
        p.reset()
    pp = planner_params_from_config(config)
    dt_sim = config.dt_sim
    ratio = int(round(pp.dt / dt_sim))
    if abs(ratio * dt_sim - pp.dt) > 1e-12 or ratio < 1:
        raise ValueError("planner dt must be an integer multiple of dt_sim")
    delay_ticks = [int(round(d / dt_sim)) for d in config.delays_s]
    n_end = int(round(config.max_sim_time / dt_sim))
    rng = np.random.default_rng(config.seed)
    latency_source = LatencySource(config.latency, rng) if config.mode == "async" else None

    header = {
        "version": __version__,
        "config": config.to_dict(),
        "track": track.to_config(),
        "speed_limits": {"attacker": cost.v_max_attacker,
                         "defender": cost.v_max_defender},
    }
    trace = RaceTrace(header)

    x = np.asarray(x_init_pair, dtype=float).copy()
    ref = new_referee(x, track, theta0=x[:, 9])
    active = [None, None]          # (plan, plan_id) per player
    pending = [[], []]             # [(act_tick, plan, plan_id)] per player
    next_request = [0, 0]          # async request ticks
    starved_flagged = [None, None]
    plan_counter = 0

    def request_plans(n: int, t: float):
        nonlocal plan_counter
        for i in range(2):
            due = (n % ratio == 0) if config.mode in ("sync", "sync_delay") \
                else (n == next_request[i])
            if not due:
                continue
            plan = planners[i].plan(x, ref.roles, t, track)
            if config.mode == "async":
                latency = latency_source.charge(i, plan)
                pub_tick = n + int(math.ceil(max(latency, 0.0) / dt_sim - 1e-9))
                next_request[i] = max(pub_tick, n + ratio)
            else:
                latency = float(delay_ticks[i] * dt_sim) \
                    if config.mode == "sync_delay" else 0.0
                pub_tick = n + (delay_ticks[i] if config.mode == "sync_delay" else 0)
            plan_counter += 1
            if plan.solver_status == FAILED:
                trace.add({"kind": "event", "t": t, "event": "planner_failed",
                           "player": i, "plan": plan_counter})
                continue
            pending[i].append((pub_tick, plan, plan_counter))
            trace.add(_plan_record(plan, i, plan_counter, n, pub_tick, latency, x))

    for n in range(n_end + 1):
        t = n * dt_sim
        if n > 0:
            ref, events = referee_update(ref, x, t, dt_sim, track, rules, cost)
            for ev in events:
                body = {k: v for k, v in ev.items() if k != "kind"}
                trace.add({"kind": "event", "event": ev["kind"], **body})
        if ref.finished:
            trace.add({"kind": "tick", "n": n, "t": t, "x": x.tolist(),
                       "u": np.zeros((2, INPUT_DIM)).tolist(),
                       "plan": [active[i][1] if active[i] else None for i in range(2)],
                       "stage": [None, None]})
            break
        request_plans(n, t)
        for i in range(2):
            ready = [p for p in pending[i] if p[0] <= n]
            if ready:
                newest = max(ready, key=lambda p: (p[0], p[2]))
                active[i] = (newest[1], newest[2])
                pending[i] = [p for p in pending[i] if p[0] > n]
        u_pair = np.zeros((2, INPUT_DIM))
        stages = [None, None]
        for i in range(2):
            if active[i] is None:
                continue
            plan, pid = active[i]
            u_pair[i], stages[i], starved = tracker(plan, x[i], t, pp.dt, pp.bounds)
            if starved and starved_flagged[i] != pid:
                starved_flagged[i] = pid
                trace.add({"kind": "event", "t": t, "event": "plan_starved",
                           "player": i, "plan": pid})
        trace.add({"kind": "tick", "n": n, "t": t, "x": x.tolist(),
                   "u": u_pair.tolist(),
                   "plan": [active[i][1] if active[i] else None for i in range(2)],
                   "stage": stages})
        for i in range(2):
            x[i] = step(x[i], u_pair[i], dt_sim)
    else:
        ref = finish_timeout(ref)

    outcome = decide_winner(ref, rules)
    trace.add({"kind": "outcome", "winner": outcome.winner,
               "reason": outcome.reason, "rule": outcome.rule,
               "offender": outcome.offender,
               "defender_times": list(outcome.defender_times),
               "overtakes": list(outcome.overtake_counts),
               "elapsed": ref.elapsed})
    return trace


# -- replay verification -------------------------------------------------------------


@dataclass
class ReplayReport:
    divergences: list
    event_mismatches: list
    version_warning: str | None

    @property
    def ok(self) -> bool:
        return not self.divergences and not self.event_mismatches


def replay(trace: RaceTrace) -> ReplayReport:
    """Re-run physics from recorded inputs and re-fold the referee.

    Any deviation from the recorded states or referee events is reported as a
    divergence; a freshly recorded trace must produce none.
    """
    version_warning = None
    if trace.header.get("version") != __version__:
        version_warning = (f"trace version {trace.header.get('version')!r} "
                           f"differs from code version {__version__!r}")
    config = RaceConfig.from_dict(trace.header["config"])
    track = track_from_config(trace.header["track"])
    cost = cost_params_from_config(config)
    rules = rules_from_config(config)
    ticks = trace.ticks()
    divergences = []
    for a, b in zip(ticks[:-1], ticks[1:]):
        x = np.asarray(a["x"], dtype=float)
        u = np.asarray(a["u"], dtype=float)
        x_next = np.stack([step(x[i], u[i], config.dt_sim) for i in range(2)])
        err = float(np.abs(x_next - np.asarray(b["x"])).max())
        if err > 0.0:
            divergences.append({"n": b["n"], "max_err": err})

    ref = new_referee(np.asarray(ticks[0]["x"], dtype=float), track)
    refold = []
    for rec in ticks[1:]:
        ref, events = referee_update(ref, np.asarray(rec["x"], dtype=float),
                                     rec["t"], config.dt_sim, track, rules, cost)
        refold.extend(events)
        if ref.finished:
            break
    referee_kinds = {"overtake", "gate", "gate_missed", "violation", "finish"}
    recorded = [{k: v for k, v in e.items() if k != "kind"}
                for e in trace.events() if e.get("event") in referee_kinds]
    replayed = [{("event" if k == "kind" else k): v for k, v in e.items()}
                for e in refold]
    event_mismatches = []
    if len(recorded) != len(replayed):
        event_mismatches.append({"recorded": len(recorded), "replayed": len(replayed)})
    else:
        for r, p in zip(recorded, replayed):
            if r != p:
                event_mismatches.append({"recorded": r, "replayed": p})
    return ReplayReport(divergences=divergences, event_mismatches=event_mismatches,
                        version_warning=version_warning)
