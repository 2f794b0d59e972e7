"""Rules monitor for head-to-head races.

The referee is a deterministic fold over the tick stream. It sees only
positions and velocities, assigns attacker/defender roles, detects overtakes
(with the role swap), flags rule violations, and terminates the race. Rule
thresholds default to the racing rulebook: a valid overtake needs a 0.75 m
lead, the attacker owes a 0.35 m separation, track limits are 2 m off the
centerline, speed caps are role dependent, and a race lasts at most 5 laps.

The winner is the player with the most time spent as defender; any rule
violation forfeits the race for the offender.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .costs import ATTACKER, DEFENDER
from .track import TrackSpline, gate_crossed, wrap_signed


@dataclass(frozen=True)
class RulesConfig:
    overtake_lead: float = 0.75      # R2
    r_col: float = 0.35              # R3
    track_limit: float = 2.0         # R5
    max_laps: int = 5                # R7
    speed_grace: float = 0.05        # R6 tolerance fraction over the cap
    speed_window: float = 0.2        # R6 sustained-violation window (s)
    role_swap_grace: float = 1.5     # R6 suspended this long after a role swap
    gate_miss_is_violation: bool = True   # R4 handling (else warning event)
    gate_pass_margin: float = 0.5    # progress past a gate before it counts as missed
    win_time_tol: float = 1e-6       # defender-time tie tolerance (R8)

    def speed_limit(self, role: str, cost_params) -> float:
        return cost_params.v_max(role)


@dataclass
class RaceOutcome:
    winner: int | None               # player index, or None for a draw
    reason: str                      # "defender_time" | "violation" | "timeout"
    rule: str | None = None          # offending rule id for violations
    offender: int | None = None
    defender_times: tuple = (0.0, 0.0)
    overtake_counts: tuple = (0, 0)


@dataclass
class RefereeState:
    roles: tuple
    cum_progress: np.ndarray         # unwrapped progress in meters (lap * L + theta)
    laps: np.ndarray
    defender_time: np.ndarray
    gates_pending: np.ndarray        # next gate index per player (counts passes)
    violations: list = field(default_factory=list)
    overtakes: np.ndarray = None     # overtake count per player
    finished: bool = False
    timed_out: bool = False
    outcome: RaceOutcome | None = None
    elapsed: float = 0.0
    # internals carried across ticks
    prev_theta: np.ndarray = None
    prev_pos: np.ndarray = None
    overspeed_since: np.ndarray = None
    last_swap_t: float = -np.inf


def initial_roles(x_pair, track: TrackSpline) -> tuple:
    """Attacker is the player with less start-relative progress; ties go to player 1."""
    prog = [start_relative_progress(track, np.asarray(x)[0:3]) for x in x_pair]
    if prog[0] <= prog[1]:
        return (ATTACKER, DEFENDER)
    return (DEFENDER, ATTACKER)


def start_relative_progress(track: TrackSpline, p) -> float:
    """Signed progress relative to the start line, in (-L/2, L/2]."""
    theta = track.project(p)
    return float(wrap_signed(theta, track.length)) if track.closed else theta


def new_referee(x_pair, track: TrackSpline, theta0=None) -> RefereeState:
    """Fresh referee state for a start pair.

    theta0 optionally disambiguates the start branch on self-intersecting
    centerlines; without it the start progress comes from a global projection.
    """
    x_pair = np.asarray(x_pair, dtype=float)
    pos = x_pair[:, 0:3].copy()
    if theta0 is None:
        theta = np.array([track.project(p) for p in pos])
    else:
        theta = np.array([float(track.wrap(track.project_local(pos[i], float(theta0[i]))))
                          for i in range(2)])
    cum = np.array([wrap_signed(t, track.length) for t in theta])
    return RefereeState(
        roles=initial_roles(x_pair, track),
        cum_progress=cum,
        laps=np.zeros(2, dtype=int),
        defender_time=np.zeros(2),
        gates_pending=np.zeros(2, dtype=int),
        overtakes=np.zeros(2, dtype=int),
        prev_theta=theta,
        prev_pos=pos,
        overspeed_since=np.full(2, np.nan),
    )


def _gate_target(track: TrackSpline, pending: int) -> float:
    """Unwrapped progress at which gate number `pending` sits."""
    gates = track.gates
    lap, idx = divmod(int(pending), len(gates))
    return lap * track.length + gates[idx].theta


def referee_update(ref: RefereeState, states_pair, t: float, dt: float,
                   track: TrackSpline, rules: RulesConfig,
                   cost_params) -> tuple[RefereeState, list]:
    """Advance the referee by one tick; returns (new_state, events).

    states_pair holds both 11-dim states sampled at time t (after dt of
    motion since the previous update). Violations are events, not errors;
    any violation finishes the race.
    """
    if ref.finished:
        return ref, []
    x = np.asarray(states_pair, dtype=float)
    pos = x[:, 0:3]
    vel = x[:, 3:6]
    prev_pos = ref.prev_pos
    prev_theta = ref.prev_theta
    events = []

    ref = replace(ref,
                  cum_progress=ref.cum_progress.copy(),
                  laps=ref.laps.copy(),
                  defender_time=ref.defender_time.copy(),
                  gates_pending=ref.gates_pending.copy(),
                  violations=list(ref.violations),
                  overtakes=ref.overtakes.copy(),
                  overspeed_since=ref.overspeed_since.copy(),
                  prev_theta=np.empty(2),
                  prev_pos=pos.copy(),
                  elapsed=ref.elapsed + dt)

    violation = None
    theta = np.empty(2)
    center_dist = np.empty(2)
    for i in range(2):
        # continuity-aware projection: a global argmin is ill-posed where a
        # figure-eight centerline crosses itself
        local = track.project_local(pos[i], prev_theta[i])
        center_dist[i] = float(np.linalg.norm(pos[i] - track.position(local)))
        ref.cum_progress[i] += local - prev_theta[i]
        theta[i] = float(track.wrap(local)) if track.closed else local
        ref.laps[i] = max(0, int(np.floor(ref.cum_progress[i] / track.length))) \
            if track.closed else 0
    ref.prev_theta[:] = theta

    # defender time accrues to whoever held the defender role over this tick
    for i in range(2):
        if ref.roles[i] == DEFENDER:
            ref.defender_time[i] += dt

    # R2/R1: overtake and role swap on cumulative progress
    att = 0 if ref.roles[0] == ATTACKER else 1
    lead = ref.cum_progress[att] - ref.cum_progress[1 - att]
    if lead >= rules.overtake_lead:
        ref.overtakes[att] += 1
        ref.roles = tuple(ATTACKER if i != att else DEFENDER for i in range(2))
        ref.last_swap_t = t
        ref.overspeed_since[:] = np.nan
        events.append({"kind": "overtake", "t": t, "player": att,
                       "lead": float(lead)})

    # R3: separation, attacker at fault
    att = 0 if ref.roles[0] == ATTACKER else 1
    dist = float(np.linalg.norm(pos[0] - pos[1]))
    if dist < rules.r_col:
        violation = ("R3", att, {"distance": dist})

    # R5: track limits
    if violation is None:
        for i in range(2):
            if center_dist[i] > rules.track_limit:
                violation = ("R5", i, {"deviation": center_dist[i]})
                break

    # R4: gate passage, checked against progress past the pending gate
    if violation is None and track.gates:
        for i in range(2):
            while True:
                gate = track.gates[ref.gates_pending[i] % len(track.gates)]
                if not gate_crossed(track, gate, prev_pos[i], pos[i]):
                    break
                ref.gates_pending[i] += 1
                events.append({"kind": "gate", "t": t, "player": i,
                               "gate": int((ref.gates_pending[i] - 1) % len(track.gates))})
            target = _gate_target(track, ref.gates_pending[i])
            if ref.cum_progress[i] > target + rules.gate_pass_margin:
                if rules.gate_miss_is_violation:
                    violation = ("R4", i, {"gate": int(ref.gates_pending[i] % len(track.gates))})
                    break
                events.append({"kind": "gate_missed", "t": t, "player": i,
                               "gate": int(ref.gates_pending[i] % len(track.gates))})
                ref.gates_pending[i] += 1

    # R6: sustained role-dependent overspeed; suspended briefly after a role
    # swap since the fresh defender cannot shed speed instantaneously
    if violation is None and t - ref.last_swap_t > rules.role_swap_grace:
        for i in range(2):
            limit = rules.speed_limit(ref.roles[i], cost_params) * (1.0 + rules.speed_grace)
            if float(np.linalg.norm(vel[i])) > limit:
                if np.isnan(ref.overspeed_since[i]):
                    ref.overspeed_since[i] = t
                elif t - ref.overspeed_since[i] > rules.speed_window:
                    violation = ("R6", i, {"speed": float(np.linalg.norm(vel[i]))})
                    break
            else:
                ref.overspeed_since[i] = np.nan

    if violation is not None:
        rule, offender, info = violation
        ref.violations.append({"rule": rule, "player": offender, "t": t, **info})
        events.append({"kind": "violation", "t": t, "rule": rule,
                       "player": offender, **info})
        ref.finished = True
        return ref, events

    # R7: lap limit
    if track.closed and np.any(ref.laps >= rules.max_laps):
        ref.finished = True
        events.append({"kind": "finish", "t": t,
                       "player": int(np.argmax(ref.laps))})
    return ref, events


def finish_timeout(ref: RefereeState) -> RefereeState:
    """Mark the race as timed out (wall-clock cap); the outcome is a draw."""
    return replace(ref, finished=True, timed_out=True)


def decide_winner(ref: RefereeState, rules: RulesConfig) -> RaceOutcome:
    """Winner per the rulebook: violations forfeit, else most defender time."""
    if not ref.finished:
        raise RuntimeError("decide_winner called before the race finished")
    d_times = (float(ref.defender_time[0]), float(ref.defender_time[1]))
    counts = (int(ref.overtakes[0]), int(ref.overtakes[1]))
    if ref.violations:
        v = ref.violations[0]
        return RaceOutcome(winner=1 - v["player"], reason="violation",
                           rule=v["rule"], offender=v["player"],
                           defender_times=d_times, overtake_counts=counts)
    if ref.timed_out:
        return RaceOutcome(winner=None, reason="timeout",
                           defender_times=d_times, overtake_counts=counts)
    if abs(d_times[0] - d_times[1]) <= rules.win_time_tol:
        return RaceOutcome(winner=None, reason="defender_time",
                           defender_times=d_times, overtake_counts=counts)
    return RaceOutcome(winner=int(np.argmax(ref.defender_time)),
                       reason="defender_time", defender_times=d_times,
                       overtake_counts=counts)
