"""Track centerline geometry.

A track is a cubic spline through 3D control points, reparameterized so the
spline parameter theta is arc length in meters. Closed tracks are periodic
with C2 continuity across the seam. The module also provides progress
projection, the lag/contour error split used by the racing cost, gate
checkpoints, and the three preset tracks sized for an (8 x 5 x 6) m arena.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

UP = np.array([0.0, 0.0, 1.0])

PRESET_NAMES = ("lemniscate", "lissajous", "lemniscate3d")

DEFAULT_GATE_RADIUS = 0.6


def wrap_signed(x, length: float):
    """Wrap a progress difference into [-length/2, length/2)."""
    return (x + 0.5 * length) % length - 0.5 * length


@dataclass
class Gate:
    """Checkpoint plane on the track: aperture disk of given radius.

    center sits on the centerline at progress theta; normal is the unit
    tangent there, so passage is counted in the direction of travel.
    """

    theta: float
    radius: float
    center: np.ndarray
    normal: np.ndarray


@dataclass
class TrackSpline:
    """Arc-length parameterized cubic-spline centerline.

    Immutable after construction; all methods are pure.
    """

    control_points: np.ndarray
    closed: bool
    length: float
    gates: list[Gate] = field(default_factory=list)
    name: str = ""
    _pos: CubicSpline = None
    _d1: CubicSpline = None
    _d2: CubicSpline = None

    # -- evaluation ---------------------------------------------------------

    def wrap(self, theta):
        if self.closed:
            return np.mod(theta, self.length)
        return np.clip(theta, 0.0, self.length)

    def position(self, theta):
        return self._pos(self.wrap(theta))

    def d1(self, theta):
        """First derivative dp/dtheta (norm ~ 1 after reparameterization)."""
        return self._d1(self.wrap(theta))

    def d2(self, theta):
        """Second derivative d2p/dtheta2."""
        return self._d2(self.wrap(theta))

    def tangent(self, theta):
        d = self._d1(self.wrap(theta))
        n = np.linalg.norm(d, axis=-1, keepdims=True)
        return d / n

    def ref_point(self, theta):
        """Reference position and unit tangent at progress theta."""
        th = self.wrap(theta)
        p = self._pos(th)
        return p, self.tangent(th)

    def frame(self, theta):
        """Right-handed track frame (tangent, lateral, vertical) at theta.

        lateral = normalize(up x tangent); vertical = tangent x lateral.
        Falls back to the world x axis if the tangent is vertical.
        """
        t = self.tangent(theta)
        y = np.cross(UP, t)
        ny = np.linalg.norm(y)
        if ny < 1e-8:
            y = np.cross(np.array([1.0, 0.0, 0.0]), t)
            ny = np.linalg.norm(y)
        y = y / ny
        z = np.cross(t, y)
        return t, y, z

    # -- projection and errors ---------------------------------------------

    def project(self, p) -> float:
        """Progress theta* minimizing distance to p, wrapped to [0, L).

        Coarse 64-sample grid, Newton refinement of every coarse local
        minimum, ties broken toward smaller theta.
        """
        p = np.asarray(p, dtype=float)
        L = self.length
        n_grid = 64
        if self.closed:
            grid = np.linspace(0.0, L, n_grid, endpoint=False)
        else:
            grid = np.linspace(0.0, L, n_grid)
        pts = self._pos(grid)
        d2 = np.sum((pts - p) ** 2, axis=1)

        h = L / n_grid
        if self.closed:
            left = np.roll(d2, 1)
            right = np.roll(d2, -1)
            is_min = (d2 <= left) & (d2 <= right)
        else:
            is_min = np.zeros(n_grid, dtype=bool)
            is_min[0] = d2[0] <= d2[1]
            is_min[-1] = d2[-1] <= d2[-2]
            is_min[1:-1] = (d2[1:-1] <= d2[:-2]) & (d2[1:-1] <= d2[2:])
        candidates = grid[is_min]

        best = []
        for theta_c in candidates:
            lo, hi = theta_c - h, theta_c + h
            if not self.closed:
                lo, hi = max(lo, 0.0), min(hi, L)
            theta = self._refine_projection(p, theta_c, lo, hi)
            e = p - self._pos(self.wrap(theta))
            best.append((float(e @ e), float(self.wrap(theta))))
        dmin = min(b[0] for b in best)
        thetas = sorted(th for d, th in best if d <= dmin + 1e-9)
        return thetas[0]

    def project_local(self, p, theta0: float, window: float = 2.0) -> float:
        """Distance minimizer constrained near theta0 (continuity tracking).

        Self-intersecting centerlines (figure-eights) make the global
        projection ill-posed at a crossing; progress tracking must search
        only a window around the previous progress estimate.
        """
        p = np.asarray(p, dtype=float)
        n = max(9, int(np.ceil(window / 0.1)) | 1)
        grid = theta0 + np.linspace(-window, window, n)
        if not self.closed:
            grid = np.clip(grid, 0.0, self.length)
        pts = self._pos(self.wrap(grid))
        d2 = np.sum((pts - p) ** 2, axis=1)
        i = int(np.argmin(d2))
        h = grid[1] - grid[0]
        theta = self._refine_projection(p, grid[i], grid[i] - h, grid[i] + h)
        if not self.closed:
            theta = float(np.clip(theta, 0.0, self.length))
        return float(theta)

    def _refine_projection(self, p, theta, lo, hi) -> float:
        for _ in range(30):
            th = self.wrap(theta) if self.closed else np.clip(theta, 0.0, self.length)
            e = p - self._pos(th)
            r1 = self._d1(th)
            r2 = self._d2(th)
            g = -2.0 * (e @ r1)
            if abs(g) < 1e-14:
                break
            hess = 2.0 * (r1 @ r1 - e @ r2)
            if hess <= 1e-12:
                # non-convex spot: fall back to a golden-section pass
                return self._golden(p, lo, hi)
            new = np.clip(theta - g / hess, lo, hi)
            if abs(new - theta) < 1e-12:
                theta = new
                break
            theta = new
        return theta

    def _golden(self, p, lo, hi) -> float:
        phi = 0.5 * (np.sqrt(5.0) - 1.0)

        def f(th):
            e = p - self._pos(self.wrap(th))
            return e @ e

        a, b = lo, hi
        c, d = b - phi * (b - a), a + phi * (b - a)
        fc, fd = f(c), f(d)
        for _ in range(60):
            if fc < fd:
                b, d, fd = d, c, fc
                c = b - phi * (b - a)
                fc = f(c)
            else:
                a, c, fc = c, d, fd
                d = a + phi * (b - a)
                fd = f(d)
            if b - a < 1e-12:
                break
        return 0.5 * (a + b)

    def errors(self, p, theta) -> tuple[float, np.ndarray]:
        """Lag error (along tangent) and contour error (lateral, vertical).

        Satisfies e_l^2 + |e_c|^2 = |p - p_ref|^2 exactly.
        """
        p = np.asarray(p, dtype=float)
        t, y, z = self.frame(theta)
        e = p - self._pos(self.wrap(theta))
        e_l = float(t @ e)
        e_c = np.array([y @ e, z @ e])
        return e_l, e_c

    # -- serialization -------------------------------------------------------

    def to_config(self) -> dict:
        return {
            "name": self.name,
            "control_points": np.asarray(self.control_points).tolist(),
            "closed": bool(self.closed),
            "gates": [{"theta": float(g.theta), "radius": float(g.radius)}
                      for g in self.gates],
        }


def build_track(control_points, closed: bool = True,
                samples_per_segment: int = 1000,
                knot_spacing: float = 0.05,
                gates=None, name: str = "") -> TrackSpline:
    """Fit an arc-length parameterized cubic spline through 3D control points.

    Two-stage fit: chord-length cubic spline, then a numerical arc-length
    table (samples_per_segment samples per segment, linear interpolation)
    used to resample the curve at uniform arc length before the final
    periodic (or natural, if open) spline fit. The final knots are spaced
    ~knot_spacing meters so theta tracks true arc length within 1%.
    """
    pts = np.asarray(control_points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("control points must have shape (N, 3)")
    if len(pts) < 4:
        raise ValueError(
            f"insufficient control points: need at least 4, got {len(pts)}")
    seg = np.diff(pts, axis=0)
    chord = np.linalg.norm(seg, axis=1)
    if closed:
        chord = np.append(chord, np.linalg.norm(pts[0] - pts[-1]))
    if np.any(chord < 1e-9):
        raise ValueError("duplicate consecutive control points (degenerate segment)")

    if closed:
        knots = np.concatenate([[0.0], np.cumsum(chord)])
        base = CubicSpline(knots, np.vstack([pts, pts[:1]]), axis=0,
                           bc_type="periodic")
    else:
        knots = np.concatenate([[0.0], np.cumsum(chord)])
        base = CubicSpline(knots, pts, axis=0, bc_type="natural")

    # numerical arc-length table over a dense parameter grid
    t_dense = []
    for i in range(len(knots) - 1):
        t_dense.append(np.linspace(knots[i], knots[i + 1],
                                   samples_per_segment, endpoint=False))
    t_dense = np.concatenate(t_dense + [knots[-1:]])
    speed = np.linalg.norm(base(t_dense, 1), axis=1)
    dt = np.diff(t_dense)
    s_table = np.concatenate([[0.0], np.cumsum(0.5 * (speed[:-1] + speed[1:]) * dt)])
    length = float(s_table[-1])

    # resample at uniform arc length and refit
    m = max(64, int(np.ceil(length / knot_spacing)))
    theta_knots = np.linspace(0.0, length, m + 1)
    t_of_theta = np.interp(theta_knots, s_table, t_dense)
    samples = base(t_of_theta)
    if closed:
        samples[-1] = samples[0]
        pos = CubicSpline(theta_knots, samples, axis=0, bc_type="periodic",
                          extrapolate="periodic")
    else:
        pos = CubicSpline(theta_knots, samples, axis=0, bc_type="natural")

    track = TrackSpline(control_points=pts.copy(), closed=closed, length=length,
                        name=name, _pos=pos, _d1=pos.derivative(1),
                        _d2=pos.derivative(2))
    track.control_points.setflags(write=False)
    if gates is not None:
        track.gates = [make_gate(track, g["theta"], g.get("radius", DEFAULT_GATE_RADIUS))
                       for g in gates]
    return track


def make_gate(track: TrackSpline, theta: float, radius: float = DEFAULT_GATE_RADIUS) -> Gate:
    if not radius > 0:
        raise ValueError("gate radius must be positive")
    theta = float(track.wrap(theta))
    center, normal = track.ref_point(theta)
    return Gate(theta=theta, radius=float(radius), center=center, normal=normal)


def gate_crossed(track: TrackSpline, gate: Gate, p_prev, p_next) -> bool:
    """True iff the motion segment crosses the gate disk in travel direction."""
    p_prev = np.asarray(p_prev, dtype=float)
    p_next = np.asarray(p_next, dtype=float)
    s_prev = float(gate.normal @ (p_prev - gate.center))
    s_next = float(gate.normal @ (p_next - gate.center))
    if not (s_prev < 0.0 <= s_next):
        return False
    lam = -s_prev / (s_next - s_prev)
    hit = p_prev + lam * (p_next - p_prev)
    return float(np.linalg.norm(hit - gate.center)) <= gate.radius


# -- presets -----------------------------------------------------------------

def _preset_points(name: str) -> tuple[np.ndarray, list[float]]:
    """Control points and gate positions (as arc-length fractions)."""
    # phase offsets keep the start line (theta = 0) away from self-crossings
    if name == "lemniscate":
        t = np.linspace(0.0, 2.0 * np.pi, 24, endpoint=False) + 0.5 * np.pi
        pts = np.stack([3.4 * np.sin(t), 2.2 * np.sin(2.0 * t),
                        1.2 * np.ones_like(t)], axis=1)
        fracs = [0.125, 0.375, 0.625, 0.875]
    elif name == "lissajous":
        t = np.linspace(0.0, 2.0 * np.pi, 40, endpoint=False) + 0.5 * np.pi
        pts = np.stack([3.4 * np.sin(2.0 * t), 2.2 * np.sin(3.0 * t),
                        1.2 * np.ones_like(t)], axis=1)
        fracs = [1 / 12, 3 / 12, 5 / 12, 7 / 12, 9 / 12, 11 / 12]
    elif name == "lemniscate3d":
        t = np.linspace(0.0, 2.0 * np.pi, 24, endpoint=False) + 0.5 * np.pi
        pts = np.stack([3.4 * np.sin(t), 2.2 * np.sin(2.0 * t),
                        1.2 + 0.8 * np.sin(2.0 * t)], axis=1)
        fracs = [0.125, 0.375, 0.625, 0.875]
    else:
        raise ValueError(f"unknown preset track {name!r}; "
                         f"choose one of {PRESET_NAMES}")
    return pts, fracs


def preset_track(name: str, gate_radius: float = DEFAULT_GATE_RADIUS
                 ) -> tuple[TrackSpline, list[Gate]]:
    """One of the three preset closed tracks, with its gates."""
    pts, fracs = _preset_points(name)
    track = build_track(pts, closed=True, name=name)
    track.gates = [make_gate(track, f * track.length, gate_radius) for f in fracs]
    return track, track.gates


def sample_start_pairs(track: TrackSpline, n: int, radius: float, rng,
                       leader_back: float = 1.0, gap: float = 1.0,
                       track_limit: float = 2.0) -> np.ndarray:
    """Sample n (leader, follower) start position pairs, shape (n, 2, 3).

    Positions are uniform in two disjoint balls of the given radius centered
    on the centerline behind the start line: the leader anchor leader_back
    meters before theta = 0 and the follower anchor gap meters further back.
    """
    if not radius >= 0:
        raise ValueError("radius must be non-negative")
    if 2.0 * radius >= gap:
        raise ValueError("start spheres overlap: need gap > 2 * radius")
    if radius >= track_limit:
        raise ValueError("start spheres cross the track-limit boundary")
    anchors = np.stack([track.position(-leader_back),
                        track.position(-leader_back - gap)])
    dirs = rng.normal(size=(n, 2, 3))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    radii = radius * rng.uniform(size=(n, 2, 1)) ** (1.0 / 3.0)
    return anchors[None, :, :] + dirs * radii


# -- config file interface ----------------------------------------------------

def track_from_config(cfg: dict) -> TrackSpline:
    return build_track(cfg["control_points"], closed=cfg.get("closed", True),
                       gates=cfg.get("gates", []), name=cfg.get("name", ""))


def load_track_config(path) -> TrackSpline:
    with open(path) as f:
        return track_from_config(json.load(f))


def save_track_config(track: TrackSpline, path) -> None:
    with open(path, "w") as f:
        json.dump(track.to_config(), f, indent=2)
