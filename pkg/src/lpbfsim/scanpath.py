"""Laser trajectories and moving-local-domain management.

A scan path is an ordered list of constant-speed straight segments with
contiguous timing.  The local domain follows the laser in grid-snapped
jumps so its nodes stay on a lattice commensurate with the local spacing;
after a jump the local field restarts from the interpolated global field
and the next coupled solve re-establishes the boundary exchange.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fem import FieldState
from .mesh import Box, DomainEscape, Mesh, extract_interface
from .twolevel import TwoLevelProblem, TwoLevelState


class PathError(ValueError):
    pass


@dataclass(frozen=True)
class Segment:
    start: tuple
    end: tuple
    speed: float
    t_start: float

    def __post_init__(self):
        if self.speed <= 0:
            raise PathError("segment speed must be positive")

    @property
    def length(self) -> float:
        return float(np.linalg.norm(np.asarray(self.end) - np.asarray(self.start)))

    @property
    def duration(self) -> float:
        return self.length / self.speed

    @property
    def t_end(self) -> float:
        return self.t_start + self.duration


@dataclass(frozen=True)
class ScanPath:
    segments: tuple

    def __post_init__(self):
        if not self.segments:
            raise PathError("a scan path needs at least one segment")
        for a, b in zip(self.segments, self.segments[1:]):
            if abs(b.t_start - a.t_end) > 1e-12 * max(abs(a.t_end), 1.0):
                raise PathError("segment times must be contiguous")

    @property
    def t_start(self) -> float:
        return self.segments[0].t_start

    @property
    def t_end(self) -> float:
        return self.segments[-1].t_end

    def position(self, t: float) -> np.ndarray:
        """Laser position at time t; piecewise-linear along the segments.

        Track transitions may jump across the hatch; at the exact jump
        instant the position of the newly started track is returned.
        """
        tol = 1e-9 * max(abs(self.t_end), 1.0)
        if t < self.t_start - tol or t > self.t_end + tol:
            raise PathError(f"time {t:g} outside the path span "
                            f"[{self.t_start:g}, {self.t_end:g}]")
        for seg in self.segments:
            if t < seg.t_end - tol:
                frac = np.clip((t - seg.t_start) / seg.duration, 0.0, 1.0)
                a, b = np.asarray(seg.start, dtype=float), np.asarray(seg.end, dtype=float)
                return a + frac * (b - a)
        return np.asarray(self.segments[-1].end, dtype=float)

    def direction(self, t: float) -> np.ndarray:
        """Unit travel direction of the segment active at time t."""
        tol = 1e-9 * max(abs(self.t_end), 1.0)
        seg = self.segments[-1]
        for cand in self.segments:
            if t < cand.t_end - tol:
                seg = cand
                break
        d = np.asarray(seg.end, dtype=float) - np.asarray(seg.start, dtype=float)
        return d / np.linalg.norm(d)

    def swept_pieces(self, t0: float, t1: float) -> list:
        """Sub-segments (start point, end point) covered during [t0, t1].

        Pieces follow the path across segment boundaries; time outside the
        path span contributes nothing (laser off).
        """
        pieces = []
        a = max(t0, self.t_start)
        b = min(t1, self.t_end)
        if b <= a:
            return pieces
        for seg in self.segments:
            lo = max(a, seg.t_start)
            hi = min(b, seg.t_end)
            if hi - lo > 1e-15 * max(abs(self.t_end), 1.0):
                p0, p1 = np.asarray(seg.start, dtype=float), np.asarray(seg.end, dtype=float)
                f0 = (lo - seg.t_start) / seg.duration
                f1 = (hi - seg.t_start) / seg.duration
                pieces.append((p0 + f0 * (p1 - p0), p0 + f1 * (p1 - p0)))
        return pieces


def path_from_segments(points_and_speeds, t0: float = 0.0) -> ScanPath:
    """Build a path from (start, end, speed) triples, timed contiguously."""
    segs = []
    t = t0
    for start, end, speed in points_and_speeds:
        seg = Segment(tuple(start), tuple(end), float(speed), t)
        if seg.length == 0:
            raise PathError("zero-length scan segment")
        segs.append(seg)
        t = seg.t_end
    return ScanPath(tuple(segs))


def build_alternating_path(n_tracks: int, track_length: float, hatch: float,
                           speed: float, origin, bounding_box: Box | None = None) -> ScanPath:
    """Serpentine scan: odd tracks run +x, even tracks -x, stepping in y.

    `origin` is the start of the first track.  With zero dwell the path
    duration is exactly n_tracks * track_length / speed.
    """
    if n_tracks < 1 or track_length <= 0 or speed <= 0:
        raise PathError("need n_tracks >= 1, positive track length and speed")
    origin = np.asarray(origin, dtype=float)
    triples = []
    for k in range(n_tracks):
        start = origin.copy()
        end = origin.copy()
        start[1] += k * hatch
        end[1] += k * hatch
        if k % 2 == 0:
            end[0] += track_length
        else:
            start[0] += track_length
        triples.append((tuple(start), tuple(end), speed))
    path = path_from_segments(triples)
    if bounding_box is not None:
        for seg in path.segments:
            for p in (seg.start, seg.end):
                if not bounding_box.contains(np.asarray(p)[None, :])[0]:
                    raise PathError(f"scan path point {p} leaves the bounding box")
    return path


@dataclass(frozen=True)
class LocalDomainPolicy:
    """Placement rule for the moving local box around the laser.

    `laser_fraction` places the laser along the travel direction as a
    fraction of the box length measured from the trailing face (0.5 =
    centered); the box is centered across the track.  `snap` is the
    relocation lattice, one entry per axis (defaults to the local mesh
    spacing).  The box height and top-face position never change.
    """

    box_size: tuple                    # local box edge lengths
    laser_fraction: float = 2.0 / 3.0  # en route, more box behind than ahead
    snap: tuple | None = None

    def __post_init__(self):
        if any(s <= 0 for s in self.box_size):
            raise PathError("local box dimensions must be positive")
        if not 0.0 < self.laser_fraction < 1.0:
            raise PathError("laser offset fraction must lie inside the box")

    def target_origin(self, laser: np.ndarray, direction: np.ndarray) -> np.ndarray:
        """Lower corner of the ideal box around the laser.

        The last axis always rides the top surface (laser height at the
        box top); in 3D the box is centered across the track and the
        along-track placement flips with the travel direction.
        """
        size = np.asarray(self.box_size, dtype=float)
        d = len(size)
        laser = np.asarray(laser, dtype=float)
        origin = laser - size           # default: laser at the upper corner
        origin[-1] = laser[-1] - size[-1]
        if d == 3:
            if abs(direction[0]) >= abs(direction[1]):
                along, across = 0, 1
            else:
                along, across = 1, 0
            frac = self.laser_fraction if direction[along] >= 0 else 1.0 - self.laser_fraction
            origin[along] = laser[along] - frac * size[along]
            origin[across] = laser[across] - 0.5 * size[across]
        else:
            frac = self.laser_fraction if direction[0] >= 0 else 1.0 - self.laser_fraction
            origin[0] = laser[0] - frac * size[0]
        return origin


def relocate_local(state: TwoLevelState, policy: LocalDomainPolicy,
                   laser: np.ndarray, direction: np.ndarray,
                   problem: TwoLevelProblem) -> TwoLevelState:
    """Move the local domain toward the laser in snapped lattice steps.

    Returns the state unchanged when the snapped target equals the current
    position.  Otherwise the local mesh is translated rigidly, the new
    local field is interpolated from the current global field, and the
    interface is re-extracted; the following coupled solve restores the
    boundary exchange.  The global field is never touched.
    """
    lmesh = state.local_field.mesh
    snap = np.asarray(policy.snap if policy.snap is not None else lmesh.spacing, dtype=float)
    target = policy.target_origin(laser, direction)
    current = np.asarray(lmesh.box.lo)
    shift = np.round((target - current) / snap) * snap
    shift[-1] = 0.0        # the top face stays on the global top face
    if not np.any(shift != 0.0):
        return state
    try:
        new_mesh = lmesh.translated(shift, within=problem.global_mesh.box)
    except DomainEscape:
        # clamp against the global walls instead of failing mid-run
        glo = np.asarray(problem.global_mesh.box.lo)
        ghi = np.asarray(problem.global_mesh.box.hi)
        lo, hi = np.asarray(lmesh.box.lo), np.asarray(lmesh.box.hi)
        # strict immersion: keep one snap cell clear of every lateral wall
        room_lo = np.ceil((glo - lo) / snap + 1.0 - 1e-9) * snap
        room_hi = np.floor((ghi - hi) / snap - 1.0 + 1e-9) * snap
        shift = np.clip(shift, room_lo, room_hi)
        shift[-1] = 0.0
        if not np.any(shift != 0.0):
            return state
        new_mesh = lmesh.translated(shift, within=problem.global_mesh.box)

    gmesh = problem.global_mesh
    gamma = extract_interface(new_mesh, gmesh)
    values = gmesh.interpolate(state.global_field.values, new_mesh.coords)
    local = FieldState(new_mesh, values, state.local_field.time)
    trace = gamma.trace_of(state.global_field.values, gmesh)
    return TwoLevelState(state.global_field, local, gamma, trace)
