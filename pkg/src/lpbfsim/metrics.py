"""Error metrics and scalar diagnostics for experiment runs.

Errors are relative discrete L2 norms over the local domain, measured
against a reference trajectory interpolated onto the local mesh at
matching times.  The control temperature integrates the field along a
horizontal line just below the top surface with composite trapezoid
sampling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fem import FieldState, SolverError, Trajectory, mass_matrix
from .mesh import Mesh


class MetricsError(SolverError):
    pass


@dataclass
class StepRecord:
    """One recorded instant of a two-level run."""

    kind: str                  # initial | micro | macro | predictor
    time: float
    local: FieldState | None
    global_field: FieldState | None
    iterations: int


@dataclass
class RunLog:
    """Recorder collecting step records; pass .record to the drivers."""

    records: list = field(default_factory=list)

    def record(self, kind, time, local, global_field, iterations):
        self.records.append(StepRecord(kind, time, local, global_field, iterations))

    def of_kind(self, *kinds) -> list:
        return [r for r in self.records if r.kind in kinds]

    def latest_global_at(self, time: float) -> FieldState:
        best = None
        for r in self.records:
            if r.global_field is not None and r.kind in ("initial", "macro") \
                    and r.time <= time + 1e-12:
                best = r.global_field
        if best is None:
            raise MetricsError(f"no coarse field recorded at or before t={time:g}")
        return best


def composite_sampler(local: FieldState, global_field: FieldState):
    """Pointwise evaluator preferring the fine field where it covers."""
    lmesh = local.mesh
    gmesh = global_field.mesh

    def sample(points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        inside = lmesh.box.contains(pts)
        out = np.empty(len(pts))
        if np.any(inside):
            out[inside] = lmesh.interpolate(local.values, pts[inside])
        if np.any(~inside):
            out[~inside] = gmesh.interpolate(global_field.values, pts[~inside])
        return out

    return sample


def control_temperature(sample, y_level: float, x_range: tuple, dx: float) -> float:
    """Integral of T along the line y = y_level by composite trapezoid.

    `sample` is a FieldState or a pointwise evaluator; dx should be half
    the mesh spacing so linear fields integrate exactly.
    """
    x0, x1 = x_range
    if x1 <= x0 or dx <= 0:
        raise MetricsError("control line needs x1 > x0 and dx > 0")
    n = max(1, int(round((x1 - x0) / dx)))
    xs = np.linspace(x0, x1, n + 1)
    if isinstance(sample, FieldState):
        mesh = sample.mesh
        pts = np.column_stack([xs, np.full_like(xs, y_level)])
        if not np.all(mesh.box.contains(pts)):
            raise MetricsError(f"control line y={y_level:g} leaves the mesh box")
        vals = mesh.interpolate(sample.values, pts)
    else:
        pts = np.column_stack([xs, np.full_like(xs, y_level)])
        vals = sample(pts)
    return float(np.trapezoid(vals, xs))


@dataclass
class ErrorReport:
    """Per-step relative L2 errors on the local domain plus diagnostics."""

    times: np.ndarray
    kinds: list
    rel_l2: np.ndarray
    t_star: np.ndarray
    mean_rel_l2: float

    def __post_init__(self):
        if np.any(self.rel_l2 < 0):
            raise MetricsError("errors must be nonnegative")
        steps = np.asarray(self.times)
        tol = 1e-9 * max(abs(steps[-1]), 1.0) if steps.size else 0.0
        if steps.size and np.any(np.diff(steps) < -tol):
            raise MetricsError("error report times must be nondecreasing")


def reference_at(reference: Trajectory, t: float) -> FieldState:
    """Reference frame at time t; the reference grid must contain t."""
    return reference.at_time(t)


def error_metrics(log: RunLog, reference: Trajectory, local_mesh_hint=None,
                  t_star_of=None) -> ErrorReport:
    """Relative L2(local domain) errors of a run against a reference.

    Uses the micro records at interior instants and the corrected macro
    records at macro instants (the provisional final micro value is kept
    in the report for sawtooth inspection but excluded from the mean).
    The reference is interpolated onto the run's local mesh; its time grid
    must contain every comparison time.
    """
    rows = [r for r in log.records if r.kind in ("initial", "micro", "macro")
            and r.local is not None]
    if not rows:
        raise MetricsError("run log holds no comparable records")
    times, kinds, errs, tstars = [], [], [], []
    mean_terms = []
    mass_cache = {}
    macro_times = {round(r.time, 12) for r in rows if r.kind == "macro"}
    for r in rows:
        lmesh = r.local.mesh
        key = id(lmesh)
        if key not in mass_cache:
            mass_cache[key] = mass_matrix(lmesh)
        M = mass_cache[key]
        ref = reference.at_time(r.time)
        ref_local = ref.mesh.interpolate(ref.values, lmesh.coords)
        diff = r.local.values - ref_local
        denom = np.sqrt(abs(ref_local @ (M @ ref_local)))
        rel = float(np.sqrt(abs(diff @ (M @ diff))) / max(denom, 1e-300))
        times.append(r.time)
        kinds.append(r.kind)
        errs.append(rel)
        tstars.append(t_star_of(r) if t_star_of is not None else np.nan)
        provisional = r.kind == "micro" and round(r.time, 12) in macro_times
        if r.kind != "initial" and not provisional:
            mean_terms.append(rel)
    return ErrorReport(
        times=np.asarray(times),
        kinds=kinds,
        rel_l2=np.asarray(errs),
        t_star=np.asarray(tstars),
        mean_rel_l2=float(np.mean(mean_terms)) if mean_terms else 0.0,
    )


def sawtooth_fraction(report: ErrorReport, micro_per_macro: int) -> float:
    """Fraction of macro intervals whose micro errors are nondecreasing."""
    idx = [i for i, k in enumerate(report.kinds) if k == "micro"]
    if not idx or micro_per_macro < 2:
        return 1.0
    errs = report.rel_l2[idx]
    n_int = len(idx) // micro_per_macro
    good = 0
    for j in range(n_int):
        window = errs[j * micro_per_macro : (j + 1) * micro_per_macro]
        if np.all(np.diff(window) >= -1e-9 * np.maximum(window[:-1], 1e-300)):
            good += 1
    return good / max(n_int, 1)


def centerline_profile(sample, y: float, z: float | None, x_range: tuple, dx: float):
    """Temperatures along the top-surface centerline; returns (x, T)."""
    x0, x1 = x_range
    n = max(1, int(round((x1 - x0) / dx)))
    xs = np.linspace(x0, x1, n + 1)
    if z is None:
        pts = np.column_stack([xs, np.full_like(xs, y)])
    else:
        pts = np.column_stack([xs, np.full_like(xs, y), np.full_like(xs, z)])
    if isinstance(sample, FieldState):
        vals = sample.mesh.interpolate(sample.values, pts)
    else:
        vals = sample(pts)
    return xs, vals
