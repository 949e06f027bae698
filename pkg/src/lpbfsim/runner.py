"""Experiment drivers: reference, two-level, study, and compare modes.

Builds solver objects from a validated config, runs the requested mode,
and writes the standard outputs: errors.csv (time, step kind, relative
local-domain error, control temperature), timing.csv (phase, seconds,
count), study_matrix.csv for parameter sweeps, centerline.csv profiles,
legacy VTK snapshots, and a machine-readable summary.json.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .fem import BoundarySpec, FieldState, Trajectory, solve_monolithic, uniform_field
from .materials import PiecewiseMaterial, materials_fully_equal
from .mesh import BOTTOM, TOP, Box, Mesh, build_structured_mesh
from .metrics import (
    ErrorReport,
    RunLog,
    composite_sampler,
    centerline_profile,
    control_temperature,
    error_metrics,
)
from .multirate import MacroSchedule, run_space, run_spacetime
from .sources import SweptTrackDeposit, gaussian_source_2d, gaussian_source_3d
from .stats import RunStats
from .twolevel import TwoLevelProblem
from .vtkio import write_csv, write_vtk


@dataclass
class RunArtifacts:
    out_dir: Path
    log: RunLog
    stats: RunStats
    report: ErrorReport | None = None
    summary: dict | None = None
    reports: dict | None = None          # study mode: (dt, micro) -> ErrorReport
    reference: Trajectory | None = None  # study mode: shared reference run


def _local_source_factory(cfg: ExperimentConfig):
    path, beam = cfg.path, cfg.beam
    tol = 1e-12 * max(path.t_end, 1.0)

    def at(t):
        if t > path.t_end + tol or t < path.t_start - tol:
            return None
        pos = path.position(t)
        if cfg.dimension == 2:
            return lambda pts: gaussian_source_2d(beam, pos, pts)
        return lambda pts: gaussian_source_3d(beam, pos, pts)

    return at


def _global_source_factory(cfg: ExperimentConfig):
    path, beam = cfg.path, cfg.beam
    if cfg.source_global == "gaussian":
        pointwise = _local_source_factory(cfg)
        # the predictor is an intermediate solution: its beam position lags
        # the step's end (frozen between the converged and target instants);
        # corrected solves see the beam at the step's end
        return lambda t0, t1, predictor=False: pointwise(
            t0 + 0.75 * (t1 - t0) if predictor else t1
        )

    def at(t0, t1, predictor=False):
        pieces = path.swept_pieces(t0, t1)
        if not pieces:
            return None
        return SweptTrackDeposit(beam, pieces, t1 - t0)

    return at


def build_problem(cfg: ExperimentConfig) -> tuple[TwoLevelProblem, Mesh]:
    """Meshes and solver objects for the two-level runs of a config."""
    gmesh = build_structured_mesh(cfg.global_box, cfg.h_global)
    if cfg.policy is not None:
        t0 = cfg.path.t_start
        origin = cfg.policy.target_origin(cfg.path.position(t0), cfg.path.direction(t0))
        size = np.asarray(cfg.policy.box_size)
        # keep the initial box inside the global walls
        glo = np.asarray(cfg.global_box.lo)
        ghi = np.asarray(cfg.global_box.hi)
        margin = np.minimum(cfg.h_local, (ghi - glo - size) / 2)
        origin = np.clip(origin, glo + margin, ghi - size - margin)
        origin[-1] = ghi[-1] - size[-1]
        local_box = Box(tuple(origin), tuple(origin + size))
    else:
        local_box = cfg.local_box
    lmesh = build_structured_mesh(local_box, cfg.h_local)
    problem = TwoLevelProblem(
        global_mesh=gmesh,
        mat_global=cfg.material,
        mat_local=cfg.material_local,
        bc=cfg.bc,
        solver=cfg.solver,
        coupling=cfg.coupling,
        mode=cfg.coupling_mode,
        global_source=_global_source_factory(cfg),
        local_source=_local_source_factory(cfg),
        interval_source=cfg.source_global == "distributed",
    )
    return problem, lmesh


def reference_bounds(cfg: ExperimentConfig, mesh: Mesh) -> BoundarySpec:
    return BoundarySpec(
        bc=cfg.bc,
        robin_tags=(TOP,),
        radiation=cfg.bc.emissivity > 0,
        dirichlet_nodes=mesh.nodes_on(BOTTOM),
        dirichlet_values=cfg.bc.T_buildplate,
    )


def run_reference(cfg: ExperimentConfig, dt: float | None = None,
                  stats: RunStats | None = None, mesh: Mesh | None = None,
                  observer=None) -> Trajectory:
    """Monolithic reference solve of the full split model on one fine mesh.

    With distinct coarse/fine materials the reference carries the
    piecewise coefficients: the fine material inside the local region, the
    coarse one outside (this needs a fixed local box).
    """
    dt = cfg.dt_reference if dt is None else dt
    mesh = build_structured_mesh(cfg.global_box, cfg.h_reference) if mesh is None else mesh
    n_steps = int(round(cfg.t_end / dt))
    source_at = _local_source_factory(cfg)   # the true beam, not the spread model
    bounds = reference_bounds(cfg, mesh)
    material = cfg.material
    region_mask = None
    if cfg.local_box is not None:
        centers = mesh.coords[mesh.elems].mean(axis=1)
        region_mask = cfg.local_box.contains(centers)
    if not materials_fully_equal(cfg.material, cfg.material_local):
        if region_mask is None:
            raise ValueError(
                "a reference with distinct coarse/fine materials needs a fixed local box"
            )
        material = PiecewiseMaterial(cfg.material_local, cfg.material, region_mask)
    chi_max = max(cfg.material.chi, cfg.material_local.chi)
    latent = cfg.latent_reference != "off" and chi_max > 0
    latent_mask = None
    if latent and cfg.latent_reference == "local":
        if region_mask is None:
            raise ValueError("latent_reference=local needs a fixed local box")
        latent_mask = region_mask
    T0 = uniform_field(mesh, cfg.T_initial, time=0.0)
    return solve_monolithic(
        mesh, material, source_at, lambda t: bounds, dt, n_steps, T0,
        settings=cfg.solver, latent=latent, latent_mask=latent_mask,
        stats=stats, observer=observer,
    )


def _t_star_fn(cfg: ExperimentConfig, log: RunLog):
    if cfg.dimension != 2 or cfg.control_line_y is None:
        return None
    x0, x1 = cfg.global_box.lo[0], cfg.global_box.hi[0]
    dx = cfg.h_global / 2

    def t_star(record):
        glob = record.global_field or log.latest_global_at(record.time)
        sampler = composite_sampler(record.local, glob)
        return control_temperature(sampler, cfg.control_line_y, (x0, x1), dx)

    return t_star


def _reference_t_star(cfg: ExperimentConfig, state: FieldState) -> float:
    x0, x1 = cfg.global_box.lo[0], cfg.global_box.hi[0]
    return control_temperature(state, cfg.control_line_y, (x0, x1),
                               state.mesh.spacing[0] / 2)


def _write_errors_csv(out: Path, report: ErrorReport):
    rows = [
        (t, kind, rel, "" if np.isnan(ts) else ts)
        for t, kind, rel, ts in zip(report.times, report.kinds, report.rel_l2,
                                    report.t_star)
    ]
    write_csv(out / "errors.csv", ["t", "step_kind", "rel_l2_local", "T_star"], rows)


def _write_timing_csv(out: Path, stats: RunStats):
    sec = stats.seconds
    cnt = stats.counters
    rows = [
        ("total", stats.total_seconds, 1),
        ("global_solve", sec.get("global_solve", 0.0), cnt.get("global_solves", 0)),
        ("local_solve", sec.get("local_solve", 0.0), cnt.get("local_solves", 0)),
        ("assembly", sec.get("assembly", 0.0), cnt.get("picard_iterations", 0)),
        ("coupling_overhead", sec.get("coupling_overhead", 0.0),
         cnt.get("coupling_iterations", 0)),
        ("reference_solve", sec.get("reference_solve", 0.0),
         cnt.get("reference_solves", 0)),
        ("predictor", sec.get("predictor", 0.0), cnt.get("predictor_solves", 0)),
    ]
    write_csv(out / "timing.csv", ["phase", "seconds", "count"], rows)


def _snapshot_cadence(cfg: ExperimentConfig, override: str | None) -> str:
    return override if override is not None else cfg.snapshots


def _write_snapshots(out: Path, cfg: ExperimentConfig, log: RunLog, cadence: str):
    if cadence == "none":
        return
    every = 10 if cfg.dimension == 3 and cadence == "all" else 1
    micro_seen = 0
    for r in log.records:
        if r.kind in ("initial", "macro"):
            if r.global_field is not None:
                write_vtk(out / "vtk" / f"global_{r.time:.6e}.vtk", r.global_field.mesh,
                          {"temperature": r.global_field.values})
            if r.local is not None:
                write_vtk(out / "vtk" / f"local_{r.time:.6e}.vtk", r.local.mesh,
                          {"temperature": r.local.values})
        elif r.kind == "micro" and cadence == "all" and r.local is not None:
            micro_seen += 1
            if micro_seen % every == 0:
                write_vtk(out / "vtk" / f"local_{r.time:.6e}.vtk", r.local.mesh,
                          {"temperature": r.local.values})


def _two_level_run(cfg: ExperimentConfig, spacetime: bool,
                   dt_macro: float | None = None, micro: int | None = None
                   ) -> tuple[RunLog, RunStats, object]:
    problem, lmesh = build_problem(cfg)
    log = RunLog()
    stats = RunStats()
    T0 = uniform_field(problem.global_mesh, cfg.T_initial, time=0.0)
    dt_macro = cfg.dt_macro if dt_macro is None else dt_macro
    micro = cfg.micro_steps if micro is None else micro
    moving = cfg.policy is not None
    if spacetime:
        schedule = MacroSchedule(dt_macro, micro, 0.0, cfg.t_end)
        state = run_spacetime(problem, schedule, lmesh, T0,
                              path=cfg.path if moving else None,
                              policy=cfg.policy, stats=stats, recorder=log.record)
    else:
        dt = dt_macro / micro
        n = int(round(cfg.t_end / dt))
        state = run_space(problem, dt, n, lmesh, T0,
                          path=cfg.path if moving else None,
                          policy=cfg.policy, stats=stats, recorder=log.record)
    return log, stats, state


def _centerline(cfg: ExperimentConfig, sample, out: Path, dx: float):
    y = cfg.centerline_y
    z = cfg.centerline_z if cfg.dimension == 3 else None
    if y is None:
        return None
    xs, Ts = centerline_profile(sample, y, z, (cfg.global_box.lo[0], cfg.global_box.hi[0]), dx)
    write_csv(out / "centerline.csv", ["x", "temperature"], list(zip(xs, Ts)))
    return xs, Ts


def run_experiment(cfg: ExperimentConfig, out_dir, snapshots: str | None = None,
                   threads: int = 1) -> RunArtifacts:
    """Dispatch a config to its experiment mode and write all outputs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mode = cfg.mode
    if mode == "reference":
        return _run_reference_mode(cfg, out, snapshots)
    if mode in ("two-level-space", "two-level-spacetime"):
        return _run_two_level_mode(cfg, out, mode == "two-level-spacetime", snapshots)
    if mode == "convergence-study":
        return run_study(cfg, out, snapshots, threads)
    if mode == "compare":
        return run_compare(cfg, out, snapshots)
    raise ValueError(f"unhandled mode {mode}")


def _run_reference_mode(cfg: ExperimentConfig, out: Path, snapshots) -> RunArtifacts:
    stats = RunStats()
    mesh = build_structured_mesh(cfg.global_box, cfg.h_reference)
    cadence = _snapshot_cadence(cfg, snapshots)
    every = 1 if cfg.dimension == 2 else 10
    rows = []
    count = [0]

    def observer(state: FieldState):
        count[0] += 1
        ts = (_reference_t_star(cfg, state)
              if cfg.dimension == 2 and cfg.control_line_y is not None else "")
        rows.append((state.time, "macro", 0.0, ts))
        if cadence == "all" and count[0] % every == 0:
            write_vtk(out / "vtk" / f"reference_{state.time:.6e}.vtk", mesh,
                      {"temperature": state.values})

    traj = run_reference(cfg, stats=stats, mesh=mesh, observer=observer)
    if cadence == "macro":   # final frame only; reference runs are the big ones
        final_ref = traj.state(len(traj) - 1)
        write_vtk(out / "vtk" / f"reference_{final_ref.time:.6e}.vtk", mesh,
                  {"temperature": final_ref.values})
    write_csv(out / "errors.csv", ["t", "step_kind", "rel_l2_local", "T_star"], rows)
    _write_timing_csv(out, stats)
    final = traj.state(len(traj) - 1)
    _centerline(cfg, final, out, mesh.spacing[0])
    summary = {"mode": "reference", "steps": len(traj) - 1, **stats.report()}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return RunArtifacts(out, RunLog(), stats, None, summary)


def _run_two_level_mode(cfg: ExperimentConfig, out: Path, spacetime: bool,
                        snapshots) -> RunArtifacts:
    log, stats, state = _two_level_run(cfg, spacetime)
    t_star = _t_star_fn(cfg, log)
    rows = []
    for r in log.of_kind("initial", "micro", "macro"):
        ts = t_star(r) if t_star is not None else ""
        rows.append((r.time, r.kind, "", ts))
    write_csv(out / "errors.csv", ["t", "step_kind", "rel_l2_local", "T_star"], rows)
    _write_timing_csv(out, stats)
    _write_snapshots(out, cfg, log, _snapshot_cadence(cfg, snapshots))
    final = log.of_kind("macro")[-1]
    sample = composite_sampler(final.local, final.global_field)
    _centerline(cfg, sample, out, cfg.h_reference)
    summary = {
        "mode": cfg.mode,
        "macro_steps": len(log.of_kind("macro")),
        "local_solves_expected": len(log.of_kind("macro")) * cfg.micro_steps,
        **stats.report(),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return RunArtifacts(out, log, stats, None, summary)


def study_pairs(cfg: ExperimentConfig) -> list:
    """(dt_macro, micro_steps) pairs for the configured sweep."""
    dts = cfg.dt_macro_list or [cfg.dt_macro]
    micros = cfg.dt_micro_list or [cfg.dt_micro]
    pairs = []
    for dt in dts:
        for dmu in micros:
            ratio = dt / dmu
            if abs(ratio - round(ratio)) > 1e-9 * ratio:
                raise ValueError(f"micro step {dmu:g} does not divide macro step {dt:g}")
            pairs.append((dt, int(round(ratio))))
    return pairs


def run_study(cfg: ExperimentConfig, out: Path, snapshots=None,
              threads: int = 1) -> RunArtifacts:
    """Reference solve plus a sweep of spacetime runs; errors per run.

    Writes one subdirectory per (dt_macro, dt_micro) pair plus
    study_matrix.csv of mean errors.
    """
    stats = RunStats()
    with stats.timer("reference_total"):
        reference = run_reference(cfg, stats=stats)

    pairs = study_pairs(cfg)

    def one(pair):
        dt, micro = pair
        log, run_stats, _ = _two_level_run(cfg, True, dt_macro=dt, micro=micro)
        t_star = _t_star_fn(cfg, log)
        report = error_metrics(log, reference, t_star_of=t_star)
        return dt, micro, log, run_stats, report

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, pairs))
    else:
        results = [one(p) for p in pairs]

    matrix_rows = []
    reports = {}
    for dt, micro, log, run_stats, report in results:
        sub = out / f"dt_{dt:g}" / f"micro_{dt / micro:g}"
        sub.mkdir(parents=True, exist_ok=True)
        _write_errors_csv(sub, report)
        _write_timing_csv(sub, run_stats)
        _write_snapshots(sub, cfg, log, _snapshot_cadence(cfg, snapshots))
        matrix_rows.append((dt, dt / micro, report.mean_rel_l2))
        reports[(dt, micro)] = report
    write_csv(out / "study_matrix.csv", ["dt_global", "dt_local", "mean_rel_l2"],
              matrix_rows)
    summary = {
        "mode": "convergence-study",
        "pairs": [[dt, dt / m] for dt, m in pairs],
        "mean_rel_l2": {f"{dt:g}/{dt / m:g}": reports[(dt, m)].mean_rel_l2
                        for dt, m in pairs},
        **stats.report(),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return RunArtifacts(out, RunLog(), stats, None, summary,
                        reports=reports, reference=reference)


def run_compare(cfg: ExperimentConfig, out: Path, snapshots=None) -> RunArtifacts:
    """Multirate versus uniform-step two-level timing comparison.

    Both variants run the identical physics with the same fine step; the
    uniform variant also solves the coarse problem every fine step.
    """
    log_st, stats_st, _ = _two_level_run(cfg, True)
    wall_st = stats_st.total_seconds
    sub_st = out / "spacetime"
    sub_st.mkdir(parents=True, exist_ok=True)
    _write_timing_csv(sub_st, stats_st)
    _write_snapshots(sub_st, cfg, log_st, _snapshot_cadence(cfg, snapshots))

    log_sp, stats_sp, _ = _two_level_run(cfg, False)
    wall_sp = stats_sp.total_seconds
    sub_sp = out / "spaceonly"
    sub_sp.mkdir(parents=True, exist_ok=True)
    _write_timing_csv(sub_sp, stats_sp)

    speedup = wall_sp / wall_st if wall_st > 0 else float("inf")
    summary = {
        "mode": "compare",
        "wall_spacetime": wall_st,
        "wall_spaceonly": wall_sp,
        "speedup": speedup,
        "global_solves_spacetime": stats_st.counters.get("global_solves", 0),
        "global_solves_spaceonly": stats_sp.counters.get("global_solves", 0),
        "local_solves_spacetime": stats_st.counters.get("local_solves", 0),
        "local_solves_spaceonly": stats_sp.counters.get("local_solves", 0),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return RunArtifacts(out, log_st, stats_st, None, summary)
