"""Multirate macro/micro time integration for the two-level method.

Each macro interval runs a predictor-corrector cycle: one uncoupled coarse
solve predicts the coarse field at the next macro instant; the fine
problem then advances in micro steps whose interface Dirichlet data blends
the last converged coarse trace with the predicted one (held at the
blend of each interval's starting instant); finally the fully coupled
solve at the macro instant corrects both fields, re-solving the last
micro interval so fine time never outruns coarse time.

With equal conductivities the coupling is one-way and the corrector's
coarse system coincides with the predictor's, so the predictor solution
is reused and only the corrector's fine re-solve runs; this is where the
method's coarse-solve savings come from.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fem import FieldState
from .mesh import Mesh
from .scanpath import LocalDomainPolicy, ScanPath, relocate_local
from .twolevel import (
    CouplingError,
    TwoLevelProblem,
    TwoLevelState,
    initial_state,
    solve_global,
    solve_local,
    two_level_iterate,
)


@dataclass(frozen=True)
class MacroSchedule:
    """Macro step size, micro substepping, and the simulated interval.

    The micro step is derived (dt_macro / micro_per_macro), never stored,
    and all instants are computed from integer step counts so there is no
    floating-point drift over long runs.
    """

    dt_macro: float
    micro_per_macro: int
    t_start: float
    t_end: float

    def __post_init__(self):
        if self.dt_macro <= 0 or self.micro_per_macro < 1:
            raise CouplingError("schedule needs dt_macro > 0 and micro count >= 1")
        span = self.t_end - self.t_start
        if span < 0:
            raise CouplingError("t_end must not precede t_start")
        n = span / self.dt_macro
        if abs(n - round(n)) > 1e-9 * max(n, 1.0):
            raise CouplingError(
                f"interval {span:g} is not an integer number of macro steps {self.dt_macro:g}"
            )

    @property
    def dt_micro(self) -> float:
        return self.dt_macro / self.micro_per_macro

    @property
    def n_macro(self) -> int:
        return int(round((self.t_end - self.t_start) / self.dt_macro))

    def t_macro(self, k: int) -> float:
        return self.t_start + k * self.dt_macro

    def t_micro(self, k: int, i: int) -> float:
        return self.t_start + k * self.dt_macro + i * self.dt_micro


def predictor_global(problem: TwoLevelProblem, state: TwoLevelState, dt: float,
                     stats=None) -> FieldState:
    """Uncoupled coarse step to the next macro instant.

    All coupling data is frozen at the last converged instant: the
    interface functional at the current fine field and any instant-based
    source at the step's start.  No coupling sub-iterations run.
    """
    if stats is not None:
        stats.count("predictor_solves")
    return solve_global(problem, state, dt, state.local_field, stats=stats,
                        predictor=True)


def interpolate_trace(i: int, m: int, trace_old: np.ndarray,
                      trace_pred: np.ndarray) -> np.ndarray:
    """Convex blend of the converged and predicted coarse traces.

    Exact at both ends: i = 0 returns the converged trace, i = m the
    predicted one.
    """
    if not 0 <= i <= m:
        raise CouplingError(f"micro index {i} outside 0..{m}")
    w = i / m
    return (1.0 - w) * trace_old + w * trace_pred


def macro_step(problem: TwoLevelProblem, state: TwoLevelState,
               schedule: MacroSchedule, k: int, stats=None,
               recorder=None) -> TwoLevelState:
    """One full predictor / micro-stepping / corrector cycle.

    Micro interval i (i = 0..m-1) advances the fine field to
    t_n + (i+1)*dt_micro holding the interface trace at the blend of the
    interval's starting instant, (1 - i/m) converged + (i/m) predicted.
    The boundary data therefore lags the fine field by one micro step and
    the fine error accumulates through the interval; the corrector's
    coupled solve then re-covers the final micro interval with the
    converged trace at the macro instant, which is where the error drops.
    """
    m = schedule.micro_per_macro
    delta = schedule.dt_micro
    t_next = schedule.t_macro(k + 1)

    timer = stats.timer("predictor") if stats is not None else _Null()
    with timer:
        predicted = predictor_global(problem, state, schedule.dt_macro, stats=stats)
    if recorder is not None:
        recorder("predictor", t_next, None, predicted, 0)

    trace_old = state.trace
    trace_pred = state.gamma.trace_of(predicted.values, problem.global_mesh)

    local = state.local_field
    before_final = state.local_field
    for i in range(m):
        t_i = schedule.t_micro(k, i + 1)
        trace_i = interpolate_trace(i + 1, m, trace_old, trace_pred)
        if i == m - 1:
            before_final = local
        local = solve_local(problem, local, t_i - local.time, state.gamma, trace_i,
                            stats=stats)
        local = FieldState(local.mesh, local.values, t_i)
        if recorder is not None:
            recorder("micro", t_i, local, None, 0)

    if problem.one_way and problem.interval_source:
        # zero interface functional and an interval-consistent source: the
        # corrector's coarse system equals the predictor's, so only its
        # fine re-solve of the final micro interval (now with the converged
        # macro-instant trace) remains
        corrected = solve_local(problem, before_final, delta, state.gamma,
                                trace_pred, stats=stats)
        corrected = FieldState(corrected.mesh, corrected.values, t_next)
        if stats is not None:
            stats.count("coupling_iterations")
        new_state = TwoLevelState(predicted, corrected, state.gamma, trace_pred)
        iters = 1
    else:
        new_state, iters = two_level_iterate(
            problem, state, schedule.dt_macro,
            local_from=before_final, local_dt=delta,
            transmission_seed=local, trace_start=trace_pred, stats=stats,
        )
    if recorder is not None:
        recorder("macro", t_next, new_state.local_field, new_state.global_field, iters)
    return new_state


def run_spacetime(problem: TwoLevelProblem, schedule: MacroSchedule,
                  local_mesh: Mesh, T0: FieldState,
                  path: ScanPath | None = None,
                  policy: LocalDomainPolicy | None = None,
                  stats=None, recorder=None) -> TwoLevelState:
    """Drive the multirate scheme over the whole schedule.

    Starts from a coupled initial state at t_start, runs n_macro cycles,
    and (when a relocation policy is given) moves the local domain after
    each corrector to track the laser.
    """
    state = initial_state(problem, local_mesh, T0)
    if recorder is not None:
        recorder("initial", schedule.t_start, state.local_field, state.global_field, 0)
    n = schedule.n_macro
    for k in range(n):
        state = macro_step(problem, state, schedule, k, stats=stats, recorder=recorder)
        if policy is not None and path is not None and k < n - 1:
            t = min(schedule.t_macro(k + 1), path.t_end)
            moved = relocate_local(state, policy, path.position(t),
                                   path.direction(t), problem)
            if moved is not state and stats is not None:
                stats.count("relocations")
            state = moved
    return state


def run_space(problem: TwoLevelProblem, dt: float, n_steps: int,
              local_mesh: Mesh, T0: FieldState,
              path: ScanPath | None = None,
              policy: LocalDomainPolicy | None = None,
              stats=None, recorder=None) -> TwoLevelState:
    """Uniform-step two-level driver: every step is a fully coupled solve."""
    state = initial_state(problem, local_mesh, T0)
    if recorder is not None:
        recorder("initial", T0.time, state.local_field, state.global_field, 0)
    for k in range(n_steps):
        t_next = T0.time + (k + 1) * dt
        state, iters = two_level_iterate(problem, state, t_next - state.time,
                                         stats=stats)
        state = _restamp(state, t_next)
        if recorder is not None:
            recorder("macro", t_next, state.local_field, state.global_field, iters)
        if policy is not None and path is not None and k < n_steps - 1:
            t = min(t_next, path.t_end)
            moved = relocate_local(state, policy, path.position(t),
                                   path.direction(t), problem)
            if moved is not state and stats is not None:
                stats.count("relocations")
            state = moved
    return state


def _restamp(state: TwoLevelState, t: float) -> TwoLevelState:
    return TwoLevelState(
        FieldState(state.global_field.mesh, state.global_field.values, t),
        FieldState(state.local_field.mesh, state.local_field.values, t),
        state.gamma,
        state.trace,
    )


class _Null:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False
