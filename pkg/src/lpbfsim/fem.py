"""Linear finite-element assembly and nonlinear backward-Euler stepping.

The weak form of the transient heat equation is discretized with P1
simplices and backward Euler in time.  Temperature-dependent coefficients
(conductivity, apparent capacity, the T^4 radiation factor) are lagged in
a Picard loop so every inner solve is linear and symmetric positive
definite.  Dirichlet conditions are eliminated symmetrically.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import materials as mat_mod
from .materials import MaterialModel, PiecewiseMaterial
from .mesh import Mesh, TOP
from .sources import ThermalBC


class SolverError(RuntimeError):
    pass


class NonConvergence(SolverError):
    def __init__(self, what: str, iterations: int, residual: float):
        self.iterations = iterations
        self.residual = residual
        super().__init__(f"{what} did not converge in {iterations} iterations "
                         f"(last residual {residual:.3e})")


@dataclass(frozen=True)
class FieldState:
    """Nodal temperature field bound to a mesh at one time instant."""

    mesh: Mesh
    values: np.ndarray
    time: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.mesh.n_nodes,):
            raise SolverError(
                f"field has {v.shape} values for a mesh with {self.mesh.n_nodes} nodes"
            )
        if not np.all(np.isfinite(v)):
            raise SolverError("field contains non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def with_values(self, values: np.ndarray, time: float | None = None) -> "FieldState":
        return FieldState(self.mesh, values, self.time if time is None else time)


def uniform_field(mesh: Mesh, value: float, time: float = 0.0) -> FieldState:
    return FieldState(mesh, np.full(mesh.n_nodes, float(value)), time)


@dataclass(frozen=True)
class SolverSettings:
    picard_tol: float = 1e-8
    picard_max_iter: int = 25
    linear_tol: float = 1e-10
    linear_solver: str = "direct"      # direct | cg

    def __post_init__(self):
        if not (0 < self.picard_tol < 1 and 0 < self.linear_tol < 1):
            raise SolverError("tolerances must lie in (0, 1)")
        if self.picard_max_iter < 1:
            raise SolverError("iteration caps must be >= 1")
        if self.linear_solver not in ("direct", "cg"):
            raise SolverError(f"unknown linear solver {self.linear_solver!r}")


@dataclass
class SparseSystem:
    """Assembled linear system plus Dirichlet constraints."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    dirichlet_nodes: np.ndarray
    dirichlet_values: np.ndarray
    _constrained: tuple | None = None

    def constrained(self):
        """Matrix/rhs with Dirichlet rows and columns eliminated symmetrically."""
        if self._constrained is None:
            A, b = self.matrix, self.rhs.copy()
            n = A.shape[0]
            if self.dirichlet_nodes.size:
                g = np.zeros(n)
                g[self.dirichlet_nodes] = self.dirichlet_values
                b -= A @ g
                keep = np.ones(n)
                keep[self.dirichlet_nodes] = 0.0
                D = sp.diags(keep)
                A = D @ A @ D + sp.diags(1.0 - keep)
                b = keep * b
                b[self.dirichlet_nodes] = self.dirichlet_values
            self._constrained = (A.tocsr(), b)
        return self._constrained


@dataclass(frozen=True)
class BoundarySpec:
    """Boundary data for one solve.

    robin_tags: facet tags receiving the convective (and, if radiation is
    set, linearized radiative) flux.  dirichlet_nodes/values pin nodal
    temperatures; values may be a scalar or an array aligned with nodes.
    """

    bc: ThermalBC
    robin_tags: tuple = (TOP,)
    radiation: bool = False
    dirichlet_nodes: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    dirichlet_values: np.ndarray | float = 0.0

    def dirichlet_array(self) -> np.ndarray:
        vals = np.broadcast_to(np.asarray(self.dirichlet_values, dtype=float),
                               self.dirichlet_nodes.shape)
        return np.asarray(vals, dtype=float)


def assemble_system(
    mesh: Mesh,
    mat: MaterialModel,
    T_old: FieldState,
    T_lag: FieldState,
    dt: float,
    source,
    bounds: BoundarySpec,
    latent: bool = False,
    latent_mask: np.ndarray | None = None,
    extra_load: np.ndarray | None = None,
    extra_mass_coeff=None,
) -> SparseSystem:
    """One backward-Euler step in weak form, coefficients frozen at T_lag.

    source: callable(points (n, dim)) -> volumetric power density, already
    bound to the target time; None for an unheated problem.
    latent_mask: optional per-element bool array restricting the apparent
    heat capacity's latent term.  extra_mass_coeff: optional per-element,
    per-quadrature-point addition to rho*c (used by the coarse problem's
    overlap feedback term).  extra_load: preassembled nodal loads.
    """
    if T_old.mesh is not mesh or T_lag.mesh is not mesh:
        raise SolverError("assembly fields must live on the assembly mesh")
    if dt <= 0:
        raise SolverError("time step must be positive")

    vol, grads, _ = mesh.geometry
    phi, w = mesh.quad_rule
    conn = mesh.elems
    Tq = np.einsum("qi,ei->eq", phi, T_lag.values[conn])

    Tq_old = np.einsum("qi,ei->eq", phi, T_old.values[conn])
    kq, coeff = _material_arrays(mat, Tq, Tq_old, latent, latent_mask)
    kbar = kq @ w
    if extra_mass_coeff is not None:
        coeff = coeff + extra_mass_coeff

    # row-sum lumped mass: keeps the system an M-matrix for any dt, so the
    # discrete maximum principle holds on these non-obtuse meshes
    mass_lumped = np.einsum("q,eq,qi->ei", w, coeff / dt, phi) * vol[:, None]
    stiff = np.einsum("e,eid,ejd->eij", kbar * vol, grads, grads)
    data = stiff.copy()
    diag = np.arange(mesh.dim + 1)
    data[:, diag, diag] += mass_lumped

    rhs_elem = mass_lumped * T_old.values[conn]
    if source is not None:
        Qq = np.asarray(source(mesh.quad_points.reshape(-1, mesh.dim))).reshape(Tq.shape)
        rhs_elem += np.einsum("q,eq,qi->ei", w, Qq, phi) * vol[:, None]

    n = mesh.n_nodes
    rows, cols = mesh.assembly_indices
    A = sp.coo_matrix((data.reshape(-1), (rows, cols)), shape=(n, n)).tocsr()
    b = np.zeros(n)
    np.add.at(b, conn.reshape(-1), rhs_elem.reshape(-1))

    if bounds.robin_tags and (bounds.bc.h_conv > 0 or (bounds.radiation and bounds.bc.emissivity > 0)):
        A, b = _add_robin(mesh, bounds, T_lag, A, b)

    return SparseSystem(
        matrix=A,
        rhs=b + (extra_load if extra_load is not None else 0.0),
        dirichlet_nodes=np.asarray(bounds.dirichlet_nodes, dtype=np.int64),
        dirichlet_values=bounds.dirichlet_array(),
    )


def _latent_slope(m, T, T_old):
    """Secant apparent-capacity contribution chi * df/dT over the step.

    A node crossing the sharp transition in one step releases chi once;
    the secant spreads that energy over the actual temperature jump, which
    keeps the Picard lag from cycling across the front and makes the
    converged latent release exactly chi * (f_new - f_old) / dt.  Falls
    back to the pointwise derivative for vanishing jumps.
    """
    dT = T - T_old
    small = np.abs(dT) < 1e-6
    df = mat_mod.phase_fraction(m, T) - mat_mod.phase_fraction(m, T_old)
    slope = np.where(small, mat_mod.phase_fraction_derivative(m, 0.5 * (T + T_old)),
                     df / np.where(small, 1.0, dT))
    return m.chi * slope


def _material_arrays(mat, Tq: np.ndarray, Tq_old: np.ndarray, latent: bool, latent_mask):
    """(kappa, rho*c_effective) at the quadrature points.

    Handles both a single material and a PiecewiseMaterial whose element
    mask selects between two materials; the latent term folds the secant
    apparent capacity into the coefficient, optionally restricted by
    latent_mask.
    """

    def single(m, T):
        kq = mat_mod.conductivity(m, T)
        cq = mat_mod.heat_capacity(m, T)
        if latent and m.chi > 0.0:
            lat = _latent_slope(m, T, Tq_old)
            if latent_mask is not None:
                lat = lat * latent_mask[:, None]
            cq = cq + lat
        return kq, m.rho * cq

    if isinstance(mat, PiecewiseMaterial):
        k_in, c_in = single(mat.inside, Tq)
        k_out, c_out = single(mat.outside, Tq)
        sel = mat.mask[:, None]
        return np.where(sel, k_in, k_out), np.where(sel, c_in, c_out)
    return single(mat, Tq)


def _add_robin(mesh: Mesh, bounds: BoundarySpec, T_lag: FieldState, A, b):
    """Convective and linearized radiative boundary terms.

    Radiation is lagged as sigma*eps*T_lag^3 * T on the matrix side against
    sigma*eps*T_amb^4 on the right-hand side, which reproduces
    sigma*eps*(T^4 - T_amb^4) at the Picard fixed point.
    """
    bc = bounds.bc
    grp = mesh.facet_group(*bounds.robin_tags)
    if grp.nodes.shape[0] == 0:
        return A, b
    phi, w = grp.qp_phi, grp.qp_w
    coeff = np.full((grp.nodes.shape[0], w.size), bc.h_conv)
    load = np.full_like(coeff, bc.h_conv * bc.T_ambient)
    if bounds.radiation and bc.emissivity > 0:
        Tq = np.einsum("qi,fi->fq", phi, T_lag.values[grp.nodes])
        se = bc.sigma_sb * bc.emissivity
        coeff = coeff + se * Tq**3
        load = load + se * bc.T_ambient**4
    # lumped on the matrix side to preserve the M-matrix structure
    mdat = np.einsum("q,fq,qi->fi", w, coeff, phi) * grp.measure[:, None]
    fdat = np.einsum("q,fq,qi->fi", w, load, phi) * grp.measure[:, None]
    idx = grp.nodes.reshape(-1)
    A = A + sp.coo_matrix(
        (mdat.reshape(-1), (idx, idx)), shape=A.shape
    ).tocsr()
    np.add.at(b, idx, fdat.reshape(-1))
    return A, b


def solve_linear(system: SparseSystem, settings: SolverSettings) -> np.ndarray:
    """Solve the constrained system; verifies the relative residual."""
    A, b = system.constrained()
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b)
    if settings.linear_solver == "direct":
        x = spla.splu(A.tocsc()).solve(b)
        res = np.linalg.norm(A @ x - b) / bnorm
        if not np.isfinite(res) or res > max(1e3 * settings.linear_tol, 1e-9):
            raise NonConvergence("direct solve", 1, res)
    else:
        diag = A.diagonal()
        M = sp.diags(np.where(diag > 0, 1.0 / diag, 1.0))
        x, info = _cg(A, b, rtol=settings.linear_tol, M=M, maxiter=20 * A.shape[0])
        res = np.linalg.norm(A @ x - b) / bnorm
        if info != 0 or res > 1e2 * settings.linear_tol:
            raise NonConvergence("conjugate gradients", abs(info) or -1, res)
    if system.dirichlet_nodes.size:
        x[system.dirichlet_nodes] = system.dirichlet_values
    return x


def _cg(A, b, rtol, M, maxiter):
    try:
        return spla.cg(A, b, rtol=rtol, M=M, maxiter=maxiter)
    except TypeError:  # older scipy spells it tol
        return spla.cg(A, b, tol=rtol, M=M, maxiter=maxiter)


def _problem_is_linear(mat, bounds: BoundarySpec, latent: bool) -> bool:
    radiative = bounds.radiation and bounds.bc.emissivity > 0 and len(bounds.robin_tags) > 0
    chi = mat.max_chi if isinstance(mat, PiecewiseMaterial) else mat.chi
    return mat.is_constant and not radiative and not (latent and chi > 0.0)


def step_backward_euler(
    state: FieldState,
    dt: float,
    mat: MaterialModel,
    source,
    bounds: BoundarySpec,
    settings: SolverSettings,
    latent: bool = False,
    latent_mask: np.ndarray | None = None,
    extra_load: np.ndarray | None = None,
    extra_mass_coeff=None,
    stats=None,
) -> FieldState:
    """Advance one implicit step with Picard-lagged coefficients.

    The lag field starts at `state`; each pass reassembles with coefficients
    frozen at the lag, solves, and stops once the relative increment drops
    below the Picard tolerance.
    """
    t_new = state.time + dt
    T_lag = state
    linear = _problem_is_linear(mat, bounds, latent)
    max_iter = 1 if linear else settings.picard_max_iter
    inc = np.inf
    prev_inc = np.inf
    theta = 1.0   # lag damping; reduced when the iteration stalls or cycles
    for it in range(1, max_iter + 1):
        if stats is not None:
            with stats.timer("assembly"):
                system = assemble_system(state.mesh, mat, state, T_lag, dt, source,
                                         bounds, latent, latent_mask, extra_load,
                                         extra_mass_coeff)
        else:
            system = assemble_system(state.mesh, mat, state, T_lag, dt, source,
                                     bounds, latent, latent_mask, extra_load,
                                     extra_mass_coeff)
        x = solve_linear(system, settings)
        if stats is not None:
            stats.count("picard_iterations")
        scale = np.linalg.norm(x)
        inc = np.linalg.norm(x - T_lag.values) / max(scale, 1e-300)
        if linear or inc < settings.picard_tol:
            return state.with_values(x, t_new)
        if inc >= 0.9 * prev_inc:
            # a sharp apparent-capacity front makes undamped lagging cycle
            theta = max(0.25, 0.5 * theta)
        prev_inc = inc
        T_lag = state.with_values(T_lag.values + theta * (x - T_lag.values), t_new)
    raise NonConvergence("Picard iteration", max_iter, inc)


@dataclass
class Trajectory:
    """Sequence of fields on one mesh at strictly increasing times."""

    mesh: Mesh
    times: list = field(default_factory=list)
    values: list = field(default_factory=list)

    def append(self, state: FieldState):
        if self.times and state.time <= self.times[-1]:
            raise SolverError("trajectory times must increase")
        self.times.append(state.time)
        self.values.append(state.values)

    def __len__(self):
        return len(self.times)

    def state(self, idx: int) -> FieldState:
        return FieldState(self.mesh, self.values[idx], self.times[idx])

    def at_time(self, t: float, tol: float = 1e-9) -> FieldState:
        arr = np.asarray(self.times)
        idx = int(np.argmin(np.abs(arr - t)))
        if abs(arr[idx] - t) > tol * max(1.0, abs(t)):
            raise SolverError(f"no trajectory frame at t={t:g}")
        return self.state(idx)


def solve_monolithic(
    mesh: Mesh,
    mat: MaterialModel,
    source_at,
    bounds_at,
    dt: float,
    n_steps: int,
    T_0: FieldState,
    settings: SolverSettings = SolverSettings(),
    latent: bool = True,
    latent_mask: np.ndarray | None = None,
    stats=None,
    observer=None,
) -> Trajectory:
    """Uniform-step reference solve of the full problem on one mesh.

    source_at: callable(t) -> source callable (or None); bounds_at:
    callable(t) -> BoundarySpec, both evaluated at each target time.
    """
    if dt <= 0 or n_steps < 0:
        raise SolverError("schedule requires dt > 0 and n_steps >= 0")
    traj = Trajectory(mesh)
    traj.append(T_0)
    state = T_0
    for k in range(1, n_steps + 1):
        t_new = T_0.time + k * dt
        timer = stats.timer("reference_solve") if stats is not None else _null_ctx()
        with timer:
            state = step_backward_euler(
                state, t_new - state.time, mat, source_at(t_new), bounds_at(t_new),
                settings, latent=latent, latent_mask=latent_mask, stats=stats,
            )
        if stats is not None:
            stats.count("reference_solves")
        traj.append(state)
        if observer is not None:
            observer(state)
    return traj


class _null_ctx:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def mass_matrix(mesh: Mesh) -> sp.csr_matrix:
    """Plain P1 mass matrix, used for discrete L2 norms."""
    vol, _, _ = mesh.geometry
    phi, w = mesh.quad_rule
    data = np.einsum("q,qi,qj->ij", w, phi, phi)[None, :, :] * vol[:, None, None]
    rows, cols = mesh.assembly_indices
    n = mesh.n_nodes
    return sp.coo_matrix((data.reshape(-1), (rows, cols)), shape=(n, n)).tocsr()


def l2_norm(mesh: Mesh, values: np.ndarray, M: sp.csr_matrix | None = None) -> float:
    M = mass_matrix(mesh) if M is None else M
    return float(np.sqrt(np.abs(values @ (M @ values))))
