"""Laser heat-source models and boundary-condition flux terms.

Two volumetric source shapes: Gaussian beams (2D and 3D variants) that
track the instantaneous laser position, and a constant distributed source
spread over the box swept by the beam during one coarse time step.  The
distributed form deposits exactly P*eta per step, which is what lets the
coarse-grid problem take large steps without a flickering solution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STEFAN_BOLTZMANN = 5.670374419e-8  # W/(m^2 K^4)


class SourceError(ValueError):
    pass


@dataclass(frozen=True)
class LaserBeam:
    power: float          # W
    absorptivity: float   # dimensionless, in (0, 1]
    radius: float         # m
    depth: float          # m
    speed: float          # m/s

    def __post_init__(self):
        if self.power <= 0 or self.radius <= 0 or self.depth <= 0:
            raise SourceError("beam power, radius, and depth must be positive")
        if not 0.0 < self.absorptivity <= 1.0:
            raise SourceError("absorptivity must lie in (0, 1]")
        if self.speed < 0:
            raise SourceError("scan speed must be nonnegative")


@dataclass(frozen=True)
class ThermalBC:
    h_conv: float                     # W/(m^2 K)
    emissivity: float                 # dimensionless
    T_ambient: float                  # K
    T_buildplate: float               # K
    sigma_sb: float = STEFAN_BOLTZMANN

    def __post_init__(self):
        if self.h_conv < 0:
            raise SourceError("convection coefficient must be nonnegative")
        if not 0.0 <= self.emissivity <= 1.0:
            raise SourceError("emissivity must lie in [0, 1]")
        if self.sigma_sb <= 0:
            raise SourceError("Stefan-Boltzmann constant must be positive")


def gaussian_source_2d(beam: LaserBeam, center, points) -> np.ndarray:
    """Volumetric power density of the 2D beam: peak P*eta/(r*d) at center."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    c = np.asarray(center, dtype=float)
    ex = ((p[:, 0] - c[0]) / beam.radius) ** 2
    ey = ((p[:, 1] - c[1]) / beam.depth) ** 2
    peak = beam.power * beam.absorptivity / (beam.radius * beam.depth)
    return peak * np.exp(-(ex + ey))


def gaussian_source_3d(beam: LaserBeam, center, points) -> np.ndarray:
    """Conical Gaussian beam: peak 6*sqrt(3)*P*eta / (2*pi*r^2*d) at center."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    c = np.asarray(center, dtype=float)
    ex = 3.0 * ((p[:, 0] - c[0]) / beam.radius) ** 2
    ey = 3.0 * ((p[:, 1] - c[1]) / beam.radius) ** 2
    ez = 3.0 * ((p[:, 2] - c[2]) / beam.depth) ** 2
    peak = 6.0 * np.sqrt(3.0) * beam.power * beam.absorptivity / (
        2.0 * np.pi * beam.radius**2 * beam.depth
    )
    return peak * np.exp(-(ex + ey + ez))


def distributed_source_3d(beam: LaserBeam, segment, dt: float, points) -> np.ndarray:
    """Constant source over the box swept during dt; integrates to P*eta.

    The box runs along the scan segment (length v*dt), spans the beam
    radius across it, and reaches one beam depth below the segment.
    """
    start = np.asarray(segment[0], dtype=float)
    end = np.asarray(segment[1], dtype=float)
    track = end - start
    length = float(np.linalg.norm(track))
    if dt <= 0:
        raise SourceError("sweep duration must be positive")
    expected = beam.speed * dt
    if abs(length - expected) > 1e-9 * max(expected, 1e-300):
        raise SourceError(
            f"segment length {length:g} does not match speed*dt = {expected:g}"
        )
    p = np.atleast_2d(np.asarray(points, dtype=float))
    if length == 0.0:
        return np.zeros(len(p))
    that = track / length
    rel = p - start
    along = rel @ that
    lateral = rel[:, :2] - np.outer(along, that[:2])
    lat = np.linalg.norm(lateral, axis=1)
    depth = start[2] - p[:, 2]
    inside = (
        (along >= 0.0)
        & (along <= length)
        & (lat <= 0.5 * beam.radius)
        & (depth >= 0.0)
        & (depth <= beam.depth)
    )
    value = beam.power * beam.absorptivity / (beam.radius * beam.depth * beam.speed * dt)
    return np.where(inside, value, 0.0)


class SweptTrackDeposit:
    """Nodal realization of the distributed source for coarse meshes.

    The swept box is usually smaller than a coarse-grid cell, so element
    quadrature of the boxcar would mis-deposit its energy.  Instead the
    box is covered by a fixed sampling lattice and each sample scatters
    its equal power share onto the containing element's nodes, which
    deposits exactly P*eta*(time on track)/dt regardless of the mesh.
    """

    SAMPLES = (8, 3, 3)     # along, across, depth

    def __init__(self, beam: LaserBeam, pieces, dt: float):
        if dt <= 0:
            raise SourceError("sweep duration must be positive")
        self.beam = beam
        self.pieces = [(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
                       for a, b in pieces]
        self.dt = dt

    def sample_points(self):
        """(points, power-per-point) covering every swept piece."""
        na, nc, nd = self.SAMPLES
        pts_all, pw_all = [], []
        r, d, v = self.beam.radius, self.beam.depth, self.beam.speed
        for a, b in self.pieces:
            track = b - a
            length = float(np.linalg.norm(track))
            if length == 0.0:
                continue
            that = track / length
            lat = np.array([-that[1], that[0], 0.0])
            u = (np.arange(na) + 0.5) / na * length
            w = ((np.arange(nc) + 0.5) / nc - 0.5) * r
            s = (np.arange(nd) + 0.5) / nd * d
            U, W, S = np.meshgrid(u, w, s, indexing="ij")
            pts = (a[None, :]
                   + U.reshape(-1, 1) * that[None, :]
                   + W.reshape(-1, 1) * lat[None, :]
                   - S.reshape(-1, 1) * np.array([0.0, 0.0, 1.0]))
            piece_power = self.beam.power * self.beam.absorptivity * (length / v) / self.dt
            pts_all.append(pts)
            pw_all.append(np.full(len(pts), piece_power / len(pts)))
        if not pts_all:
            return np.empty((0, 3)), np.empty(0)
        return np.vstack(pts_all), np.concatenate(pw_all)

    def load(self, mesh) -> np.ndarray:
        """Nodal load vector on `mesh`; sums to the on-track power."""
        pts, power = self.sample_points()
        out = np.zeros(mesh.n_nodes)
        if len(pts) == 0:
            return out
        elems, bary = mesh.locate(pts)
        np.add.at(out, mesh.elems[elems].reshape(-1), (power[:, None] * bary).reshape(-1))
        return out


def robin_flux_local(bc: ThermalBC, T) -> np.ndarray:
    """Outward flux on the fine-domain top surface: convection + radiation."""
    T = np.asarray(T, dtype=float)
    conv = bc.h_conv * (T - bc.T_ambient)
    rad = bc.sigma_sb * bc.emissivity * (T**4 - bc.T_ambient**4)
    return conv + rad

def conv_flux_global(bc: ThermalBC, T) -> np.ndarray:
    """Outward flux on the coarse-domain top surface: convection only."""
    return bc.h_conv * (np.asarray(T, dtype=float) - bc.T_ambient)
