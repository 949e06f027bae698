"""Temperature-dependent material model with smoothed phase change.

Conductivity and heat capacity are piecewise-linear tables clamped to
constants outside the tabulated range.  The solid/liquid transition is a
tanh sigmoid centered midway between solidus and liquidus; its latent
heat is folded into an apparent heat capacity c_eff = c + chi * f'(T),
which releases exactly chi per unit mass across the transition.

All temperatures are Kelvin internally.  Material files may declare
Celsius and are converted on load.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

KELVIN_OFFSET = 273.15


class MaterialError(ValueError):
    pass


def _check_table(name: str, table: np.ndarray) -> np.ndarray:
    t = np.asarray(table, dtype=float)
    if t.ndim != 2 or t.shape[1] != 2 or t.shape[0] < 2:
        raise MaterialError(f"{name} table needs at least two (T, value) rows")
    if np.any(np.diff(t[:, 0]) <= 0):
        raise MaterialError(f"{name} table temperatures must be strictly increasing")
    if np.any(t[:, 1] <= 0):
        raise MaterialError(f"{name} table values must be positive")
    t.setflags(write=False)
    return t


@dataclass(frozen=True, eq=False)
class MaterialModel:
    """Immutable material description; all evaluations are pure functions."""

    conductivity_table: np.ndarray    # (T [K], kappa [W/(m K)])
    heat_capacity_table: np.ndarray   # (T [K], c [J/(kg K)])
    rho: float                        # kg/m^3
    chi: float                        # latent heat, J/kg
    T_solidus: float                  # K
    T_liquidus: float                 # K
    S: float                          # sigmoid sharpness, 1/K

    def __post_init__(self):
        object.__setattr__(self, "conductivity_table",
                           _check_table("conductivity", self.conductivity_table))
        object.__setattr__(self, "heat_capacity_table",
                           _check_table("heat_capacity", self.heat_capacity_table))
        if self.rho <= 0:
            raise MaterialError("density must be positive")
        if self.chi < 0:
            raise MaterialError("latent heat must be nonnegative")
        if not self.T_solidus < self.T_liquidus:
            raise MaterialError("solidus must lie below liquidus")
        if self.S <= 0:
            raise MaterialError("sigmoid sharpness must be positive")

    @property
    def T_melt(self) -> float:
        return 0.5 * (self.T_solidus + self.T_liquidus)

    @property
    def is_constant(self) -> bool:
        """True when kappa and c do not vary with temperature."""
        return (
            np.ptp(self.conductivity_table[:, 1]) == 0.0
            and np.ptp(self.heat_capacity_table[:, 1]) == 0.0
        )

    def with_chi(self, chi: float) -> "MaterialModel":
        return MaterialModel(self.conductivity_table.copy(), self.heat_capacity_table.copy(),
                             self.rho, chi, self.T_solidus, self.T_liquidus, self.S)

    def with_conductivity_scaled(self, factor: float) -> "MaterialModel":
        """Same material with the conductivity table scaled (effective media)."""
        if factor <= 0:
            raise MaterialError("conductivity scale must be positive")
        tab = self.conductivity_table.copy()
        tab[:, 1] *= factor
        return MaterialModel(tab, self.heat_capacity_table.copy(), self.rho,
                             self.chi, self.T_solidus, self.T_liquidus, self.S)


def conductivity(mat: MaterialModel, T):
    """kappa(T): piecewise linear inside the table, clamped outside."""
    tab = mat.conductivity_table
    return np.interp(T, tab[:, 0], tab[:, 1])


def heat_capacity(mat: MaterialModel, T):
    """c(T): piecewise linear inside the table, clamped outside."""
    tab = mat.heat_capacity_table
    return np.interp(T, tab[:, 0], tab[:, 1])


def phase_fraction(mat: MaterialModel, T):
    """Liquid fraction: 0.5 * (1 + tanh(S * (T - T_melt))), in (0, 1)."""
    return 0.5 * (1.0 + np.tanh(mat.S * (np.asarray(T, dtype=float) - mat.T_melt)))


def _sech_sq(x):
    # sech^2 without overflow for large |x|
    ax = np.abs(np.asarray(x, dtype=float))
    e = np.exp(-ax)
    s = 2.0 * e / (1.0 + e * e)
    return s * s


def phase_fraction_derivative(mat: MaterialModel, T):
    """d(phase_fraction)/dT = (S/2) * sech^2(S * (T - T_melt)); peak S/2."""
    return 0.5 * mat.S * _sech_sq(mat.S * (np.asarray(T, dtype=float) - mat.T_melt))


def effective_capacity(mat: MaterialModel, T):
    """Apparent heat capacity c + chi * f'(T) absorbing the latent heat."""
    return heat_capacity(mat, T) + mat.chi * phase_fraction_derivative(mat, T)


def conductivity_derivative(mat: MaterialModel, T):
    """dkappa/dT: the segment slope inside the table, zero outside (clamped)."""
    tab = mat.conductivity_table
    Tk, vk = tab[:, 0], tab[:, 1]
    slopes = np.diff(vk) / np.diff(Tk)
    T = np.asarray(T, dtype=float)
    seg = np.clip(np.searchsorted(Tk, T, side="right") - 1, 0, len(slopes) - 1)
    out = slopes[seg]
    return np.where((T <= Tk[0]) | (T >= Tk[-1]), 0.0, out)


def conductivity_tables_equal(a: MaterialModel, b: MaterialModel) -> bool:
    """True when both materials evaluate to identical kappa for every T."""
    if a is b:
        return True
    return (
        a.conductivity_table.shape == b.conductivity_table.shape
        and np.array_equal(a.conductivity_table, b.conductivity_table)
    )


def materials_fully_equal(a: MaterialModel, b: MaterialModel) -> bool:
    if a is b:
        return True
    return (
        conductivity_tables_equal(a, b)
        and a.heat_capacity_table.shape == b.heat_capacity_table.shape
        and np.array_equal(a.heat_capacity_table, b.heat_capacity_table)
        and a.rho == b.rho
        and a.chi == b.chi
        and (a.T_solidus, a.T_liquidus, a.S) == (b.T_solidus, b.T_liquidus, b.S)
    )


@dataclass(frozen=True)
class PiecewiseMaterial:
    """Two materials split by a per-element region mask.

    Realizes the piecewise coefficient definition of the split model on a
    single mesh (the monolithic reference of a two-material setup).  Only
    meaningful inside element-level assembly, where temperatures arrive as
    per-element arrays aligned with the mask.
    """

    inside: MaterialModel
    outside: MaterialModel
    mask: np.ndarray          # (n_elems,) bool, True = inside region

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool)
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)

    @property
    def is_constant(self) -> bool:
        return self.inside.is_constant and self.outside.is_constant

    @property
    def max_chi(self) -> float:
        return max(self.inside.chi, self.outside.chi)


# -- material file parsing ---------------------------------------------

_SCALAR_KEYS = {"rho", "chi", "T_solidus", "T_liquidus", "S"}
_TEMP_KEYS = {"T_solidus", "T_liquidus"}


def load_material(path) -> MaterialModel:
    """Parse a material file.

    Format: a `units K|C` header, scalar `key value` lines, and
    `[conductivity]` / `[heat_capacity]` sections of `T value` rows.
    SI units throughout; temperatures follow the declared unit.
    """
    path = Path(path)
    units = None
    scalars: dict[str, float] = {}
    tables: dict[str, list] = {"conductivity": [], "heat_capacity": []}
    section = None
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{path.name}:{lineno}"
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in tables:
                raise MaterialError(f"{where}: unknown section [{section}]")
            continue
        parts = line.replace(":", " ").split()
        if units is None:
            if parts[0] != "units" or len(parts) != 2 or parts[1] not in ("K", "C"):
                raise MaterialError(f"{where}: file must start with 'units K' or 'units C'")
            units = parts[1]
            continue
        if section is None:
            if len(parts) != 2 or parts[0] not in _SCALAR_KEYS:
                raise MaterialError(f"{where}: expected scalar key in {sorted(_SCALAR_KEYS)}")
            scalars[parts[0]] = float(parts[1])
        else:
            if len(parts) != 2:
                raise MaterialError(f"{where}: table rows are 'T value'")
            tables[section].append((float(parts[0]), float(parts[1])))

    if units is None:
        raise MaterialError(f"{path}: missing units header")
    missing = _SCALAR_KEYS - scalars.keys()
    if missing:
        raise MaterialError(f"{path}: missing scalar keys {sorted(missing)}")
    shift = KELVIN_OFFSET if units == "C" else 0.0
    for key in _TEMP_KEYS:
        scalars[key] += shift
    k_tab = np.array(tables["conductivity"], dtype=float).reshape(-1, 2)
    c_tab = np.array(tables["heat_capacity"], dtype=float).reshape(-1, 2)
    if k_tab.size:
        k_tab[:, 0] += shift
    if c_tab.size:
        c_tab[:, 0] += shift
    return MaterialModel(
        conductivity_table=k_tab,
        heat_capacity_table=c_tab,
        rho=scalars["rho"],
        chi=scalars["chi"],
        T_solidus=scalars["T_solidus"],
        T_liquidus=scalars["T_liquidus"],
        S=scalars["S"],
    )


def builtin_material_path(name: str) -> Path:
    """Path of a material file shipped with the package."""
    p = Path(__file__).parent / "data" / name
    if not p.exists():
        raise MaterialError(f"no builtin material file named {name}")
    return p
