"""Experiment configuration files.

Flat `key value... [unit]` lines grouped into [sections].  Geometry keys
carry an optional trailing unit token (mm, um, ms, C, mm/s); everything is
normalized to SI and Kelvin on load.  Unknown sections or keys are
rejected so a typo cannot silently change an experiment.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fem import SolverSettings
from .materials import KELVIN_OFFSET, MaterialModel, builtin_material_path, load_material
from .mesh import Box
from .scanpath import LocalDomainPolicy, ScanPath, build_alternating_path, path_from_segments
from .sources import STEFAN_BOLTZMANN, LaserBeam, ThermalBC
from .twolevel import CouplingSettings

PAPER_SIGMA_SB = 5.87e-8       # printed constant, kept for strict replication
PAPER_SPEED_2D = 0.01e-3       # m/s, the printed two-dimensional scan speed


class ConfigError(ValueError):
    pass


_LENGTH = {"m": 1.0, "mm": 1e-3, "um": 1e-6}
_TIME = {"s": 1.0, "ms": 1e-3}
_SPEED = {"m/s": 1.0, "mm/s": 1e-3}
_TEMP = {"K", "C"}

# kind -> (unit table or None, arity); arity None = any length
_SCHEMA = {
    "domain": {
        "dimension": ("int", 1),
        "global_min": ("length", None),
        "global_max": ("length", None),
        "local_min": ("length", None),
        "local_max": ("length", None),
    },
    "mesh": {
        "h_global": ("length", 1),
        "h_local": ("length", 1),
        "h_reference": ("length", 1),
    },
    "material": {
        "file": ("str", 1),
        "local_file": ("str", 1),
        "chi_override": ("float", 1),
        "global_kappa_scale": ("float", 1),
    },
    "laser": {
        "power": ("float", 1),
        "absorptivity": ("float", 1),
        "radius": ("length", 1),
        "depth": ("length", 1),
    },
    "bc": {
        "h_conv": ("float", 1),
        "emissivity": ("float", 1),
        "T_ambient": ("temperature", 1),
        "T_buildplate": ("temperature", 1),
        "T_initial": ("temperature", 1),
        "sigma_sb": ("float", 1),
    },
    "path": {
        "type": ("str", 1),
        "speed": ("speed", 1),
        "segment": ("length", None),       # x0 y0 [z0] x1 y1 [z1], repeatable
        "tracks": ("int", 1),
        "track_length": ("length", 1),
        "hatch": ("length", 1),
        "origin": ("length", None),
    },
    "local_domain": {
        "size": ("length", None),
        "laser_fraction": ("float", 1),
        "snap": ("length", 1),
    },
    "schedule": {
        "t_end": ("time", 1),
        "dt_macro": ("time", 1),
        "micro_steps": ("int", 1),
        "dt_micro": ("time", 1),
        "dt_reference": ("time", 1),
    },
    "coupling": {
        "omega": ("float", 1),
        "tolerance": ("float", 1),
        "max_iterations": ("int", 1),
        "mode": ("str", 1),
    },
    "solver": {
        "picard_tol": ("float", 1),
        "picard_max": ("int", 1),
        "linear": ("str", 1),
        "linear_tol": ("float", 1),
    },
    "experiment": {
        "mode": ("str", 1),
        "dt_macro_list": ("time", None),
        "dt_micro_list": ("time", None),
        "control_line_y": ("length", 1),
        "centerline_y": ("length", 1),
        "centerline_z": ("length", 1),
        "source_global": ("str", 1),
        "latent_reference": ("str", 1),
        "snapshots": ("str", 1),
    },
}

_MODES = ("reference", "two-level-space", "two-level-spacetime",
          "convergence-study", "compare")


def _convert(kind: str, tokens: list, where: str):
    if kind == "str":
        return tokens[0] if len(tokens) == 1 else tokens
    if kind == "int":
        try:
            return int(tokens[0])
        except ValueError as exc:
            raise ConfigError(f"{where}: expected an integer, got {tokens[0]!r}") from exc
    unit_table = {"length": _LENGTH, "time": _TIME, "speed": _SPEED}.get(kind)
    scale = 1.0
    shift = 0.0
    if tokens and tokens[-1] in (unit_table or {}):
        scale = unit_table[tokens[-1]]
        tokens = tokens[:-1]
    elif kind == "temperature" and tokens and tokens[-1] in _TEMP:
        shift = KELVIN_OFFSET if tokens[-1] == "C" else 0.0
        tokens = tokens[:-1]
    try:
        vals = [float(t) * scale + shift for t in tokens]
    except ValueError as exc:
        raise ConfigError(f"{where}: expected numbers, got {tokens!r}") from exc
    return vals[0] if len(vals) == 1 else vals


def parse_config_text(text: str, name: str = "<config>") -> dict:
    """Parse sectioned key-value text into {section: {key: value-or-list}}.

    Repeatable keys (path segments) collect into a list of values.
    """
    out: dict = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{name}:{lineno}"
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SCHEMA:
                raise ConfigError(f"{where}: unknown section [{section}]")
            out.setdefault(section, {})
            continue
        if section is None:
            raise ConfigError(f"{where}: key outside any [section]")
        parts = line.split()
        key, tokens = parts[0], parts[1:]
        if key not in _SCHEMA[section]:
            raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
        kind, arity = _SCHEMA[section][key]
        if not tokens:
            raise ConfigError(f"{where}: key {key!r} has no value")
        value = _convert(kind, tokens, where)
        if arity == 1 and isinstance(value, list):
            raise ConfigError(f"{where}: key {key!r} takes a single value")
        if key == "segment":
            out[section].setdefault(key, []).append(value)
        elif key in out[section]:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        else:
            out[section][key] = value
    return out


@dataclass
class ExperimentConfig:
    """Validated, SI-normalized experiment description."""

    dimension: int
    global_box: Box
    local_box: Box | None
    h_global: float
    h_local: float
    h_reference: float
    material: MaterialModel
    material_local: MaterialModel
    beam: LaserBeam
    bc: ThermalBC
    path: ScanPath
    policy: LocalDomainPolicy | None
    t_end: float
    dt_macro: float
    micro_steps: int
    dt_reference: float
    coupling: CouplingSettings
    coupling_mode: str
    solver: SolverSettings
    mode: str
    dt_macro_list: list = field(default_factory=list)
    dt_micro_list: list = field(default_factory=list)
    control_line_y: float | None = None
    centerline_y: float | None = None
    centerline_z: float | None = None
    source_global: str = "gaussian"
    latent_reference: str = "everywhere"
    snapshots: str = "macro"
    T_initial: float = 298.15
    strict_paper: bool = False

    @property
    def dt_micro(self) -> float:
        return self.dt_macro / self.micro_steps


def _require(section: dict, name: str, key: str):
    if key not in section:
        raise ConfigError(f"missing required key {key!r} in [{name}]")
    return section[key]


def _as_floats(v) -> list:
    return [v] if isinstance(v, float) else list(v)


def load_config(path, strict_paper: bool = False) -> ExperimentConfig:
    """Load and validate an experiment config file.

    strict_paper replaces the Stefan-Boltzmann constant and the 2D scan
    speed with the printed literature values.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    raw = parse_config_text(text, name=path.name)

    dom = raw.get("domain", {})
    dim = _require(dom, "domain", "dimension")
    if dim not in (2, 3):
        raise ConfigError("dimension must be 2 or 3")
    gmin = _as_floats(_require(dom, "domain", "global_min"))
    gmax = _as_floats(_require(dom, "domain", "global_max"))
    if len(gmin) != dim or len(gmax) != dim:
        raise ConfigError(f"global box corners must have {dim} coordinates")
    global_box = Box(tuple(gmin), tuple(gmax))
    local_box = None
    if "local_min" in dom or "local_max" in dom:
        lmin = _as_floats(_require(dom, "domain", "local_min"))
        lmax = _as_floats(_require(dom, "domain", "local_max"))
        local_box = Box(tuple(lmin), tuple(lmax))

    mesh_sec = raw.get("mesh", {})
    h_global = _require(mesh_sec, "mesh", "h_global")
    h_local = mesh_sec.get("h_local", h_global)
    h_reference = mesh_sec.get("h_reference", h_local)

    mat_sec = raw.get("material", {})
    mat_file = _require(mat_sec, "material", "file")
    material = _load_material_file(mat_file, path.parent)
    if "chi_override" in mat_sec:
        chi = mat_sec["chi_override"]
        if chi < 0:
            raise ConfigError("chi_override must be nonnegative")
        material = material.with_chi(chi)
    material_local = material
    if "local_file" in mat_sec:
        material_local = _load_material_file(mat_sec["local_file"], path.parent)
        if "chi_override" in mat_sec:
            material_local = material_local.with_chi(mat_sec["chi_override"])
    if "global_kappa_scale" in mat_sec:
        # coarse level as an effective medium; the fine level keeps the table
        material = material.with_conductivity_scaled(mat_sec["global_kappa_scale"])

    bc_sec = raw.get("bc", {})
    sigma = bc_sec.get("sigma_sb", STEFAN_BOLTZMANN)
    if strict_paper:
        sigma = PAPER_SIGMA_SB
    T_amb = bc_sec.get("T_ambient", 298.15)
    bc = ThermalBC(
        h_conv=bc_sec.get("h_conv", 10.0),
        emissivity=bc_sec.get("emissivity", 0.8),
        T_ambient=T_amb,
        T_buildplate=bc_sec.get("T_buildplate", T_amb),
        sigma_sb=sigma,
    )
    T_initial = bc_sec.get("T_initial", bc.T_buildplate)

    path_sec = raw.get("path", {})
    speed = _require(path_sec, "path", "speed")
    if strict_paper and dim == 2:
        speed = PAPER_SPEED_2D
    ptype = path_sec.get("type", "segments")
    if ptype == "segments":
        segs = path_sec.get("segment")
        if not segs:
            raise ConfigError("path type 'segments' needs at least one 'segment'")
        triples = []
        for seg in segs:
            seg = _as_floats(seg)
            if len(seg) != 2 * dim:
                raise ConfigError(f"segment needs {2 * dim} coordinates, got {len(seg)}")
            triples.append((tuple(seg[:dim]), tuple(seg[dim:]), speed))
        scan = path_from_segments(triples)
    elif ptype == "alternating":
        origin = _as_floats(_require(path_sec, "path", "origin"))
        if len(origin) != dim:
            raise ConfigError(f"path origin needs {dim} coordinates")
        scan = build_alternating_path(
            n_tracks=_require(path_sec, "path", "tracks"),
            track_length=_require(path_sec, "path", "track_length"),
            hatch=path_sec.get("hatch", 0.1e-3),
            speed=speed,
            origin=origin,
            bounding_box=global_box,
        )
    else:
        raise ConfigError(f"unknown path type {ptype!r}")

    laser_sec = raw.get("laser", {})
    beam = LaserBeam(
        power=_require(laser_sec, "laser", "power"),
        absorptivity=laser_sec.get("absorptivity", 1.0),
        radius=_require(laser_sec, "laser", "radius"),
        depth=_require(laser_sec, "laser", "depth"),
        speed=speed,
    )

    policy = None
    if "local_domain" in raw:
        ld = raw["local_domain"]
        size = _as_floats(_require(ld, "local_domain", "size"))
        if len(size) != dim:
            raise ConfigError(f"local_domain size needs {dim} entries")
        snap = ld.get("snap")
        policy = LocalDomainPolicy(
            box_size=tuple(size),
            laser_fraction=ld.get("laser_fraction", 2.0 / 3.0),
            snap=(snap,) * dim if snap is not None else None,
        )
    if policy is None and local_box is None:
        raise ConfigError("need either [domain] local_min/max or a [local_domain] policy")

    sched = raw.get("schedule", {})
    t_end = _require(sched, "schedule", "t_end")
    dt_macro = _require(sched, "schedule", "dt_macro")
    if "micro_steps" in sched and "dt_micro" in sched:
        raise ConfigError("give micro_steps or dt_micro, not both")
    if "dt_micro" in sched:
        ratio = dt_macro / sched["dt_micro"]
        if abs(ratio - round(ratio)) > 1e-9 * ratio:
            raise ConfigError("dt_micro must divide dt_macro")
        micro_steps = int(round(ratio))
    else:
        micro_steps = sched.get("micro_steps", 1)
    dt_reference = sched.get("dt_reference", dt_macro / micro_steps)

    coup = raw.get("coupling", {})
    coupling = CouplingSettings(
        omega=coup.get("omega", 1.0),
        tolerance=coup.get("tolerance", 1e-6),
        max_iterations=coup.get("max_iterations", 50),
    )
    coupling_mode = coup.get("mode", "alternate")
    if coupling_mode not in ("alternate", "full"):
        raise ConfigError(f"unknown coupling mode {coupling_mode!r}")

    sol = raw.get("solver", {})
    solver = SolverSettings(
        picard_tol=sol.get("picard_tol", 1e-8),
        picard_max_iter=sol.get("picard_max", 25),
        linear_tol=sol.get("linear_tol", 1e-10),
        linear_solver=sol.get("linear", "direct"),
    )

    exp = raw.get("experiment", {})
    mode = exp.get("mode", "two-level-spacetime")
    if mode not in _MODES:
        raise ConfigError(f"unknown experiment mode {mode!r}; pick from {_MODES}")
    source_global = exp.get("source_global", "gaussian" if dim == 2 else "distributed")
    if source_global not in ("gaussian", "distributed"):
        raise ConfigError(f"unknown global source kind {source_global!r}")
    if source_global == "distributed" and dim == 2:
        raise ConfigError("the distributed source is a 3D model")
    latent_reference = exp.get("latent_reference", "everywhere")
    if latent_reference not in ("everywhere", "local", "off"):
        raise ConfigError(f"unknown latent_reference {latent_reference!r}")
    snapshots = exp.get("snapshots", "macro")
    if snapshots not in ("all", "macro", "none"):
        raise ConfigError(f"unknown snapshots cadence {snapshots!r}")

    cfg = ExperimentConfig(
        dimension=dim,
        global_box=global_box,
        local_box=local_box,
        h_global=h_global,
        h_local=h_local,
        h_reference=h_reference,
        material=material,
        material_local=material_local,
        beam=beam,
        bc=bc,
        path=scan,
        policy=policy,
        t_end=t_end,
        dt_macro=dt_macro,
        micro_steps=micro_steps,
        dt_reference=dt_reference,
        coupling=coupling,
        coupling_mode=coupling_mode,
        solver=solver,
        mode=mode,
        dt_macro_list=_as_floats(exp["dt_macro_list"]) if "dt_macro_list" in exp else [],
        dt_micro_list=_as_floats(exp["dt_micro_list"]) if "dt_micro_list" in exp else [],
        control_line_y=exp.get("control_line_y"),
        centerline_y=exp.get("centerline_y"),
        centerline_z=exp.get("centerline_z"),
        source_global=source_global,
        latent_reference=latent_reference,
        snapshots=snapshots,
        T_initial=T_initial,
        strict_paper=strict_paper,
    )
    _validate(cfg)
    return cfg


def _load_material_file(name: str, config_dir: Path) -> MaterialModel:
    cand = Path(name)
    if not cand.is_absolute():
        local = config_dir / cand
        if local.exists():
            cand = local
        else:
            cand = builtin_material_path(name)
    return load_material(cand)


def _validate(cfg: ExperimentConfig):
    if cfg.local_box is not None:
        lo = np.asarray(cfg.local_box.lo)
        hi = np.asarray(cfg.local_box.hi)
        glo = np.asarray(cfg.global_box.lo)
        ghi = np.asarray(cfg.global_box.hi)
        if not (np.all(lo[:-1] > glo[:-1]) and np.all(hi[:-1] < ghi[:-1])):
            raise ConfigError("local box must be strictly inside the global box laterally")
        if abs(hi[-1] - ghi[-1]) > 1e-12 * max(abs(ghi[-1]), 1.0):
            raise ConfigError("local box top must ride on the global top surface")
    span = cfg.t_end / cfg.dt_macro
    if abs(span - round(span)) > 1e-9 * max(span, 1.0):
        raise ConfigError("t_end must be an integer number of macro steps")
    ratio = cfg.dt_micro / cfg.dt_reference
    if abs(ratio - round(ratio)) > 1e-9 * max(ratio, 1.0):
        raise ConfigError("the reference step must refine the micro step")


def builtin_config_path(name: str) -> Path:
    p = Path(__file__).parent / "configs" / name
    if not p.exists():
        raise ConfigError(f"no builtin config named {name}")
    return p
