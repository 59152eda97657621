"""File formats: density fields, legacy VTK export and the run configuration."""
from __future__ import annotations

import configparser
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mesh import TetMesh


class ConfigError(ValueError):
    pass


# -- density files --------------------------------------------------------

def write_density(path, density, mesh: TetMesh):
    """One value per line in element order, after a ``# mesh <hash> <m>`` header."""
    density = np.asarray(density, dtype=float)
    if density.shape != (mesh.n_elements,):
        raise ValueError(f"density must have length {mesh.n_elements}")
    path = Path(path)
    with path.open("w") as fh:
        fh.write(f"# mesh {mesh.hash} {mesh.n_elements}\n")
        fh.writelines(f"{v:.17g}\n" for v in density)
    return path


def read_density(path, mesh: TetMesh) -> np.ndarray:
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().split()
        if len(header) != 4 or header[:2] != ["#", "mesh"]:
            raise ValueError(f"{path}:1: expected '# mesh <hash> <count>' header")
        if header[2] != mesh.hash:
            raise ValueError(f"{path}:1: density was written for mesh {header[2]}, not {mesh.hash}")
        values = np.loadtxt(fh, ndmin=1)
    if values.shape != (mesh.n_elements,):
        raise ValueError(f"{path}: expected {mesh.n_elements} values, found {values.size}")
    return values


# -- legacy VTK -----------------------------------------------------------

def write_vtk(path, mesh: TetMesh, cell_data=None, point_data=None, title="lightweight"):
    """Legacy ASCII unstructured grid with tetrahedra (cell type 10).

    ``point_data`` arrays may have length n or be dicts ``{node: value}``;
    missing nodes get 0.
    """
    path = Path(path)
    n, m = mesh.n_nodes, mesh.n_elements
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID", f"POINTS {n} double"]
    lines += [f"{x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.nodes]
    lines.append(f"CELLS {m} {5 * m}")
    lines += [f"4 {a} {b} {c} {d}" for a, b, c, d in mesh.tets]
    lines.append(f"CELL_TYPES {m}")
    lines += ["10"] * m

    def block(kind, count, data):
        if not data:
            return []
        out = [f"{kind} {count}"]
        for name, values in data.items():
            if isinstance(values, dict):
                arr = np.zeros(count)
                arr[list(values)] = list(values.values())
                values = arr
            values = np.asarray(values, dtype=float)
            if values.shape != (count,):
                raise ValueError(f"{name}: expected {count} values")
            out += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            out += [f"{v:.9g}" for v in values]
        return out

    lines += block("CELL_DATA", m, cell_data)
    lines += block("POINT_DATA", n, point_data)
    path.write_text("\n".join(lines) + "\n")
    return path


# -- node predicates --------------------------------------------------------

_TERM = re.compile(r"^\s*([xyz])\s*(<=|>=|<|>)\s*([-+0-9.eE]+|[-+]?inf)\s*$")


def parse_predicate(text: str):
    """Compile ``"z < 0.01 and x > 2 or x > 20"`` into ``f(x, y, z) -> bool array``.

    ``and`` binds tighter than ``or``; no parentheses.
    """
    ops = {"<": np.less, "<=": np.less_equal, ">": np.greater, ">=": np.greater_equal}
    clauses = []
    for clause in re.split(r"\bor\b", text):
        terms = []
        for term in re.split(r"\band\b", clause):
            mt = _TERM.match(term)
            if not mt:
                raise ConfigError(f"cannot parse predicate term {term.strip()!r}")
            axis, op, value = mt.groups()
            terms.append(("xyz".index(axis), ops[op], float(value)))
        clauses.append(terms)

    def predicate(x, y, z):
        cols = (x, y, z)
        out = np.zeros(np.shape(x), bool)
        for terms in clauses:
            hit = np.ones(np.shape(x), bool)
            for axis, op, value in terms:
                hit &= op(cols[axis], value)
            out |= hit
        return out

    return predicate


# -- run configuration ------------------------------------------------------

def _auto_float(v):
    return None if v.strip().lower() == "auto" else float(v)


def _auto_int(v):
    return None if v.strip().lower() == "auto" else int(v)


def _int_list(v):
    return [int(t) for t in v.replace(",", " ").split()]


def _str(v):
    return v.strip()


# section -> key -> (parser, default)
SCHEMA = {
    "mesh": {"model": (_str, ""), "node_file": (_str, ""), "ele_file": (_str, "")},
    "material": {"youngs_modulus": (float, 2100.0), "poisson_ratio": (float, 0.3),
                 "yield_strength": (float, 50.0), "simp_exponent": (float, 3.0),
                 "void_fraction": (float, 1e-8), "stress_exponent": (_auto_float, None)},
    "regions": {"fixed_nodes": (_int_list, []), "fixed_where": (_str, ""),
                "contact_nodes": (_int_list, []), "contact_where": (_str, ""),
                "shell_thickness": (_auto_float, None)},
    "load": {"force_budget": (float, 1.0), "patch_radius": (_auto_float, None)},
    "surrogate": {"sample_fraction": (float, 0.05), "q": (_auto_int, None), "ridge": (float, 1e-6),
                  "fr_fraction": (float, 0.10)},
    "weak_regions": {"modes": (int, 15), "fraction": (float, 0.025), "mass_floor": (_auto_float, None)},
    "reduction": {"k": (int, 15), "steepness": (float, 5.0), "inflection": (float, 2.0),
                  "threshold": (float, 0.5), "cache_dir": (_str, "")},
    "optimizer": {"max_iters": (int, 300), "tol_mass": (float, 1e-4), "patience": (int, 3),
                  "trust_radius": (float, 0.5), "trust_max": (float, 1.0), "trust_min": (float, 1e-6),
                  "feas_tol": (float, 0.01), "pnorm": (float, 15.0), "cache_size": (int, 3),
                  "verify_tol": (float, 0.05), "sharpen": (int, 4),
                  "penalty_step": (float, 1.0)},
    "output": {"directory": (_str, "out"), "seed": (int, 0), "density_file": (_str, "")},
}

_POSITIVE = {("material", "youngs_modulus"), ("material", "yield_strength"), ("material", "void_fraction"),
             ("weak_regions", "modes"), ("reduction", "k"), ("reduction", "steepness"),
             ("optimizer", "trust_radius"), ("optimizer", "trust_max"), ("optimizer", "trust_min"),
             ("optimizer", "pnorm"), ("optimizer", "tol_mass"), ("optimizer", "patience"),
             ("optimizer", "cache_size"), ("optimizer", "penalty_step"), ("surrogate", "ridge"), ("regions", "shell_thickness"),
             ("load", "patch_radius")}
_FRACTIONS = {("surrogate", "sample_fraction"), ("surrogate", "fr_fraction"), ("weak_regions", "fraction"),
              ("reduction", "threshold")}


@dataclass
class RunConfig:
    """Parsed configuration: ``values[section][key]`` plus where it came from."""

    values: dict = field(default_factory=dict)
    source: str = "<defaults>"
    base_dir: Path = Path(".")

    def __getitem__(self, section):
        return self.values[section]

    def get(self, section, key):
        return self.values[section][key]

    def as_text(self) -> str:
        """Echo in the config file format (round-trips through :func:`load_config`)."""
        out = []
        for section, keys in self.values.items():
            out.append(f"[{section}]")
            for key, value in keys.items():
                if value is None:
                    value = "auto"
                elif isinstance(value, list):
                    value = " ".join(map(str, value))
                out.append(f"{key} = {value}")
            out.append("")
        return "\n".join(out)

    def path(self, value) -> Path | None:
        if not value:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p


def _parse_value(section, key, raw, where):
    if section not in SCHEMA:
        raise ConfigError(f"{where}: unknown section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigError(f"{where}: unknown key '{key}' in [{section}]")
    parser = SCHEMA[section][key][0]
    try:
        return parser(raw)
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {section}.{key}: {raw!r} ({exc})") from None


def _validate(values, where):
    for section, key in _POSITIVE:
        v = values[section][key]
        if v is not None and not v > 0:
            raise ConfigError(f"{where}: {section}.{key} must be positive")
    for section, key in _FRACTIONS:
        v = values[section][key]
        if not 0 < v <= 1:
            raise ConfigError(f"{where}: {section}.{key} must be in (0, 1]")
    floor = values["weak_regions"]["mass_floor"]
    if floor is not None and not 0 < floor <= 1:
        raise ConfigError(f"{where}: weak_regions.mass_floor must be auto or in (0, 1]")
    if values["load"]["force_budget"] < 0:
        raise ConfigError(f"{where}: load.force_budget must be non-negative")
    if values["optimizer"]["sharpen"] < 0:
        raise ConfigError(f"{where}: optimizer.sharpen must be non-negative")
    if values["optimizer"]["max_iters"] < 0:
        raise ConfigError(f"{where}: optimizer.max_iters must be non-negative")
    if not 0 <= values["material"]["poisson_ratio"] < 0.5:
        raise ConfigError(f"{where}: material.poisson_ratio must be in [0, 0.5)")
    mesh = values["mesh"]
    if not mesh["model"] and not (mesh["node_file"] and mesh["ele_file"]):
        raise ConfigError(f"{where}: [mesh] needs either model or node_file and ele_file")


def load_config(path=None, overrides=()) -> RunConfig:
    """Read an INI-style config; ``overrides`` are ``section.key=value`` strings."""
    values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    where, base = "<defaults>", Path(".")
    if path is not None:
        path = Path(path)
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        cp.optionxform = str
        try:
            with path.open() as fh:
                cp.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in cp.sections():
            for key, raw in cp.items(section):
                values.setdefault(section, {})
                values[section][key] = _parse_value(section, key, raw, f"{path} [{section}] {key}")
        where, base = str(path), path.parent
    for item in overrides:
        name, sep, raw = item.partition("=")
        section, dot, key = name.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        values[section][key] = _parse_value(section, key, raw, f"override {item!r}")
    _validate(values, where)
    return RunConfig(values, where, base)


def is_finite(x) -> bool:
    return x is not None and math.isfinite(x)
