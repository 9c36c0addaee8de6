"""YAML scenario files: loading with line tracking, includes, schema checks and builders.

A scenario file has the top-level sections listed in :data:`SCHEMA`. Any file
may pull shared blocks from others with ``include: path`` (or a list of paths,
relative to the including file); the including file wins on conflicts.
"""

from __future__ import annotations

import copy
import re
from pathlib import Path

import numpy as np
import yaml

from .control import ROUTING_PRESETS, IdaPbcParams
from .decomposition import DEFAULT_RANK_TOL
from .errors import ConfigError, ModelError
from .model import ConstantInertiaModel, Link, PlanarChain, SerialChain
from .ph import AnalyticDerivatives, FiniteDifferences
from .sim import ForcePulse, PulseExperiment, Scenario, TorqueWindow
from .task import ChainPositionTask, ConstantTask, PlanarPositionTask

# Leaf type tags understood by the checker.
FLOAT, INT, BOOL, STR, VECTOR, MATRIX, ARRAY, ANY = (
    "float", "int", "bool", "str", "vector", "matrix", "scalar-or-matrix", "any",
)

LINK_SCHEMA = {
    "mass": FLOAT, "com": VECTOR, "inertia": ANY, "axis": VECTOR, "offset": VECTOR, "rpy": VECTOR,
}

SCHEMA = {
    "include": ANY,
    "name": STR,
    "model": {
        "type": ("planar", "serial", "constant_inertia"),
        "lengths": VECTOR, "masses": VECTOR, "gravity": VECTOR, "joint_damping": VECTOR,
        "links": [LINK_SCHEMA], "tip": VECTOR, "inertia": MATRIX, "spring": MATRIX,
        "description": STR,
    },
    "task": {
        "type": ("planar_position", "chain_position", "constant"),
        "matrix": MATRIX, "components": VECTOR, "analytic_null": BOOL, "rank_tol": FLOAT,
    },
    "initial": {"q": VECTOR, "qdot": VECTOR},
    "controller": {
        "q_star": VECTOR, "x_star": VECTOR, "W": ARRAY, "W_metric": ("identity", "mass"),
        "D_t": ARRAY, "D_nu": ARRAY, "routing": tuple(ROUTING_PRESETS),
        "Gbar11": ANY, "Gbar12": ANY, "Gbar22": ANY,
    },
    "integrator": {
        "name": ("rk4",), "dt": FLOAT, "duration": FLOAT, "log_every": FLOAT,
        "backend": ("transformed", "canonical"),
        "derivatives": ("finite_differences", "finite_differences4", "analytic"),
    },
    "forces": [{"start": FLOAT, "duration": FLOAT, "F": VECTOR, "ramp": BOOL}],
    "torques": [{"start": FLOAT, "duration": FLOAT, "tau": VECTOR}],
    "experiment": {
        "q_stars": MATRIX, "stiffnesses": VECTOR, "force": VECTOR, "pulse_start": FLOAT,
        "pulse_duration": FLOAT, "duration": FLOAT, "log_every": FLOAT, "D_t": FLOAT,
        "D_nu": FLOAT, "routing": tuple(ROUTING_PRESETS), "workers": INT,
    },
    "verify": {
        "samples": INT, "seed": INT, "q_low": FLOAT, "q_high": FLOAT, "qdot_scale": FLOAT,
        "max_condition": FLOAT, "identity_n": BOOL, "transformation_law": BOOL,
    },
    "impedance": {
        "static_force": VECTOR, "settle_time": FLOAT, "ramp_force": VECTOR, "ramp_time": FLOAT,
    },
}


# --- YAML with line numbers ---------------------------------------------------

class LineDict(dict):
    """dict that remembers the source line of each key."""

    lines: dict
    source: str | None


class _Loader(yaml.SafeLoader):
    pass


# PyYAML follows YAML 1.1 and reads "5e-4" as a string; accept it as a float.
_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
                    |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
                    |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
                    |[-+]?\.(?:inf|Inf|INF)
                    |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."),
)


def _construct_mapping(loader, node):
    loader.flatten_mapping(node)
    out = LineDict()
    out.lines = {}
    out.source = getattr(loader, "source", None)
    for key_node, value_node in node.value:
        key = loader.construct_object(key_node, deep=True)
        out[key] = loader.construct_object(value_node, deep=True)
        out.lines[key] = key_node.start_mark.line + 1
    return out


_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


def parse_yaml(text, source=None):
    loader = _Loader(text)
    loader.source = source
    try:
        return loader.get_single_data()
    except yaml.YAMLError as exc:
        line = exc.problem_mark.line + 1 if getattr(exc, "problem_mark", None) else None
        raise ConfigError(f"YAML syntax error: {getattr(exc, 'problem', exc)}", path=source, line=line) from None
    finally:
        loader.dispose()


def _where(d, key):
    lines = getattr(d, "lines", {})
    return getattr(d, "source", None), lines.get(key)


def _merge(base, top):
    """Deep merge of mappings; ``top`` wins."""
    if not isinstance(base, dict) or not isinstance(top, dict):
        return top
    out = LineDict(base)
    out.lines = dict(getattr(base, "lines", {}))
    out.source = getattr(top, "source", getattr(base, "source", None))
    for k, v in top.items():
        out[k] = _merge(base[k], v) if k in base else v
        if k in getattr(top, "lines", {}):
            out.lines[k] = top.lines[k]
    return out


def load_config(path, _stack=()):
    """Read a scenario file, resolving includes (relative to the file)."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}", path=path)
    resolved = path.resolve()
    if resolved in _stack:
        raise ConfigError("circular include", path=path)
    data = parse_yaml(path.read_text(), str(path))
    if data is None:
        data = LineDict()
        data.lines, data.source = {}, str(path)
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", path=path)
    includes = data.pop("include", None)
    if includes is None:
        return data
    if isinstance(includes, str):
        includes = [includes]
    base = LineDict()
    base.lines, base.source = {}, str(path)
    for inc in includes:
        base = _merge(base, load_config(path.parent / inc, _stack + (resolved,)))
    return _merge(base, data)


# --- schema checking ----------------------------------------------------------

def _coerce(value, kind, name, where):
    src, line = where
    try:
        if kind == ANY:
            return value
        if isinstance(kind, tuple):
            if value not in kind:
                raise ConfigError(f"{name} must be one of {list(kind)}, got {value!r}", src, line, name)
            return value
        if kind == FLOAT:
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if kind == INT:
            if isinstance(value, bool) or int(value) != value:
                raise TypeError
            return int(value)
        if kind == BOOL:
            if not isinstance(value, bool):
                raise TypeError
            return value
        if kind == STR:
            if not isinstance(value, str):
                raise TypeError
            return value
        arr = np.asarray(value, dtype=float)
        if kind == VECTOR and arr.ndim != 1:
            raise TypeError
        if kind == MATRIX and arr.ndim != 2:
            raise TypeError
        if kind == ARRAY and arr.ndim not in (0, 2):
            raise TypeError
        if not np.all(np.isfinite(arr)):
            raise ConfigError(f"{name} contains non-finite values", src, line, name)
        return arr.tolist()
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a {kind}, got {value!r}", src, line, name) from None


def check(data, schema=SCHEMA, prefix=""):
    """Validate ``data`` against ``schema`` in place, coercing numeric leaves."""
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'} must be a mapping", field=prefix or None)
    for key in list(data):
        name = f"{prefix}{key}"
        where = _where(data, key)
        if key not in schema:
            valid = ", ".join(sorted(schema))
            raise ConfigError(f"unknown key {name!r}; valid keys: {valid}", *where, name)
        sub = schema[key]
        value = data[key]
        if isinstance(sub, dict):
            check(value, sub, name + ".")
        elif isinstance(sub, list):
            if not isinstance(value, list):
                raise ConfigError(f"{name} must be a list", *where, name)
            for i, item in enumerate(value):
                check(item, sub[0], f"{name}.{i}.")
        else:
            data[key] = _coerce(value, sub, name, where)
    return data


def _schema_at(parts):
    node = SCHEMA
    for i, part in enumerate(parts):
        if isinstance(node, list):
            node = node[0]
            if part.isdigit():
                continue
        if not isinstance(node, dict) or part not in node:
            valid = ", ".join(sorted(node)) if isinstance(node, dict) else "(none)"
            raise ConfigError(f"unknown override key {'.'.join(parts[:i + 1])!r}; valid keys: {valid}",
                              field=".".join(parts))
        node = node[part]
    return node


def apply_overrides(data, overrides):
    """Apply ``dotted.key=value`` strings (values parsed as YAML)."""
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        _schema_at(parts)
        value = parse_yaml(raw, "<override>")
        node = data
        for part in parts[:-1]:
            if isinstance(node, list):
                node = node[int(part)]
                continue
            if part not in node:
                node[part] = LineDict()
                node[part].lines, node[part].source = {}, "<override>"
            node = node[part]
        last = parts[-1]
        if isinstance(node, list):
            node[int(last)] = value
        else:
            node[last] = value
            if hasattr(node, "lines"):
                node.lines[last] = None
    return data


def load_scenario_config(path, overrides=()):
    data = load_config(path)
    apply_overrides(data, overrides)
    return check(data)


def plain(data):
    """Strip line-tracking types (for JSON echo)."""
    if isinstance(data, dict):
        return {k: plain(v) for k, v in data.items()}
    if isinstance(data, list):
        return [plain(v) for v in data]
    return data


# --- builders -----------------------------------------------------------------

def _require(section, key, name):
    if key not in section:
        src, _ = _where(section, key)
        raise ConfigError(f"missing required key {name}.{key}", path=src, field=f"{name}.{key}")
    return section[key]


def build_model(cfg):
    if "model" not in cfg:
        raise ConfigError("missing required section 'model'")
    sec = cfg["model"]
    kind = sec.get("type", "planar")
    try:
        if kind == "planar":
            kw = {}
            if "gravity" in sec:
                kw["gravity"] = sec["gravity"]
            return PlanarChain(_require(sec, "lengths", "model"), _require(sec, "masses", "model"),
                               joint_damping=sec.get("joint_damping"), **kw)
        if kind == "constant_inertia":
            return ConstantInertiaModel(_require(sec, "inertia", "model"), sec.get("spring"),
                                        sec.get("joint_damping"))
        links = []
        for i, item in enumerate(_require(sec, "links", "model")):
            kw = {k: item[k] for k in ("com", "inertia", "axis", "offset", "rpy") if k in item}
            links.append(Link(mass=_require(item, "mass", f"model.links.{i}"), **kw))
        kw = {"gravity": sec["gravity"]} if "gravity" in sec else {}
        return SerialChain(links, tip=sec.get("tip", (0.0, 0.0, 0.0)),
                           joint_damping=sec.get("joint_damping"), **kw)
    except (ModelError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid model: {exc}", path=getattr(sec, "source", None), field="model") from exc


def build_task(cfg, model):
    sec = cfg.get("task", {})
    kind = sec.get("type", "planar_position")
    try:
        if kind == "planar_position":
            if not isinstance(model, PlanarChain):
                raise ConfigError("task type planar_position needs a planar model", field="task.type")
            return PlanarPositionTask(model, analytic_null=sec.get("analytic_null", False))
        if kind == "chain_position":
            if not isinstance(model, SerialChain):
                raise ConfigError("task type chain_position needs a serial model", field="task.type")
            comps = tuple(int(c) for c in sec.get("components", (0, 1, 2)))
            return ChainPositionTask(model, comps)
        task = ConstantTask(_require(sec, "matrix", "task"))
        if task.n != model.n:
            raise ConfigError(f"task.matrix must have {model.n} columns", field="task.matrix")
        return task
    except ModelError as exc:
        raise ConfigError(f"invalid task: {exc}", field="task") from exc


def rank_tol(cfg):
    return cfg.get("task", {}).get("rank_tol", DEFAULT_RANK_TOL)


def build_derivatives(cfg):
    kind = cfg.get("integrator", {}).get("derivatives", "finite_differences")
    if kind == "analytic":
        return AnalyticDerivatives()
    if kind == "finite_differences4":
        return FiniteDifferences(1e-3, order=4)
    return FiniteDifferences()


def _vec(value, size, name):
    arr = np.asarray(value, dtype=float)
    if arr.shape != (size,):
        raise ConfigError(f"{name} must have {size} entries, got {arr.size}", field=name)
    return arr


def build_params(cfg, model, task):
    sec = cfg.get("controller")
    if sec is None:
        return None
    q_star = _vec(_require(sec, "q_star", "controller"), model.n, "controller.q_star")
    routing = sec.get("routing", "simulation")
    blocks = dict(zip(("Gbar11", "Gbar12", "Gbar22"), ROUTING_PRESETS[routing]))
    for key in blocks:
        if key in sec:
            blocks[key] = sec[key]
    W = np.asarray(sec.get("W", 7.0), dtype=float)
    if sec.get("W_metric", "identity") == "mass":
        if W.ndim != 0:
            raise ConfigError("W_metric: mass needs a scalar W", field="controller.W")
        W = float(W) * model.mass_matrix(q_star)
    x_star = sec.get("x_star")
    if x_star is not None:
        x_star = _vec(x_star, task.m, "controller.x_star")
    return IdaPbcParams(q_star=q_star, W=W, D_t=sec.get("D_t", 9.0), D_nu=sec.get("D_nu", 6.0),
                        m=task.m, x_star=x_star, **blocks)


def build_scenario(cfg, name="run"):
    model = build_model(cfg)
    task = build_task(cfg, model)
    params = build_params(cfg, model, task)
    init = cfg.get("initial", {})
    if "q" in init:
        q0 = _vec(init["q"], model.n, "initial.q")
    elif params is not None:
        q0 = params.q_star
    else:
        raise ConfigError("missing required key initial.q", field="initial.q")
    qdot0 = _vec(init.get("qdot", np.zeros(model.n)), model.n, "initial.qdot")
    integ = cfg.get("integrator", {})
    forces = [ForcePulse(f["start"], f["duration"], tuple(f["F"]), f.get("ramp", False))
              for f in cfg.get("forces", [])]
    torques = [TorqueWindow(t["start"], t["duration"], tuple(t["tau"])) for t in cfg.get("torques", [])]
    if params is not None and torques:
        raise ConfigError("torque schedules apply to open-loop runs only", field="torques")
    return Scenario(
        model=model, task=task, q0=q0, qdot0=qdot0,
        dt=integ.get("dt", 1e-3), duration=integ.get("duration", 1.0),
        log_every=integ.get("log_every"), controller=params, forces=forces, torques=torques,
        integrator=integ.get("name", "rk4"), backend=integ.get("backend", "transformed"),
        derivatives=build_derivatives(cfg), rank_tol=rank_tol(cfg), name=cfg.get("name", name),
    )


def build_experiment(cfg, workers=None):
    model = build_model(cfg)
    task = build_task(cfg, model)
    sec = cfg.get("experiment")
    if sec is None:
        raise ConfigError("missing required section 'experiment'")
    q_stars = np.asarray(_require(sec, "q_stars", "experiment"), dtype=float)
    if q_stars.shape != (2, model.n):
        raise ConfigError(f"experiment.q_stars must be 2 x {model.n}", field="experiment.q_stars")
    x0 = task.forward(q_stars[0]) if task.integrable else None
    if x0 is not None and np.linalg.norm(task.forward(q_stars[1]) - x0) > 1e-9 * max(1.0, np.linalg.norm(x0)):
        raise ConfigError("experiment.q_stars must reach the same task target", field="experiment.q_stars")
    integ = cfg.get("integrator", {})
    kw = {k: sec[k] for k in ("pulse_start", "pulse_duration", "duration", "log_every",
                               "D_t", "D_nu", "routing") if k in sec}
    stiff = tuple(sec.get("stiffnesses", (7.0, 30.0)))
    if len(stiff) != 2:
        raise ConfigError("experiment.stiffnesses needs two values", field="experiment.stiffnesses")
    force = sec.get("force")
    if force is not None and len(force) != task.m:
        raise ConfigError(f"experiment.force must have {task.m} entries", field="experiment.force")
    return PulseExperiment(
        model=model, task=task, q_stars=tuple(q_stars), stiffnesses=stiff,
        force=None if force is None else tuple(force), dt=integ.get("dt", 1e-3),
        backend=integ.get("backend", "transformed"), derivatives=build_derivatives(cfg),
        workers=workers if workers is not None else sec.get("workers", 1), **kw,
    )
