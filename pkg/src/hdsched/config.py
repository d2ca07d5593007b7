"""JSON experiment configs: schema validation, presets and sweeps.

Schema (all matrices are nested lists)::

    plant:   A, B, K, Q, R, v
    channel: kind = "static" with ps, pc
             kind = "markov" with omega, xi, Ds, Dc (row-stochastic)
    policy:  kind, a name or a list of names
    sim:     K, replications, seed, x0[, window, growth]
    mdp:     bound, tol, max_iter
    sweep:   grid = {dotted key: [values]}[, cases = [{dotted key: value}]]

Errors are raised as ``ConfigError`` naming the offending key and, when
the text is available, its line.
"""

import copy
import itertools
import json
import re
from importlib import resources

import numpy as np

from .policies import SCHEDULERS
from .simulator import ExperimentConfig

SECTIONS = ("plant", "channel", "policy", "sim", "mdp", "sweep", "name", "description")
SWEEPABLE = {"channel.ps", "channel.pc", "plant.v", "plant.K", "mdp.bound", "sim.K", "sim.replications"}


class ConfigError(ValueError):
    def __init__(self, key, message, line=None):
        self.key = key
        self.line = line
        where = f" (line {line})" if line else ""
        super().__init__(f"{key}{where}: {message}")


def _line_of(text, key):
    if not text:
        return None
    leaf = key.rsplit(".", 1)[-1]
    m = re.search(r'"' + re.escape(leaf) + r'"\s*:', text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _matrix(val, key):
    try:
        arr = np.array(val, dtype=float)
    except (TypeError, ValueError):
        raise ValueError("must be a numeric matrix") from None
    if arr.ndim not in (1, 2) or arr.size == 0 or not np.all(np.isfinite(arr)):
        raise ValueError("must be a non-empty finite numeric matrix")
    return arr


def _prob(val, lo_open=True, hi_open=True):
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ValueError(f"must be a number, got {val!r}")
    lo_ok = val > 0 if lo_open else val >= 0
    hi_ok = val < 1 if hi_open else val <= 1
    if not (lo_ok and hi_ok):
        interval = ("(" if lo_open else "[") + "0, 1" + (")" if hi_open else "]")
        raise ValueError(f"must lie in {interval}, got {val}")


def _int(val, lo):
    if isinstance(val, bool) or not isinstance(val, int) or val < lo:
        raise ValueError(f"must be an integer >= {lo}, got {val!r}")


def _check_fields(d):
    """Yield ``(key, check)`` for every schema field present in ``d``."""
    plant = d.get("plant", {})
    for k in ("A", "B", "K", "Q", "R"):
        if k in plant:
            yield f"plant.{k}", lambda v=plant[k], k=k: _matrix(v, k)
    if "v" in plant:
        yield "plant.v", lambda: _int(plant["v"], 1)
    ch = d.get("channel", {})
    kind = ch.get("kind", "static")
    if kind == "static":
        for k in ("ps", "pc"):
            if k in ch:
                yield f"channel.{k}", lambda v=ch[k]: _prob(v)
    elif kind == "markov":
        for k in ("omega", "xi"):
            if k in ch:
                yield f"channel.{k}", lambda v=ch[k]: [_prob(x, False, False) for x in np.ravel(v).tolist()]
        for k in ("Ds", "Dc"):
            if k in ch:
                yield f"channel.{k}", lambda v=ch[k]: _matrix(v, k)
    pol = d.get("policy", {})
    if "kind" in pol:
        def kinds():
            names = [pol["kind"]] if isinstance(pol["kind"], str) else pol["kind"]
            if not isinstance(names, list) or not names:
                raise ValueError("must be a policy name or a non-empty list of names")
            for name in names:
                if name not in SCHEDULERS:
                    raise ValueError(f"unknown policy {name!r}; choose from {sorted(SCHEDULERS)}")
        yield "policy.kind", kinds
    sim = d.get("sim", {})
    for k, lo in (("K", 1), ("replications", 1), ("seed", 0), ("window", 1)):
        if k in sim:
            yield f"sim.{k}", lambda v=sim[k], lo=lo: _int(v, lo)
    if "x0" in sim:
        yield "sim.x0", lambda: _matrix(sim["x0"], "x0")
    mdp = d.get("mdp", {})
    if "bound" in mdp:
        yield "mdp.bound", lambda: _int(mdp["bound"], 3)
    if "max_iter" in mdp:
        yield "mdp.max_iter", lambda: _int(mdp["max_iter"], 1)
    if "tol" in mdp:
        def tol():
            if not isinstance(mdp["tol"], (int, float)) or mdp["tol"] <= 0:
                raise ValueError(f"must be a positive number, got {mdp['tol']!r}")
        yield "mdp.tol", tol


def parse_config(d, text=None):
    """Validate a config mapping and build an ``ExperimentConfig``."""
    if not isinstance(d, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    if "resolved_config" in d:  # a run manifest
        d = d["resolved_config"]
    for key in d:
        if key not in SECTIONS:
            raise ConfigError(key, f"unknown section; expected one of {list(SECTIONS)}", _line_of(text, key))
    for sec in ("plant", "channel"):
        if sec not in d:
            raise ConfigError(sec, "section is required")
    for sec in ("plant", "channel", "policy", "sim", "mdp", "sweep"):
        if sec in d and not isinstance(d[sec], dict):
            raise ConfigError(sec, "must be an object", _line_of(text, sec))
    for k in ("A", "B", "K", "Q", "R"):
        if k not in d["plant"]:
            raise ConfigError(f"plant.{k}", "is required")
    kind = d["channel"].get("kind", "static")
    required = {"static": ("ps", "pc"), "markov": ("omega", "xi", "Ds", "Dc")}
    if kind not in required:
        raise ConfigError("channel.kind", f"must be 'static' or 'markov', got {kind!r}", _line_of(text, "kind"))
    for k in required[kind]:
        if k not in d["channel"]:
            raise ConfigError(f"channel.{k}", f"is required for a {kind} channel")
    for key, check in _check_fields(d):
        try:
            check()
        except ValueError as exc:
            raise ConfigError(key, str(exc), _line_of(text, key)) from None
    _check_sweep(d.get("sweep", {}), text)
    try:
        return ExperimentConfig.from_dict(d)
    except ValueError as exc:
        key = _guess_key(str(exc))
        raise ConfigError(key, str(exc), _line_of(text, key)) from None


def _guess_key(msg):
    for section, names in (("plant", "A B K Q R v"), ("channel", "omega xi ps pc"), ("sim", "K x0 seed")):
        for name in names.split():
            if msg.startswith(name + " ") or msg.startswith(f"{section}.{name}"):
                return f"{section}.{name}"
    if "rho(A+BK)" in msg or "unstable" in msg:
        return "plant"
    if "transition matrix" in msg:
        return "channel"
    return "<config>"


def _check_sweep(sweep, text):
    if not sweep:
        return
    for k in sweep:
        if k not in ("grid", "cases"):
            raise ConfigError(f"sweep.{k}", "expected 'grid' and/or 'cases'", _line_of(text, k))
    grid = sweep.get("grid", {})
    for key, vals in grid.items():
        if key not in SWEEPABLE:
            raise ConfigError(f"sweep.grid.{key}", f"not sweepable; choose from {sorted(SWEEPABLE)}", _line_of(text, key))
        if not isinstance(vals, list) or not vals:
            raise ConfigError(f"sweep.grid.{key}", "must be a non-empty list", _line_of(text, key))
    for case in sweep.get("cases", []):
        for key in case:
            if key not in SWEEPABLE:
                raise ConfigError(f"sweep.cases.{key}", f"not sweepable; choose from {sorted(SWEEPABLE)}")


def loads(text):
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<json>", exc.msg, exc.lineno) from None
    return parse_config(d, text)


def load(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc.strerror}") from None
    return loads(text)


def dumps(config):
    return json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n"


def dump(config, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(config))


def preset_names():
    files = resources.files("hdsched.presets").iterdir()
    return sorted(f.name[:-5] for f in files if f.name.endswith(".json"))


def load_preset(name):
    path = resources.files("hdsched.presets") / f"{name}.json"
    if not path.is_file():
        raise ConfigError("--preset", f"unknown preset {name!r}; available: {preset_names()}")
    return loads(path.read_text(encoding="utf-8"))


def _set_dotted(d, key, value):
    section, leaf = key.split(".")
    d.setdefault(section, {})[leaf] = value


def expand_sweep(config):
    """List of ``(overrides, ExperimentConfig)`` over the sweep's cases x grid."""
    sweep = config.sweep or {}
    grid = sweep.get("grid", {})
    cases = sweep.get("cases", [{}])
    keys = list(grid)
    out = []
    for case in cases:
        for combo in itertools.product(*(grid[k] for k in keys)):
            overrides = dict(case)
            overrides.update(zip(keys, combo))
            d = copy.deepcopy(config.to_dict())
            d["sweep"] = {}
            for k, v in overrides.items():
                _set_dotted(d, k, v)
            try:
                out.append((overrides, parse_config(d)))
            except ConfigError as exc:
                raise ConfigError(f"sweep point {overrides}", str(exc)) from None
    return out
