"""Text configuration for closed-loop runs.

A run configuration is a nested YAML mapping whose sections mirror
:class:`~riskmpc.simulator.RunConfig`. Any leaf can be replaced from the
command line with a dotted ``key=value`` override; values are parsed as YAML
scalars or flow sequences, so ``mpc.q_mat=[[1,0],[0,5]]`` works. Overrides are
applied in order after the file is read, the last one for a key wins.

Two conveniences keep configs short and self-consistent:

* ``mpc.p_mat: null`` means "terminal weight from the Riccati equation of the
  nominal pair and ``(q_mat, r_mat)``".
* ``schedule.epoch_starts: null`` splits ``total_steps`` into equal epochs,
  one per entry of ``schedule.scales``.

``regulator.delta`` is not a separate key: the regulator always targets
``target_delta``.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import fields

import numpy as np
import yaml

from .engine import RiskEngineConfig
from .errors import ContractViolation
from .regulator import RegulatorConfig
from .simulator import RunConfig, make_dcdc_benchmark
from .system import Box, DisturbanceSchedule, PolytopeConstraint, UncertainLinearSystem
from .tube import MpcConfig, dare_gain


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is the dotted path of the culprit when known."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        self.field = field
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


TOP_SCALARS = ("total_steps", "seed", "target_delta", "controller", "chance_row", "burn_in_frac",
               "time_varying_plant", "worst_case_samples", "x0")
SECTIONS = ("system", "state_con", "input_con", "schedule", "mpc", "engine", "regulator")

# one line per leaf; written next to every run as the config schema
SCHEMA = {
    "total_steps": "int >= 1, number of closed-loop steps",
    "seed": "int, root seed for plant, disturbance, engine and design generators",
    "target_delta": "float in (0, 1), permitted violation rate of the chance-constrained row",
    "controller": "'raar' | 'worst_case' | 'naive_sa'",
    "chance_row": "int, row of state_con whose violations are counted and regulated",
    "burn_in_frac": "float in [0, 1), fraction of steps excluded from the metrics",
    "time_varying_plant": "bool, redraw the true (A, B) every step instead of once",
    "worst_case_samples": "int, scenarios used to size the fixed worst-case tube",
    "x0": "list[float], initial state",
    "system.a_nom": "n_x x n_x matrix, nominal state matrix",
    "system.b_nom": "n_x x n_u matrix, nominal input matrix",
    "system.g": "n_x x n_d matrix, disturbance input matrix",
    "system.delta_rel": "float in [0, 1), relative entry-wise half-width of the (A, B) interval box",
    "system.d_support.lower": "list[float], base disturbance box lower corner",
    "system.d_support.upper": "list[float], base disturbance box upper corner",
    "state_con.c_mat": "m x n_x matrix of state constraint rows",
    "state_con.c_vec": "list[float] >= 0, state constraint bounds",
    "input_con.c_mat": "m x n_u matrix of input constraint rows",
    "input_con.c_vec": "list[float] >= 0, input constraint bounds",
    "schedule.base_support.lower": "list[float], disturbance box at scale 1",
    "schedule.base_support.upper": "list[float], disturbance box at scale 1",
    "schedule.scales": "list[float] >= 0, disturbance scale of each epoch",
    "schedule.epoch_starts": "list[int] starting at 0, or null for equal epochs over total_steps",
    "mpc.horizon_n": "int >= 1, prediction horizon",
    "mpc.q_mat": "n_x x n_x positive semidefinite stage weight",
    "mpc.r_mat": "n_u x n_u positive definite input weight",
    "mpc.p_mat": "n_x x n_x terminal weight, or null for the Riccati solution",
    "mpc.rho_slack": "float, linear penalty on the shared constraint slack",
    "mpc.tightening_mode": "'l1_max' | 'exact_support'",
    "mpc.alignment": "'aligned' (state k tightened by box k) | 'lagged' (state k by box k-1)",
    "mpc.input_tightening": "bool, tighten input rows by the ancillary-mapped boxes",
    "mpc.terminal_set": "'mcais' | 'none'",
    "engine.n_cand": "int, candidate scenarios per LPES update",
    "engine.k_crit": "int, critical scenarios simulated exactly per update",
    "engine.kappa_ucb": "float >= 0, UCB exploration weight",
    "engine.update_period_m": "int >= 1, control steps between LPES updates",
    "engine.n_seed_train": "int >= 2, random scenarios used to seed the GP",
    "engine.inflation": "float >= 1, factor on the recent disturbance peak for candidate sampling",
    "engine.history_w": "int, disturbance estimates kept for the candidate support",
    "engine.gp_capacity": "int, GP training points kept (oldest dropped first)",
    "engine.cold_start_pool": "int, candidates ranked by exact criticality before the GP exists",
    "engine.gp_restarts": "int, hyperparameter optimization restarts",
    "engine.gp_max_iter": "int, L-BFGS-B iterations per restart",
    "regulator.c_m": "float >= 0, buffer width in units of beta",
    "regulator.alpha_rate": "float > 0, margin step size",
    "regulator.gamma_rate": "float in [0, alpha_rate / 10], reversion rate toward beta_bar",
    "regulator.beta_bar": "float, reversion anchor and initial margin",
    "regulator.beta_max": "float > 0, margin ceiling",
    "regulator.window_w": "int >= 1, sliding window for the buffer probability",
    "regulator.dynamic_target": "bool, raise the target by the buffer probability",
}


def _mat(m) -> list:
    return np.asarray(m, dtype=float).tolist()


def _box(b: Box) -> dict:
    return {"lower": b.lower.tolist(), "upper": b.upper.tolist()}


def config_to_dict(cfg: RunConfig) -> dict:
    """Nested plain-Python view of ``cfg`` that :func:`config_from_dict` inverts."""
    sys = cfg.system
    sched = cfg.schedule
    equal = DisturbanceSchedule.equal_epochs(sched.base_support, [c for _, c in sched.epochs], cfg.total_steps)
    p_dare, _ = dare_gain(sys.a_nom, sys.b_nom, cfg.mpc.q_mat, cfg.mpc.r_mat)
    p_mat = None if np.allclose(cfg.mpc.p_mat, p_dare, rtol=1e-12, atol=1e-12) else _mat(cfg.mpc.p_mat)
    return {
        "total_steps": cfg.total_steps,
        "seed": cfg.seed,
        "target_delta": cfg.target_delta,
        "controller": cfg.controller,
        "chance_row": cfg.chance_row,
        "burn_in_frac": cfg.burn_in_frac,
        "time_varying_plant": cfg.time_varying_plant,
        "worst_case_samples": cfg.worst_case_samples,
        "x0": cfg.x0.tolist(),
        "system": {
            "a_nom": _mat(sys.a_nom), "b_nom": _mat(sys.b_nom), "g": _mat(sys.g),
            "delta_rel": sys.delta_rel, "d_support": _box(sys.d_support),
        },
        "state_con": {"c_mat": _mat(cfg.state_con.c_mat), "c_vec": cfg.state_con.c_vec.tolist()},
        "input_con": {"c_mat": _mat(cfg.input_con.c_mat), "c_vec": cfg.input_con.c_vec.tolist()},
        "schedule": {
            "base_support": _box(sched.base_support),
            "scales": [c for _, c in sched.epochs],
            "epoch_starts": None if equal.epochs == sched.epochs else [s for s, _ in sched.epochs],
        },
        "mpc": {
            "horizon_n": cfg.mpc.horizon_n, "q_mat": _mat(cfg.mpc.q_mat), "r_mat": _mat(cfg.mpc.r_mat),
            "p_mat": p_mat, "rho_slack": cfg.mpc.rho_slack, "tightening_mode": cfg.mpc.tightening_mode,
            "alignment": cfg.mpc.alignment, "input_tightening": cfg.mpc.input_tightening,
            "terminal_set": cfg.mpc.terminal_set,
        },
        "engine": {f.name: getattr(cfg.engine, f.name) for f in fields(RiskEngineConfig)},
        "regulator": {f.name: getattr(cfg.regulator, f.name) for f in fields(RegulatorConfig)
                      if f.name != "delta"},
    }


def default_config_dict() -> dict:
    return config_to_dict(make_dcdc_benchmark())


def _check_keys(section: dict, allowed, prefix: str):
    if not isinstance(section, dict):
        raise ConfigError("expected a mapping", prefix or None)
    for key in section:
        if key not in allowed:
            raise ConfigError("unknown key", f"{prefix}.{key}" if prefix else key)


def _section(data: dict, name: str) -> dict:
    if name not in data:
        raise ConfigError("missing section", name)
    sec = data[name]
    if not isinstance(sec, dict):
        raise ConfigError("expected a mapping", name)
    return sec


def _get(sec: dict, key: str, prefix: str):
    if key not in sec:
        raise ConfigError("missing key", f"{prefix}.{key}")
    return sec[key]


def _matrix(value, path: str) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError("expected a numeric matrix", path) from None
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2 or arr.size == 0 or not np.all(np.isfinite(arr)):
        raise ConfigError("expected a finite, non-empty matrix", path)
    return arr


def _vector(value, path: str) -> np.ndarray:
    try:
        arr = np.atleast_1d(np.asarray(value, dtype=float))
    except (TypeError, ValueError):
        raise ConfigError("expected a numeric list", path) from None
    if arr.ndim != 1 or not np.all(np.isfinite(arr)):
        raise ConfigError("expected a finite list of numbers", path)
    return arr


def _build(path: str, factory, *args, **kwargs):
    """Call a constructor and re-raise its contract errors against ``path``."""
    try:
        return factory(*args, **kwargs)
    except (ContractViolation, TypeError, ValueError) as exc:
        raise ConfigError(str(exc), path) from None


def _box_from(sec, path: str) -> Box:
    _check_keys(sec, ("lower", "upper"), path)
    lo = _vector(_get(sec, "lower", path), f"{path}.lower")
    hi = _vector(_get(sec, "upper", path), f"{path}.upper")
    return _build(path, Box, lo, hi)


def _psd_check(m: np.ndarray, path: str, strict: bool):
    if m.shape[0] != m.shape[1]:
        raise ConfigError("must be square", path)
    if not np.allclose(m, m.T, atol=1e-12):
        raise ConfigError("must be symmetric", path)
    lo = np.linalg.eigvalsh(m).min()
    if strict and lo <= 0:
        raise ConfigError(f"must be positive definite (min eigenvalue {lo:.3g})", path)
    if not strict and lo < -1e-10:
        raise ConfigError(f"must be positive semidefinite (min eigenvalue {lo:.3g})", path)


def config_from_dict(data: dict) -> RunConfig:
    """Validate a nested mapping and build the :class:`RunConfig` it describes."""
    if not isinstance(data, dict):
        raise ConfigError("top level of the config must be a mapping")
    _check_keys(data, TOP_SCALARS + SECTIONS, "")

    s = _section(data, "system")
    _check_keys(s, ("a_nom", "b_nom", "g", "delta_rel", "d_support"), "system")
    sys = _build("system", UncertainLinearSystem,
                 _matrix(_get(s, "a_nom", "system"), "system.a_nom"),
                 _matrix(_get(s, "b_nom", "system"), "system.b_nom"),
                 _matrix(_get(s, "g", "system"), "system.g"),
                 float(_get(s, "delta_rel", "system")),
                 _box_from(_get(s, "d_support", "system"), "system.d_support"))

    cons = {}
    for name in ("state_con", "input_con"):
        c = _section(data, name)
        _check_keys(c, ("c_mat", "c_vec"), name)
        cons[name] = _build(name, PolytopeConstraint, _matrix(_get(c, "c_mat", name), f"{name}.c_mat"),
                            _vector(_get(c, "c_vec", name), f"{name}.c_vec"))
    if cons["state_con"].dim != sys.n_x:
        raise ConfigError("columns must match the state dimension", "state_con.c_mat")
    if cons["input_con"].dim != sys.n_u:
        raise ConfigError("columns must match the input dimension", "input_con.c_mat")

    total_steps = data.get("total_steps")
    if not isinstance(total_steps, int) or isinstance(total_steps, bool) or total_steps < 1:
        raise ConfigError("must be a positive integer", "total_steps")

    sc = _section(data, "schedule")
    _check_keys(sc, ("base_support", "scales", "epoch_starts"), "schedule")
    base = _box_from(_get(sc, "base_support", "schedule"), "schedule.base_support")
    scales = _vector(_get(sc, "scales", "schedule"), "schedule.scales").tolist()
    starts = sc.get("epoch_starts")
    if starts is None:
        if len(scales) > total_steps:
            raise ConfigError("more epochs than steps", "schedule.scales")
        sched = DisturbanceSchedule.equal_epochs(base, scales, total_steps)
    else:
        starts = _vector(starts, "schedule.epoch_starts")
        if len(starts) != len(scales):
            raise ConfigError("needs one start per scale", "schedule.epoch_starts")
        sched = _build("schedule.epoch_starts", DisturbanceSchedule, tuple(zip(starts.astype(int), scales)), base)
    if any(c < 0 for c in scales):
        raise ConfigError("scales must be non-negative", "schedule.scales")

    m = _section(data, "mpc")
    mpc_keys = ("horizon_n", "q_mat", "r_mat", "p_mat", "rho_slack", "tightening_mode", "alignment",
                "input_tightening", "terminal_set")
    _check_keys(m, mpc_keys, "mpc")
    q = _matrix(_get(m, "q_mat", "mpc"), "mpc.q_mat")
    r = _matrix(_get(m, "r_mat", "mpc"), "mpc.r_mat")
    _psd_check(q, "mpc.q_mat", strict=False)
    _psd_check(r, "mpc.r_mat", strict=True)
    if q.shape[0] != sys.n_x:
        raise ConfigError("must be n_x x n_x", "mpc.q_mat")
    if r.shape[0] != sys.n_u:
        raise ConfigError("must be n_u x n_u", "mpc.r_mat")
    if m.get("p_mat") is None:
        p = _build("mpc.p_mat", dare_gain, sys.a_nom, sys.b_nom, q, r)[0]
    else:
        p = _matrix(m["p_mat"], "mpc.p_mat")
        _psd_check(p, "mpc.p_mat", strict=True)
    kw = {k: m[k] for k in mpc_keys[4:] if k in m}
    mpc = _build("mpc", MpcConfig, int(_get(m, "horizon_n", "mpc")), q, r, p, **kw)

    e = data.get("engine", {})
    _check_keys(e, [f.name for f in fields(RiskEngineConfig)], "engine")
    engine = _build("engine", RiskEngineConfig, **e)

    target = data.get("target_delta")
    if not isinstance(target, (int, float)) or isinstance(target, bool) or not 0.0 < target < 1.0:
        raise ConfigError("must be a number in (0, 1)", "target_delta")
    rg = data.get("regulator", {})
    _check_keys(rg, [f.name for f in fields(RegulatorConfig) if f.name != "delta"], "regulator")
    regulator = _build("regulator", RegulatorConfig, float(target), **rg)

    top = {k: data[k] for k in ("seed", "controller", "chance_row", "burn_in_frac", "time_varying_plant",
                                "worst_case_samples") if k in data}
    x0 = _vector(data.get("x0", np.zeros(sys.n_x)), "x0")
    return _build("", RunConfig, total_steps=total_steps, target_delta=float(target), mpc=mpc, engine=engine,
                  regulator=regulator, schedule=sched, x0=x0, system=sys, state_con=cons["state_con"],
                  input_con=cons["input_con"], **{"seed": 0, **top})


def parse_override(text: str) -> tuple[list[str], object]:
    """Split ``a.b.c=value`` into a key path and a YAML-parsed value."""
    key, sep, raw = text.partition("=")
    key = key.strip()
    if not sep or not key or any(not part for part in key.split(".")):
        raise ConfigError(f"override {text!r} is not of the form key.path=value")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value {raw!r}: {exc}", key) from None
    return key.split("."), value


def apply_overrides(data: dict, overrides) -> dict:
    """Return a copy of ``data`` with every override applied in order."""
    out = copy.deepcopy(data)
    for text in overrides or ():
        path, value = parse_override(text)
        node = out
        for i, part in enumerate(path[:-1]):
            nxt = node.get(part) if isinstance(node, dict) else None
            if not isinstance(nxt, dict):
                # only descend into (or create) mappings for known sections
                if nxt is None and i == 0 and part in SECTIONS:
                    nxt = node[part] = {}
                else:
                    raise ConfigError("not a section", ".".join(path[: i + 1]))
            node = nxt
        node[path[-1]] = value
    return out


def load_config_text(text: str) -> dict:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigError(f"YAML syntax error: {problem}", line=line) from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("top level of the config must be a mapping", line=1)
    return data


def load_config(path=None, overrides=()) -> RunConfig:
    """Parse the file at ``path`` (benchmark defaults when ``None``) and apply overrides."""
    if path is None:
        data = default_config_dict()
    else:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        data = load_config_text(text)
    return config_from_dict(apply_overrides(data, overrides))


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False, default_flow_style=None)


def config_hash(cfg: RunConfig) -> str:
    """SHA-256 of the canonical JSON form; equal hashes mean equal runs."""
    canon = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()
