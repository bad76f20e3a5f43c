"""Flat key=value run configuration.

The file format is one `section.key = value` assignment per line, with
`#` comments and blank lines ignored.  No nesting, no quoting; values are
numbers, enum words, or comma-separated lists.  Unknown keys are
rejected, and every diagnostic carries the key and line number.

Required keys: beam.l, beam.b, grid.n, time.T, time.dt.  Everything else
has a default (see _KEYS below; the README lists the same table).
Deterministic serialization emits every resolved key in a fixed order so
that configs round-trip losslessly and diff cleanly.
"""

from __future__ import annotations

import ast
import math
from dataclasses import dataclass, fields
from typing import Callable, Optional, Tuple

import numpy as np

from .errors import ConfigError

LAMBDA_FAMILIES = ("zero", "bump", "tabulated")
FDET_FAMILIES = ("zero", "tabulated", "expression")
INIT_FAMILIES = ("zero", "mode")
BC_KINDS = ("homogeneous", "nonhomogeneous")
SPECTRA = ("k^-2", "k^-3", "tabulated")


@dataclass(frozen=True)
class SimulationConfig:
    """Fully resolved run parameters (flat mirror of the config file)."""

    l: float
    b: float
    n: int
    T: float
    dt: float
    g_const: float = 9.81
    sigma: float = 1.0
    spectrum: str = "k^-2"
    K: int = 64
    seed: int = 0
    noise_table: Optional[Tuple[float, ...]] = None
    lam_family: str = "bump"
    lam_c0: float = 1.0
    lam_c1: float = 0.0
    lam_freq: float = 1.0
    lam_table: Optional[Tuple[float, ...]] = None
    fdet_family: str = "zero"
    fdet_expr1: str = "0"
    fdet_expr2: str = "0"
    fdet_expr3: str = "0"
    fdet_table: Optional[Tuple[float, ...]] = None
    init_family: str = "zero"
    init_mode: int = 1
    init_amplitude: float = 1.0
    bc_kind: str = "homogeneous"
    n_paths: int = 1
    threads: int = 1
    observables: Tuple[str, ...] = ("1:3:v",)
    obs_stride: int = 1

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))


_REQUIRED = object()


def _pos_float(v):
    x = float(v)
    if not math.isfinite(x) or x <= 0:
        raise ValueError("must be a positive number")
    return x


def _nonneg_float(v):
    x = float(v)
    if not math.isfinite(x) or x < 0:
        raise ValueError("must be a nonnegative number")
    return x


def _any_float(v):
    x = float(v)
    if not math.isfinite(x):
        raise ValueError("must be finite")
    return x


def _pos_int(v):
    x = int(v)
    if str(x) != str(v).strip() or x < 1:
        raise ValueError("must be a positive integer")
    return x


def _grid_int(v):
    x = _pos_int(v)
    if x < 4:
        raise ValueError("needs at least 4 interior nodes")
    return x


def _uint(v):
    x = int(v)
    if x < 0:
        raise ValueError("must be a nonnegative integer")
    return x


def _enum(options):
    def conv(v):
        s = str(v).strip()
        if s not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return s
    return conv


def _float_tuple(v):
    parts = [p for p in str(v).split(",") if p.strip()]
    if not parts:
        raise ValueError("needs at least one value")
    return tuple(float(p) for p in parts)


def _obs_tuple(v):
    parts = tuple(p.strip() for p in str(v).split(",") if p.strip())
    if not parts:
        raise ValueError("needs at least one observable spec")
    for p in parts:
        parse_observable_spec(p)
    return parts


def _expr_str(v):
    s = str(v).strip()
    compile_expression(s)
    return s


def parse_observable_spec(spec: str) -> Tuple[int, int, str]:
    """Split 'mode:channel:part' into (mode >= 1, channel 1..3, 'u'|'v')."""
    parts = spec.split(":")
    if len(parts) != 3:
        raise ValueError(f"observable '{spec}' is not mode:channel:part")
    try:
        mode = int(parts[0])
        channel = int(parts[1])
    except ValueError:
        raise ValueError(f"observable '{spec}' needs integer mode and channel")
    part = parts[2].strip()
    if mode < 1 or channel not in (1, 2, 3) or part not in ("u", "v"):
        raise ValueError(f"observable '{spec}' out of range (part must be u|v)")
    return mode, channel, part


#: file key -> (attribute, converter, default)
_KEYS = {
    "beam.l": ("l", _pos_float, _REQUIRED),
    "beam.b": ("b", _pos_float, _REQUIRED),
    "beam.g": ("g_const", _nonneg_float, 9.81),
    "grid.n": ("n", _grid_int, _REQUIRED),
    "time.T": ("T", _pos_float, _REQUIRED),
    "time.dt": ("dt", _pos_float, _REQUIRED),
    "noise.sigma": ("sigma", _nonneg_float, 1.0),
    "noise.spectrum": ("spectrum", _enum(SPECTRA), "k^-2"),
    "noise.K": ("K", _pos_int, 64),
    "noise.seed": ("seed", _uint, 0),
    "noise.table": ("noise_table", _float_tuple, None),
    "lambda.family": ("lam_family", _enum(LAMBDA_FAMILIES), "bump"),
    "lambda.c0": ("lam_c0", _nonneg_float, 1.0),
    "lambda.c1": ("lam_c1", _any_float, 0.0),
    "lambda.freq": ("lam_freq", _pos_float, 1.0),
    "lambda.table": ("lam_table", _float_tuple, None),
    "fdet.family": ("fdet_family", _enum(FDET_FAMILIES), "zero"),
    "fdet.expr1": ("fdet_expr1", _expr_str, "0"),
    "fdet.expr2": ("fdet_expr2", _expr_str, "0"),
    "fdet.expr3": ("fdet_expr3", _expr_str, "0"),
    "fdet.table": ("fdet_table", _float_tuple, None),
    "init.family": ("init_family", _enum(INIT_FAMILIES), "zero"),
    "init.mode": ("init_mode", _pos_int, 1),
    "init.amplitude": ("init_amplitude", _any_float, 1.0),
    "bc.kind": ("bc_kind", _enum(BC_KINDS), "homogeneous"),
    "run.N": ("n_paths", _pos_int, 1),
    "run.threads": ("threads", _pos_int, 1),
    "run.observables": ("observables", _obs_tuple, ("1:3:v",)),
    "run.obs_stride": ("obs_stride", _pos_int, 1),
}

_ATTR_TO_KEY = {attr: key for key, (attr, _, _) in _KEYS.items()}


def parse_config(text: str) -> SimulationConfig:
    """Parse and fully resolve a configuration.

    Raises:
        ConfigError: unknown key, bad value, missing required key, or a
            cross-key constraint violation; the message names the key and
            (where applicable) the line.
    """
    values = {}
    lines = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", line=lineno)
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in _KEYS:
            raise ConfigError(f"unknown key", key=key, line=lineno)
        attr, conv, _ = _KEYS[key]
        if attr in values:
            raise ConfigError("duplicate key", key=key, line=lineno)
        try:
            values[attr] = conv(val)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value '{val}': {exc}", key=key,
                              line=lineno) from None
        lines[attr] = lineno

    for key, (attr, _, default) in _KEYS.items():
        if attr in values:
            continue
        if default is _REQUIRED:
            raise ConfigError("missing required key", key=key)
        values[attr] = default

    cfg = SimulationConfig(**values)
    _check_constraints(cfg, lines)
    return cfg


def _check_constraints(cfg: SimulationConfig, lines: dict):
    ratio = cfg.T / cfg.dt
    if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio) or round(ratio) < 1:
        raise ConfigError("dt must divide T", key="time.dt",
                          line=lines.get("dt"))
    if cfg.lam_family == "bump" and cfg.lam_c0 - abs(cfg.lam_c1) < 0:
        raise ConfigError("bump modulation needs c0 >= |c1|",
                          key="lambda.c1", line=lines.get("lam_c1"))
    if cfg.lam_family == "tabulated" and cfg.lam_table is None:
        raise ConfigError("tabulated tension needs lambda.table",
                          key="lambda.table")
    if cfg.spectrum == "tabulated" and cfg.noise_table is None:
        raise ConfigError("tabulated spectrum needs noise.table",
                          key="noise.table")
    if cfg.fdet_family == "tabulated" and cfg.fdet_table is None:
        raise ConfigError("tabulated force needs fdet.table",
                          key="fdet.table")
    if cfg.bc_kind == "nonhomogeneous" and cfg.init_family != "zero":
        raise ConfigError(
            "nonhomogeneous runs support only the built-in initial data "
            "(init.family = zero on top of the slope shift)",
            key="init.family", line=lines.get("init_family"))


def serialize_config(cfg: SimulationConfig) -> str:
    """Canonical text form; parse_config inverts it losslessly."""
    out = []
    for key, (attr, _, _) in _KEYS.items():
        val = getattr(cfg, attr)
        if val is None:
            continue
        if isinstance(val, tuple):
            text = ",".join(repr(v) if isinstance(v, float) else str(v)
                            for v in val)
        elif isinstance(val, float):
            text = repr(val)
        else:
            text = str(val)
        out.append(f"{key} = {text}")
    return "\n".join(out) + "\n"


_ALLOWED_CALLS = {"sin": np.sin, "cos": np.cos, "exp": np.exp,
                  "sqrt": np.sqrt, "log": np.log, "abs": np.abs,
                  "tanh": np.tanh}
_ALLOWED_NAMES = {"pi": math.pi}
_ALLOWED_NODES = (ast.Expression, ast.BinOp, ast.UnaryOp, ast.Constant,
                  ast.Name, ast.Call, ast.Load, ast.Add, ast.Sub, ast.Mult,
                  ast.Div, ast.Pow, ast.USub, ast.UAdd, ast.Mod)


def compile_expression(src: str) -> Callable:
    """Compile a deterministic force expression over (s, t).

    Only arithmetic, the names s/t/l/pi, and a short list of numpy
    functions are allowed; anything else is rejected.  Returns a callable
    (s_array, t, l) -> array.
    """
    try:
        tree = ast.parse(src, mode="eval")
    except SyntaxError as exc:
        raise ValueError(f"bad expression: {exc.msg}") from None
    for node in ast.walk(tree):
        if not isinstance(node, _ALLOWED_NODES):
            raise ValueError(
                f"expression element '{type(node).__name__}' is not allowed")
        if isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or \
                    node.func.id not in _ALLOWED_CALLS or node.keywords:
                raise ValueError("only plain calls to "
                                 f"{sorted(_ALLOWED_CALLS)} are allowed")
        if isinstance(node, ast.Name) and node.id not in ("s", "t", "l") \
                and node.id not in _ALLOWED_NAMES and node.id not in _ALLOWED_CALLS:
            raise ValueError(f"unknown name '{node.id}' in expression")
    code = compile(tree, "<fdet>", "eval")

    def evaluate(s, t, l):
        env = dict(_ALLOWED_CALLS)
        env.update(_ALLOWED_NAMES)
        env.update({"s": s, "t": t, "l": l, "__builtins__": {}})
        return np.broadcast_to(np.asarray(eval(code, env), dtype=float),
                               np.shape(s)).copy()

    return evaluate
