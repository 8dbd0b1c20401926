"""Scenario files: INI sections with numeric arrays, validated into builders.

Numbers may be written as plain literals or small arithmetic expressions
using ``pi``, ``sqrt``, ``atan2``, ``sin`` and ``cos`` (for example
``atan2(-3, -4)``). Vectors are comma separated; matrices separate rows
with ``;``. ``P`` additionally accepts ``eye(n)`` and ``diag(a, b, ...)``.
See ``docs/config.md`` for the full schema.
"""

from __future__ import annotations

import ast
import configparser
import math
import operator
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .barrier import Barrier, obstacle_barrier, quadratic_barrier
from .certificate import InputSet
from .control import CONTROLLER_KINDS, Controller, ControllerSpec, pd_nominal
from .dynamics import ControlAffineSystem, builtin, linear_system
from .errors import ConfigurationError
from .schedule import FAMILIES, ConstrictionSchedule, initial_relaxation, make_schedule

RUN_KINDS = CONTROLLER_KINDS + ("nmpc",)
LINEAR_BUILTINS = ("double_integrator", "multiagent")

_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul, ast.Div: operator.truediv, ast.Pow: operator.pow}
_FUNCS = {"sqrt": math.sqrt, "atan2": math.atan2, "sin": math.sin, "cos": math.cos}
_NAMES = {"pi": math.pi}


def _eval_node(node):
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
        return float(node.value)
    if isinstance(node, ast.Name) and node.id in _NAMES:
        return _NAMES[node.id]
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        v = _eval_node(node.operand)
        return -v if isinstance(node.op, ast.USub) else v
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        return _BINOPS[type(node.op)](_eval_node(node.left), _eval_node(node.right))
    if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in _FUNCS and not node.keywords:
        return float(_FUNCS[node.func.id](*[_eval_node(a) for a in node.args]))
    raise ValueError("unsupported expression")


def parse_number(text: str) -> float:
    """Evaluate a numeric literal or a small arithmetic expression."""
    try:
        return float(_eval_node(ast.parse(text.strip(), mode="eval").body))
    except (SyntaxError, ValueError, TypeError, ZeroDivisionError, OverflowError) as exc:
        raise ValueError(f"cannot read {text.strip()!r} as a number") from exc


def _split_top(text: str, sep: str):
    """Split on ``sep`` outside parentheses."""
    parts, depth, cur = [], 0, []
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == sep and depth == 0:
            parts.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    parts.append("".join(cur))
    return [p for p in (s.strip() for s in parts) if p]


def parse_vector(text: str) -> np.ndarray:
    return np.array([parse_number(t) for t in _split_top(text, ",")])


def parse_matrix(text: str) -> np.ndarray:
    text = text.strip()
    m = re.fullmatch(r"eye\(\s*(\d+)\s*\)", text)
    if m:
        return np.eye(int(m.group(1)))
    m = re.fullmatch(r"diag\((.*)\)", text, flags=re.S)
    if m:
        return np.diag(parse_vector(m.group(1)))
    rows = [parse_vector(r) for r in _split_top(text, ";")]
    if not rows or len({r.size for r in rows}) != 1:
        raise ValueError("matrix rows must have equal length")
    return np.vstack(rows)


class _Source:
    """Parsed INI file that remembers the line of every key."""

    def __init__(self, text: str, path: str):
        self.path = path
        self.lines: dict[tuple[str, str], int] = {}
        self.section_lines: dict[str, int] = {}
        section = None
        for no, line in enumerate(text.splitlines(), start=1):
            stripped = line.strip()
            m = re.fullmatch(r"\[([^\]]+)\]", stripped)
            if m:
                section = m.group(1).strip().lower()
                self.section_lines.setdefault(section, no)
            elif section and stripped and stripped[0] not in "#;" and line[:1] not in " \t":
                key = re.split(r"[=:]", stripped, maxsplit=1)[0].strip().lower()
                self.lines.setdefault((section, key), no)
        self.cp = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
        try:
            self.cp.read_string(text, source=path)
        except configparser.Error as exc:
            raise ConfigurationError(f"{path}: {exc}") from exc

    def where(self, section: str, key: Optional[str] = None) -> str:
        if key is not None and (section, key) in self.lines:
            return f"{self.path}:{self.lines[(section, key)]}"
        if section in self.section_lines:
            return f"{self.path}:{self.section_lines[section]}"
        return self.path

    def has(self, section: str, key: Optional[str] = None) -> bool:
        if key is None:
            return self.cp.has_section(section)
        return self.cp.has_option(section, key)

    def raw(self, section: str, key: str, default=None, required: bool = True) -> Optional[str]:
        if self.has(section, key):
            return self.cp.get(section, key)
        if required and default is None:
            if not self.has(section):
                raise ConfigurationError(f"{self.path}: missing section [{section}] (needed for field {section}.{key})")
            raise ConfigurationError(f"{self.where(section)}: missing required field {section}.{key}")
        return default

    def _convert(self, section, key, fn, what, default, required):
        text = self.raw(section, key, None, required=required and default is None)
        if text is None:
            return default
        try:
            return fn(text)
        except ValueError as exc:
            raise ConfigurationError(f"{self.where(section, key)}: field {section}.{key}: expected {what}: {exc}") from exc

    def number(self, section, key, default=None, required=True) -> Optional[float]:
        return self._convert(section, key, parse_number, "a number", default, required)

    def integer(self, section, key, default=None, required=True) -> Optional[int]:
        def to_int(t):
            v = parse_number(t)
            if v != int(v):
                raise ValueError(f"{t.strip()!r} is not an integer")
            return int(v)

        return self._convert(section, key, to_int, "an integer", default, required)

    def vector(self, section, key, default=None, required=True) -> Optional[np.ndarray]:
        return self._convert(section, key, parse_vector, "a comma-separated vector", default, required)

    def matrix(self, section, key, default=None, required=True) -> Optional[np.ndarray]:
        return self._convert(section, key, parse_matrix, "a matrix", default, required)

    def word(self, section, key, default=None, required=True) -> Optional[str]:
        text = self.raw(section, key, default, required=required and default is None)
        return None if text is None else text.strip().lower()

    def fail(self, section, key, message):
        raise ConfigurationError(f"{self.where(section, key)}: field {section}.{key}: {message}")


@dataclass
class ScenarioConfig:
    """Everything needed to rebuild one experiment."""

    name: str
    path: str
    seed: int
    system_name: str
    system_params: dict
    A: Optional[np.ndarray]
    B: Optional[np.ndarray]
    x0: np.ndarray
    barrier_c: float
    barrier_P: np.ndarray
    barrier_center: Optional[np.ndarray]
    obstacle: Optional[tuple]  # (center, radius)
    schedule_family: str
    T: float
    schedule_param: Optional[float]
    r0_override: Optional[float]
    controller_kind: str
    alpha: float
    gamma1: float
    gamma2: float
    kp: Optional[float]
    kd: Optional[float]
    clf_gain: float
    tube_margin: float
    input_kind: str
    u_max: object
    dt: float
    t_end: float
    nmpc: dict = field(default_factory=dict)
    certificate: dict = field(default_factory=dict)
    authority_map: Optional[dict] = None
    output_dir: Optional[str] = None

    @property
    def is_linear(self) -> bool:
        return self.A is not None or self.system_name in LINEAR_BUILTINS

    def system(self) -> ControlAffineSystem:
        if self.A is not None:
            return linear_system(self.A, self.B, label=self.name)
        return builtin(self.system_name, **self.system_params)

    def linear_matrices(self):
        if self.A is not None:
            return self.A, self.B
        sys = self.system()
        x = np.zeros(sys.state_dim)
        return sys.drift_jacobian(x), sys.g(x)

    def barrier(self) -> Barrier:
        return quadratic_barrier(self.barrier_c, self.barrier_P, self.barrier_center, label="h")

    def obstacle_barrier(self) -> Optional[Barrier]:
        if self.obstacle is None:
            return None
        return obstacle_barrier(self.obstacle[0], self.obstacle[1], self.x0.size, label="h_obs")

    def schedule(self) -> ConstrictionSchedule:
        r0 = self.r0_override if self.r0_override is not None else initial_relaxation(self.barrier(), self.x0)
        return make_schedule(self.schedule_family, r0, self.T, self.schedule_param)

    def input_set(self) -> InputSet:
        return InputSet(self.input_kind, self.u_max, self.system().input_dim)

    def controller_spec(self) -> ControllerSpec:
        nominal = None
        if self.kp is not None:
            nominal = pd_nominal(self.kp, self.kd, self.system().input_dim)
        return ControllerSpec(
            kind=self.controller_kind,
            barrier=self.barrier(),
            schedule=self.schedule(),
            input_set=self.input_set(),
            alpha=self.alpha,
            gamma1=self.gamma1,
            gamma2=self.gamma2,
            nominal=nominal,
            clf_gain=self.clf_gain,
            tube_margin=self.tube_margin,
        )

    def controller(self, warm_start: bool = True) -> Controller:
        return Controller(self.controller_spec(), self.system(), warm_start=warm_start)

    def nmpc_problem(self):
        from .nmpc import NmpcProblem

        n = self.nmpc
        bounds = np.broadcast_to(np.asarray(self.u_max, dtype=float), (2,))
        return NmpcProblem(
            sys=self.system(),
            reach_barrier=self.barrier(),
            schedule=self.schedule(),
            obstacle=self.obstacle_barrier(),
            horizon=n["horizon"],
            plan_dt=n["plan_dt"],
            beta=n["beta"],
            v_max=float(bounds[0]),
            omega_max=float(bounds[1]),
            substeps=n["substeps"],
            obstacle_margin=n["obstacle_margin"],
            cold_start_omega=n["cold_start_omega"],
        )


_SYSTEM_PARAMS = {"multiagent": {"n": "N"}}


def load(path) -> ScenarioConfig:
    path = str(path)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read scenario file {path}: {exc}") from exc
    return parse(text, path)


def parse(text: str, path: str = "<string>") -> ScenarioConfig:
    src = _Source(text, path)

    name = src.raw("scenario", "name").strip()
    seed = src.integer("scenario", "seed", default=0)
    output_dir = src.raw("scenario", "output_dir", required=False)

    # system: a builtin name, or explicit A and B
    A = B = None
    params: dict = {}
    system_name = src.word("system", "builtin", default="", required=False) or ""
    if system_name in ("", "linear"):
        A = src.matrix("system", "a")
        B = src.matrix("system", "b")
        if A.shape[0] != A.shape[1] or B.shape[0] != A.shape[0]:
            src.fail("system", "b", f"A is {A.shape} and B is {B.shape}; need n x n and n x m")
        system_name = "linear"
    else:
        for key in src.cp.options("system"):
            if key == "builtin":
                continue
            pname = _SYSTEM_PARAMS.get(system_name, {}).get(key)
            if pname is None:
                src.fail("system", key, f"unknown parameter for builtin {system_name!r}")
            params[pname] = src.integer("system", key)
    try:
        sys = linear_system(A, B) if A is not None else builtin(system_name, **params)
    except ConfigurationError as exc:
        src.fail("system", "builtin" if A is None else "a", str(exc))
    n = sys.state_dim

    x0 = src.vector("initial_state", "x0")
    if x0.size != n:
        src.fail("initial_state", "x0", f"has {x0.size} entries, the system state has {n}")

    c = src.number("barrier", "c")
    P = src.matrix("barrier", "p")
    if P.shape != (n, n):
        src.fail("barrier", "p", f"is {P.shape[0]}x{P.shape[1]}, expected {n}x{n}")
    center = src.vector("barrier", "center", required=False)
    if center is not None and center.size != n:
        src.fail("barrier", "center", f"has {center.size} entries, expected {n}")
    try:
        quadratic_barrier(c, P, center)
    except ConfigurationError as exc:
        src.fail("barrier", "p" if c > 0 else "c", str(exc))

    obstacle = None
    if src.has("obstacle"):
        oc = src.vector("obstacle", "center")
        rad = src.number("obstacle", "radius")
        if oc.size != 2:
            src.fail("obstacle", "center", "must be a point in the plane")
        if not rad > 0:
            src.fail("obstacle", "radius", f"must be positive, got {rad}")
        obstacle = (oc, rad)

    family = src.word("schedule", "family")
    if family not in FAMILIES:
        src.fail("schedule", "family", f"must be one of {', '.join(FAMILIES)}, got {family!r}")
    T = src.number("schedule", "t")
    if not T > 0:
        src.fail("schedule", "t", f"deadline must be positive, got {T}")
    sparam = None
    if family != "linear":
        sparam = src.number("schedule", "param")
    r0_override = src.number("schedule", "r0", required=False)
    try:
        make_schedule(family, r0_override if r0_override is not None else 0.0, T, sparam)
    except ConfigurationError as exc:
        src.fail("schedule", "param" if family != "linear" else "r0", str(exc))

    kind = src.word("controller", "kind")
    if kind not in RUN_KINDS:
        src.fail("controller", "kind", f"must be one of {', '.join(RUN_KINDS)}, got {kind!r}")
    alpha = src.number("controller", "alpha", default=0.9)
    gamma1 = src.number("controller", "gamma1", default=0.9)
    gamma2 = src.number("controller", "gamma2", default=0.9)
    for key, val in (("alpha", alpha), ("gamma1", gamma1), ("gamma2", gamma2)):
        if not val > 0:
            src.fail("controller", key, f"must be positive, got {val}")
    kp = src.number("controller", "kp", required=False)
    kd = src.number("controller", "kd", required=False)
    if (kp is None) != (kd is None):
        src.fail("controller", "kd" if kd is None else "kp", "kp and kd must be given together")
    if kind in ("hocbf2_qp", "nominal") and kp is None:
        src.fail("controller", "kp", f"controller {kind!r} needs nominal gains kp and kd")
    clf_gain = src.number("controller", "clf_gain", default=2.0)
    tube_margin = src.number("controller", "tube_margin", default=0.0)
    if not tube_margin >= 0:
        src.fail("controller", "tube_margin", f"must be >= 0, got {tube_margin}")

    input_kind = src.word("input_set", "kind")
    if input_kind not in ("ball2", "box"):
        src.fail("input_set", "kind", f"must be ball2 or box, got {input_kind!r}")
    if src.has("input_set", "u_max"):
        u_max = src.vector("input_set", "u_max")
        u_max = float(u_max[0]) if u_max.size == 1 else u_max
    elif src.has("input_set", "v_max") or src.has("input_set", "omega_max"):
        u_max = np.array([src.number("input_set", "v_max"), src.number("input_set", "omega_max")])
    else:
        src.raw("input_set", "u_max")  # raises the missing-field error
    try:
        InputSet(input_kind, u_max, sys.input_dim)
    except ConfigurationError as exc:
        src.fail("input_set", "u_max", str(exc))

    dt = src.number("integration", "dt")
    t_end = src.number("integration", "t_end")
    if not dt > 0:
        src.fail("integration", "dt", f"must be positive, got {dt}")
    if not t_end >= dt:
        src.fail("integration", "t_end", f"must be at least dt, got {t_end}")

    nmpc = {}
    if kind == "nmpc":
        if sys.input_dim != 2:
            src.fail("controller", "kind", "nmpc needs a two-input (v, omega) system")
        nmpc = {
            "horizon": src.number("nmpc", "horizon"),
            "plan_dt": src.number("nmpc", "plan_dt", default=0.05),
            "beta": src.number("nmpc", "beta"),
            "replan_every": src.integer("nmpc", "replan_every", default=10),
            "substeps": src.integer("nmpc", "substeps", default=10),
            "obstacle_margin": src.number("nmpc", "obstacle_margin", default=0.05),
            "cold_start_omega": src.number("nmpc", "cold_start_omega", default=0.1),
        }
        if not nmpc["horizon"] > nmpc["plan_dt"] > 0:
            src.fail("nmpc", "horizon", "need horizon > plan_dt > 0")
        if nmpc["beta"] < 0:
            src.fail("nmpc", "beta", "must be >= 0")
        if nmpc["replan_every"] < 1 or nmpc["replan_every"] * dt > nmpc["plan_dt"] + 1e-12:
            src.fail("nmpc", "replan_every", "need replan_every >= 1 and replan_every * dt <= plan_dt")

    cert = {
        "method": src.word("certificate", "method", default="auto"),
        "time_grid": src.integer("certificate", "time_grid", default=21),
        "boundary_samples": src.integer("certificate", "boundary_samples", default=200),
        "refine_steps": src.integer("certificate", "refine_steps", default=20),
        "domain_lo": src.vector("certificate", "domain_lo", required=False),
        "domain_hi": src.vector("certificate", "domain_hi", required=False),
        "reference_sigma_min": src.number("certificate", "reference_sigma_min", required=False),
        "reference_t_min": src.number("certificate", "reference_t_min", required=False),
    }
    if cert["method"] not in ("auto", "closed_form", "sampled", "both"):
        src.fail("certificate", "method", "must be auto, closed_form, sampled or both")

    amap = None
    if src.has("authority_map"):
        if n != 2:
            src.fail("authority_map", "x1_range", f"authority maps need a 2-D state, this system has {n}")
        amap = {
            "x1_range": src.vector("authority_map", "x1_range"),
            "x2_range": src.vector("authority_map", "x2_range"),
            "points": src.integer("authority_map", "points", default=201),
        }
        for key in ("x1_range", "x2_range"):
            rng = amap[key]
            if rng.size != 2 or not rng[0] < rng[1]:
                src.fail("authority_map", key, "must be 'lo, hi' with lo < hi")
        if amap["points"] < 2:
            src.fail("authority_map", "points", "must be >= 2")

    return ScenarioConfig(
        name=name,
        path=path,
        seed=seed,
        system_name=system_name,
        system_params=params,
        A=A,
        B=B,
        x0=x0,
        barrier_c=c,
        barrier_P=P,
        barrier_center=center,
        obstacle=obstacle,
        schedule_family=family,
        T=T,
        schedule_param=sparam,
        r0_override=r0_override,
        controller_kind=kind,
        alpha=alpha,
        gamma1=gamma1,
        gamma2=gamma2,
        kp=kp,
        kd=kd,
        clf_gain=clf_gain,
        tube_margin=tube_margin,
        input_kind=input_kind,
        u_max=u_max,
        dt=dt,
        t_end=t_end,
        nmpc=nmpc,
        certificate=cert,
        authority_map=amap,
        output_dir=output_dir,
    )
