"""Scenario files: a sectioned key-value format parsed with :mod:`configparser`.

Grammar (all sections except ``[controls]`` and ``[checker]`` are required)::

    [scenario]
    version = 1                 ; mandatory, currently 1
    name = <text>
    description = <text>        ; optional

    [grid]
    T = <float>
    N = <int>

    [driver]
    kind = tree | mc
    paths = <int>               ; mc only, default 1000
    seed = <int>                ; default 0
    degree = <int>              ; regression degree, default 2
    tree_cap = <int>            ; largest tree depth, default 16

    [problem]
    family = lq | epidemic | polynomial
    ...family keys, see FAMILY_KEYS...

    [controls]
    kind = all | finite | box
    points = <json list of lists>   ; finite
    lower = <json list>             ; box
    upper = <json list>             ; box

    [checker]
    tol, mode, form, u_grid, reference, perturb, tau, spike_u, eps_steps

Two-time coefficients of the ``lq`` family are ``M exp(-decay (t-s)) (1 +
growth s)`` with ``M`` a JSON matrix (key ``A1``) and optional scalars
``A1.decay`` / ``A1.growth``.  Cost weights ``Q``, ``S``, ``R`` take
``.growth``; ``G`` takes ``.noise`` for ``G (1 + noise tanh W(T))``.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .grid import DEFAULT_TREE_CAP, MONTE_CARLO, TREE, NoiseDriver, build_driver, make_grid
from .problem import ControlSet, LinearSpec, ProblemSpec, ScalarFunction, epidemic_scenario

__all__ = [
    "FORMAT_VERSION",
    "FAMILIES",
    "ScenarioError",
    "ScenarioFile",
    "parse_scenario",
    "load_scenario",
    "serialize_scenario",
    "scenario_hash",
    "build_problem",
    "build_scenario_driver",
    "reference_control",
]

FORMAT_VERSION = 1
FAMILIES = ("lq", "epidemic", "polynomial")

_LQ_MATS = ("A1", "B1", "A2", "B2")
_LQ_WEIGHTS = ("Q", "S", "R")
FAMILY_KEYS = {
    "lq": {"family", "n", "m", "x0", "G", "G.noise"}
    | set(_LQ_MATS)
    | {f"{k}.{p}" for k in _LQ_MATS for p in ("decay", "growth")}
    | set(_LQ_WEIGHTS)
    | {f"{k}.growth" for k in _LQ_WEIGHTS},
    "epidemic": {"family", "x0", "m1", "m2", "a", "g1", "g2", "quad_dt"},
    "polynomial": {"family", "x0", "kernel_decay", "drift", "diffusion", "running", "control_cost", "terminal"},
}
SECTION_KEYS = {
    "scenario": {"version", "name", "description"},
    "grid": {"t", "n"},
    "driver": {"kind", "paths", "seed", "degree", "tree_cap"},
    "controls": {"kind", "points", "lower", "upper"},
    "checker": {"tol", "mode", "form", "u_grid", "reference", "perturb", "tau", "spike_u", "eps_steps"},
}
REQUIRED = ("scenario", "grid", "driver", "problem")


class ScenarioError(ValueError):
    """Parse or validation error with location."""

    def __init__(self, reason: str, key: Optional[str] = None, line: Optional[int] = None):
        self.reason = reason
        self.key = key
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key {key!r}")
        super().__init__(f"{', '.join(where)}: {reason}" if where else reason)


@dataclass
class ScenarioFile:
    """Validated scenario contents with typed values."""

    name: str
    description: str = ""
    version: int = FORMAT_VERSION
    T: float = 1.0
    N: int = 4
    driver: dict = field(default_factory=lambda: {"kind": TREE, "paths": 1000, "seed": 0, "degree": 2, "tree_cap": DEFAULT_TREE_CAP})
    problem: dict = field(default_factory=dict)
    controls: dict = field(default_factory=lambda: {"kind": "all"})
    checker: dict = field(default_factory=dict)

    def replace(self, **kw) -> "ScenarioFile":
        return dataclasses.replace(self, **kw)


CHECKER_DEFAULTS = {
    "tol": 1e-8,
    "mode": "full",
    "form": "theorem",
    "u_grid": None,
    "reference": "optimal",
    "perturb": None,
    "tau": None,
    "spike_u": None,
    "eps_steps": [8, 4, 2, 1],
}


def _line_of(text: str, section: str, key: Optional[str] = None) -> Optional[int]:
    cur = None
    for no, raw in enumerate(text.splitlines(), 1):
        s = raw.strip()
        m = re.match(r"^\[([^\]]+)\]", s)
        if m:
            cur = m.group(1).strip().lower()
            if key is None and cur == section:
                return no
            continue
        if key is not None and cur == section:
            k = re.split(r"[=:]", s, maxsplit=1)[0].strip().lower()
            if k == key.lower():
                return no
    return None


def _json(text, sec, key, raw):
    try:
        return json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"invalid JSON value ({exc.msg})", key, _line_of(text, sec, key)) from None


def _num(text, sec, key, raw, kind=float):
    try:
        v = kind(raw)
    except ValueError:
        raise ScenarioError(f"expected {kind.__name__}, got {raw!r}", key, _line_of(text, sec, key)) from None
    if kind is float and not math.isfinite(v):
        raise ScenarioError("value must be finite", key, _line_of(text, sec, key))
    return v


def _matrix(text, sec, key, raw, shape):
    v = np.asarray(_json(text, sec, key, raw), dtype=float)
    if v.size == 1 and shape == (1, 1):
        v = v.reshape(1, 1)
    if v.shape != shape:
        raise ScenarioError(f"dimension mismatch: expected shape {shape}, got {v.shape}", key, _line_of(text, sec, key))
    return v.tolist()


def parse_scenario(text: str) -> ScenarioFile:
    """Parse scenario text into a :class:`ScenarioFile`.

    Raises
    ------
    ScenarioError
        On unknown sections or keys, missing version, bad values, unknown
        coefficient family or dimension mismatch; carries ``line`` and ``key``.
    """
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"), strict=True)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.DuplicateOptionError as exc:
        raise ScenarioError("duplicate key", exc.option, exc.lineno) from None
    except configparser.DuplicateSectionError as exc:
        raise ScenarioError(f"duplicate section [{exc.section}]", None, exc.lineno) from None
    except configparser.Error as exc:
        raise ScenarioError(str(exc).splitlines()[0], None, getattr(exc, "lineno", None)) from None
    secs = {s.lower(): s for s in cp.sections()}
    for s in secs:
        if s not in SECTION_KEYS and s != "problem":
            raise ScenarioError(f"unknown section [{s}]", None, _line_of(text, s))
    for s in REQUIRED:
        if s not in secs:
            raise ScenarioError(f"missing section [{s}]")
    get = {s: {k.lower(): v for k, v in cp[secs[s]].items()} for s in secs}
    for s, keys in get.items():
        allowed = SECTION_KEYS.get(s)
        if s == "problem":
            fam = keys.get("family")
            if fam is None:
                raise ScenarioError("missing problem family", "family", _line_of(text, s))
            if fam not in FAMILIES:
                raise ScenarioError(f"unknown coefficient family {fam!r}", "family", _line_of(text, s, "family"))
            allowed = {k.lower() for k in FAMILY_KEYS[fam]}
        for k in keys:
            if k not in allowed:
                raise ScenarioError("unknown key", k, _line_of(text, s, k))

    sc = get["scenario"]
    if "version" not in sc:
        raise ScenarioError("missing mandatory version", "version", _line_of(text, "scenario"))
    version = _num(text, "scenario", "version", sc["version"], int)
    if version != FORMAT_VERSION:
        raise ScenarioError(f"unsupported version {version}", "version", _line_of(text, "scenario", "version"))
    if "name" not in sc:
        raise ScenarioError("missing name", "name", _line_of(text, "scenario"))

    g = get["grid"]
    for k in ("t", "n"):
        if k not in g:
            raise ScenarioError("missing key", k, _line_of(text, "grid"))
    T = _num(text, "grid", "t", g["t"])
    N = _num(text, "grid", "n", g["n"], int)
    if T <= 0 or N < 1:
        raise ScenarioError("need T > 0 and N >= 1", "N", _line_of(text, "grid", "n"))

    d = get["driver"]
    kind = d.get("kind", TREE)
    if kind not in (TREE, MONTE_CARLO):
        raise ScenarioError(f"driver kind must be tree or mc, got {kind!r}", "kind", _line_of(text, "driver", "kind"))
    driver = {
        "kind": kind,
        "paths": _num(text, "driver", "paths", d.get("paths", "1000"), int),
        "seed": _num(text, "driver", "seed", d.get("seed", "0"), int),
        "degree": _num(text, "driver", "degree", d.get("degree", "2"), int),
        "tree_cap": _num(text, "driver", "tree_cap", d.get("tree_cap", str(DEFAULT_TREE_CAP)), int),
    }

    p = get["problem"]
    fam = p["family"]
    problem = {"family": fam}
    if fam == "lq":
        for k in ("n", "m"):
            if k not in p:
                raise ScenarioError("missing key", k, _line_of(text, "problem"))
        n = _num(text, "problem", "n", p["n"], int)
        m = _num(text, "problem", "m", p["m"], int)
        problem.update(n=n, m=m)
        shapes = {"A1": (n, n), "A2": (n, n), "B1": (n, m), "B2": (n, m), "Q": (n, n), "S": (m, n), "R": (m, m), "G": (n, n)}
        for k, sh in shapes.items():
            if k.lower() in p:
                problem[k] = _matrix(text, "problem", k, p[k.lower()], sh)
        for k in p:
            if "." in k:
                problem[next(c for c in FAMILY_KEYS["lq"] if c.lower() == k)] = _num(text, "problem", k, p[k])
        if "x0" in p:
            x0 = _json(text, "problem", "x0", p["x0"])
            x0 = [float(v) for v in np.atleast_1d(np.asarray(x0, dtype=float))]
            if len(x0) != n:
                raise ScenarioError(f"dimension mismatch: x0 has {len(x0)} entries, n={n}", "x0", _line_of(text, "problem", "x0"))
            problem["x0"] = x0
    elif fam == "epidemic":
        for k in ("x0", "m1", "m2"):
            if k not in p:
                raise ScenarioError("missing key", k, _line_of(text, "problem"))
        problem["x0"] = _num(text, "problem", "x0", p["x0"])
        for k in ("m1", "m2"):
            v = _json(text, "problem", k, p[k])
            if not (isinstance(v, list) and len(v) == 2 and v[0] in ("exp", "const")):
                raise ScenarioError('density must be ["exp", rate] or ["const", value]', k, _line_of(text, "problem", k))
            problem[k] = [v[0], float(v[1])]
        problem["a"] = _num(text, "problem", "a", p.get("a", "1.0"))
        for k in ("g1", "g2"):
            v = _json(text, "problem", k, p.get(k, "[1.0, 0.0, 0.0]"))
            if not (isinstance(v, list) and len(v) == 3):
                raise ScenarioError("quadratic cost must be [c, center, linear]", k, _line_of(text, "problem", k))
            problem[k] = [float(x) for x in v]
        if "quad_dt" in p:
            problem["quad_dt"] = _num(text, "problem", "quad_dt", p["quad_dt"])
    else:
        problem["x0"] = _num(text, "problem", "x0", p.get("x0", "0.0"))
        problem["kernel_decay"] = _num(text, "problem", "kernel_decay", p.get("kernel_decay", "0.0"))
        for k, size in (("drift", 3), ("diffusion", 3)):
            v = _json(text, "problem", k, p.get(k, "[0.0, 0.0, 0.0]"))
            if not (isinstance(v, list) and len(v) == size):
                raise ScenarioError(f"{k} must be [x, u, sin x] coefficients", k, _line_of(text, "problem", k))
            problem[k] = [float(x) for x in v]
        for k in ("running", "control_cost", "terminal"):
            v = _json(text, "problem", k, p.get(k, "[]"))
            if not isinstance(v, list):
                raise ScenarioError("polynomial coefficients must be a list", k, _line_of(text, "problem", k))
            problem[k] = [float(x) for x in v]

    m = problem.get("m", 1)
    c = get.get("controls", {})
    ckind = c.get("kind", "all")
    controls = {"kind": ckind}
    if ckind == "finite":
        if "points" not in c:
            raise ScenarioError("finite control set needs points", "points", _line_of(text, "controls"))
        pts = np.asarray(_json(text, "controls", "points", c["points"]), dtype=float).reshape(-1, m)
        controls["points"] = pts.tolist()
    elif ckind == "box":
        for k in ("lower", "upper"):
            if k not in c:
                raise ScenarioError("box control set needs lower and upper", k, _line_of(text, "controls"))
            controls[k] = [float(x) for x in np.atleast_1d(_json(text, "controls", k, c[k]))]
            if len(controls[k]) != m:
                raise ScenarioError("dimension mismatch", k, _line_of(text, "controls", k))
    elif ckind != "all":
        raise ScenarioError(f"unknown control set kind {ckind!r}", "kind", _line_of(text, "controls", "kind"))

    ch = get.get("checker", {})
    checker = dict(CHECKER_DEFAULTS)
    if "tol" in ch:
        checker["tol"] = _num(text, "checker", "tol", ch["tol"])
    for k, choices in (("mode", ("full", "diagonal")), ("form", ("theorem", "sde", "discrete"))):
        if k in ch:
            if ch[k] not in choices:
                raise ScenarioError(f"{k} must be one of {choices}", k, _line_of(text, "checker", k))
            checker[k] = ch[k]
    if "u_grid" in ch:
        checker["u_grid"] = np.asarray(_json(text, "checker", "u_grid", ch["u_grid"]), dtype=float).reshape(-1, m).tolist()
    if "reference" in ch:
        ref = ch["reference"]
        if ref != "optimal":
            v = _json(text, "checker", "reference", ref)
            ref = [float(x) for x in np.atleast_1d(v)]
            if len(ref) != m:
                raise ScenarioError("dimension mismatch", "reference", _line_of(text, "checker", "reference"))
        checker["reference"] = ref
    if "perturb" in ch:
        v = _json(text, "checker", "perturb", ch["perturb"])
        if not (isinstance(v, list) and len(v) == 3):
            raise ScenarioError("perturb must be [t_idx, node, [u...]]", "perturb", _line_of(text, "checker", "perturb"))
        checker["perturb"] = [int(v[0]), int(v[1]), [float(x) for x in np.atleast_1d(v[2])]]
    if "tau" in ch:
        checker["tau"] = _num(text, "checker", "tau", ch["tau"])
    if "spike_u" in ch:
        checker["spike_u"] = [float(x) for x in np.atleast_1d(_json(text, "checker", "spike_u", ch["spike_u"]))]
    if "eps_steps" in ch:
        v = _json(text, "checker", "eps_steps", ch["eps_steps"])
        if not (isinstance(v, list) and all(isinstance(x, int) and x > 0 for x in v)):
            raise ScenarioError("eps_steps must be a list of positive integers", "eps_steps", _line_of(text, "checker", "eps_steps"))
        checker["eps_steps"] = v

    return ScenarioFile(
        name=sc["name"],
        description=sc.get("description", ""),
        version=version,
        T=T,
        N=N,
        driver=driver,
        problem=problem,
        controls=controls,
        checker=checker,
    )


def load_scenario(path) -> ScenarioFile:
    with open(path, encoding="utf-8") as fh:
        return parse_scenario(fh.read())


def _dump(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, float):
        return repr(v)
    return json.dumps(v)


def serialize_scenario(s: ScenarioFile) -> str:
    """Canonical text form; ``parse_scenario(serialize_scenario(s)) == s``."""
    out = ["[scenario]", f"version = {s.version}", f"name = {s.name}"]
    if s.description:
        out.append(f"description = {s.description}")
    out += ["", "[grid]", f"T = {s.T!r}", f"N = {s.N}", "", "[driver]"]
    out += [f"{k} = {s.driver[k]}" for k in ("kind", "paths", "seed", "degree", "tree_cap")]
    out += ["", "[problem]", f"family = {s.problem['family']}"]
    out += [f"{k} = {_dump(v)}" for k, v in s.problem.items() if k != "family"]
    out += ["", "[controls]"] + [f"{k} = {_dump(v)}" for k, v in s.controls.items()]
    out += ["", "[checker]"] + [f"{k} = {_dump(v)}" for k, v in s.checker.items() if v is not None]
    return "\n".join(out) + "\n"


def scenario_hash(s: ScenarioFile) -> str:
    return hashlib.sha256(serialize_scenario(s).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# construction


def _control_set(s: ScenarioFile, m: int) -> ControlSet:
    c = s.controls
    if c["kind"] == "finite":
        return ControlSet.finite(c["points"])
    if c["kind"] == "box":
        return ControlSet.box(c["lower"], c["upper"])
    return ControlSet.all(m)


def _kernel(M, decay, growth):
    M = np.asarray(M, dtype=float)
    if decay == 0.0 and growth == 0.0:
        return M

    def f(t, s):
        t = np.asarray(t, dtype=float)
        s = np.asarray(s, dtype=float)
        sc = np.exp(-decay * (t - s)) * (1.0 + growth * s)
        return sc[..., None, None] * M

    return f


def _weight(M, growth):
    M = np.asarray(M, dtype=float)
    if growth == 0.0:
        return M
    return lambda s: (1.0 + growth * np.asarray(s, dtype=float))[..., None, None] * M


def _density(d):
    kind, v = d
    if kind == "exp":
        return lambda r: v * np.exp(-v * np.asarray(r, dtype=float))
    return lambda r: v + 0.0 * np.asarray(r, dtype=float)


def _poly(c):
    c = np.asarray(c, dtype=float)

    def f(x):
        return np.polyval(c[::-1], x) if c.size else 0.0 * x

    def df(x):
        return np.polyval(np.polyder(c[::-1]), x) if c.size > 1 else 0.0 * x

    def d2f(x):
        return np.polyval(np.polyder(c[::-1], 2), x) if c.size > 2 else 0.0 * x

    return f, df, d2f


def _polynomial_problem(p, cs) -> ProblemSpec:
    kap = p["kernel_decay"]
    a1, b1, c1 = p["drift"]
    a2, b2, c2 = p["diffusion"]
    lf, ldf, ld2f = _poly(p["running"])
    rf, rdf, _ = _poly(p["control_cost"])
    hf, hdf, hd2f = _poly(p["terminal"])
    x0 = p["x0"]

    def k(t, s):
        return np.exp(-kap * (np.asarray(t, dtype=float) - np.asarray(s, dtype=float)))

    def sh(t, s, x):
        return np.broadcast_shapes(np.shape(t), np.shape(s), np.shape(x)[:-1])

    def b(t, s, x, u):
        return k(t, s)[..., None] * (a1 * x + b1 * u + c1 * np.sin(x))

    def sigma(t, s, x, u):
        return k(t, s)[..., None] * (a2 * x + b2 * u + c2 * np.sin(x))

    def b_x(t, s, x, u):
        return np.broadcast_to((k(t, s)[..., None] * (a1 + c1 * np.cos(x)))[..., None], sh(t, s, x) + (1, 1))

    def sigma_x(t, s, x, u):
        return np.broadcast_to((k(t, s)[..., None] * (a2 + c2 * np.cos(x)))[..., None], sh(t, s, x) + (1, 1))

    def b_xx(t, s, x, u):
        return np.broadcast_to((k(t, s)[..., None] * (-c1 * np.sin(x)))[..., None, None], sh(t, s, x) + (1, 1, 1))

    def sigma_xx(t, s, x, u):
        return np.broadcast_to((k(t, s)[..., None] * (-c2 * np.sin(x)))[..., None, None], sh(t, s, x) + (1, 1, 1))

    def b_u(t, s, x, u):
        return np.broadcast_to(b1 * k(t, s)[..., None, None], sh(t, s, x) + (1, 1))

    def sigma_u(t, s, x, u):
        return np.broadcast_to(b2 * k(t, s)[..., None, None], sh(t, s, x) + (1, 1))

    curved = c1 != 0.0 or c2 != 0.0
    return ProblemSpec(
        n=1, m=1,
        phi=lambda t: np.full(np.shape(t) + (1,), float(x0)),
        b=b, sigma=sigma, b_x=b_x, sigma_x=sigma_x,
        h=lambda x: hf(x[..., 0]),
        h_x=lambda x: hdf(x),
        h_xx=lambda x: hd2f(x)[..., None],
        l=lambda s, x, u: lf(x[..., 0]) + rf(u[..., 0]) + 0.0 * np.asarray(s, dtype=float),
        l_x=lambda s, x, u: ldf(x) + 0.0 * u,
        l_xx=lambda s, x, u: ld2f(x)[..., None] + 0.0 * u[..., None],
        control_set=cs,
        b_xx=b_xx if curved else None,
        sigma_xx=sigma_xx if curved else None,
        b_u=b_u, sigma_u=sigma_u,
        l_u=lambda s, x, u: rdf(u) + 0.0 * x,
        name="polynomial",
    )


def build_problem(s: ScenarioFile, dt: Optional[float] = None):
    """``(ProblemSpec, LinearSpec or None)`` for a scenario.

    ``dt`` is the solver step used by the epidemic quadrature (defaults to
    ``quad_dt`` or ``T / N``).
    """
    p = s.problem
    fam = p["family"]
    if fam == "lq":
        n, m = p["n"], p["m"]
        kw = {}
        for k in _LQ_MATS:
            if k in p:
                kw[k] = _kernel(p[k], p.get(f"{k}.decay", 0.0), p.get(f"{k}.growth", 0.0))
        for k in _LQ_WEIGHTS:
            if k in p:
                kw[k] = _weight(p[k], p.get(f"{k}.growth", 0.0))
        if "G" in p:
            G = np.asarray(p["G"], dtype=float)
            noise = p.get("G.noise", 0.0)
            if noise:
                kw["G"] = lambda dW: (1.0 + noise * np.tanh(np.asarray(dW).sum(axis=-1)))[..., None, None] * G
            else:
                kw["G"] = G
        lin = LinearSpec(n, m, x0=p.get("x0"), control_set=_control_set(s, m), name=s.name, **kw)
        return lin.to_problem(), lin
    cs = _control_set(s, 1)
    if fam == "epidemic":
        a = p["a"]
        qdt = p.get("quad_dt", dt if dt is not None else s.T / s.N)
        spec = epidemic_scenario(
            p["x0"],
            _density(p["m1"]),
            _density(p["m2"]),
            lambda r: a + 0.0 * np.asarray(r, dtype=float),
            ScalarFunction.quadratic(*p["g1"]),
            ScalarFunction.quadratic(*p["g2"]),
            dt=qdt,
            control_set=cs,
            T=s.T,
        )
        return spec, None
    return _polynomial_problem(p, cs), None


def build_scenario_driver(s: ScenarioFile) -> NoiseDriver:
    d = s.driver
    g = make_grid(s.T, s.N)
    return build_driver(g, d["kind"], M=d["paths"], seed=d["seed"], d=d["degree"], cap=d["tree_cap"])


def reference_control(s: ScenarioFile, driver: NoiseDriver, m: int):
    """Constant reference control, or ``None`` for ``reference = optimal``."""
    ref = s.checker.get("reference", "optimal")
    if ref == "optimal":
        return None
    return np.broadcast_to(np.asarray(ref, dtype=float), (driver.N, 1, m)).copy()
