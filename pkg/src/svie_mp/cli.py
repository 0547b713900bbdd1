"""Command-line entry points and result bundles.

Usage::

    svie-mp COMMAND --scenario PATH [--backend tree|mc] [--paths M] [--steps N]
                    [--seed S] [--tol X] [--out DIR] [--mode full|diagonal]

Commands: validate, simulate, adjoint, mp-check, lq-solve, spike-exp,
epidemic-demo.  Exit status is 0 when every check passes, 1 on a failed check
and 2 on an error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import json
import math
import os
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, kernels
from .grid import ResourceLimitError
from .lq import (
    NORMAL_EQUATIONS,
    case1_conditions,
    case2_conditions,
    control_to_decisions,
    decisions_to_control,
    solve_exhaustive,
    solve_lq,
)
from .mp import check_mp, convex_condition, prepare
from .problem import validate_assumptions
from .scenario import (
    ScenarioError,
    ScenarioFile,
    build_problem,
    build_scenario_driver,
    load_scenario,
    reference_control,
    scenario_hash,
)
from .solver import NumericalError, eval_cost, solve_svie
from .spike import asymptotic_experiment, check_order_estimates

__all__ = ["COMMANDS", "ResultBundle", "run_command", "shipped_scenario", "main"]

COMMANDS = ("validate", "simulate", "adjoint", "mp-check", "lq-solve", "spike-exp", "epidemic-demo")
SLOPE_BAND = (0.85, 1.15)


def shipped_scenario(name: str) -> Path:
    """Path of a scenario file shipped with the package."""
    p = resources.files("svie_mp") / "scenarios" / f"{name}.ini"
    return Path(str(p))


def _clean(v):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to ``None``."""
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, np.ndarray):
        return _clean(v.tolist())
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer, int)):
        return int(v)
    if isinstance(v, (np.floating, float)):
        f = float(v)
        return f if math.isfinite(f) else None
    return v


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
    return buf.getvalue()


@dataclass
class ResultBundle:
    """Tables (CSV text), reports (JSON-able dicts) and the pass/fail verdict."""

    command: str
    metadata: dict
    tables: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)
    error: Optional[str] = None

    @property
    def passed(self) -> bool:
        return self.error is None and all(self.checks.values())

    @property
    def exit_code(self) -> int:
        if self.error is not None:
            return 2
        return 0 if self.passed else 1

    def report_json(self) -> str:
        doc = {
            "command": self.command,
            "metadata": self.metadata,
            "checks": self.checks,
            "passed": self.passed,
            "error": self.error,
            "reports": self.reports,
        }
        return json.dumps(_clean(doc), indent=2, sort_keys=True) + "\n"

    def summary(self) -> str:
        lines = [f"command: {self.command}"]
        lines.append(f"scenario: {self.metadata.get('scenario', '')}")
        if self.error is not None:
            lines.append(f"error: {self.error}")
        for k in sorted(self.checks):
            lines.append(f"{'PASS' if self.checks[k] else 'FAIL'} {k}")
        lines.append(f"result: {'ERROR' if self.error else ('PASS' if self.passed else 'FAIL')}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        (out / "tables").mkdir(parents=True, exist_ok=True)
        for name in sorted(self.tables):
            with open(out / "tables" / f"{name}.csv", "w", encoding="utf-8", newline="") as fh:
                fh.write(self.tables[name])
        with open(out / "report.json", "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.report_json())
        with open(out / "summary.txt", "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.summary())
        return out


def apply_overrides(s: ScenarioFile, backend=None, paths=None, steps=None, seed=None, tol=None, mode=None) -> ScenarioFile:
    driver = dict(s.driver)
    checker = dict(s.checker)
    if backend is not None:
        driver["kind"] = backend
    if paths is not None:
        driver["paths"] = int(paths)
    if seed is not None:
        driver["seed"] = int(seed)
    if tol is not None:
        checker["tol"] = float(tol)
    if mode is not None:
        checker["mode"] = mode
    return s.replace(driver=driver, checker=checker, N=int(steps) if steps is not None else s.N)


def _metadata(s: ScenarioFile, driver) -> dict:
    meta = {
        "scenario": s.name,
        "scenario_hash": scenario_hash(s),
        "seed": s.driver["seed"],
        "backend": driver.kind,
        "paths": driver.S,
        "N": driver.N,
        "T": s.T,
        "kernel_backend": kernels.BACKEND,
        "package_version": __version__,
    }
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is not None:
        meta["created"] = _dt.datetime.fromtimestamp(int(epoch), _dt.timezone.utc).isoformat()
    return meta


# ---------------------------------------------------------------------------
# pipelines


def _reference(s, spec, lin, driver):
    """Reference control (N, S, m) and a description of how it was obtained."""
    U = reference_control(s, driver, spec.m)
    info = {}
    if U is None:
        if not driver.is_tree:
            raise ValueError("reference = optimal needs the tree backend; give a constant reference for mc")
        if lin is not None:
            sol = solve_lq(lin, driver)
        elif spec.control_set.kind == "finite":
            sol = solve_exhaustive(spec, driver)
        else:
            raise ValueError("reference = optimal needs a finite control set or an lq problem")
        if sol.status != "optimal":
            raise ValueError(f"optimal reference unavailable: {sol.status}")
        U = sol.u
        info = {"method": sol.method, "J": sol.J, **sol.meta}
    U = np.broadcast_to(U, (driver.N, driver.S, spec.m)).copy()
    pert = s.checker.get("perturb")
    if pert is not None:
        i, node, val = pert
        if driver.is_tree:
            dec = control_to_decisions(U, driver, spec.m)
            dec[2 ** i - 1 + node] = val
            U = decisions_to_control(dec, driver)
        else:
            U[i, node] = val
        info["perturbed"] = {"t_idx": i, "node": node, "u": val}
    return U, info


def _u_grid(s, spec):
    g = s.checker.get("u_grid")
    if g is not None:
        return np.asarray(g, dtype=float)
    cs = spec.control_set
    return cs.points if cs.kind == "finite" else cs.grid(5)


def _cmd_validate(s, spec, lin, driver, b):
    rep = validate_assumptions(lin if lin is not None else spec, seed=s.driver["seed"], T=s.T)
    b.reports["validation"] = rep.to_dict()
    b.tables["clauses"] = _csv(["name", "passed", "value"], [(c.name, int(c.passed), float(c.value)) for c in rep.clauses])
    b.checks["assumptions"] = rep.passed


def _state_table(X, driver):
    EX = driver.expect(np.moveaxis(X, 1, 0))
    sd = np.sqrt(np.maximum(driver.expect(np.moveaxis(X, 1, 0) ** 2) - EX ** 2, 0.0))
    n = X.shape[-1]
    rows = [[i, float(driver.grid.t[i])] + [float(v) for v in EX[i]] + [float(v) for v in sd[i]] for i in range(X.shape[0])]
    return _csv(["t_idx", "t"] + [f"mean_{k}" for k in range(n)] + [f"std_{k}" for k in range(n)], rows)


def _cmd_simulate(s, spec, lin, driver, b):
    U, info = _reference(s, spec, lin, driver)
    X = solve_svie(spec, U, driver)
    J = eval_cost(spec, X, U, driver)
    b.tables["state"] = _state_table(X, driver)
    b.reports["simulation"] = {"cost": J, "reference": info}
    b.checks["finite_state"] = bool(np.all(np.isfinite(X)))


def _cmd_adjoint(s, spec, lin, driver, b):
    U, info = _reference(s, spec, lin, driver)
    ctx = prepare(spec, U, driver)
    adj = ctx.adjoint
    EY = driver.expect(np.moveaxis(adj.Y, 1, 0))
    b.tables["adjoint"] = _csv(
        ["t_idx", "t"] + [f"mean_Y_{k}" for k in range(spec.n)],
        [[i, float(driver.grid.t[i])] + [float(v) for v in EY[i]] for i in range(driver.N)],
    )
    b.reports["adjoint"] = {"iterations": adj.iterations, "residual": adj.residual, "history": adj.history, "reference": info}
    tol = 1e-8 if driver.is_tree else math.inf
    b.checks["adjoint_residual"] = adj.residual <= tol
    return ctx


def _cmd_mp_check(s, spec, lin, driver, b):
    U, info = _reference(s, spec, lin, driver)
    ctx = prepare(spec, U, driver)
    ch = s.checker
    rep = check_mp(spec, U, _u_grid(s, spec), ch["tol"], ch["mode"], form=ch["form"], context=ctx)
    b.tables["mp_values"] = rep.to_csv()
    out = rep.to_dict()
    out["reference"] = info
    if spec.control_set.convex and spec.control_set.kind != "finite":
        worst = 0.0
        for i in range(driver.N):
            for u in _u_grid(s, spec):
                worst = min(worst, float(convex_condition(spec, ctx.adjoint, ctx.Xbar, U, i, u, driver).min()))
        out["convex_condition_min"] = worst
    b.reports["mp"] = out
    b.checks["maximum_condition"] = rep.passed


def _cmd_lq_solve(s, spec, lin, driver, b):
    if lin is None:
        raise ValueError("lq-solve needs an lq scenario")
    sol = solve_lq(lin, driver)
    b.reports["lq"] = sol.to_dict()
    b.tables["lq_solution"] = sol.to_csv(driver)
    b.checks["solved"] = sol.status == "optimal"
    if sol.status != "optimal":
        return
    tol = s.checker["tol"]
    for name, fn in (("case_I", case1_conditions), ("case_II", case2_conditions)):
        try:
            rep = fn(lin, sol, driver)
        except ValueError as exc:
            b.reports[name] = {"applicable": False, "reason": str(exc)}
            continue
        b.reports[name] = {"applicable": True, **rep.to_dict()}
        b.tables[name] = rep.to_csv()
        if sol.method == NORMAL_EQUATIONS:
            b.checks[f"{name}_stationarity"] = bool(rep.stationarity.max(initial=0.0) <= max(tol, 1e-8))
            b.checks[f"{name}_second_order"] = bool(rep.min_eig.min(initial=np.inf) >= -1e-10)


def _tau_index(s, driver):
    tau = s.checker.get("tau")
    if tau is None:
        return driver.N // 2
    k = int(round(tau / driver.dt))
    if abs(k * driver.dt - tau) > 1e-9 or not 0 <= k < driver.N:
        raise ValueError(f"tau={tau} is not a grid time")
    return k


def _cmd_spike_exp(s, spec, lin, driver, b):
    from .second_order import quadratic_weights
    from .solver import linearize

    U, info = _reference(s, spec, lin, driver)
    X = solve_svie(spec, U, driver)
    tau = _tau_index(s, driver)
    u = s.checker.get("spike_u")
    if u is None:
        u = np.asarray(_u_grid(s, spec))[-1]
    steps = [k for k in s.checker["eps_steps"] if tau + k <= driver.N]
    if len(steps) < 2:
        raise ValueError("need at least two spike widths that fit after tau")
    eps = [k * driver.dt for k in steps]
    lin_ = linearize(spec, X, U, driver)
    order = check_order_estimates(spec, X, U, tau, u, sorted(eps), driver, lin_)
    adj = None
    if spec.b_xx is not None or spec.sigma_xx is not None:
        from .adjoint import solve_first_order_adjoint

        adj = solve_first_order_adjoint(spec, X, U, driver, lin=lin_)
    w = quadratic_weights(spec, X, U, driver, adj)
    tab = asymptotic_experiment(spec, w, X, U, tau, u, sorted(eps, reverse=True), driver, lin_)
    b.reports["order"] = order.to_dict()
    b.reports["asymptotic"] = {"rows": tab.to_rows(), "reference": info, "tau_idx": tau}
    b.tables["order"] = _csv(
        ["eps", "sup_E_X1_sq", "sup_E_residual_sq"],
        [(float(e), float(a), float(r)) for e, a, r in zip(order.eps, order.sup_X1_sq, order.residual_sq)],
    )
    terms = ("H_X1", "H_Y1", "limit", "gap_X1_Y1", "gap_Y1_limit", "identity_residual")
    b.tables["asymptotic"] = _csv(["eps", "term", "value"], [(r["eps"], t, float(r[t])) for r in tab.rows for t in terms])
    g1, g2 = tab.column("gap_X1_Y1"), tab.column("gap_Y1_limit")
    zero = bool(np.all(g1 <= 1e-12) and np.all(g2 <= 1e-12))
    b.checks["X1_order_slope"] = bool(order.exact_zero or SLOPE_BAND[0] <= order.slope_X1 <= SLOPE_BAND[1])
    b.checks["gaps_decrease"] = zero or (tab.strictly_decreasing("gap_X1_Y1") and tab.strictly_decreasing("gap_Y1_limit"))


def _cmd_epidemic_demo(s, spec, lin, driver, b):
    if s.problem["family"] != "epidemic":
        raise ValueError("epidemic-demo needs an epidemic scenario")
    _cmd_simulate(s, spec, lin, driver, b)
    _cmd_mp_check(s, spec, lin, driver, b)


_DISPATCH = {
    "validate": _cmd_validate,
    "simulate": _cmd_simulate,
    "adjoint": _cmd_adjoint,
    "mp-check": _cmd_mp_check,
    "lq-solve": _cmd_lq_solve,
    "spike-exp": _cmd_spike_exp,
    "epidemic-demo": _cmd_epidemic_demo,
}


def run_command(command: str, scenario: ScenarioFile, **overrides) -> ResultBundle:
    """Run one command on a scenario; errors are captured in the bundle.

    ``overrides`` accepts ``backend``, ``paths``, ``steps``, ``seed``,
    ``tol`` and ``mode``.
    """
    if command not in _DISPATCH:
        raise ValueError(f"unknown command {command!r}")
    s = apply_overrides(scenario, **overrides)
    b = ResultBundle(command, {"scenario": s.name, "scenario_hash": scenario_hash(s)})
    try:
        driver = build_scenario_driver(s)
        b.metadata = _metadata(s, driver)
        spec, lin = build_problem(s, driver.dt)
        _DISPATCH[command](s, spec, lin, driver, b)
    except (ScenarioError, ValueError, ResourceLimitError, NumericalError, IndexError, FloatingPointError) as exc:
        b.error = f"{type(exc).__name__}: {exc}"
    return b


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="svie-mp", description="Maximum-principle checks for controlled SVIEs.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--scenario", help="scenario file (epidemic-demo defaults to the shipped epidemic scenario)")
    p.add_argument("--backend", choices=("tree", "mc"))
    p.add_argument("--paths", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--out", default="svie_mp_out")
    p.add_argument("--mode", choices=("full", "diagonal"))
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    path = args.scenario
    if path is None:
        if args.command != "epidemic-demo":
            print("error: --scenario is required", file=sys.stderr)
            return 2
        path = shipped_scenario("epidemic")
    try:
        sc = load_scenario(path)
    except (OSError, ScenarioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    b = run_command(
        args.command, sc, backend=args.backend, paths=args.paths, steps=args.steps,
        seed=args.seed, tol=args.tol, mode=args.mode,
    )
    b.write(args.out)
    sys.stdout.write(b.summary())
    return b.exit_code


if __name__ == "__main__":
    sys.exit(main())
