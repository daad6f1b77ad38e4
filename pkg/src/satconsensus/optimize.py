"""Solver boundary and the optimisation drivers built on it.

Parameters that enter the conditions affinely (gamma in the origin variant,
rho_bar at fixed gamma, varrho^2) are optimised directly as SDP variables;
``bisect`` offers the same answers through repeated feasibility queries and
is used for cross-checks.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import cvxpy as cp
import numpy as np

from .disagreement import build_disagreement_system
from .lmi import (LmiConstraint, assemble_l2, assemble_origin_variant, assemble_synthesis,
                  assemble_theorem1)

log = logging.getLogger(__name__)

FEASIBLE = "feasible"
INFEASIBLE = "infeasible"
NUMERICAL_FAILURE = "numerical-failure"

VERIFY_TOL = 1e-7
# Clarabel reports "optimal" on trace(Z) problems up to ~35% above the optimum
# (less with small regularisation), so CVXOPT goes first; its LDL KKT solver
# covers the points where the default Cholesky factorisation breaks down.
SOLVER_PROFILES = {
    "cvxopt": ("CVXOPT", {"max_iters": 200}),
    "cvxopt-ldl": ("CVXOPT", {"max_iters": 300, "kktsolver": "ldl"}),
    "clarabel": ("CLARABEL", {"static_regularization_constant": 1e-10, "max_iter": 500}),
    "clarabel-default": ("CLARABEL", {}),
}
DEFAULT_SOLVERS = ("cvxopt", "cvxopt-ldl", "clarabel", "clarabel-default")
REL_TOL = 1e-3
# interior-point solvers stop this close (relatively) to an active bound
BOUND_HIT_TOL = 1e-4


@dataclass
class SolveReport:
    status: str
    values: dict = field(default_factory=dict)
    margins: dict = field(default_factory=dict)
    objective: float | None = None
    solver: str | None = None
    iterations: int | None = None
    solve_time: float = 0.0
    message: str = ""

    @property
    def feasible(self):
        return self.status == FEASIBLE

    @property
    def worst_margin(self):
        return max(self.margins.values()) if self.margins else float("nan")

    def to_dict(self, include_values=True):
        out = {
            "status": self.status, "objective": self.objective, "solver": self.solver,
            "iterations": self.iterations, "solve_time": self.solve_time, "message": self.message,
            "margins": self.margins,
        }
        if include_values:
            out["values"] = {k: np.asarray(v).tolist() for k, v in self.values.items()}
        return out

    def margins_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["constraint", "violation"])
        for k, v in self.margins.items():
            w.writerow([k, f"{v:.6e}"])
        return buf.getvalue()


def _bound(name, expr, lower=None, upper=None):
    """Scalar bounds expressed as 1x1 psd constraints so they are verified too."""
    cons = []
    if lower is not None:
        cons.append(LmiConstraint(f"{name}>={lower:g}", [[expr - lower]], "psd"))
    if upper is not None:
        cons.append(LmiConstraint(f"{name}<={upper:g}", [[upper - expr]], "psd"))
    return cons


def verify(problem):
    """Re-evaluate every constraint from the current variable values."""
    return {c.name: c.violation() for c in problem.constraints}


def solve(problem, solvers=DEFAULT_SOLVERS, verify_tol=VERIFY_TOL):
    """Solve an LmiProblem, falling back across solvers, and verify the result.

    A point counts as feasible only if every constraint, rebuilt from the
    returned values, has wrong-sign eigenvalues no larger than ``verify_tol``.
    """
    prob = problem.cvxpy_problem()
    tentative = None
    messages = []
    start = time.perf_counter()
    installed = cp.installed_solvers()
    for solver in solvers:
        backend, options = SOLVER_PROFILES.get(solver, (solver.upper(), {}))
        if backend not in installed:
            continue
        try:
            prob.solve(solver=backend, **options)
        except (cp.SolverError, ArithmeticError) as exc:
            messages.append(f"{solver}: {exc}")
            continue
        status = prob.status
        stats = prob.solver_stats
        iters = getattr(stats, "num_iters", None)
        if status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
            tentative = SolveReport(INFEASIBLE, solver=solver, iterations=iters,
                                    message=f"{solver}: {status}")
            if status == cp.INFEASIBLE:
                break
            messages.append(f"{solver}: {status}")
            continue
        if status in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
            margins = verify(problem)
            worst = max(margins.values())
            values = {n: v.value() for n, v in problem.variables.items()}
            report = SolveReport(FEASIBLE, values, margins,
                                 None if prob.value is None else float(prob.value), solver, iters)
            if worst <= verify_tol:
                report.solve_time = time.perf_counter() - start
                report.message = status
                return report
            messages.append(f"{solver}: {status} but verification failed (worst {worst:.2e})")
            continue
        messages.append(f"{solver}: {status}")
    elapsed = time.perf_counter() - start
    if tentative is not None:
        tentative.solve_time = elapsed
        return tentative
    return SolveReport(NUMERICAL_FAILURE, solve_time=elapsed, message="; ".join(messages))


def is_feasible(problem, **kw):
    return solve(problem, **kw).feasible


@dataclass
class BisectionResult:
    good: float
    bad: float
    evaluations: list

    @property
    def value(self):
        return self.good


def bisect(predicate, good, bad, rel_tol=REL_TOL, max_iter=200, check_ends=True, geometric=False):
    """Shrink [good, bad] around the point where ``predicate`` switches.

    ``predicate(good)`` must hold and ``predicate(bad)`` must fail; the
    endpoints may be given in either order. Stops once
    |good - bad| <= rel_tol * |good|.
    """
    evals = []
    if check_ends:
        for v, want in ((good, True), (bad, False)):
            ok = bool(predicate(v))
            evals.append((v, ok))
            if ok != want:
                raise ValueError(f"bisection bracket invalid: predicate({v:g}) = {ok}")
    for _ in range(max_iter):
        if abs(good - bad) <= rel_tol * abs(good):
            break
        mid = math.sqrt(good * bad) if geometric and good > 0 and bad > 0 else 0.5 * (good + bad)
        ok = bool(predicate(mid))
        evals.append((mid, ok))
        if ok:
            good = mid
        else:
            bad = mid
    return BisectionResult(good, bad, evals)


def _values(report, prefix):
    return [report.values[k] for k in sorted(report.values, key=_natural) if k.startswith(prefix)
            and k[len(prefix):].isdigit()]


def _natural(name):
    digits = "".join(ch for ch in name if ch.isdigit())
    return (name.rstrip("0123456789"), int(digits) if digits else -1)


@dataclass
class ToleranceResult:
    """Certified disturbance energy: total N rho and the associated level gamma."""

    status: str
    n_rho: float
    rho: float
    gamma: float
    eta: float
    report: SolveReport
    ceiling_hit: bool = False
    n_agents: int = 0
    per_gamma: list = field(default_factory=list)

    @property
    def shapes(self):
        """Lyapunov shapes P_l = Y_l^{-1} of the certificate."""
        return [np.linalg.inv(Y) for Y in _values(self.report, "Y")]

    def to_dict(self):
        return {"status": self.status, "n_rho": self.n_rho, "rho": self.rho, "gamma": self.gamma,
                "eta": self.eta, "ceiling_hit": self.ceiling_hit, "per_gamma": self.per_gamma,
                "solve": self.report.to_dict()}


def max_tolerance_from_origin(system, polytope, *, ceiling=1e6, method="sdp", rel_tol=REL_TOL,
                              region=False, solvers=DEFAULT_SOLVERS):
    """Largest total energy N rho certified for trajectories starting at consensus.

    Minimises gamma subject to the origin-variant conditions; N rho = 1/gamma.
    ``ceiling`` caps N rho (gamma >= 1/ceiling) so a missing disturbance path
    shows up as ``ceiling_hit`` rather than an unbounded problem.
    """
    N = system.n_agents
    floor = 1.0 / ceiling
    if method == "sdp":
        problem = assemble_origin_variant(system, polytope, None, region=region)
        g = problem.variables["gamma"].expr
        for c in _bound("gamma", g, lower=floor, upper=1.0):
            problem.add(c)
        problem.objective = ("min", g, "gamma")
        report = solve(problem, solvers=solvers)
        if not report.feasible:
            return ToleranceResult(report.status, float("nan"), float("nan"), float("nan"), 1.0, report,
                                   n_agents=N)
        gamma = float(report.values["gamma"])
    elif method == "bisect":
        cache = {}

        def ok(gm):
            r = solve(assemble_origin_variant(system, polytope, min(gm, 1 - 1e-12), region=region),
                      solvers=solvers)
            cache[gm] = r
            return r.feasible

        if not ok(1 - 1e-9):
            report = cache[1 - 1e-9]
            return ToleranceResult(report.status, float("nan"), float("nan"), float("nan"), 1.0, report,
                                   n_agents=N)
        if ok(floor):
            gamma, report = floor, cache[floor]
        else:
            res = bisect(ok, 1 - 1e-9, floor, rel_tol=rel_tol, check_ends=False, geometric=True)
            gamma, report = res.good, cache[res.good]
    else:
        raise ValueError(f"unknown method {method!r}")
    n_rho = 1.0 / gamma
    hit = gamma <= floor * (1 + BOUND_HIT_TOL)
    return ToleranceResult(FEASIBLE, n_rho, n_rho / N, gamma, 1.0, report, hit, N)


def default_gamma_grid(n=40):
    return np.geomspace(1e-3, 0.99, n)


def max_rho_at_gamma(system, polytope, gamma, *, ceiling=1e6, region=True, solvers=DEFAULT_SOLVERS):
    """max rho_bar = sqrt(rho) subject to the regional conditions at fixed gamma."""
    problem = assemble_theorem1(system, polytope, None, gamma, region=region)
    rb = problem.variables["rho_bar"].expr
    for c in _bound("rho_bar", rb, upper=math.sqrt(ceiling / system.n_agents)):
        problem.add(c)
    problem.objective = ("max", rb, "rho_bar")
    report = solve(problem, solvers=solvers)
    if not report.feasible:
        return float("nan"), report
    return max(float(report.values["rho_bar"]), 0.0) ** 2, report


def max_disturbance_tolerance(system, polytope, gammas=None, *, ceiling=1e6, region=True,
                              solvers=DEFAULT_SOLVERS):
    """Best certified energy over a grid of levels gamma (regime with free eta)."""
    gammas = default_gamma_grid() if gammas is None else np.asarray(gammas, dtype=float)
    if gammas.size == 0 or np.any((gammas <= 0) | (gammas >= 1)):
        raise ValueError("gamma grid must be non-empty and inside (0, 1)")
    N = system.n_agents
    best = None
    rows = []
    for g in gammas:
        rho, report = max_rho_at_gamma(system, polytope, float(g), ceiling=ceiling, region=region,
                                       solvers=solvers)
        rows.append({"gamma": float(g), "status": report.status, "n_rho": N * rho if report.feasible else None})
        if report.feasible and (best is None or rho > best[1]):
            best = (float(g), rho, report)
    if best is None:
        return ToleranceResult(INFEASIBLE, float("nan"), float("nan"), float("nan"), float("nan"),
                               SolveReport(INFEASIBLE, message="every gamma grid point infeasible"),
                               n_agents=N, per_gamma=rows)
    g, rho, report = best
    eta = (1 - g) / (g * N * rho) if rho > 0 else float("inf")
    hit = N * rho >= ceiling * (1 - BOUND_HIT_TOL)
    return ToleranceResult(FEASIBLE, N * rho, rho, g, eta, report, hit, N, rows)


@dataclass
class RegionResult:
    status: str
    Z: np.ndarray | None
    trace: float
    rho: float
    rho_max: float
    gamma: float
    report: SolveReport

    @property
    def shapes(self):
        return [np.linalg.inv(Y) for Y in _values(self.report, "Y")]

    def to_dict(self):
        return {"status": self.status, "trace": self.trace, "rho": self.rho, "rho_max": self.rho_max,
                "gamma": self.gamma, "Z": None if self.Z is None else self.Z.tolist(),
                "solve": self.report.to_dict()}


def maximize_region(system, polytope, gamma=0.8, *, backoff=REL_TOL, rho=None, solvers=DEFAULT_SOLVERS):
    """Largest inscribed ellipsoid E(Z, 1) at level gamma, via min trace(Z).

    Unless ``rho`` is given, rho is first pushed to its largest feasible value
    at this gamma and then backed off by the relative tolerance ``backoff``
    (the point a bisection on rho would settle at).
    """
    rho_max = float("nan")
    if rho is None:
        rho_max, first = max_rho_at_gamma(system, polytope, gamma, region=False, solvers=solvers)
        if not first.feasible:
            return RegionResult(first.status, None, float("nan"), float("nan"), rho_max, gamma, first)
        rho = rho_max * (1 - backoff)
    problem = assemble_theorem1(system, polytope, rho, gamma, region=True)
    Z = problem.variables["Z"].expr
    problem.objective = ("min", cp.trace(Z), "trace(Z)")
    report = solve(problem, solvers=solvers)
    if not report.feasible:
        return RegionResult(report.status, None, float("nan"), rho, rho_max, gamma, report)
    Zv = report.values["Z"]
    return RegionResult(FEASIBLE, Zv, float(np.trace(Zv)), rho, rho_max, gamma, report)


@dataclass
class L2Result:
    status: str
    varrho: float
    report: SolveReport
    floor_hit: bool = False
    ceiling_hit: bool = False

    def to_dict(self):
        return {"status": self.status, "varrho": self.varrho, "floor_hit": self.floor_hit,
                "ceiling_hit": self.ceiling_hit, "solve": self.report.to_dict()}


def estimate_l2_gain(system, polytope, rho, C, *, floor=1e-6, ceiling=1e8, method="sdp",
                     scale_row_by_y=False, rel_tol=REL_TOL, solvers=DEFAULT_SOLVERS):
    """Smallest certified L2 gain varrho from w to y = C z at energy N rho.

    ``floor`` and ``ceiling`` bound varrho^2.
    """
    if method == "sdp":
        problem = assemble_l2(system, polytope, rho, C, None, scale_row_by_y=scale_row_by_y)
        v2 = problem.variables["varrho2"].expr
        for c in _bound("varrho2", v2, lower=floor, upper=ceiling):
            problem.add(c)
        problem.objective = ("min", v2, "varrho^2")
        report = solve(problem, solvers=solvers)
        if not report.feasible:
            return L2Result(report.status, float("nan"), report)
        v2 = max(float(report.values["varrho2"]), floor)
    elif method == "bisect":
        cache = {}

        def ok(val):
            r = solve(assemble_l2(system, polytope, rho, C, math.sqrt(val), scale_row_by_y=scale_row_by_y),
                      solvers=solvers)
            cache[val] = r
            return r.feasible

        if not ok(ceiling):
            return L2Result(cache[ceiling].status, float("nan"), cache[ceiling])
        if ok(floor):
            v2 = floor
        else:
            v2 = bisect(ok, ceiling, floor, rel_tol=rel_tol, check_ends=False, geometric=True).good
        report = cache[v2]
    else:
        raise ValueError(f"unknown method {method!r}")
    # absolute slack too: a tiny floor sits inside the solvers' absolute gap (1e-7)
    floor_hit = v2 <= floor * (1 + BOUND_HIT_TOL) + 1e-7
    return L2Result(FEASIBLE, math.sqrt(v2), report, floor_hit, v2 >= ceiling * (1 - BOUND_HIT_TOL))


@dataclass
class SynthesisResult:
    status: str
    K: np.ndarray | None
    F: np.ndarray | None
    Kbar: np.ndarray | None
    gamma: float
    rho: float
    report: SolveReport

    def to_dict(self):
        return {"status": self.status, "gamma": self.gamma, "rho": self.rho,
                "K": None if self.K is None else self.K.tolist(), "solve": self.report.to_dict()}


def synthesize_gain(model, rho, gammas=None, *, polytope=None, solvers=DEFAULT_SOLVERS):
    """First gamma on the grid (largest first) whose synthesis conditions are feasible."""
    gammas = default_gamma_grid() if gammas is None else np.asarray(gammas, dtype=float)
    report = None
    for g in sorted(gammas, reverse=True):
        report = solve(assemble_synthesis(model.without_gain(), polytope, rho, float(g)), solvers=solvers)
        if report.feasible:
            F, Kbar = report.values["F"], report.values["Kbar"]
            K = Kbar @ np.linalg.inv(F)
            return SynthesisResult(FEASIBLE, K, F, Kbar, float(g), rho, report)
    return SynthesisResult(INFEASIBLE if report is None else report.status, None, None, None,
                           float("nan"), rho, report or SolveReport(INFEASIBLE))


DRIVERS = {
    "origin": "n_rho",
    "tolerance": "n_rho",
    "region": "trace_Z",
}


@dataclass
class SweepResult:
    parameter: str
    driver: str
    values: list
    objectives: list
    statuses: list
    extras: list = field(default_factory=list)

    @property
    def objective_name(self):
        return DRIVERS[self.driver]

    def __post_init__(self):
        if len(self.values) != len(self.objectives) or len(self.values) != len(self.statuses):
            raise ValueError("sweep columns differ in length")

    def to_dict(self):
        return {"parameter": self.parameter, "driver": self.driver, "objective": self.objective_name,
                "points": [dict(value=v, objective=o, status=s, **e) for v, o, s, e in
                           zip(self.values, self.objectives, self.statuses,
                               self.extras or [{}] * len(self.values))]}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, default=_json_default)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow([self.parameter, self.objective_name, "status"])
        for v, o, s in zip(self.values, self.objectives, self.statuses):
            w.writerow([f"{v:.12g}", "" if o is None or not math.isfinite(o) else f"{o:.12g}", s])
        return buf.getvalue()


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(type(obj).__name__)


def _variant(model, parameter, value):
    if parameter == "u_max":
        return model.with_u_max(value)
    if parameter == "eps":
        return model.with_polytope(model.polytope.scaled(value))
    raise ValueError(f"unknown sweep parameter {parameter!r} (expected 'u_max' or 'eps')")


def run_driver(model, driver, **kw):
    """One sweep point: returns (objective, status, extras)."""
    system = build_disagreement_system(model)
    if driver == "origin":
        res = max_tolerance_from_origin(system, model.polytope, **kw)
        return res.n_rho, res.status, {"gamma": res.gamma, "ceiling_hit": res.ceiling_hit}
    if driver == "tolerance":
        res = max_disturbance_tolerance(system, model.polytope, **kw)
        return res.n_rho, res.status, {"gamma": res.gamma, "eta": res.eta}
    if driver == "region":
        res = maximize_region(system, model.polytope, **kw)
        return res.trace, res.status, {"rho": res.rho, "rho_max": res.rho_max, "gamma": res.gamma}
    raise ValueError(f"unknown driver {driver!r} (expected one of {sorted(DRIVERS)})")


def _cache_key(model, parameter, value, driver, kw):
    doc = {"model": model.to_dict(), "parameter": parameter, "value": float(value), "driver": driver,
           "kw": kw}
    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=_json_default).encode()).hexdigest()[:24]


def _write_atomic(path, text):
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def sweep(model, parameter, grid, driver="origin", cache_dir=None, **driver_kw):
    """Run ``driver`` at every grid value of ``parameter`` ('u_max' or 'eps').

    With ``cache_dir`` each point is stored as its own JSON file keyed by the
    inputs, so an interrupted sweep resumes where it stopped. A failing
    point is recorded and the sweep continues.
    """
    grid = [float(v) for v in grid]
    if not grid:
        raise ValueError("sweep grid is empty")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("sweep grid must be strictly increasing")
    if driver not in DRIVERS:
        raise ValueError(f"unknown driver {driver!r} (expected one of {sorted(DRIVERS)})")
    cache = Path(cache_dir) if cache_dir is not None else None
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
    objectives, statuses, extras = [], [], []
    for value in grid:
        path = None
        if cache is not None:
            path = cache / f"{_cache_key(model, parameter, value, driver, driver_kw)}.json"
            if path.exists():
                point = json.loads(path.read_text())
                objectives.append(point["objective"])
                statuses.append(point["status"])
                extras.append(point["extras"])
                continue
        try:
            obj, status, extra = run_driver(_variant(model, parameter, value), driver, **driver_kw)
        except Exception as exc:  # recorded per point, the sweep goes on
            log.warning("sweep point %s=%g failed: %s", parameter, value, exc)
            obj, status, extra = float("nan"), NUMERICAL_FAILURE, {"error": str(exc)}
        obj = float(obj) if obj is not None else float("nan")
        objectives.append(obj)
        statuses.append(status)
        extras.append(extra)
        if path is not None:
            _write_atomic(path, json.dumps({"value": value, "objective": obj if math.isfinite(obj) else None,
                                            "status": status, "extras": extra}, default=_json_default))
    objectives = [float("nan") if o is None else o for o in objectives]
    return SweepResult(parameter, driver, grid, objectives, statuses, extras)
