"""Command-line front end.

Exit codes: 0 success/feasible, 1 usage or config error, 2 infeasible,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .disagreement import build_disagreement_system
from .errors import ModelError
from .lmi import assemble_origin_variant, assemble_theorem1
from .markov import sample_trajectory
from .optimize import (FEASIBLE, INFEASIBLE, NUMERICAL_FAILURE, default_gamma_grid, max_disturbance_tolerance,
                       max_tolerance_from_origin, maximize_region, solve, sweep, synthesize_gain)
from .regions import EllipsoidFamily
from .simulate import DisturbanceError, integrate, make_disturbance, verify_invariance
from .sysmodel import dump_model, load_model_file

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_NUMERICAL = 0, 1, 2, 3
STATUS_EXIT = {FEASIBLE: EXIT_OK, INFEASIBLE: EXIT_INFEASIBLE, NUMERICAL_FAILURE: EXIT_NUMERICAL}

log = logging.getLogger("satconsensus")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_grid(text):
    """'0.5,1,2' or 'start:stop:step' (stop inclusive)."""
    try:
        if ":" in text:
            a, b, step = (float(v) for v in text.split(":"))
            if step <= 0:
                raise ValueError
            n = int(np.floor((b - a) / step + 1e-9)) + 1
            return [round(a + k * step, 12) for k in range(n)]
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}; use 'a,b,c' or 'start:stop:step'") from None


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(type(obj).__name__)


def _write_json(path, doc):
    path.write_text(json.dumps(doc, indent=2, default=_json_default) + "\n")
    return path


def write_manifest(out_dir, args, outputs):
    params = {k: v for k, v in vars(args).items() if k not in ("func",)}
    doc = {"command": args.command, "config": params.get("config"), "parameters": params,
           "seed": params.get("seed"), "version": __version__,
           "started": time.strftime("%Y-%m-%dT%H:%M:%S"), "outputs": [str(out_dir / o) for o in outputs]}
    return _write_json(out_dir / "manifest.json", doc)


def _n_rho(args, n_agents):
    if args.n_rho is not None and args.rho is not None:
        raise UsageError("give either --rho or --n-rho, not both")
    if args.n_rho is not None:
        return float(args.n_rho)
    if args.rho is not None:
        return float(args.rho) * n_agents
    return None


def _certificate_doc(report, params):
    Ys = [report.values[k] for k in sorted(report.values) if k.startswith("Y") and k[1:].isdigit()]
    doc = {"status": report.status, "params": params, "solver": report.solver,
           "worst_margin": report.worst_margin if report.margins else None, "margins": report.margins}
    if report.feasible:
        doc["shapes"] = [np.linalg.inv(Y) for Y in Ys]
        doc["values"] = report.values
    return doc


def cmd_analyze(args, model, out):
    system = build_disagreement_system(model)
    N = model.n_agents
    n_rho = _n_rho(args, N)
    if n_rho is None or n_rho <= 0:
        raise UsageError("analyze needs a positive --rho or --n-rho")
    rho = n_rho / N
    if args.gamma is None and args.eta is None:
        gamma = 1.0 / n_rho
        if not 0 < gamma < 1:
            raise UsageError("origin-start analysis needs N rho > 1")
        problem = assemble_origin_variant(system, model.polytope, gamma)
        mode, eta = "origin", 1.0
    else:
        if args.gamma is not None:
            gamma = args.gamma
            eta = (1 - gamma) / (gamma * n_rho)
        else:
            eta = args.eta
            gamma = 1.0 / (1.0 + n_rho * eta)
        problem = assemble_theorem1(system, model.polytope, rho, gamma)
        mode = "region"
    report = solve(problem)
    params = {"mode": mode, "n_rho": n_rho, "rho": rho, "gamma": gamma, "eta": eta, "level": 1.0,
              "outer_level": 1.0 / gamma}
    _write_json(out / "certificate.json", _certificate_doc(report, params))
    (out / "margins.csv").write_text(report.margins_csv())
    print(f"{report.status}: N*rho={n_rho:g} gamma={gamma:.6g} eta={eta:.6g}"
          + (f" worst margin {report.worst_margin:.3e}" if report.margins else f" ({report.message})"))
    return STATUS_EXIT[report.status]


def cmd_max_tolerance(args, model, out):
    if args.umax_grid:
        res = sweep(model, "u_max", args.umax_grid, "origin" if args.from_origin else "tolerance",
                    cache_dir=out / "cache", **({} if args.from_origin else {"gammas": _gammas(args)}))
        (out / "sweep.csv").write_text(res.to_csv())
        (out / "sweep.json").write_text(res.to_json())
        for v, o, s in zip(res.values, res.objectives, res.statuses):
            print(f"u_max={v:g} N*rho={o:.6g} {s}")
        return EXIT_OK if all(s == FEASIBLE for s in res.statuses) else EXIT_INFEASIBLE
    system = build_disagreement_system(model)
    if args.from_origin:
        res = max_tolerance_from_origin(system, model.polytope)
    else:
        res = max_disturbance_tolerance(system, model.polytope, _gammas(args))
    params = {"mode": "origin" if args.from_origin else "region", "n_rho": res.n_rho, "rho": res.rho,
              "gamma": res.gamma, "eta": res.eta, "level": 1.0,
              "outer_level": 1.0 / res.gamma if res.gamma == res.gamma else None,
              "ceiling_hit": res.ceiling_hit}
    doc = _certificate_doc(res.report, params)
    doc["per_gamma"] = res.per_gamma
    _write_json(out / "certificate.json", doc)
    if res.status != FEASIBLE:
        print(f"{res.status}: no tolerance certificate ({res.report.message})")
        return STATUS_EXIT[res.status]
    note = " (ceiling hit: tolerance unbounded up to the cap)" if res.ceiling_hit else ""
    print(f"N*rho = {res.n_rho:.6g}  gamma = {res.gamma:.6g}  eta = {res.eta:.6g}{note}")
    return EXIT_OK


def _gammas(args):
    if args.gamma is not None:
        return [args.gamma]
    return list(args.gamma_grid) if args.gamma_grid else list(default_gamma_grid())


def cmd_synthesize(args, model, out):
    if model.K is not None:
        log.warning("config already contains K; it is ignored and replaced by the synthesized gain")
    N = model.n_agents
    n_rho = _n_rho(args, N)
    if n_rho is None or n_rho < 0:
        raise UsageError("synthesize needs --rho or --n-rho")
    rho = n_rho / N
    res = synthesize_gain(model.without_gain(), rho, _gammas(args))
    doc = res.to_dict()
    if res.status != FEASIBLE:
        _write_json(out / "synthesis.json", doc)
        print(f"{res.status}: synthesis conditions infeasible on the gamma grid")
        return STATUS_EXIT.get(res.status, EXIT_INFEASIBLE)
    closed = model.with_gain(res.K)
    check = solve(assemble_theorem1(build_disagreement_system(closed), model.polytope, rho, res.gamma))
    doc["reanalysis"] = {"status": check.status, "worst_margin": check.worst_margin if check.margins else None}
    _write_json(out / "synthesis.json", doc)
    (out / "gain.yaml").write_text(dump_model(closed))
    print(f"K = {np.array2string(res.K, precision=6)}  gamma = {res.gamma:.6g}  re-analysis: {check.status}")
    return STATUS_EXIT[check.status]


def cmd_sweep(args, model, out):
    if args.parameter == "u_max":
        grid = args.umax_grid
        driver = args.driver or "origin"
    else:
        grid = args.eps_grid
        driver = args.driver or "region"
    if not grid:
        raise UsageError(f"sweep over {args.parameter} needs --{'umax' if args.parameter == 'u_max' else 'eps'}-grid")
    kw = {}
    if driver == "region":
        kw["gamma"] = args.gamma if args.gamma is not None else 0.8
    elif driver == "tolerance":
        kw["gammas"] = _gammas(args)
    res = sweep(model, args.parameter, grid, driver, cache_dir=out / "cache", **kw)
    (out / "sweep.csv").write_text(res.to_csv())
    (out / "sweep.json").write_text(res.to_json())
    for v, o, s in zip(res.values, res.objectives, res.statuses):
        print(f"{args.parameter}={v:g} {res.objective_name}={o:.6g} {s}")
    if args.mark:
        regions = []
        for eps in args.mark:
            variant = model.with_polytope(model.polytope.scaled(eps))
            r = maximize_region(build_disagreement_system(variant), variant.polytope, kw.get("gamma", 0.8))
            entry = {"eps": eps, "status": r.status, "trace": r.trace, "rho": r.rho}
            if r.status == FEASIBLE:
                entry["family"] = EllipsoidFamily(tuple(r.shapes), 1.0).to_dict(tuple(args.axes))
                entry["inscribed"] = EllipsoidFamily((np.asarray(r.Z),), 1.0).to_dict(tuple(args.axes))
            regions.append(entry)
        _write_json(out / "regions.json", {"gamma": kw.get("gamma", 0.8), "regions": regions})
    return EXIT_OK if any(s == FEASIBLE for s in res.statuses) else EXIT_INFEASIBLE


def cmd_simulate(args, model, out):
    if model.K is None:
        raise UsageError("simulate needs a config with a gain K (run synthesize first)")
    cert = None
    if args.certificate:
        cert = json.loads(Path(args.certificate).read_text())
        if cert.get("status") != FEASIBLE:
            raise UsageError("the certificate file does not hold a feasible certificate")
    N, q = model.n_agents, model.dynamics.q
    budget = args.budget if args.budget is not None else (cert["params"]["n_rho"] if cert else None)
    try:
        if args.disturbance == "zero":
            dist = make_disturbance("zero", N, q)
        else:
            agents = [a - 1 for a in (args.agents or [1])]
            if budget is None:
                raise UsageError("a non-zero disturbance needs --budget or a certificate")
            dist = make_disturbance(args.disturbance, N, q, agents, args.amplitude, budget)
    except DisturbanceError as exc:
        raise UsageError(str(exc)) from None
    summary = {"disturbance": {"kind": dist.kind, "agents": [a + 1 for a in dist.agents], "t_off": dist.t_off,
                               "energy": dist.energy(), "budget": budget}}
    generator = model.polytope.vertices[0]
    seeds = np.random.SeedSequence(args.seed).spawn(args.exports)
    for k in range(args.exports):
        traj = sample_trajectory(generator, model.initial_distribution, args.horizon, seed=seeds[k])
        x0 = np.array(args.x0, dtype=float) if args.x0 else None
        r = integrate(model, traj, dist, x0, args.step, stride=args.stride)
        (out / f"realization_{k + 1}.csv").write_text(r.to_csv())
        (out / f"modes_{k + 1}.csv").write_text(traj.to_csv())
    code = EXIT_OK
    if cert is not None:
        family = EllipsoidFamily(tuple(np.asarray(P) for P in cert["shapes"]), 1.0)
        rep = verify_invariance(model, family, cert["params"]["gamma"], args.realizations, args.seed,
                                start="origin" if args.from_origin else "boundary", disturbance=dist,
                                budget=budget, horizon=args.horizon, h=args.step)
        summary["invariance"] = rep.to_dict()
        print(f"invariance: {rep.violations} of {rep.samples} samples outside R(z, {rep.outer_level:.6g}); "
              f"mean-square ratio {rep.ms_ratio:.3e}; diverged {rep.diverged}")
    _write_json(out / "simulation.json", summary)
    print(f"wrote {args.exports} realization export(s) to {out}")
    return code


COMMANDS = {
    "analyze": (cmd_analyze, ["certificate.json", "margins.csv"]),
    "max-tolerance": (cmd_max_tolerance, ["certificate.json"]),
    "synthesize": (cmd_synthesize, ["synthesis.json", "gain.yaml"]),
    "sweep": (cmd_sweep, ["sweep.csv", "sweep.json"]),
    "simulate": (cmd_simulate, ["simulation.json"]),
}


def build_parser():
    p = _Parser(prog="satconsensus", description="Consensus certificates for saturated Markov-switching networks")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", required=True, help="network YAML file")
        sp.add_argument("--out-dir", default=None, help="output directory (default: runs/<command>-<time>)")
        sp.add_argument("--seed", type=int, default=0)

    def energy(sp):
        sp.add_argument("--rho", type=float, help="disturbance energy per agent")
        sp.add_argument("--n-rho", type=float, help="total disturbance energy N*rho")

    a = sub.add_parser("analyze", help="feasibility of the certificate at given (rho, gamma/eta)")
    common(a)
    energy(a)
    a.add_argument("--gamma", type=float)
    a.add_argument("--eta", type=float)

    t = sub.add_parser("max-tolerance", help="largest certified disturbance energy")
    common(t)
    t.add_argument("--from-origin", action="store_true", help="trajectories starting at consensus")
    t.add_argument("--gamma", type=float)
    t.add_argument("--gamma-grid", type=parse_grid)
    t.add_argument("--umax-grid", type=parse_grid, help="sweep u_max instead of a single run")

    s = sub.add_parser("synthesize", help="design K from a config without gain")
    common(s)
    energy(s)
    s.add_argument("--gamma", type=float)
    s.add_argument("--gamma-grid", type=parse_grid)

    w = sub.add_parser("sweep", help="parameter sweep (u_max or generator scaling eps)")
    common(w)
    w.add_argument("--parameter", choices=["u_max", "eps"], required=True)
    w.add_argument("--driver", choices=["origin", "tolerance", "region"])
    w.add_argument("--umax-grid", type=parse_grid)
    w.add_argument("--eps-grid", type=parse_grid)
    w.add_argument("--gamma", type=float)
    w.add_argument("--gamma-grid", type=parse_grid)
    w.add_argument("--mark", type=parse_grid, help="eps values whose regions are exported")
    w.add_argument("--axes", type=int, nargs=2, default=[0, 1], help="coordinate pair of the region slices")

    m = sub.add_parser("simulate", help="Monte-Carlo realizations and invariance check")
    common(m)
    m.add_argument("--certificate", help="certificate.json from analyze or max-tolerance")
    m.add_argument("--disturbance", choices=["zero", "ramp", "constant"], default="zero")
    m.add_argument("--agents", type=int, nargs="+", help="1-based target agents")
    m.add_argument("--amplitude", type=float, nargs="+", help="constant value or ramp slope per channel")
    m.add_argument("--budget", type=float, help="total disturbance energy (default: certificate N*rho)")
    m.add_argument("--realizations", type=int, default=100)
    m.add_argument("--exports", type=int, default=1, help="realizations written as CSV")
    m.add_argument("--horizon", type=float, default=20.0)
    m.add_argument("--step", type=float, default=1e-3)
    m.add_argument("--stride", type=int, default=10, help="store every k-th step in exports")
    m.add_argument("--x0", type=float, nargs="+", help="initial stacked state for the exports")
    m.add_argument("--from-origin", action="store_true", help="invariance runs start at z = 0")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    # every returned point is re-verified, so the solver's accuracy warning is noise here
    warnings.filterwarnings("ignore", message="Solution may be inaccurate")
    func, outputs = COMMANDS[args.command]
    out = Path(args.out_dir) if args.out_dir else Path("runs") / f"{args.command}-{time.strftime('%Y%m%d-%H%M%S')}"
    try:
        model = load_model_file(args.config)
    except (ModelError, yaml.YAMLError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, args, outputs)
    try:
        return func(args, model, out)
    except (UsageError, ModelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
