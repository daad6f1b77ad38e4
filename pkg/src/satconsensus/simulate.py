"""Monte-Carlo simulation of the saturated network along sampled mode paths.

The stacked agent state x and the disagreement z are integrated side by side
with fixed-step RK4. Steps never straddle a mode jump or the disturbance
cut-off, and saturation is re-evaluated in every stage.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .disagreement import build_disagreement_system, from_disagreement
from .errors import DimensionError, MissingGainError
from .markov import ModeTrajectory, mix, sample_trajectory
from .regions import EllipsoidFamily, intersection_boundary_sample

DEFAULT_STEP = 1e-3
DIVERGENCE_NORM = 1e12
KINDS = ("zero", "constant", "ramp", "custom")


class DisturbanceError(ValueError):
    pass


@dataclass(frozen=True)
class DisturbanceSpec:
    """w_i(t) for the target agents, switched off at ``t_off``.

    ``vector`` is the constant value (constant) or the slope (ramp) applied to
    each target agent; custom disturbances are piecewise linear through
    ``samples = (times, values)`` with one column block of q per target agent.
    ``agents`` are 0-based.
    """

    kind: str
    n_agents: int
    q: int
    agents: tuple = ()
    vector: tuple = ()
    t_off: float = math.inf
    samples: tuple | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DisturbanceError(f"unknown disturbance kind {self.kind!r}")
        if any(not 0 <= a < self.n_agents for a in self.agents):
            raise DisturbanceError(f"target agents must lie in 0..{self.n_agents - 1}")

    def energy(self):
        """Total network energy sum_i int ||w_i||^2 over [0, t_off]."""
        if self.kind == "zero":
            return 0.0
        k = len(self.agents)
        v2 = float(np.dot(self.vector, self.vector))
        if self.kind == "constant":
            return k * v2 * self.t_off
        if self.kind == "ramp":
            return k * v2 * self.t_off ** 3 / 3.0
        t, vals = self.samples
        sq = np.sum(np.asarray(vals) ** 2, axis=1)
        return float(np.trapezoid(sq, t) if hasattr(np, "trapezoid") else np.trapz(sq, t))

    def arrays(self):
        """(offset, slope, t_off, table_times, table_values) on the stacked w."""
        nw = self.n_agents * self.q
        c = np.zeros(nw)
        b = np.zeros(nw)
        tab_t = np.zeros(0)
        tab_w = np.zeros((0, nw))
        if self.kind in ("constant", "ramp"):
            target = c if self.kind == "constant" else b
            for a in self.agents:
                target[a * self.q:(a + 1) * self.q] = self.vector
        elif self.kind == "custom":
            t, vals = self.samples
            tab_t = np.asarray(t, dtype=float)
            vals = np.asarray(vals, dtype=float)
            tab_w = np.zeros((tab_t.size, nw))
            for k, a in enumerate(self.agents):
                tab_w[:, a * self.q:(a + 1) * self.q] = vals[:, k * self.q:(k + 1) * self.q]
        t_off = self.t_off if self.kind != "zero" else 0.0
        return c, b, float(t_off), tab_t, tab_w

    def value(self, t):
        c, b, t_off, tab_t, tab_w = self.arrays()
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.where((t < t_off)[:, None], c[None, :] + t[:, None] * b[None, :], 0.0)
        if tab_t.size:
            inside = ((t >= tab_t[0]) & (t <= min(tab_t[-1], t_off)))[:, None]
            out = out + inside * np.column_stack([np.interp(t, tab_t, tab_w[:, j]) for j in range(tab_w.shape[1])])
        return out


def make_disturbance(kind, n_agents, q, agents=(), params=None, budget=None):
    """Build a disturbance whose total energy equals ``budget`` (= N rho).

    ramp: w_i(t) = v t  =>  energy k |v|^2 T^3 / 3, T_off = (3 E / (k |v|^2))^(1/3)
    constant: w_i(t) = c  =>  energy k |c|^2 T, T_off = E / (k |c|^2)
    ``params`` is the vector v or c (default all ones), or (times, values) for
    custom, where ``budget`` only acts as a check.
    """
    agents = tuple(int(a) for a in agents)
    if kind == "zero":
        return DisturbanceSpec("zero", n_agents, q)
    if not agents:
        raise DisturbanceError("a non-zero disturbance needs at least one target agent")
    if kind == "custom":
        t, vals = params
        t = np.asarray(t, dtype=float)
        vals = np.atleast_2d(np.asarray(vals, dtype=float))
        if vals.shape != (t.size, len(agents) * q) or np.any(np.diff(t) <= 0):
            raise DisturbanceError("custom samples need increasing times and one q-block per agent")
        spec = DisturbanceSpec("custom", n_agents, q, agents, (), float(t[-1]), (t, vals))
        if budget is not None and spec.energy() > budget * (1 + 1e-9):
            raise DisturbanceError(f"custom disturbance energy {spec.energy():g} exceeds the budget {budget:g}")
        return spec
    if kind not in ("constant", "ramp"):
        raise DisturbanceError(f"unknown disturbance kind {kind!r}")
    if budget is None or not budget > 0:
        raise DisturbanceError("budget must be positive")
    v = np.ones(q) if params is None else np.asarray(params, dtype=float).ravel()
    if v.shape != (q,):
        raise DisturbanceError(f"disturbance vector must have length q={q}")
    v2 = float(v @ v)
    if v2 == 0:
        raise DisturbanceError("zero amplitude cannot spend a positive budget")
    k = len(agents)
    t_off = budget / (k * v2) if kind == "constant" else (3 * budget / (k * v2)) ** (1 / 3)
    return DisturbanceSpec(kind, n_agents, q, agents, tuple(v.tolist()), t_off)


@njit(cache=True)
def _sat(v, u_max):
    out = np.empty_like(v)
    for i in range(v.size):
        out[i] = min(max(v[i], -u_max), u_max)
    return out


@njit(cache=True)
def _disturbance(t, active, c, b, tab_t, tab_w):
    w = np.zeros(c.size)
    if active:
        for j in range(c.size):
            w[j] = c[j] + b[j] * t
        if tab_t.size > 0 and t >= tab_t[0] and t <= tab_t[-1]:
            for j in range(c.size):
                w[j] += np.interp(t, tab_t, tab_w[:, j])
    return w


@njit(cache=True)
def _deriv(t, y, mode, active, nx, nz, Ax, Bx, Dx, LK, Az, UB, UD, F, u_max, C, c, b, tab_t, tab_w):
    x = y[:nx]
    z = y[nx:nx + nz]
    w = _disturbance(t, active, c, b, tab_t, tab_w)
    vx = LK[mode] @ x
    vz = F[mode] @ z
    dy = np.empty(y.size)
    dy[:nx] = Ax @ x - Bx @ _sat(vx, u_max) + Dx @ w
    dy[nx:nx + nz] = Az @ z - UB @ _sat(vz, u_max) + UD @ w
    dy[nx + nz] = w @ w
    yz = C @ z
    dy[nx + nz + 1] = yz @ yz
    return dy


@njit(cache=True)
def _gauge(z, shapes):
    g = 0.0
    for k in range(shapes.shape[0]):
        v = z @ (shapes[k] @ z)
        if v > g:
            g = v
    return g


@njit(cache=True)
def _run(y0, nx, nz, breaks, seg_modes, seg_active, h, Ax, Bx, Dx, LK, Az, UB, UD, F, u_max, C,
         c, b, tab_t, tab_w, shapes, level, stride, max_norm, n_max):
    n_seg = seg_modes.size
    times = np.empty(n_max)
    modes = np.empty(n_max, dtype=np.int64)
    Y = np.empty((n_max, y0.size))
    y = y0.copy()
    times[0] = breaks[0]
    modes[0] = seg_modes[0]
    Y[0] = y
    stored = 1
    step = 0
    diverged = False
    viol = 0
    checked = 0
    max_g = 0.0
    if shapes.shape[0] > 0:
        max_g = _gauge(y[nx:nx + nz], shapes)
        checked = 1
        if max_g > level:
            viol = 1
    for s in range(n_seg):
        ta = breaks[s]
        tb = breaks[s + 1]
        n = max(1, int(math.ceil((tb - ta) / h - 1e-9)))
        dt = (tb - ta) / n
        mode = seg_modes[s]
        act = seg_active[s]
        for k in range(n):
            t = ta + k * dt
            k1 = _deriv(t, y, mode, act, nx, nz, Ax, Bx, Dx, LK, Az, UB, UD, F, u_max, C, c, b, tab_t, tab_w)
            k2 = _deriv(t + dt / 2, y + dt / 2 * k1, mode, act, nx, nz, Ax, Bx, Dx, LK, Az, UB, UD, F, u_max, C,
                        c, b, tab_t, tab_w)
            k3 = _deriv(t + dt / 2, y + dt / 2 * k2, mode, act, nx, nz, Ax, Bx, Dx, LK, Az, UB, UD, F, u_max, C,
                        c, b, tab_t, tab_w)
            k4 = _deriv(t + dt, y + dt * k3, mode, act, nx, nz, Ax, Bx, Dx, LK, Az, UB, UD, F, u_max, C,
                        c, b, tab_t, tab_w)
            y = y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            step += 1
            if shapes.shape[0] > 0:
                g = _gauge(y[nx:nx + nz], shapes)
                checked += 1
                if g > level:
                    viol += 1
                if g > max_g:
                    max_g = g
            bad = False
            for i in range(nx + nz):
                if not abs(y[i]) < max_norm:
                    bad = True
            if (step % stride == 0 or k == n - 1 or bad) and stored < n_max:
                times[stored] = t + dt
                modes[stored] = mode
                Y[stored] = y
                stored += 1
            if bad:
                diverged = True
                return times[:stored], modes[:stored], Y[:stored], diverged, viol, checked, max_g
    return times[:stored], modes[:stored], Y[:stored], diverged, viol, checked, max_g


@dataclass
class Realization:
    trajectory: ModeTrajectory
    times: np.ndarray
    modes: np.ndarray
    x: np.ndarray
    z: np.ndarray
    u: np.ndarray
    u_sat: np.ndarray
    w: np.ndarray
    energy: np.ndarray
    output_energy: np.ndarray
    diverged: bool
    violations: int = 0
    checked: int = 0
    max_gauge: float = float("nan")
    n_agents: int = 0
    m: int = 0

    def consistency_error(self):
        """max_t ||z(t) - (U (x) I) x(t)||."""
        from .disagreement import to_disagreement
        zx = np.array([to_disagreement(xi, self.n_agents) for xi in self.x])
        return float(np.max(np.linalg.norm(zx - self.z, axis=1)))

    def budget_exceeded(self, budget, tol=1e-6):
        return bool(self.energy[-1] > budget * (1 + tol))

    def to_csv(self):
        nx, nz, nu, nw = self.x.shape[1], self.z.shape[1], self.u.shape[1], self.w.shape[1]
        header = (["time", "mode"] + [f"x{i}" for i in range(nx)] + [f"z{i}" for i in range(nz)]
                  + [f"u{i}" for i in range(nu)] + [f"sat_u{i}" for i in range(nu)]
                  + [f"w{i}" for i in range(nw)] + ["energy"])
        data = np.column_stack([self.times, self.modes + 1, self.x, self.z, self.u, self.u_sat, self.w,
                                self.energy])
        buf = io.StringIO()
        buf.write(",".join(header) + "\n")
        np.savetxt(buf, data, delimiter=",", fmt="%.10g")
        return buf.getvalue()


def _operators(model, K, C):
    system = build_disagreement_system(model, K)
    dyn = model.dynamics
    N = model.n_agents
    eye = np.eye(N)
    Ls = system.laplacians
    C = np.zeros((1, system.n_z)) if C is None else np.atleast_2d(np.asarray(C, dtype=float))
    if C.shape[1] != system.n_z:
        raise DimensionError(f"C needs {system.n_z} columns, got {C.shape}")
    return system, dict(
        Ax=np.kron(eye, dyn.A), Bx=np.kron(eye, dyn.B), Dx=np.kron(eye, dyn.D),
        LK=np.ascontiguousarray(np.array([np.kron(L, system.gain) for L in Ls])),
        Az=system.open_drift, UB=system.sat_input_map, UD=system.disturbance_map,
        F=np.ascontiguousarray(system.feedback_rows), C=C,
    )


def integrate(model, trajectory, disturbance=None, x0=None, h=DEFAULT_STEP, *, K=None, C=None,
              family=None, stride=1, max_norm=DIVERGENCE_NORM):
    """Integrate one realization along ``trajectory``.

    ``family`` (an EllipsoidFamily) makes the kernel count every step at which
    z leaves R(z, family.level). ``stride`` thins the stored samples; segment
    ends are always stored.
    """
    K = model.K if K is None else K
    if K is None:
        raise MissingGainError("simulation needs a consensus gain", key="dynamics.K")
    if h <= 0:
        raise ValueError("step h must be positive")
    system, ops = _operators(model, K, C)
    N, m = model.n_agents, model.dynamics.m
    nx, nz = N * m, system.n_z
    x0 = np.zeros(nx) if x0 is None else np.asarray(x0, dtype=float)
    if x0.shape != (nx,):
        raise DimensionError(f"x0 must have length {nx}")
    disturbance = disturbance or DisturbanceSpec("zero", N, model.dynamics.q)
    if disturbance.n_agents != N or disturbance.q != model.dynamics.q:
        raise DimensionError("disturbance does not match the network dimensions")
    c, b, t_off, tab_t, tab_w = disturbance.arrays()
    horizon = trajectory.horizon
    cuts = set(trajectory.jump_times.tolist()) | {horizon}
    if 0 < t_off < horizon:
        cuts.add(t_off)
    breaks = np.array(sorted(cuts))
    seg_modes = np.array([trajectory.mode_at(t) for t in breaks[:-1]], dtype=np.int64)
    seg_active = breaks[:-1] < t_off
    if family is None:
        shapes, level = np.zeros((0, nz, nz)), np.inf
    else:
        shapes, level = np.ascontiguousarray(np.array(family.shapes)), family.level + 1e-9
    n_steps = int(np.sum(np.maximum(1, np.ceil(np.diff(breaks) / h - 1e-9))))
    n_max = n_steps // max(stride, 1) + breaks.size + 2
    y0 = np.concatenate([x0, np.kron(system.U, np.eye(m)) @ x0, [0.0, 0.0]])
    times, modes, Y, diverged, viol, checked, max_g = _run(
        y0, nx, nz, breaks, seg_modes, seg_active, float(h), ops["Ax"], ops["Bx"], ops["Dx"], ops["LK"],
        ops["Az"], ops["UB"], ops["UD"], ops["F"], float(system.u_max), ops["C"], c, b, tab_t, tab_w,
        shapes, float(level), int(max(stride, 1)), float(max_norm), int(n_max))
    x = Y[:, :nx]
    z = Y[:, nx:nx + nz]
    u = -np.einsum("kij,kj->ki", ops["LK"][modes], x)
    return Realization(
        trajectory, times, modes, x, z, u, np.clip(u, -system.u_max, system.u_max),
        _w_record(times, modes, breaks, seg_active, disturbance), Y[:, nx + nz], Y[:, nx + nz + 1],
        bool(diverged), int(viol), int(checked), float(max_g), N, m)


def _w_record(times, modes, breaks, seg_active, disturbance):
    # samples at a cut-off belong to the segment that ends there (left limit)
    seg = np.clip(np.searchsorted(breaks, times, side="left") - 1, 0, seg_active.size - 1)
    c, b, _, tab_t, tab_w = disturbance.arrays()
    w = np.where(seg_active[seg][:, None], c[None, :] + times[:, None] * b[None, :], 0.0)
    if tab_t.size:
        inside = (seg_active[seg] & (times >= tab_t[0]) & (times <= tab_t[-1]))[:, None]
        w = w + inside * np.column_stack([np.interp(times, tab_t, tab_w[:, j]) for j in range(tab_w.shape[1])])
    return w


@dataclass
class InvarianceReport:
    realizations: int
    samples: int
    violations: int
    outer_level: float
    max_gauge: float
    ms_initial: float
    ms_final: float
    ms_final_stderr: float
    diverged: int
    max_energy: float
    budget: float | None
    budget_breaches: int
    per_realization: list = field(default_factory=list)

    @property
    def ms_ratio(self):
        return self.ms_final / self.ms_initial if self.ms_initial > 0 else float("nan")

    @property
    def passed(self):
        return self.violations == 0 and self.diverged == 0

    def to_dict(self):
        return {"realizations": self.realizations, "samples": self.samples, "violations": self.violations,
                "outer_level": self.outer_level, "max_gauge": self.max_gauge, "ms_initial": self.ms_initial,
                "ms_final": self.ms_final, "ms_final_stderr": self.ms_final_stderr, "ms_ratio": self.ms_ratio,
                "diverged": self.diverged, "max_energy": self.max_energy, "budget": self.budget,
                "budget_breaches": self.budget_breaches}


def verify_invariance(model, family, gamma, realizations=100, seed=0, *, start="boundary", disturbance=None,
                      budget=None, horizon=20.0, h=DEFAULT_STEP, K=None, generator=None, stride=100,
                      keep=0):
    """Monte-Carlo check that z(t) stays in R(z, 1/gamma).

    ``family`` is R(z, 1) from a certificate. Initial disagreements lie on the
    boundary of R(z, 1) (``start="boundary"``) or at the origin; agent 1
    starts at 0. ``generator`` defaults to the first polytope vertex.
    """
    if not 0 < gamma <= 1:
        raise ValueError("gamma must lie in (0, 1]")
    if start not in ("boundary", "origin"):
        raise ValueError("start must be 'boundary' or 'origin'")
    N, m = model.n_agents, model.dynamics.m
    G = model.polytope.vertices[0] if generator is None else np.asarray(generator, dtype=float)
    if np.ndim(G) == 1:
        G = mix(model.polytope, G)
    seeds = np.random.SeedSequence(seed).spawn(realizations + 1)
    if start == "boundary":
        z0s = intersection_boundary_sample(family.at_level(1.0), realizations, seed=seeds[-1])
    else:
        z0s = np.zeros((realizations, family.dim))
    outer = family.at_level(1.0 / gamma)
    viol = checked = div = breaches = 0
    max_g = 0.0
    z0_sq, zT_sq, energies, kept = [], [], [], []
    for k in range(realizations):
        traj = sample_trajectory(G, model.initial_distribution, horizon, seed=seeds[k])
        x0 = from_disagreement(z0s[k], np.zeros(m))
        r = integrate(model, traj, disturbance, x0, h, K=K, family=outer, stride=stride)
        viol += r.violations
        checked += r.checked
        div += r.diverged
        max_g = max(max_g, r.max_gauge)
        z0_sq.append(float(z0s[k] @ z0s[k]))
        zT_sq.append(float(r.z[-1] @ r.z[-1]))
        energies.append(float(r.energy[-1]))
        if budget is not None and r.budget_exceeded(budget):
            breaches += 1
        if k < keep:
            kept.append(r)
    zT = np.array(zT_sq)
    return InvarianceReport(realizations, checked, viol, outer.level, max_g, float(np.mean(z0_sq)),
                            float(zT.mean()), float(zT.std(ddof=1) / np.sqrt(zT.size)) if zT.size > 1 else 0.0,
                            div, float(max(energies)), budget, breaches, kept)


@dataclass
class L2Measurement:
    output_energy: float
    stderr: float
    disturbance_energy: float
    realizations: int

    def ratio(self):
        return self.output_energy / self.disturbance_energy if self.disturbance_energy > 0 else float("nan")


def measure_l2(model, C, disturbances, realizations=100, seed=0, *, horizon=20.0, h=DEFAULT_STEP, K=None,
               generator=None, stride=1000):
    """Sample mean of int ||C z||^2 from z(0) = 0 over the given disturbances.

    ``disturbances`` is cycled through so a batch can mix kinds.
    """
    N, m = model.n_agents, model.dynamics.m
    G = model.polytope.vertices[0] if generator is None else np.asarray(generator, dtype=float)
    seeds = np.random.SeedSequence(seed).spawn(realizations)
    out, energy = [], []
    for k in range(realizations):
        dist = disturbances[k % len(disturbances)]
        traj = sample_trajectory(G, model.initial_distribution, horizon, seed=seeds[k])
        r = integrate(model, traj, dist, np.zeros(N * m), h, K=K, C=C, stride=stride)
        out.append(float(r.output_energy[-1]))
        energy.append(float(r.energy[-1]))
    out = np.array(out)
    se = float(out.std(ddof=1) / np.sqrt(out.size)) if out.size > 1 else 0.0
    return L2Measurement(float(out.mean()), se, float(np.max(energy)), realizations)
