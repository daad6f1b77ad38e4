"""Continuous-time Markov chain over topology modes.

Covers generator validation, polytopic mixing of uncertain generators,
stationary analysis and exact (holding-time / embedded-chain) sampling of
mode trajectories.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .errors import GeneratorError

GENERATOR_TOL = 1e-9


@dataclass
class GeneratorCheck:
    valid: bool
    problems: list = field(default_factory=list)

    def __bool__(self):
        return self.valid


def validate_generator(M, tol=GENERATOR_TOL) -> GeneratorCheck:
    """Check that ``M`` is a transition-rate matrix.

    Off-diagonal entries must be non-negative and every row must sum to
    zero (within ``tol``). Problems are reported with 1-based row numbers.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        return GeneratorCheck(False, [f"generator must be square, got shape {M.shape}"])
    problems = []
    s = M.shape[0]
    for i in range(s):
        off = np.delete(M[i], i)
        if np.any(off < -tol):
            j = int(np.argmin(np.where(np.arange(s) == i, np.inf, M[i])))
            problems.append(f"row {i + 1}: negative rate {M[i, j]:g} to state {j + 1}")
        row_sum = M[i].sum()
        if abs(row_sum) > tol:
            problems.append(f"row {i + 1}: sums to {row_sum:g}, expected 0")
    return GeneratorCheck(not problems, problems)


@dataclass(frozen=True)
class GeneratorPolytope:
    """Vertices of the uncertain generator, Pi(alpha) = sum_i alpha_i Pi^i."""

    vertices: tuple

    def __post_init__(self):
        verts = []
        if len(self.vertices) == 0:
            raise GeneratorError("polytope needs at least one vertex", key="polytope")
        for k, v in enumerate(self.vertices):
            v = np.array(v, dtype=float)
            check = validate_generator(v)
            if not check:
                raise GeneratorError("; ".join(check.problems), key=f"polytope[{k}]")
            if verts and v.shape != verts[0].shape:
                raise GeneratorError("vertices differ in size", key=f"polytope[{k}]")
            v.setflags(write=False)
            verts.append(v)
        object.__setattr__(self, "vertices", tuple(verts))

    @property
    def n_modes(self):
        return self.vertices[0].shape[0]

    @property
    def n_vertices(self):
        return len(self.vertices)

    def scaled(self, factor):
        return GeneratorPolytope(tuple(factor * v for v in self.vertices))


def mix(polytope: GeneratorPolytope, weights, tol=GENERATOR_TOL):
    """Convex combination of the polytope vertices."""
    w = np.asarray(weights, dtype=float).ravel()
    if w.shape != (polytope.n_vertices,):
        raise ValueError(f"expected {polytope.n_vertices} weights, got {w.size}")
    if np.any(w < -tol) or abs(w.sum() - 1.0) > tol:
        raise ValueError("mixing weights must lie on the unit simplex")
    return sum(wi * v for wi, v in zip(w, polytope.vertices))


def stationary_distribution(generator):
    """Solve mu Pi = 0, sum(mu) = 1 in the least-squares sense."""
    G = np.asarray(generator, dtype=float)
    s = G.shape[0]
    lhs = np.vstack([G.T, np.ones((1, s))])
    rhs = np.zeros(s + 1)
    rhs[-1] = 1.0
    mu, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
    return mu


def holding_rates(generator):
    return -np.diag(np.asarray(generator, dtype=float))


def embedded_chain(generator):
    """Jump-chain transition matrix; absorbing states map to themselves."""
    G = np.asarray(generator, dtype=float)
    rates = holding_rates(G)
    P = np.zeros_like(G)
    for i, r in enumerate(rates):
        if r > 0:
            P[i] = G[i] / r
            P[i, i] = 0.0
        else:
            P[i, i] = 1.0
    return P


@dataclass(frozen=True)
class ModeTrajectory:
    """Piecewise-constant mode signal.

    ``jump_times[k]`` is the start of the k-th segment (the first is 0) and
    ``modes[k]`` the 0-based mode active until the next start or ``horizon``.
    """

    jump_times: np.ndarray
    modes: np.ndarray
    horizon: float

    def __post_init__(self):
        t = np.asarray(self.jump_times, dtype=float)
        m = np.asarray(self.modes, dtype=np.int64)
        if t.shape != m.shape or t.size == 0:
            raise ValueError("jump_times and modes must be non-empty and aligned")
        if t[0] != 0.0 or np.any(np.diff(t) <= 0) or t[-1] > self.horizon:
            raise ValueError("segment starts must be increasing from 0 and within the horizon")
        t.setflags(write=False)
        m.setflags(write=False)
        object.__setattr__(self, "jump_times", t)
        object.__setattr__(self, "modes", m)

    @property
    def boundaries(self):
        return np.append(self.jump_times, self.horizon)

    def mode_at(self, t):
        k = np.searchsorted(self.jump_times, t, side="right") - 1
        return self.modes[np.clip(k, 0, len(self.modes) - 1)]

    def holding_times(self):
        """Durations of all completed segments (the last one is censored)."""
        return np.diff(self.jump_times)

    def to_csv(self) -> str:
        # modes are written 1-based to match the usual mode labels
        buf = io.StringIO()
        buf.write("time,mode\n")
        for t, m in zip(self.jump_times, self.modes):
            buf.write(f"{t:.12g},{m + 1}\n")
        buf.write(f"{self.horizon:.12g},{self.modes[-1] + 1}\n")
        return buf.getvalue()


def sample_trajectory(generator, initial, horizon, seed=None, max_jumps=10_000_000):
    """Draw one mode trajectory on [0, horizon].

    Holding time in mode i is Exp(-pi_ii); the next mode is drawn with
    probabilities pi_ij / -pi_ii. A state with zero exit rate is absorbing.
    ``initial`` is either a probability vector or an integer mode.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    G = np.asarray(generator, dtype=float)
    check = validate_generator(G)
    if not check:
        raise GeneratorError("; ".join(check.problems), key="generator")
    rng = np.random.default_rng(seed)
    s = G.shape[0]
    if np.ndim(initial) == 0:
        mode = int(initial)
    else:
        mu = np.asarray(initial, dtype=float)
        if mu.shape != (s,) or np.any(mu < -GENERATOR_TOL) or abs(mu.sum() - 1) > GENERATOR_TOL:
            raise ValueError("initial distribution must be a probability vector over the modes")
        mode = int(rng.choice(s, p=np.clip(mu, 0, None) / np.clip(mu, 0, None).sum()))
    rates = holding_rates(G)
    jump_p = embedded_chain(G)
    cum = np.cumsum(jump_p, axis=1)

    times = [0.0]
    modes = [mode]
    t = 0.0
    for _ in range(max_jumps):
        r = rates[mode]
        if r <= 0:
            break
        t += rng.exponential(1.0 / r)
        if t >= horizon:
            break
        mode = int(np.searchsorted(cum[mode], rng.random() * cum[mode, -1], side="right"))
        mode = min(mode, s - 1)
        times.append(t)
        modes.append(mode)
    return ModeTrajectory(np.array(times), np.array(modes), float(horizon))


def sample_jumps(generator, n_jumps, initial=0, seed=None):
    """Sample ``n_jumps`` transitions of the chain without a time horizon.

    Returns (states, holding_times) where ``holding_times[k]`` is the time
    spent in ``states[k]`` before jumping to ``states[k + 1]``.
    """
    G = np.asarray(generator, dtype=float)
    rates = holding_rates(G)
    if np.any(rates <= 0):
        raise ValueError("every state needs a positive exit rate to sample jumps")
    rng = np.random.default_rng(seed)
    cum = np.cumsum(embedded_chain(G), axis=1)
    states = np.empty(n_jumps + 1, dtype=np.int64)
    states[0] = initial
    u = rng.random(n_jumps)
    e = rng.standard_exponential(n_jumps)
    for k in range(n_jumps):
        i = states[k]
        states[k + 1] = min(np.searchsorted(cum[i], u[k] * cum[i, -1], side="right"), len(rates) - 1)
    holds = e / rates[states[:-1]]
    return states, holds
