"""Network description: agent dynamics, switching topologies and config I/O."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import yaml

from .errors import ConfigError, DimensionError, GeneratorError, StructureError
from .markov import GeneratorPolytope

log = logging.getLogger(__name__)

# Agent 1 (index 0) is the reference for disagreement coordinates.
PIVOT_AGENT = 0


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class AgentDynamics:
    """x_i' = A x_i + B sat(u_i) + D w_i, with per-channel limit u_max."""

    A: np.ndarray
    B: np.ndarray
    D: np.ndarray
    u_max: float

    def __post_init__(self):
        A, B, D = (_frozen(np.atleast_2d(M)) for M in (self.A, self.B, self.D))
        if A.shape[0] != A.shape[1]:
            raise DimensionError(f"A must be square, got {A.shape}", key="dynamics.A")
        m = A.shape[0]
        if B.shape[0] != m:
            raise DimensionError(f"B needs {m} rows, got {B.shape}", key="dynamics.B")
        if D.shape[0] != m:
            raise DimensionError(f"D needs {m} rows, got {D.shape}", key="dynamics.D")
        if not self.u_max > 0:
            raise ConfigError("u_max must be positive", key="dynamics.u_max")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "u_max", float(self.u_max))

    @property
    def m(self):
        return self.A.shape[0]

    @property
    def p(self):
        return self.B.shape[1]

    @property
    def q(self):
        return self.D.shape[1]


def build_laplacian(adjacency):
    """Laplacian D - A of a 0/1 adjacency matrix with zero diagonal.

    ``adjacency[i, j] = 1`` means agent i receives information from agent j.
    """
    adj = np.asarray(adjacency, dtype=float)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise StructureError(f"adjacency must be square, got shape {adj.shape}")
    if not np.all((adj == 0) | (adj == 1)):
        raise StructureError("adjacency entries must be 0 or 1")
    if np.any(np.diag(adj) != 0):
        raise StructureError("adjacency diagonal must be zero (no self-loops)")
    return np.diag(adj.sum(axis=1)) - adj


@dataclass(frozen=True)
class ModeTopology:
    index: int
    adjacency: np.ndarray
    laplacian: np.ndarray = field(init=False)

    def __post_init__(self):
        adj = _frozen(self.adjacency)
        lap = _frozen(build_laplacian(adj))
        object.__setattr__(self, "adjacency", adj)
        object.__setattr__(self, "laplacian", lap)

    @classmethod
    def from_laplacian(cls, index, laplacian):
        lap = np.asarray(laplacian, dtype=float)
        adj = -lap.copy()
        np.fill_diagonal(adj, 0.0)
        topo = cls(index, adj)
        if not np.allclose(topo.laplacian, lap):
            raise StructureError("matrix is not the Laplacian of a 0/1 digraph", key=f"modes[{index}]")
        return topo

    @property
    def n_agents(self):
        return self.adjacency.shape[0]


def _reachable_from(adj, root):
    # adj[i, j] = 1 means information flows j -> i
    n = adj.shape[0]
    seen = {root}
    stack = [root]
    while stack:
        j = stack.pop()
        for i in np.flatnonzero(adj[:, j]):
            if i not in seen:
                seen.add(int(i))
                stack.append(int(i))
    return len(seen) == n


def check_union_spanning_tree(modes) -> bool:
    """True iff the union graph has a root with a directed path to every node."""
    modes = list(modes)
    if not modes:
        raise StructureError("at least one mode is required", key="modes")
    n = modes[0].n_agents
    if any(t.n_agents != n for t in modes):
        raise StructureError("all modes must have the same number of agents", key="modes")
    union = np.zeros((n, n))
    for t in modes:
        union = np.maximum(union, t.adjacency)
    return any(_reachable_from(union, r) for r in range(n))


@dataclass(frozen=True)
class NetworkModel:
    dynamics: AgentDynamics
    modes: tuple
    polytope: GeneratorPolytope
    K: np.ndarray | None = None
    initial_distribution: np.ndarray | None = None
    spanning_tree: bool = field(init=False)

    def __post_init__(self):
        modes = tuple(self.modes)
        if not modes:
            raise StructureError("at least one mode is required", key="modes")
        n = modes[0].n_agents
        if n < 2:
            raise DimensionError("a network needs at least two agents", key="modes")
        for t in modes:
            if t.n_agents != n:
                raise DimensionError(f"mode {t.index + 1} has {t.n_agents} agents, expected {n}",
                                     key=f"modes[{t.index}]")
        object.__setattr__(self, "modes", modes)
        if self.polytope.n_modes != len(modes):
            raise DimensionError(
                f"generator is {self.polytope.n_modes}x{self.polytope.n_modes} but there are {len(modes)} modes",
                key="polytope")
        if self.K is not None:
            K = _frozen(np.atleast_2d(self.K))
            if K.shape != (self.dynamics.p, self.dynamics.m):
                raise DimensionError(f"K must be {self.dynamics.p}x{self.dynamics.m}, got {K.shape}",
                                     key="dynamics.K")
            object.__setattr__(self, "K", K)
        s = len(modes)
        if self.initial_distribution is None:
            mu = np.full(s, 1.0 / s)
        else:
            mu = np.asarray(self.initial_distribution, dtype=float)
            if mu.shape != (s,) or np.any(mu < 0) or abs(mu.sum() - 1) > 1e-9:
                raise ConfigError("must be a probability vector over the modes", key="initial_distribution")
        object.__setattr__(self, "initial_distribution", _frozen(mu))
        tree = check_union_spanning_tree(modes)
        object.__setattr__(self, "spanning_tree", tree)
        if not tree:
            warnings.warn("union of the mode graphs has no directed spanning tree; "
                          "consensus certificates are unlikely to exist", stacklevel=3)

    @property
    def n_agents(self):
        return self.modes[0].n_agents

    @property
    def n_modes(self):
        return len(self.modes)

    @property
    def laplacians(self):
        return [t.laplacian for t in self.modes]

    @property
    def pivot(self):
        return PIVOT_AGENT

    @property
    def has_gain(self):
        return self.K is not None

    def with_gain(self, K):
        return NetworkModel(self.dynamics, self.modes, self.polytope, K, self.initial_distribution)

    def without_gain(self):
        return NetworkModel(self.dynamics, self.modes, self.polytope, None, self.initial_distribution)

    def with_u_max(self, u_max):
        dyn = AgentDynamics(self.dynamics.A, self.dynamics.B, self.dynamics.D, u_max)
        return NetworkModel(dyn, self.modes, self.polytope, self.K, self.initial_distribution)

    def with_polytope(self, polytope):
        return NetworkModel(self.dynamics, self.modes, polytope, self.K, self.initial_distribution)

    def to_dict(self):
        dyn = self.dynamics
        doc = {
            "dynamics": {
                "A": dyn.A.tolist(),
                "B": dyn.B.tolist(),
                "D": dyn.D.tolist(),
                "u_max": dyn.u_max,
            },
            "modes": [t.adjacency.astype(int).tolist() for t in self.modes],
            "polytope": [v.tolist() for v in self.polytope.vertices],
            "initial_distribution": self.initial_distribution.tolist(),
        }
        if self.K is not None:
            doc["dynamics"]["K"] = self.K.tolist()
        return doc


def _matrix(doc, key, path):
    if key not in doc:
        raise ConfigError("missing required entry", key=f"{path}.{key}" if path else key)
    try:
        arr = np.array(doc[key], dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"not a numeric matrix ({exc})", key=f"{path}.{key}" if path else key) from None
    if arr.ndim == 1:
        arr = arr[:, None] if arr.size else arr.reshape(0, 0)
    if arr.ndim != 2:
        raise ConfigError("expected a 2-D array (list of rows)", key=f"{path}.{key}" if path else key)
    return arr


def model_from_dict(doc) -> NetworkModel:
    if not isinstance(doc, dict):
        raise ConfigError("top level must be a mapping")
    for section in ("dynamics", "modes", "polytope"):
        if section not in doc:
            raise ConfigError("missing required section", key=section)
    dyn_doc = doc["dynamics"]
    if not isinstance(dyn_doc, dict):
        raise ConfigError("must be a mapping", key="dynamics")
    A = _matrix(dyn_doc, "A", "dynamics")
    B = _matrix(dyn_doc, "B", "dynamics")
    D = _matrix(dyn_doc, "D", "dynamics") if "D" in dyn_doc else np.eye(A.shape[0])
    if "u_max" not in dyn_doc:
        raise ConfigError("missing required entry", key="dynamics.u_max")
    try:
        u_max = float(dyn_doc["u_max"])
    except (TypeError, ValueError):
        raise ConfigError("must be a number", key="dynamics.u_max") from None
    dims = dyn_doc.get("dims")
    if dims is not None:
        expected = {"m": A.shape[0], "p": B.shape[1], "q": D.shape[1]}
        for k, v in dims.items():
            if k not in expected:
                raise ConfigError(f"unknown dimension '{k}'", key="dynamics.dims")
            if int(v) != expected[k]:
                raise DimensionError(f"declared {k}={v} but matrices give {expected[k]}", key=f"dynamics.dims.{k}")
    dynamics = AgentDynamics(A, B, D, u_max)
    K = _matrix(dyn_doc, "K", "dynamics") if dyn_doc.get("K") is not None else None

    if not isinstance(doc["modes"], list) or not doc["modes"]:
        raise ConfigError("must be a non-empty list of adjacency matrices", key="modes")
    modes = []
    for k, entry in enumerate(doc["modes"]):
        try:
            adj = np.array(entry, dtype=float)
        except (TypeError, ValueError):
            raise ConfigError("not a numeric matrix", key=f"modes[{k}]") from None
        try:
            modes.append(ModeTopology(k, adj))
        except StructureError as exc:
            raise StructureError(str(exc), key=f"modes[{k}]") from None

    if not isinstance(doc["polytope"], list) or not doc["polytope"]:
        raise ConfigError("must be a non-empty list of generator matrices", key="polytope")
    try:
        vertices = [np.array(v, dtype=float) for v in doc["polytope"]]
    except (TypeError, ValueError):
        raise ConfigError("vertices must be numeric matrices", key="polytope") from None
    for k, v in enumerate(vertices):
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise GeneratorError(f"vertex must be square, got {v.shape}", key=f"polytope[{k}]")
    polytope = GeneratorPolytope(tuple(vertices))
    mu = doc.get("initial_distribution")
    return NetworkModel(dynamics, tuple(modes), polytope, K, None if mu is None else np.asarray(mu, float))


def load_model(text: str) -> NetworkModel:
    """Parse a YAML (or JSON) config document into a validated model."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"unparseable document: {exc}") from None
    return model_from_dict(doc)


def load_model_file(path) -> NetworkModel:
    with open(path) as fh:
        return load_model(fh.read())


def dump_model(model: NetworkModel) -> str:
    return yaml.safe_dump(model.to_dict(), sort_keys=False, default_flow_style=None)


def models_equal(a: NetworkModel, b: NetworkModel) -> bool:
    def same(x, y):
        if x is None or y is None:
            return x is None and y is None
        return x.shape == y.shape and np.array_equal(x, y)

    da, db = a.dynamics, b.dynamics
    return (same(da.A, db.A) and same(da.B, db.B) and same(da.D, db.D) and da.u_max == db.u_max
            and same(a.K, b.K) and a.n_modes == b.n_modes
            and all(same(x.adjacency, y.adjacency) for x, y in zip(a.modes, b.modes))
            and a.polytope.n_vertices == b.polytope.n_vertices
            and all(same(x, y) for x, y in zip(a.polytope.vertices, b.polytope.vertices))
            and same(a.initial_distribution, b.initial_distribution))
