"""Block LMI assembly for the consensus certificates.

Every constraint is stored as a lower-triangular list of blocks and mirrored
when the full matrix is built, so symmetry is structural. Entries may be
numpy constants or affine cvxpy expressions; ``None`` stands for a zero
block.

Conventions used throughout (P_l = Y_l^{-1}, T = S^{-1}, X_l = G P_l^{-1}):

* sector cross term: S (U (x) B)' + X_l, paired with the saturation row
  (L_l W (x) K)_(q) Y_l - X_l(q). Both come from the dead-zone inequality
  Phi' T (Phi - G z) <= 0 on {|(L W (x) K - G) z| <= u_max}.
* disturbance row: sqrt(N rho) (U (x) D)' against -(1 - gamma)/gamma I,
  which Schur-reduces to the 1/eta term with gamma = 1/(1 + N rho eta).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np

from .disagreement import DisagreementSystem, selectors
from .errors import DimensionError, MissingGainError

STRICT_EPS = 1e-6


def schur_complement(M, split, pivot="lower"):
    """Schur complement of a symmetric 2x2 block matrix.

    ``split`` is the size of the leading block. With ``pivot="lower"`` the
    trailing block is eliminated: M11 - M12 M22^{-1} M12'; ``"upper"``
    eliminates the leading block instead.
    """
    M = np.asarray(M, dtype=float)
    M11, M12, M22 = M[:split, :split], M[:split, split:], M[split:, split:]
    piv = M22 if pivot == "lower" else M11
    if piv.size and np.linalg.cond(piv) > 1e12:
        raise np.linalg.LinAlgError("singular pivot block")
    if pivot == "lower":
        return M11 - M12 @ np.linalg.solve(M22, M12.T)
    if pivot == "upper":
        return M22 - M12.T @ np.linalg.solve(M11, M12)
    raise ValueError("pivot must be 'lower' or 'upper'")


schur_reduce = schur_complement


@dataclass
class DecisionVariable:
    name: str
    kind: str
    shape: tuple
    expr: object
    free: tuple
    structure: str = ""

    @property
    def n_free(self):
        n = 0
        for v in self.free:
            if v.attributes.get("symmetric"):
                k = v.shape[0]
                n += k * (k + 1) // 2
            else:
                n += v.size
        return n

    def value(self):
        val = self.expr.value
        return None if val is None else np.array(val, dtype=float).reshape(self.shape)

    def assign(self, value):
        """Set the free parameters from a full matrix value (for evaluation)."""
        value = np.asarray(value, dtype=float)
        if self.kind == "diagonal":
            self.free[0].value = np.diag(value).copy() if value.ndim == 2 else value
        elif self.kind == "structured":
            raise TypeError("assign the underlying free variables of a structured variable directly")
        else:
            self.free[0].value = value.reshape(self.free[0].shape)


def _var(name, kind, shape, **kw):
    if kind == "symmetric":
        v = cp.Variable(shape, symmetric=True, name=name)
        return DecisionVariable(name, kind, shape, v, (v,))
    if kind == "diagonal":
        v = cp.Variable(shape[0], name=name)
        return DecisionVariable(name, kind, shape, cp.diag(v), (v,))
    if kind == "scalar":
        v = cp.Variable(name=name, **kw)
        return DecisionVariable(name, kind, (), v, (v,))
    v = cp.Variable(shape, name=name)
    return DecisionVariable(name, "rectangular", shape, v, (v,))


def _shape(b):
    return tuple(b.shape) if b.shape else (1, 1)


def _as2d(b):
    if isinstance(b, cp.Expression):
        return b if b.ndim == 2 else cp.reshape(b, (1, 1), order="C")
    return np.atleast_2d(np.asarray(b, dtype=float))


@dataclass
class LmiConstraint:
    """Symmetric block matrix required to be ``nsd`` (<= 0) or ``psd`` (>= 0)."""

    name: str
    blocks: list
    sense: str
    margin: float = 0.0
    labels: tuple = ()
    sizes: list = field(init=False)

    def __post_init__(self):
        n = len(self.blocks)
        self.blocks = [[None if b is None else _as2d(b) for b in row] for row in self.blocks]
        if any(len(row) != i + 1 for i, row in enumerate(self.blocks)):
            raise ValueError("blocks must be lower triangular (row i holds i + 1 entries)")
        self.sizes = [_shape(self.blocks[i][i])[0] for i in range(n)]
        for i in range(n):
            for j in range(i + 1):
                b = self.blocks[i][j]
                if b is not None and _shape(b) != (self.sizes[i], self.sizes[j]):
                    raise DimensionError(f"{self.name}: block ({i},{j}) has shape {_shape(b)}, "
                                         f"expected {(self.sizes[i], self.sizes[j])}")

    @property
    def size(self):
        return sum(self.sizes)

    def _full(self, get, transpose, zeros):
        n = len(self.blocks)
        rows = []
        for i in range(n):
            row = []
            for j in range(n):
                b = self.blocks[i][j] if j <= i else self.blocks[j][i]
                if b is None:
                    row.append(zeros(self.sizes[i], self.sizes[j]))
                else:
                    b = get(b)
                    row.append(b if j <= i else transpose(b))
            rows.append(row)
        return rows

    def matrix(self):
        rows = self._full(lambda b: b, lambda b: b.T, lambda r, c: np.zeros((r, c)))
        return cp.bmat(rows)

    def cvx(self):
        M = self.matrix()
        eye = np.eye(self.size)
        return M << -self.margin * eye if self.sense == "nsd" else M >> self.margin * eye

    def numeric(self):
        def get(b):
            if isinstance(b, cp.Expression):
                v = b.value
                if v is None:
                    raise ValueError(f"{self.name}: variables have no value")
                return np.atleast_2d(np.asarray(v, dtype=float))
            return b

        rows = self._full(get, lambda b: b.T, lambda r, c: np.zeros((r, c)))
        return np.block(rows)

    def violation(self):
        """Largest eigenvalue of the wrong sign; <= 0 means satisfied."""
        M = self.numeric()
        eig = np.linalg.eigvalsh(M)
        return float(eig[-1]) if self.sense == "nsd" else float(-eig[0])

    def describe(self):
        return {"name": self.name, "sense": self.sense, "size": self.size,
                "block_sizes": self.sizes, "block_labels": list(self.labels), "margin": self.margin}


@dataclass
class LmiProblem:
    name: str
    variables: dict
    constraints: list
    objective: tuple | None = None
    params: dict = field(default_factory=dict)

    @property
    def n_free(self):
        return sum(v.n_free for v in self.variables.values())

    def add(self, constraint):
        self.constraints.append(constraint)
        return constraint

    def cvxpy_problem(self):
        cons = [c.cvx() for c in self.constraints]
        if self.objective is None:
            obj = cp.Minimize(0)
        else:
            sense, expr = self.objective[:2]
            obj = cp.Minimize(expr) if sense == "min" else cp.Maximize(expr)
        return cp.Problem(obj, cons)

    def constraint(self, name):
        for c in self.constraints:
            if c.name == name:
                return c
        raise KeyError(name)

    def dump(self):
        return {
            "name": self.name,
            "params": {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.params.items()},
            "variables": {n: {"kind": v.kind, "shape": list(v.shape), "free": v.n_free,
                              "structure": v.structure} for n, v in self.variables.items()},
            "constraints": [c.describe() for c in self.constraints],
            "objective": None if self.objective is None else
            {"sense": self.objective[0], "label": self.objective[2] if len(self.objective) > 2 else ""},
        }


def _he(M):
    return M + M.T


def _coupling(vertex, mode, Y):
    """R_l (as a list of blocks) and the diagonal of Q_l for one vertex."""
    s = vertex.shape[0]
    others = [j for j in range(s) if j != mode]
    R = [np.sqrt(max(vertex[mode, j], 0.0)) * Y[mode] for j in others]
    Q = [Y[j] for j in others]
    return R, Q


def _main_block(name, *, lam, off, S, R, Q, dist=None, output=None, margin):
    """Assemble [Lambda; off, -2S; (dist); R', 0, -Q; (output)] as lower blocks.

    ``dist`` is (row, diag) for the disturbance row and its diagonal block,
    ``output`` is (row, corner) for an L2 output row.
    """
    blocks = [[lam], [off, -2 * S]]
    labels = ["z", "phi"]
    if dist is not None:
        row, diag = dist
        blocks.append([row, None, diag])
        labels.append("w")
    for k, (Rj, Qj) in enumerate(zip(R, Q)):
        # a zero rate keeps its (zero) block so Q_l has a fixed shape
        blocks.append([Rj.T] + [None] * (len(blocks) - 1) + [-Qj])
        labels.append(f"coupling{k}")
    if output is not None:
        row, corner = output
        blocks.append([row] + [None] * (len(blocks) - 1) + [corner])
        labels.append("y")
    return LmiConstraint(name, blocks, "nsd", margin, tuple(labels))


def _sat_block(name, Yl, row, corner, margin):
    return LmiConstraint(name, [[Yl], [row, corner]], "psd", margin, ("z", "u"))


def _decision_set(sys_nz, sys_nu, s):
    Y = [_var(f"Y{l + 1}", "symmetric", (sys_nz, sys_nz)) for l in range(s)]
    X = [_var(f"X{l + 1}", "rectangular", (sys_nu, sys_nz)) for l in range(s)]
    S = _var("S", "diagonal", (sys_nu, sys_nu))
    S.structure = "positive diagonal (inverse of the sector multiplier)"
    return Y, X, S


def _positivity(problem, Y, S, eps):
    for v in Y:
        problem.add(LmiConstraint(f"{v.name}>0", [[v.expr - eps * np.eye(v.shape[0])]], "psd", 0.0, ("z",)))
    problem.add(LmiConstraint("S>0", [[S.expr - eps * np.eye(S.shape[0])]], "psd", 0.0, ("phi",)))


def _check_gamma(gamma):
    if not 0 < gamma < 1:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")


def _require_system(system):
    if not isinstance(system, DisagreementSystem):
        raise MissingGainError("analysis needs a closed-loop DisagreementSystem (model with K)")


def assemble_containment(Z, Y, margin=0.0):
    """[[Z, I], [I, Y_l]] >= 0 per mode, i.e. E(Z, 1) inside E(Y_l^{-1}, 1)."""
    Zexpr = Z.expr if isinstance(Z, DecisionVariable) else Z
    out = []
    for k, Yl in enumerate(Y):
        Yexpr = Yl.expr if isinstance(Yl, DecisionVariable) else Yl
        n = Yexpr.shape[0]
        out.append(LmiConstraint(f"contain[{k + 1}]", [[Zexpr], [np.eye(n), Yexpr]], "psd", margin, ("Z", "Y")))
    return out


def assemble_theorem1(system, polytope, rho=None, gamma=0.5, *, eps=STRICT_EPS, margin=STRICT_EPS,
                      region=True):
    """Regional certificate for given disturbance energy and level gamma.

    With ``rho=None`` the scalar ``rho_bar`` = sqrt(rho) becomes a decision
    variable (it enters the disturbance row affinely), which is how the
    tolerance maximisation is posed. ``region`` adds the inscribed
    ellipsoid variable Z and its containment constraints.
    """
    _require_system(system)
    _check_gamma(gamma)
    if rho is not None and rho < 0:
        raise ValueError("rho must be non-negative")
    s = system.n_modes
    if polytope.n_modes != s:
        raise DimensionError(f"polytope has {polytope.n_modes} modes, system has {s}")
    nz, nu, nw = system.n_z, system.n_u, system.n_w
    Y, X, S = _decision_set(nz, nu, s)
    variables = {v.name: v for v in Y + X + [S]}
    sqrtN = np.sqrt(system.n_agents)
    if rho is None:
        rb = _var("rho_bar", "scalar", (), nonneg=True)
        variables["rho_bar"] = rb
        dist_row = (sqrtN * system.disturbance_map.T) * rb.expr
    else:
        dist_row = np.sqrt(system.n_agents * rho) * system.disturbance_map.T
    dist_diag = -((1 - gamma) / gamma) * np.eye(nw)
    problem = LmiProblem("regional", variables, [],
                         params={"rho": rho, "gamma": gamma, "n_agents": system.n_agents,
                                 "u_max": system.u_max})
    _positivity(problem, Y, S, eps)
    UBt = system.sat_input_map.T
    for i, vertex in enumerate(polytope.vertices):
        for l in range(s):
            Yl = Y[l].expr
            lam = _he(system.drift[l] @ Yl) + vertex[l, l] * Yl
            off = S.expr @ UBt + X[l].expr
            R, Q = _coupling(vertex, l, [y.expr for y in Y])
            problem.add(_main_block(f"main[v{i + 1},m{l + 1}]", lam=lam, off=off, S=S.expr, R=R, Q=Q,
                                    dist=(dist_row, dist_diag), margin=margin))
    _add_saturation(problem, system, Y, X, system.u_max ** 2 * gamma, margin)
    if region:
        Z = _var("Z", "symmetric", (nz, nz))
        problem.variables["Z"] = Z
        for c in assemble_containment(Z, Y):
            problem.add(c)
    return problem


def _add_saturation(problem, system, Y, X, corner, margin, scale_by_y=True):
    for l in range(system.n_modes):
        F = system.feedback_rows[l]
        for qi in range(system.n_u):
            gain_row = F[qi:qi + 1, :] @ Y[l].expr if scale_by_y else F[qi:qi + 1, :]
            row = gain_row - X[l].expr[qi:qi + 1, :]
            problem.add(_sat_block(f"sat[m{l + 1},q{qi + 1}]", Y[l].expr, row, corner, margin))


def assemble_origin_variant(system, polytope, gamma=None, *, eps=STRICT_EPS, margin=STRICT_EPS, region=True):
    """Certificate for trajectories starting at consensus (eta = 1, gamma = 1/(N rho)).

    The disturbance row is absorbed into the corner as (U (x) D)(U (x) D)'.
    With ``gamma=None`` gamma is a decision variable, so minimising it maximises
    the certified energy N rho = 1/gamma.
    """
    _require_system(system)
    s = system.n_modes
    if polytope.n_modes != s:
        raise DimensionError(f"polytope has {polytope.n_modes} modes, system has {s}")
    nz, nu = system.n_z, system.n_u
    Y, X, S = _decision_set(nz, nu, s)
    variables = {v.name: v for v in Y + X + [S]}
    if gamma is None:
        g = _var("gamma", "scalar", ())
        variables["gamma"] = g
        gamma_expr = g.expr
    else:
        _check_gamma(gamma)
        gamma_expr = gamma
    problem = LmiProblem("origin", variables, [],
                         params={"gamma": gamma, "n_agents": system.n_agents, "u_max": system.u_max})
    _positivity(problem, Y, S, eps)
    UD = system.disturbance_map
    DD = UD @ UD.T
    UBt = system.sat_input_map.T
    for i, vertex in enumerate(polytope.vertices):
        for l in range(s):
            Yl = Y[l].expr
            lam = _he(system.drift[l] @ Yl) + vertex[l, l] * Yl + DD
            off = S.expr @ UBt + X[l].expr
            R, Q = _coupling(vertex, l, [y.expr for y in Y])
            problem.add(_main_block(f"main[v{i + 1},m{l + 1}]", lam=lam, off=off, S=S.expr, R=R, Q=Q,
                                    margin=margin))
    _add_saturation(problem, system, Y, X, system.u_max ** 2 * gamma_expr, margin)
    if region:
        Z = _var("Z", "symmetric", (nz, nz))
        problem.variables["Z"] = Z
        for c in assemble_containment(Z, Y):
            problem.add(c)
    return problem


def assemble_l2(system, polytope, rho, C, varrho=None, *, scale_row_by_y=False, eps=STRICT_EPS,
                margin=STRICT_EPS):
    """L2-gain certificate from w to y = C z, for total energy N rho.

    ``varrho=None`` makes varrho^2 a decision variable. By default the
    saturation rows are (L_l W (x) K)_(q) - X_l(q) with no Y_l factor;
    ``scale_row_by_y=True`` uses the Y_l-scaled rows of the analysis test.
    """
    _require_system(system)
    if rho <= 0:
        raise ValueError("rho must be positive")
    C = np.atleast_2d(np.asarray(C, dtype=float))
    nz, nu = system.n_z, system.n_u
    if C.shape[1] != nz:
        raise DimensionError(f"C needs {nz} columns, got {C.shape}")
    s = system.n_modes
    gamma = 1.0 / (system.n_agents * rho)
    Y, X, S = _decision_set(nz, nu, s)
    variables = {v.name: v for v in Y + X + [S]}
    if varrho is None:
        v2 = _var("varrho2", "scalar", ())
        variables["varrho2"] = v2
        corner = -v2.expr * np.eye(C.shape[0])
    else:
        corner = -(varrho ** 2) * np.eye(C.shape[0])
    problem = LmiProblem("l2", variables, [],
                         params={"rho": rho, "gamma": gamma, "varrho": varrho, "C": C,
                                 "n_agents": system.n_agents, "u_max": system.u_max,
                                 "scale_row_by_y": scale_row_by_y})
    _positivity(problem, Y, S, eps)
    UD = system.disturbance_map
    DD = UD @ UD.T
    UBt = system.sat_input_map.T
    for i, vertex in enumerate(polytope.vertices):
        for l in range(s):
            Yl = Y[l].expr
            lam = _he(system.drift[l] @ Yl) + vertex[l, l] * Yl + DD
            off = S.expr @ UBt + X[l].expr
            R, Q = _coupling(vertex, l, [y.expr for y in Y])
            problem.add(_main_block(f"main[v{i + 1},m{l + 1}]", lam=lam, off=off, S=S.expr, R=R, Q=Q,
                                    output=(C @ Yl, corner), margin=margin))
    _add_saturation(problem, system, Y, X, system.u_max ** 2 * gamma, margin, scale_by_y=scale_row_by_y)
    return problem


def assemble_synthesis(model, polytope=None, rho=0.0, gamma=0.5, *, eps=STRICT_EPS, margin=STRICT_EPS,
                       region=True):
    """Gain synthesis with structured Y = I (x) F; the gain is K = Kbar F^{-1}.

    ``polytope`` defaults to the model's own generator polytope.
    """
    _check_gamma(gamma)
    if model.K is not None:
        warnings.warn("model already has a gain; it is ignored by the synthesis conditions", stacklevel=2)
    polytope = model.polytope if polytope is None else polytope
    if rho < 0:
        raise ValueError("rho must be non-negative")
    dyn = model.dynamics
    N, m, p = model.n_agents, dyn.m, dyn.p
    s = model.n_modes
    U, W = selectors(N)
    nz, nu, nw = m * (N - 1), N * p, N * dyn.q
    F = _var("F", "symmetric", (m, m))
    Kbar = _var("Kbar", "rectangular", (p, m))
    I = np.eye(N - 1)
    Ybar_expr = cp.kron(I, F.expr)
    Ybar = DecisionVariable("Ybar", "structured", (nz, nz), Ybar_expr, F.free, "I_(N-1) (x) F")
    X = [_var(f"X{l + 1}", "rectangular", (nu, nz)) for l in range(s)]
    S = _var("S", "diagonal", (nu, nu))
    variables = {v.name: v for v in [F, Kbar, S] + X}
    problem = LmiProblem("synthesis", variables, [],
                         params={"rho": rho, "gamma": gamma, "n_agents": N, "u_max": dyn.u_max})
    problem.add(LmiConstraint("F>0", [[F.expr - eps * np.eye(m)]], "psd", 0.0, ("x",)))
    problem.add(LmiConstraint("S>0", [[S.expr - eps * np.eye(nu)]], "psd", 0.0, ("phi",)))
    UB = np.kron(U, dyn.B)
    UD = np.kron(U, dyn.D)
    dist_row = np.sqrt(N * rho) * UD.T
    dist_diag = -((1 - gamma) / gamma) * np.eye(nw)
    Ls = model.laplacians
    Yall = [Ybar_expr] * s
    for i, vertex in enumerate(polytope.vertices):
        for l in range(s):
            lin = cp.kron(I, dyn.A @ F.expr) - cp.kron(U @ Ls[l] @ W, dyn.B @ Kbar.expr)
            lam = _he(lin) + vertex[l, l] * Ybar_expr
            off = S.expr @ UB.T + X[l].expr
            R, Q = _coupling(vertex, l, Yall)
            problem.add(_main_block(f"main[v{i + 1},m{l + 1}]", lam=lam, off=off, S=S.expr, R=R, Q=Q,
                                    dist=(dist_row, dist_diag), margin=margin))
    corner = dyn.u_max ** 2 * gamma
    for l in range(s):
        G = cp.kron(Ls[l] @ W, Kbar.expr)
        for qi in range(nu):
            row = G[qi:qi + 1, :] - X[l].expr[qi:qi + 1, :]
            problem.add(_sat_block(f"sat[m{l + 1},q{qi + 1}]", Ybar_expr, row, corner, margin))
    if region:
        Z = _var("Z", "symmetric", (nz, nz))
        problem.variables["Z"] = Z
        for c in assemble_containment(Z, [Ybar] * s):
            problem.add(c)
    problem.variables["Ybar"] = Ybar
    return problem


def reference_variable_count(n_agents, m, p, n_modes, synthesis=False):
    """Decision-variable count formula for the analysis / synthesis conditions.

    Returns a dict with the total and its split into the Y, X and S parts
    (the S part counts one full symmetric Np x Np matrix per mode).
    """
    N, s = n_agents, n_modes
    Np, nz = N * p, m * (N - 1)
    x_part = s * Np * nz
    s_part = s * Np * (Np + 1) / 2
    if synthesis:
        total = s / 2 * (Np ** 2 + 2 * N ** 2 * p * m + (m * m + m) / s - 2 * N * p * m)
        return {"total": total, "Y": (m * m + m) / 2, "X": x_part, "S": s * Np ** 2 / 2}
    total = s / 2 * (Np ** 2 + nz ** 2 + 2 * N ** 2 * p * m + Np + nz - 2 * N * p * m)
    return {"total": total, "Y": s * nz * (nz + 1) / 2, "X": x_part, "S": s_part}
