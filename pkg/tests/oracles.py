"""Independent numpy evaluations of the certificate conditions.

These work in Lyapunov coordinates P_l = Y_l^{-1}, T = S^{-1}, G_l = X_l P_l,
where the conditions are nonlinear in the unknowns but need no coupling
blocks. They never touch the block assembly code.
"""
import warnings

import numpy as np

from satconsensus.disagreement import build_disagreement_system
from satconsensus.markov import GeneratorPolytope
from satconsensus.sysmodel import AgentDynamics, ModeTopology, NetworkModel


def _he(M):
    return M + M.T


def nonlinear_margins(system, vertex, rho, gamma, Y, X, S):
    """Worst wrong-sign eigenvalue of every condition, keyed like the assembled problem.

    The main condition per mode is
        [He(P A_l) + sum_j pi_lj P_j,  *,   *]
        [(U(x)B)' P + T G,            -2T,  *]
        [sqrt(N rho) (U(x)D)' P,       0,   -(1-gamma)/gamma I]  <= 0
    and each saturation row reduces to the scalar test
        (F_q - G_q) P^{-1} (F_q - G_q)' <= u_max^2 gamma.
    """
    s = system.n_modes
    P = [np.linalg.inv(y) for y in Y]
    T = np.linalg.inv(S)
    N = system.n_agents
    out = {}
    for l in range(s):
        G = X[l] @ P[l]
        top = _he(P[l] @ system.drift[l]) + sum(vertex[l, j] * P[j] for j in range(s))
        mid = system.sat_input_map.T @ P[l] + T @ G
        bot = np.sqrt(N * rho) * system.disturbance_map.T @ P[l]
        nz, nu, nw = top.shape[0], T.shape[0], bot.shape[0]
        M = np.block([
            [top, mid.T, bot.T],
            [mid, -2 * T, np.zeros((nu, nw))],
            [bot, np.zeros((nw, nu)), -((1 - gamma) / gamma) * np.eye(nw)],
        ])
        out[f"main[v1,m{l + 1}]"] = float(np.linalg.eigvalsh(M)[-1])
        F = system.feedback_rows[l]
        for q in range(system.n_u):
            r = F[q] - G[q]
            out[f"sat[m{l + 1},q{q + 1}]"] = float(r @ Y[l] @ r - system.u_max ** 2 * gamma)
    return out


def random_instance(rng, n_agents=None, m=None, p=None, n_modes=2):
    """A small random closed-loop network with a spanning-tree union graph."""
    N = n_agents or int(rng.integers(2, 4))
    m = m or int(rng.integers(1, 3))
    p = p or int(rng.integers(1, 3))
    q = int(rng.integers(1, 3))
    A = rng.standard_normal((m, m)) - 1.0 * np.eye(m)
    B = rng.standard_normal((m, p))
    D = 0.5 * rng.standard_normal((m, q))
    K = -0.5 * B.T if rng.random() < 0.5 else 0.5 * rng.standard_normal((p, m))
    modes = []
    for k in range(n_modes):
        adj = (rng.random((N, N)) < 0.5).astype(float)
        np.fill_diagonal(adj, 0)
        modes.append(adj)
    # a chain rooted at agent 0 in the last mode guarantees the spanning tree
    for i in range(1, N):
        modes[-1][i, i - 1] = 1.0
    rates = rng.uniform(0.2, 2.0, (n_modes, n_modes))
    np.fill_diagonal(rates, 0)
    np.fill_diagonal(rates, -rates.sum(axis=1))
    dyn = AgentDynamics(A, B, D, float(rng.uniform(0.5, 3.0)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model = NetworkModel(dyn, tuple(ModeTopology(k, a) for k, a in enumerate(modes)),
                             GeneratorPolytope((rates,)), K)
    return model, build_disagreement_system(model)


def random_candidate(rng, system, scale=1.0):
    nz, nu, s = system.n_z, system.n_u, system.n_modes
    Y = []
    for _ in range(s):
        R = rng.standard_normal((nz, nz))
        Y.append(scale * (R @ R.T + 0.1 * np.eye(nz)))
    X = [scale * rng.standard_normal((nu, nz)) for _ in range(s)]
    S = np.diag(rng.uniform(0.1, 3.0, nu))
    return Y, X, S
