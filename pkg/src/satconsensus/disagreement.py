"""Disagreement coordinates, saturation and the reduced switched system.

With the pivot agent 1, z_i = x_1 - x_{i+1}. The closed loop in these
coordinates is

    z' = (I (x) A - U L W (x) B K) z + (U (x) B) Phi((L W (x) K) z) + (U (x) D) w

where Phi(u) = u - sat(u) is the dead-zone nonlinearity.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, MissingGainError


def selectors(n_agents):
    """Return (U, W) with U = [1 -I], W = [0 -I]^T and U W = I."""
    k = n_agents - 1
    U = np.hstack([np.ones((k, 1)), -np.eye(k)])
    W = np.vstack([np.zeros((1, k)), -np.eye(k)])
    return U, W


def to_disagreement(x, n_agents):
    x = np.asarray(x, dtype=float)
    if x.shape[0] % n_agents:
        raise DimensionError(f"state length {x.shape[0]} is not a multiple of N={n_agents}")
    m = x.shape[0] // n_agents
    U, _ = selectors(n_agents)
    return np.kron(U, np.eye(m)) @ x


def from_disagreement(z, x1):
    z = np.asarray(z, dtype=float)
    x1 = np.atleast_1d(np.asarray(x1, dtype=float))
    m = x1.shape[0]
    if z.shape[0] % m:
        raise DimensionError(f"disagreement length {z.shape[0]} is not a multiple of m={m}")
    n_agents = z.shape[0] // m + 1
    _, W = selectors(n_agents)
    return np.kron(np.ones(n_agents), x1) + np.kron(W, np.eye(m)) @ z


@dataclass(frozen=True)
class SaturationSpec:
    u_max: float
    channels: int | None = None

    def __post_init__(self):
        if not self.u_max > 0:
            raise ValueError("u_max must be positive")


def saturate(u, spec):
    u_max = spec.u_max if isinstance(spec, SaturationSpec) else float(spec)
    return np.clip(u, -u_max, u_max)


def dead_zone(u, spec):
    return np.asarray(u, dtype=float) - saturate(u, spec)


def in_sector_set(u, aux, spec):
    """Membership of u in {u : |u_r - aux_r| <= u_max for every channel r}."""
    u_max = spec.u_max if isinstance(spec, SaturationSpec) else float(spec)
    return bool(np.all(np.abs(np.asarray(u) - np.asarray(aux)) <= u_max))


def sector_value(u, aux, T, spec):
    """Phi(u)' T (Phi(u) - aux).

    This is non-positive whenever ``u`` lies in the sector set around
    ``aux``, for any positive diagonal T.
    """
    T = np.atleast_2d(np.asarray(T, dtype=float))
    if np.any(T != np.diag(np.diag(T))) or np.any(np.diag(T) <= 0):
        raise ValueError("T must be diagonal with positive entries")
    phi = dead_zone(u, spec)
    return float(phi @ T @ (phi - np.asarray(aux, dtype=float)))


def check_sector_condition(u, aux, T, spec, tol=0.0):
    return sector_value(u, aux, T, spec) <= tol


@dataclass(frozen=True)
class DisagreementSystem:
    """Per-mode matrices of the reduced system, Kronecker products expanded.

    Attributes:
        drift: (s, nz, nz) stack of I (x) A - U L_l W (x) B K.
        open_drift: I (x) A on the reduced state.
        sat_input_map: U (x) B, shared by every mode.
        feedback_rows: (s, nu, nz) stack of L_l W (x) K.
        disturbance_map: U (x) D.
    """

    n_agents: int
    m: int
    p: int
    q: int
    u_max: float
    U: np.ndarray
    W: np.ndarray
    laplacians: np.ndarray
    gain: np.ndarray
    drift: np.ndarray
    open_drift: np.ndarray
    sat_input_map: np.ndarray
    feedback_rows: np.ndarray
    disturbance_map: np.ndarray

    @property
    def n_z(self):
        return self.m * (self.n_agents - 1)

    @property
    def n_u(self):
        return self.n_agents * self.p

    @property
    def n_w(self):
        return self.n_agents * self.q

    @property
    def n_modes(self):
        return self.drift.shape[0]

    @property
    def saturation(self):
        return SaturationSpec(self.u_max, self.n_u)

    def stacked_input(self, z, mode):
        return self.feedback_rows[mode] @ z

    def rhs_sector(self, z, mode, w):
        """Right-hand side in dead-zone form."""
        u = self.feedback_rows[mode] @ z
        return self.drift[mode] @ z + self.sat_input_map @ dead_zone(u, self.u_max) + self.disturbance_map @ w

    def rhs_saturated(self, z, mode, w):
        """Right-hand side with the saturation applied directly."""
        u = self.feedback_rows[mode] @ z
        return self.open_drift @ z - self.sat_input_map @ saturate(u, self.u_max) + self.disturbance_map @ w


def build_disagreement_system(model, K=None) -> DisagreementSystem:
    K = model.K if K is None else np.atleast_2d(np.asarray(K, dtype=float))
    if K is None:
        raise MissingGainError("the model has no consensus gain K", key="dynamics.K")
    dyn = model.dynamics
    N = model.n_agents
    U, W = selectors(N)
    Ls = np.array(model.laplacians)
    ones = np.ones(N)
    # structural identities the reduction relies on
    assert np.allclose(U @ W, np.eye(N - 1)) and np.allclose(U @ ones, 0)
    for L in Ls:
        assert np.allclose(L @ ones, 0)
    open_drift = np.kron(np.eye(N - 1), dyn.A)
    drift = np.array([open_drift - np.kron(U @ L @ W, dyn.B @ K) for L in Ls])
    feedback = np.array([np.kron(L @ W, K) for L in Ls])
    return DisagreementSystem(
        n_agents=N, m=dyn.m, p=dyn.p, q=dyn.q, u_max=dyn.u_max, U=U, W=W,
        laplacians=Ls, gain=K, drift=drift, open_drift=open_drift,
        sat_input_map=np.kron(U, dyn.B), feedback_rows=feedback,
        disturbance_map=np.kron(U, dyn.D),
    )
