"""Ellipsoids E(P, s) = {z : z'Pz <= s} and their per-mode intersections."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError

CONTAIN_TOL = 1e-9
SLICE_METHOD = "coordinate slice (principal submatrix; other coordinates fixed at 0)"


def _check_pd(P, what="shape"):
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise DimensionError(f"{what} must be square, got {P.shape}")
    if not np.allclose(P, P.T, atol=1e-10 * max(1.0, np.abs(P).max())):
        raise ValueError(f"{what} must be symmetric")
    P = 0.5 * (P + P.T)
    if np.linalg.eigvalsh(P)[0] <= 0:
        raise ValueError(f"{what} must be positive definite")
    return P


@dataclass(frozen=True)
class EllipsoidFamily:
    """R(z, level): the intersection of E(P_l, level) over all modes."""

    shapes: tuple
    level: float = 1.0

    def __post_init__(self):
        if len(self.shapes) == 0:
            raise ValueError("ellipsoid family needs at least one shape")
        shapes = tuple(_check_pd(P, f"shapes[{k}]") for k, P in enumerate(self.shapes))
        n = shapes[0].shape[0]
        if any(P.shape != (n, n) for P in shapes):
            raise DimensionError("shapes differ in size")
        if not self.level > 0:
            raise ValueError("level must be positive")
        for P in shapes:
            P.setflags(write=False)
        object.__setattr__(self, "shapes", shapes)

    @classmethod
    def from_certificate(cls, Ys, level=1.0):
        return cls(tuple(np.linalg.inv(Y) for Y in Ys), level)

    @property
    def dim(self):
        return self.shapes[0].shape[0]

    def at_level(self, level):
        return EllipsoidFamily(self.shapes, level)

    def quadratic_forms(self, z):
        """z'P_l z for every mode; ``z`` may be a vector or an (n, dim) batch."""
        z = np.asarray(z, dtype=float)
        if z.shape[-1] != self.dim:
            raise DimensionError(f"expected vectors of length {self.dim}, got {z.shape}")
        return np.stack([np.einsum("...i,ij,...j->...", z, P, z) for P in self.shapes], axis=-1)

    def gauge(self, z):
        """max_l z'P_l z; z is in R(z, s) iff gauge(z) <= s."""
        return self.quadratic_forms(z).max(axis=-1)

    def contains(self, z, tol=CONTAIN_TOL):
        return bool(np.all(self.gauge(z) <= self.level + tol))

    def to_dict(self, axes=None):
        doc = {"level": self.level, "shapes": [P.tolist() for P in self.shapes]}
        if axes is not None:
            i, j = axes
            doc["slice"] = {"axes": [i, j], "method": SLICE_METHOD,
                            "ellipses": [ellipse_parameters(S, self.level) for S in slice_2d(self, axes)]}
        return doc

    def to_json(self, axes=None):
        return json.dumps(self.to_dict(axes), indent=2)


def contains(family, z, tol=CONTAIN_TOL):
    return family.contains(z, tol)


def inscribed_check(Z, family, tol=CONTAIN_TOL):
    """Whether E(Z, 1) lies inside R(z, level), i.e. Z - P_l/level >= -tol I for all l."""
    Z = np.asarray(Z, dtype=float)
    if Z.shape != (family.dim, family.dim):
        raise DimensionError(f"Z must be {family.dim}x{family.dim}")
    return all(np.linalg.eigvalsh(Z - P / family.level)[0] >= -tol for P in family.shapes)


def _unit_sphere(count, dim, rng):
    g = rng.standard_normal((count, dim))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def boundary_sample(P, level, count, seed=None):
    """Points uniformly distributed over the unit sphere, mapped onto z'Pz = level.

    The map is z = sqrt(level) P^{-1/2} u.
    """
    P = _check_pd(P)
    w, V = np.linalg.eigh(P)
    root_inv = V @ np.diag(w ** -0.5) @ V.T
    u = _unit_sphere(count, P.shape[0], np.random.default_rng(seed))
    return np.sqrt(level) * u @ root_inv.T


def intersection_boundary_sample(family, count, seed=None):
    """Points on the boundary of R(z, level) along uniformly random directions.

    Each direction d is scaled to the first ellipsoid it hits, so every point
    satisfies max_l z'P_l z = level. The density on the surface is not uniform.
    """
    d = _unit_sphere(count, family.dim, np.random.default_rng(seed))
    return d * np.sqrt(family.level / family.gauge(d))[:, None]


def slice_2d(family, axes):
    """Per-mode 2x2 shape matrices of the (i, j) coordinate slice."""
    i, j = axes
    n = family.dim
    if not (0 <= i < n and 0 <= j < n) or i == j:
        raise ValueError(f"axes must be two distinct indices in [0, {n})")
    idx = np.ix_([i, j], [i, j])
    return [P[idx].copy() for P in family.shapes]


def ellipse_parameters(S, level=1.0):
    """Center, semi-axes and rotation (radians) of {v : v'Sv <= level} in 2-D."""
    S = _check_pd(S)
    w, V = np.linalg.eigh(S)
    axes = np.sqrt(level / w)
    angle = float(np.arctan2(V[1, 0], V[0, 0]))
    return {"center": [0.0, 0.0], "semi_axes": axes.tolist(), "rotation": angle}


def ellipse_outline(S, level=1.0, n=200):
    """Closed polyline on the boundary of a 2-D ellipse (for plotting)."""
    t = np.linspace(0, 2 * np.pi, n)
    circle = np.column_stack([np.cos(t), np.sin(t)])
    w, V = np.linalg.eigh(_check_pd(S))
    return circle @ (V @ np.diag(np.sqrt(level / w)) @ V.T).T
