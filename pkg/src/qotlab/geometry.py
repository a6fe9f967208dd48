"""Spread functions, distances, and support-shape metrics.

The spread profile rho(r) = min over atoms x of the mass inside the *open*
ball B(x, r); for a discrete measure it is a left-continuous step function of
r with breakpoints at the pairwise atom distances.  The spread functions

    delta(eps)    = inf{r > 0 : r * rho(r)       > eps}
    delta_st(eps) = inf{r > 0 : r * rho(sqrt(r)) > eps}

are computed in closed form on each constancy interval of rho.
"""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import minimum_spanning_tree, shortest_path
from scipy.spatial import ConvexHull, QhullError

from .measures import DiscreteMeasure

DIST_DECIMALS = 12


class GeometryError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SpreadProfile:
    """Step function rho: rho(r) = rho_values[k] on (radii[k], radii[k+1]],
    and rho(r) = rho_values[-1] = 1 beyond the last breakpoint.  radii[0] = 0."""

    radii: np.ndarray
    rho_values: np.ndarray
    source: str = ""

    def rho_at(self, r: float) -> float:
        if r <= 0:
            raise GeometryError("rho is defined for r > 0")
        idx = int(np.searchsorted(self.radii, r, side="left")) - 1
        idx = min(max(idx, 0), len(self.radii) - 1)
        return float(self.rho_values[idx])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("r,rho\n")
        for r, rho in zip(self.radii, self.rho_values):
            buf.write(f"{float(r)!r},{float(rho)!r}\n")
        return buf.getvalue()


def _pairwise_distances(mu: DiscreteMeasure) -> np.ndarray:
    diff = mu.atoms[:, None, :] - mu.atoms[None, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    return np.round(dist, DIST_DECIMALS)


def build_spread(mu: DiscreteMeasure, source: str = "") -> SpreadProfile:
    """Profile of rho over all candidate radii (the distinct pairwise
    distances, rounded to 12 decimals for order-independent breakpoints)."""
    dist = _pairwise_distances(mu)
    radii = np.unique(dist)  # starts at 0 (self-distances)
    n = len(mu)
    masses = np.empty((n, len(radii)))
    for a in range(n):
        order = np.argsort(dist[a], kind="stable")
        ds = dist[a][order]
        cw = np.cumsum(mu.weights[order])
        # mass of the closed ball of radius radii[k]; the open ball of any
        # r in (radii[k], radii[k+1]] contains exactly these atoms
        pos = np.searchsorted(ds, radii, side="right") - 1
        masses[a] = cw[pos]
    rho = masses.min(axis=0)
    return SpreadProfile(radii=radii, rho_values=rho, source=source)


def _first_piece_exceeding(profile: SpreadProfile, eps: float, squared: bool) -> int:
    radii = profile.radii**2 if squared else profile.radii
    sup = np.empty(len(radii))
    sup[:-1] = radii[1:] * profile.rho_values[:-1]
    sup[-1] = np.inf  # last piece has rho = 1 and unbounded r
    above = sup > eps
    return int(np.argmax(above))


def delta(profile: SpreadProfile, epsilon: float) -> float:
    """Exact infimum of {r : r * rho(r) > eps} over the step profile."""
    if epsilon <= 0:
        raise GeometryError("epsilon must be positive")
    k = _first_piece_exceeding(profile, epsilon, squared=False)
    return float(max(profile.radii[k], epsilon / profile.rho_values[k]))


def delta_st(profile: SpreadProfile, epsilon: float) -> float:
    """Improved spread: infimum of {r : r * rho(sqrt(r)) > eps}."""
    if epsilon <= 0:
        raise GeometryError("epsilon must be positive")
    k = _first_piece_exceeding(profile, epsilon, squared=True)
    return float(max(profile.radii[k] ** 2, epsilon / profile.rho_values[k]))


def asym_hausdorff(A, B) -> float:
    """sup over a in A of the distance from a to B (one-sided)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.size == 0 or B.size == 0:
        raise GeometryError("asymmetric Hausdorff distance needs nonempty sets")
    worst = 0.0
    for start in range(0, len(A), 512):
        chunk = A[start : start + 512]
        d2 = ((chunk[:, None, :] - B[None, :, :]) ** 2).sum(-1)
        worst = max(worst, float(np.sqrt(d2.min(axis=1)).max()))
    return worst


def path_length_bound(mu: DiscreteMeasure, connect_radius: float) -> float:
    """Max graph-geodesic length between atoms on the neighborhood graph with
    edges between atoms at distance <= connect_radius."""
    if len(mu) == 1:
        return 0.0
    diff = mu.atoms[:, None, :] - mu.atoms[None, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    adj = (dist <= connect_radius + 1e-12) & ~np.eye(len(mu), dtype=bool)
    rows, cols = np.nonzero(adj)
    graph = csr_matrix((dist[rows, cols], (rows, cols)), shape=dist.shape)
    geo = shortest_path(graph, method="D", directed=False)
    if np.isinf(geo).any():
        full = csr_matrix(dist)
        tree = minimum_spanning_tree(full)
        needed = float(tree.data.max())
        raise GeometryError(
            f"neighborhood graph disconnected at radius {connect_radius}; "
            f"smallest connecting radius is {needed!r}"
        )
    return float(geo.max())


def diameter(mu: DiscreteMeasure) -> float:
    if len(mu) < 2:
        raise GeometryError("diameter needs at least two atoms")
    diff = mu.atoms[:, None, :] - mu.atoms[None, :, :]
    return float(np.sqrt((diff**2).sum(-1)).max())


def hull_faces(mu: DiscreteMeasure):
    """Boundary of the convex hull of the atoms, as faces.

    d=1: the pair (lo, hi).  d=2: an (F, 2, 2) array of boundary segments.
    The hull boundary is the proxy for the boundary of the support.
    """
    if mu.dim == 1:
        vals = mu.atoms[:, 0]
        return (float(vals.min()), float(vals.max()))
    if mu.dim == 2:
        try:
            hull = ConvexHull(mu.atoms)
        except QhullError as exc:
            raise GeometryError(f"degenerate convex hull: {exc}") from exc
        segs = mu.atoms[hull.simplices]  # (F, 2, 2)
        return np.array(segs, dtype=float)
    raise GeometryError("hull boundary is supported for d in {1, 2}")


def boundary_distance(x, mu: DiscreteMeasure, faces) -> float:
    """Distance from x to the convex-hull boundary of the atoms."""
    pt = np.asarray(x, dtype=float).reshape(-1)
    if mu.dim == 1:
        lo, hi = faces
        return float(min(abs(pt[0] - lo), abs(pt[0] - hi)))
    if mu.dim == 2:
        best = np.inf
        for seg in faces:
            a, b = seg[0], seg[1]
            ab = b - a
            denom = float(ab @ ab)
            t = 0.0 if denom == 0.0 else float(np.clip((pt - a) @ ab / denom, 0.0, 1.0))
            proj = a + t * ab
            best = min(best, float(np.linalg.norm(pt - proj)))
        return best
    raise GeometryError("boundary distance is supported for d in {1, 2}")
