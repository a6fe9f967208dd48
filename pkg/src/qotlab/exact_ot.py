"""Unregularized optimal transport reference solution.

Solves the discrete transportation problem by successive shortest paths on
the bipartite atom graph, entirely in integer arithmetic: costs are scaled
to integers at 1e-9 resolution (rounded down, so the returned dual
potentials are feasible against the true costs with zero slack) and masses
at 1e-12 resolution by largest-remainder rounding.  Integer pivoting makes
optima and dual prices reproducible independent of float rounding; ties are
broken by lowest index.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .measures import DiscreteMeasure, MongeMapSpec, tabulated_map
from .qot_solver import Coupling, cost_matrix

COST_SCALE = 10**9
MASS_SCALE = 10**12
ATOM_CAP = 5000


class ExactOTError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class ExactOTSolution:
    coupling: Coupling
    cost: float
    f_star: np.ndarray
    g_star: np.ndarray
    mu: DiscreteMeasure
    nu: DiscreteMeasure
    monge: Optional[MongeMapSpec] = None

    def potentials_dict(self) -> dict:
        return {
            "f": [float(v) for v in self.f_star],
            "g": [float(v) for v in self.g_star],
            "normalization": "kantorovich",
            "cost": float(self.cost),
        }


def _integer_masses(weights: np.ndarray, scale: int) -> np.ndarray:
    """Largest-remainder rounding to integers summing exactly to scale."""
    scaled = weights * scale
    base = np.floor(scaled).astype(np.int64)
    short = scale - int(base.sum())
    if short > 0:
        remainders = scaled - base
        # ties: lower index first (argsort is stable on the negated key)
        order = np.argsort(-remainders, kind="stable")
        base[order[:short]] += 1
    return base


def solve_exact(mu: DiscreteMeasure, nu: DiscreteMeasure) -> ExactOTSolution:
    """Optimal coupling and Kantorovich potentials for the quadratic cost."""
    n, m = len(mu), len(nu)
    if n > ATOM_CAP or m > ATOM_CAP:
        raise ExactOTError(f"marginals exceed the exact-solver atom cap {ATOM_CAP}")
    C = cost_matrix(mu.atoms, nu.atoms)
    Cint = np.floor(C * COST_SCALE).astype(np.int64)
    supply = _integer_masses(mu.weights, MASS_SCALE)
    demand = _integer_masses(nu.weights, MASS_SCALE)

    flow, p, q = _ssp(Cint, supply, demand)

    i_idx, j_idx = np.nonzero(flow > 0)
    masses = flow[i_idx, j_idx] / MASS_SCALE
    densities = masses / (mu.weights[i_idx] * nu.weights[j_idx])
    dense = np.zeros((n, m))
    dense[i_idx, j_idx] = masses
    row_sums = dense.sum(axis=1)
    col_sums = dense.sum(axis=0)
    residual = max(
        float(np.abs(row_sums - mu.weights).max()), float(np.abs(col_sums - nu.weights).max())
    )
    coupling = Coupling(
        n_mu=n,
        n_nu=m,
        epsilon=0.0,
        i_idx=i_idx,
        j_idx=j_idx,
        masses=masses,
        densities=densities,
        in_support=np.ones(len(i_idx), dtype=bool),
        row_sums=row_sums,
        col_sums=col_sums,
        residual=residual,
    )
    cost = coupling.cost_against(C)
    return ExactOTSolution(
        coupling=coupling,
        cost=cost,
        f_star=p / COST_SCALE,
        g_star=q / COST_SCALE,
        mu=mu,
        nu=nu,
    )


def _ssp(Cint: np.ndarray, supply: np.ndarray, demand: np.ndarray):
    """Successive shortest paths with node potentials (all integer).

    Maintains dual feasibility p_i + q_j <= Cint_ij for every pair, with
    equality on arcs carrying flow; at termination (p, q) are optimal duals.
    """
    n, m = Cint.shape
    INF = np.iinfo(np.int64).max // 4
    flow = np.zeros((n, m), dtype=np.int64)
    p = np.zeros(n, dtype=np.int64)
    q = np.zeros(m, dtype=np.int64)
    rem_a = supply.copy()
    rem_b = demand.copy()
    in_sources: list[list[int]] = [[] for _ in range(m)]  # sinks' inflow rows

    while rem_a.sum() > 0:
        du = np.where(rem_a > 0, 0, INF)
        dv = np.full(m, INF, dtype=np.int64)
        par_sink = np.full(m, -1, dtype=np.int64)   # source feeding sink on best path
        par_src = np.full(n, -1, dtype=np.int64)    # sink feeding source via residual arc
        done_u = np.zeros(n, dtype=bool)
        done_v = np.zeros(m, dtype=bool)
        target = -1
        while True:
            bu = np.where(done_u, INF, du)
            bv = np.where(done_v, INF, dv)
            iu = int(np.argmin(bu))
            iv = int(np.argmin(bv))
            # sources win ties so the scan order is deterministic
            if bu[iu] <= bv[iv]:
                if bu[iu] >= INF:
                    break
                done_u[iu] = True
                rc = Cint[iu] - p[iu] - q  # forward reduced costs, >= 0
                nd = du[iu] + rc
                better = (~done_v) & (nd < dv)
                dv[better] = nd[better]
                par_sink[better] = iu
            else:
                if bv[iv] >= INF:
                    break
                done_v[iv] = True
                if rem_b[iv] > 0:
                    target = iv
                    break
                for i in in_sources[iv]:
                    if done_u[i]:
                        continue
                    rc = -(Cint[i, iv] - p[i] - q[iv])  # residual arc, = 0 under CS
                    nd = dv[iv] + rc
                    if nd < du[i]:
                        du[i] = nd
                        par_src[i] = iv
        if target < 0:
            raise ExactOTError("internal error: no augmenting path (infeasible flow)")
        D = int(dv[target])
        p -= np.minimum(du, D)
        q += np.minimum(dv, D)

        # walk the path back, collecting the bottleneck
        path: list[tuple[int, int, bool]] = []  # (i, j, forward)
        bottleneck = int(rem_b[target])
        j = target
        while True:
            i = int(par_sink[j])
            path.append((i, j, True))
            if par_src[i] < 0:
                bottleneck = min(bottleneck, int(rem_a[i]))
                root = i
                break
            jb = int(par_src[i])
            path.append((i, jb, False))
            bottleneck = min(bottleneck, int(flow[i, jb]))
            j = jb
        for i, jj, forward in path:
            if forward:
                if flow[i, jj] == 0:
                    in_sources[jj].append(i)
                flow[i, jj] += bottleneck
            else:
                flow[i, jj] -= bottleneck
                if flow[i, jj] == 0:
                    in_sources[jj].remove(i)
        rem_a[root] -= bottleneck
        rem_b[target] -= bottleneck
    return flow, p, q


def monge_from_solution(sol: ExactOTSolution) -> Optional[MongeMapSpec]:
    """Tabulated map when every coupling row has a single support entry;
    None (refusal) when some row splits its mass."""
    counts = np.bincount(sol.coupling.i_idx, minlength=len(sol.mu))
    if np.any(counts != 1):
        return None
    order = np.argsort(sol.coupling.i_idx, kind="stable")
    images = sol.nu.atoms[sol.coupling.j_idx[order]]
    return tabulated_map(sol.mu.atoms, images)
