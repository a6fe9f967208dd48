"""Dual solver for quadratically regularized optimal transport.

For discrete marginals mu (atoms x_i, weights mu_i) and nu (atoms y_j,
weights nu_j) the optimal dual potentials (f, g) solve, for every atom,

    sum_i mu_i [f_i + g_j - c(x_i, y_j)]_+ = eps      (one equation per j)
    sum_j nu_j [f_i + g_j - c(x_i, y_j)]_+ = eps      (one equation per i)

with c(x, y) = |x - y|^2 / 2.  Holding one block fixed, each equation in the
other block is a scalar piecewise-linear monotone equation solved exactly by
sorting thresholds and inverting the active linear piece; the solver sweeps
the two blocks alternately until both residual vectors fall below tolerance.
Within one half-sweep the per-atom solves are independent (they are evaluated
as one vectorized batch).

The shift degree of freedom is fixed by balancing the integrals,
sum_i mu_i f_i = sum_j nu_j g_j, which reduces to f = g when mu = nu.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .measures import DiscreteMeasure


class ConfigError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float, sweeps: int):
        super().__init__(message)
        self.residual = residual
        self.sweeps = sweeps


class InconsistencyError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    epsilon: float
    max_sweeps: int = 10_000
    residual_tol: float = 1e-10   # on the marginal-equation residual
    support_tol: float = 0.0      # support = {f_i + g_j - c_ij > support_tol}

    def __post_init__(self):
        if not (self.epsilon > 0):
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if not (self.residual_tol > 0):
            raise ConfigError("residual_tol must be positive")
        if self.max_sweeps < 1:
            raise ConfigError("max_sweeps must be at least 1")
        if self.support_tol < 0:
            raise ConfigError("support_tol must be nonnegative")


@dataclass(frozen=True, eq=False)
class DualPotentials:
    f_values: np.ndarray
    g_values: np.ndarray
    epsilon: float
    normalization: str = "balanced-integrals"
    residual: float = np.nan
    sweeps: int = 0

    def to_dict(self) -> dict:
        return {
            "epsilon": float(self.epsilon),
            "f": [float(v) for v in self.f_values],
            "g": [float(v) for v in self.g_values],
            "normalization": self.normalization,
            "residual": float(self.residual),
        }


@dataclass(frozen=True, eq=False)
class Coupling:
    """Sparse coupling: entries are the atom pairs with positive mass, in
    row-major order; support flags mark density strictly above support_tol."""

    n_mu: int
    n_nu: int
    epsilon: float
    i_idx: np.ndarray
    j_idx: np.ndarray
    masses: np.ndarray
    densities: np.ndarray
    in_support: np.ndarray
    row_sums: np.ndarray
    col_sums: np.ndarray
    residual: float

    @property
    def support_pairs(self) -> list[tuple[int, int]]:
        return [
            (int(i), int(j))
            for i, j in zip(self.i_idx[self.in_support], self.j_idx[self.in_support])
        ]

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.n_mu, self.n_nu))
        dense[self.i_idx, self.j_idx] = self.masses
        return dense

    def cost_against(self, cost: np.ndarray) -> float:
        return float((self.masses * cost[self.i_idx, self.j_idx]).sum())

    def to_dict(self) -> dict:
        return {
            "epsilon": float(self.epsilon),
            "entries": [
                [int(i), int(j), float(m), float(d)]
                for i, j, m, d in zip(self.i_idx, self.j_idx, self.masses, self.densities)
            ],
            "residual": float(self.residual),
        }


def cost_matrix(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Half squared Euclidean distances, c(x, y) = |x - y|^2 / 2."""
    diff = X[:, None, :] - Y[None, :, :]
    return 0.5 * (diff**2).sum(-1)


def _hinge_root_batch(S: np.ndarray, w: np.ndarray, eps: float) -> np.ndarray:
    """Per column j of S, the unique t with sum_i w_i (t - S_ij)_+ = eps.

    Sort thresholds, prefix-sum, and invert the active linear piece; the knot
    values h(S_(k)) are nondecreasing, so the piece is found by counting.
    """
    order = np.argsort(S, axis=0, kind="stable")
    Ss = np.take_along_axis(S, order, axis=0)
    ws = w[order]
    cw = np.cumsum(ws, axis=0)
    cs = np.cumsum(ws * Ss, axis=0)
    knot = np.empty_like(Ss)
    knot[0] = 0.0
    knot[1:] = cw[:-1] * Ss[1:] - cs[:-1]
    kstar = np.sum(knot <= eps, axis=0) - 1
    cols = np.arange(S.shape[1])
    return (eps + cs[kstar, cols]) / cw[kstar, cols]


def solve_scalar_update(thresholds, weights, epsilon: float) -> float:
    """The unique t with sum_i weights_i (t - thresholds_i)_+ = epsilon."""
    s = np.asarray(thresholds, dtype=float).reshape(-1)
    w = np.asarray(weights, dtype=float).reshape(-1)
    if len(s) == 0 or len(w) == 0:
        raise ConfigError("thresholds and weights must be nonempty")
    if len(s) != len(w):
        raise ConfigError("thresholds and weights must have equal length")
    if np.any(w <= 0):
        raise ConfigError("weights must be strictly positive")
    if not (epsilon > 0):
        raise ConfigError("epsilon must be positive")
    return float(_hinge_root_batch(s[:, None], w, epsilon)[0])


def marginal_residuals(
    f: np.ndarray, g: np.ndarray, C: np.ndarray, mu_w: np.ndarray, nu_w: np.ndarray, eps: float
) -> tuple[np.ndarray, np.ndarray]:
    """Residual vectors of the two marginal equation families:
    res_mu[i] over the nu-integral at x_i, res_nu[j] over the mu-integral at y_j."""
    slack = np.maximum(f[:, None] + g[None, :] - C, 0.0)
    res_mu = np.abs(slack @ nu_w - eps)
    res_nu = np.abs(mu_w @ slack - eps)
    return res_mu, res_nu


def _component_balanced(
    f: np.ndarray, g: np.ndarray, positive: np.ndarray, mu_w: np.ndarray, nu_w: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Balance the integral normalization per connected component of the
    positive-slack bipartite graph.

    When the support disconnects, the dual optimum is unique only up to one
    shift per component; within a component the positive slack values are
    the same for every optimum, so balancing each component recovers the
    unique balanced representative (the symmetric one, when mu = nu).
    """
    n, m = positive.shape
    ii, jj = np.nonzero(positive)
    graph = coo_matrix(
        (np.ones(len(ii)), (ii, n + jj)), shape=(n + m, n + m)
    )
    n_comp, labels = connected_components(graph, directed=False)
    f_new = f.copy()
    g_new = g.copy()
    for k in range(n_comp):
        rows = np.nonzero(labels[:n] == k)[0]
        cols = np.nonzero(labels[n:] == k)[0]
        total = mu_w[rows].sum() + nu_w[cols].sum()
        if total == 0.0:
            continue
        s = (float(nu_w[cols] @ g[cols]) - float(mu_w[rows] @ f[rows])) / total
        f_new[rows] += s
        g_new[cols] -= s
    return f_new, g_new


def solve(mu: DiscreteMeasure, nu: DiscreteMeasure, cfg: SolverConfig) -> DualPotentials:
    """Alternating exact coordinate updates until both marginal residual
    vectors have sup-norm <= residual_tol.

    Each sweep updates all g coordinates from the current f, then all f
    coordinates from the new g, so the f-side equations hold to machine
    precision at the sweep boundary.  For mu = nu (bitwise) the balanced
    iterate is symmetrized each sweep (per support component, since a
    disconnected support leaves one shift degree of freedom per component)
    and the returned potentials satisfy f = g exactly.
    """
    if mu.dim != nu.dim:
        raise ConfigError(f"dimension mismatch: mu has d={mu.dim}, nu has d={nu.dim}")
    eps = cfg.epsilon
    C = cost_matrix(mu.atoms, nu.atoms)
    mu_w, nu_w = mu.weights, nu.weights
    self_transport = mu.same_as(nu)
    f = np.zeros(len(mu))
    last = np.inf
    for sweep in range(1, cfg.max_sweeps + 1):
        g = _hinge_root_batch(C - f[:, None], mu_w, eps)
        f = _hinge_root_batch(C.T - g[:, None], nu_w, eps)
        shift = 0.5 * (float(nu_w @ g) - float(mu_w @ f))
        if self_transport:
            fb, gb = f + shift, g - shift
            if np.max(np.abs(fb - gb)) > cfg.residual_tol:
                # the one-shift balance cannot symmetrize a disconnected
                # support; balance per component instead.  Zero-mass boundary
                # pairs (slack at roundoff scale) carry no shift rigidity and
                # must not merge components, hence the 1e-12 edge threshold.
                slack = f[:, None] + g[None, :] - C
                fb, gb = _component_balanced(f, g, slack > 1e-12, mu_w, nu_w)
            if np.max(np.abs(fb - gb)) <= cfg.residual_tol:
                u = 0.5 * (fb + gb)
                res_mu, res_nu = marginal_residuals(u, u, C, mu_w, nu_w, eps)
                last = max(float(res_mu.max()), float(res_nu.max()))
                if last <= cfg.residual_tol:
                    return DualPotentials(
                        f_values=u, g_values=u.copy(), epsilon=eps,
                        residual=last, sweeps=sweep,
                    )
        else:
            res_mu, res_nu = marginal_residuals(f, g, C, mu_w, nu_w, eps)
            last = max(float(res_mu.max()), float(res_nu.max()))
            if last <= cfg.residual_tol:
                return DualPotentials(
                    f_values=f + shift, g_values=g - shift, epsilon=eps,
                    residual=last, sweeps=sweep,
                )
    raise ConvergenceError(
        f"no convergence within {cfg.max_sweeps} sweeps (last residual {last:.3e})",
        residual=float(last),
        sweeps=cfg.max_sweeps,
    )


def evaluate_f_at(x, pot: DualPotentials, nu: DiscreteMeasure) -> float:
    """f extended off the mu-atoms: the t solving
    sum_j nu_j [t + g_j - c(x, y_j)]_+ = eps."""
    pt = np.asarray(x, dtype=float).reshape(1, -1)
    c_row = cost_matrix(pt, nu.atoms)[0]
    thresholds = c_row - pot.g_values
    return solve_scalar_update(thresholds, nu.weights, pot.epsilon)


def assemble_coupling(
    pot: DualPotentials, mu: DiscreteMeasure, nu: DiscreteMeasure, cfg: SolverConfig
) -> Coupling:
    """Coupling masses mu_i nu_j [f_i + g_j - c_ij]_+ / eps with recomputed
    marginal residuals attached; stale potentials are rejected."""
    C = cost_matrix(mu.atoms, nu.atoms)
    slack = pot.f_values[:, None] + pot.g_values[None, :] - C
    res_mu, res_nu = marginal_residuals(pot.f_values, pot.g_values, C, mu.weights, nu.weights, pot.epsilon)
    residual = max(float(res_mu.max()), float(res_nu.max()))
    if residual > 10.0 * cfg.residual_tol:
        raise InconsistencyError(
            f"marginal residual {residual:.3e} exceeds 10 x residual_tol; stale potentials?"
        )
    positive = slack > 0.0
    i_idx, j_idx = np.nonzero(positive)  # row-major, deterministic
    density = slack[i_idx, j_idx] / pot.epsilon
    masses = mu.weights[i_idx] * nu.weights[j_idx] * density
    in_support = slack[i_idx, j_idx] > cfg.support_tol
    dense = np.zeros_like(slack)
    dense[i_idx, j_idx] = masses
    return Coupling(
        n_mu=len(mu),
        n_nu=len(nu),
        epsilon=pot.epsilon,
        i_idx=i_idx,
        j_idx=j_idx,
        masses=masses,
        densities=density,
        in_support=in_support,
        row_sums=dense.sum(axis=1),
        col_sums=dense.sum(axis=0),
        residual=residual,
    )


def max_density(
    pot: DualPotentials, mu: DiscreteMeasure, nu: DiscreteMeasure
) -> tuple[float, tuple[int, int]]:
    """Max over atom pairs of f_i + g_j - c_ij (this is eps times the max
    coupling density), with its argmax pair."""
    C = cost_matrix(mu.atoms, nu.atoms)
    slack = pot.f_values[:, None] + pot.g_values[None, :] - C
    flat = int(np.argmax(slack))
    i, j = np.unravel_index(flat, slack.shape)
    return float(slack[i, j]), (int(i), int(j))


def row_barycenter(i: int, coupling: Coupling, nu: DiscreteMeasure) -> np.ndarray:
    """Barycenter of nu restricted to the columns supported in row i."""
    mask = (coupling.i_idx == i) & coupling.in_support
    cols = coupling.j_idx[mask]
    if len(cols) == 0:
        raise InconsistencyError(f"row {i} has empty support")
    w = nu.weights[cols]
    return (w[:, None] * nu.atoms[cols]).sum(axis=0) / w.sum()
