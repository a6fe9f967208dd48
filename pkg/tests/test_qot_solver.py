import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import qp_oracle_coupling
from qotlab.measures import make_measure, uniform_ball_grid
from qotlab.qot_solver import (
    ConfigError,
    ConvergenceError,
    Coupling,
    DualPotentials,
    InconsistencyError,
    SolverConfig,
    assemble_coupling,
    cost_matrix,
    evaluate_f_at,
    marginal_residuals,
    max_density,
    row_barycenter,
    solve,
    solve_scalar_update,
)

SINGLETON = make_measure([0.0], [1.0])
TWO_POINT = make_measure([-1.0, 1.0], [0.5, 0.5])


def test_scalar_update_single_piece():
    assert solve_scalar_update([0.5], [1.0], 0.1) == pytest.approx(0.6, abs=1e-15)


def test_scalar_update_total_weight_one():
    assert solve_scalar_update([0.0, 0.0], [0.5, 0.5], 1.0) == pytest.approx(1.0, abs=1e-15)


def test_scalar_update_first_piece_active():
    # only the first hinge is active: 0.5 * t = 0.2  (verified by substitution)
    t = solve_scalar_update([0.0, 1.0], [0.5, 0.5], 0.2)
    assert t == pytest.approx(0.4, abs=1e-15)
    assert 0.5 * max(t - 0.0, 0.0) + 0.5 * max(t - 1.0, 0.0) == pytest.approx(0.2)


def test_scalar_update_validation():
    with pytest.raises(ConfigError):
        solve_scalar_update([], [], 0.1)
    with pytest.raises(ConfigError):
        solve_scalar_update([0.0], [0.0], 0.1)
    with pytest.raises(ConfigError):
        solve_scalar_update([0.0], [1.0], 0.0)


@settings(max_examples=50, deadline=None)
@given(
    n=st.integers(min_value=1, max_value=12),
    seed=st.integers(min_value=0, max_value=10_000),
    eps=st.floats(min_value=1e-6, max_value=10.0),
)
def test_scalar_update_substitution_property(n, seed, eps):
    rng = np.random.default_rng(seed)
    thresholds = rng.uniform(-2.0, 2.0, size=n)
    weights = rng.uniform(0.05, 1.0, size=n)
    t = solve_scalar_update(thresholds, weights, eps)
    total = float((weights * np.maximum(t - thresholds, 0.0)).sum())
    assert total == pytest.approx(eps, abs=1e-10 * max(1.0, eps))


def test_config_validation():
    with pytest.raises(ConfigError):
        SolverConfig(epsilon=0.0)
    with pytest.raises(ConfigError):
        SolverConfig(epsilon=-1.0)
    with pytest.raises(ConfigError):
        SolverConfig(epsilon=0.1, residual_tol=0.0)


def test_singleton_self_transport():
    cfg = SolverConfig(epsilon=0.1)
    pot = solve(SINGLETON, SINGLETON, cfg)
    assert pot.f_values[0] == pytest.approx(0.05, abs=1e-12)
    assert pot.g_values[0] == pytest.approx(0.05, abs=1e-12)
    cpl = assemble_coupling(pot, SINGLETON, SINGLETON, cfg)
    assert len(cpl.masses) == 1
    assert cpl.masses[0] == pytest.approx(1.0, abs=1e-12)
    assert cpl.densities[0] == pytest.approx(1.0, abs=1e-12)


def test_one_pair_system():
    mu = make_measure([0.0], [1.0])
    nu = make_measure([0.5], [1.0])
    pot = solve(mu, nu, SolverConfig(epsilon=0.1))
    # f + g = c + eps = 0.225, balanced to f = g = 0.1125
    assert pot.f_values[0] == pytest.approx(0.1125, abs=1e-12)
    assert pot.g_values[0] == pytest.approx(0.1125, abs=1e-12)


def test_two_point_matches_qp_oracle():
    cfg = SolverConfig(epsilon=0.01)
    pot = solve(TWO_POINT, TWO_POINT, cfg)
    cpl = assemble_coupling(pot, TWO_POINT, TWO_POINT, cfg)
    oracle = qp_oracle_coupling(TWO_POINT, TWO_POINT, 0.01)
    assert np.linalg.norm(cpl.to_dense() - oracle) <= 1e-6
    # potentials agree with the oracle through the density identity
    # f_i + g_j = c_ij + eps * pi_ij / (mu_i nu_j) on the support
    C = cost_matrix(TWO_POINT.atoms, TWO_POINT.atoms)
    P = np.outer(TWO_POINT.weights, TWO_POINT.weights)
    for i, j in zip(*np.nonzero(oracle > 1e-9)):
        lhs = pot.f_values[i] + pot.g_values[j]
        rhs = C[i, j] + 0.01 * oracle[i, j] / P[i, j]
        assert lhs == pytest.approx(rhs, abs=1e-6)


def test_residuals_below_tolerance_on_grids():
    for d, h in [(1, 0.1), (2, 0.5)]:
        mu = uniform_ball_grid(d, h)
        cfg = SolverConfig(epsilon=0.01)
        pot = solve(mu, mu, cfg)
        C = cost_matrix(mu.atoms, mu.atoms)
        res_mu, res_nu = marginal_residuals(
            pot.f_values, pot.g_values, C, mu.weights, mu.weights, 0.01
        )
        assert max(res_mu.max(), res_nu.max()) <= cfg.residual_tol


def test_self_transport_potentials_identical():
    mu = uniform_ball_grid(1, 0.1)
    pot = solve(mu, mu, SolverConfig(epsilon=0.005))
    assert np.array_equal(pot.f_values, pot.g_values)


def test_balanced_normalization_for_asymmetric_pair():
    mu = make_measure([-0.9, 0.2, 0.8], [0.3, 0.45, 0.25])
    nu = make_measure([-0.5, 0.0, 0.6], [0.2, 0.5, 0.3])
    pot = solve(mu, nu, SolverConfig(epsilon=0.05))
    assert float(mu.weights @ pot.f_values) == pytest.approx(
        float(nu.weights @ pot.g_values), abs=1e-12
    )


def test_doubling_max_sweeps_is_stable():
    mu = uniform_ball_grid(1, 0.2)
    pot_a = solve(mu, mu, SolverConfig(epsilon=0.01, max_sweeps=10_000))
    pot_b = solve(mu, mu, SolverConfig(epsilon=0.01, max_sweeps=20_000))
    assert np.array_equal(pot_a.f_values, pot_b.f_values)
    assert np.array_equal(pot_a.g_values, pot_b.g_values)


def test_non_convergence_carries_residual():
    mu = uniform_ball_grid(1, 0.1)
    with pytest.raises(ConvergenceError) as exc:
        solve(mu, mu, SolverConfig(epsilon=1e-3, max_sweeps=2))
    assert exc.value.residual > 0


def test_dimension_mismatch():
    mu = make_measure([0.0], [1.0])
    nu = make_measure([[0.0, 0.0]], [1.0])
    with pytest.raises(ConfigError, match="dimension"):
        solve(mu, nu, SolverConfig(epsilon=0.1))


def test_evaluate_f_single_atom_example():
    # nu = delta_0 with g = 0.05, eps = 0.1: t + 0.05 = 0.1 at x = 0
    nu = make_measure([0.0], [1.0])
    pot = DualPotentials(
        f_values=np.array([0.05]), g_values=np.array([0.05]), epsilon=0.1
    )
    assert evaluate_f_at([0.0], pot, nu) == pytest.approx(0.05, abs=1e-15)


def test_evaluate_f_agrees_with_stored_values():
    mu = make_measure([-0.9, 0.2, 0.8], [0.3, 0.45, 0.25])
    nu = make_measure([-0.5, 0.0, 0.6], [0.2, 0.5, 0.3])
    cfg = SolverConfig(epsilon=0.05)
    pot = solve(mu, nu, cfg)
    for i, atom in enumerate(mu.atoms):
        assert evaluate_f_at(atom, pot, nu) == pytest.approx(
            float(pot.f_values[i]), abs=cfg.residual_tol
        )


def test_evaluate_f_agrees_on_self_transport_grid():
    mu = uniform_ball_grid(1, 0.1)
    cfg = SolverConfig(epsilon=0.01)
    pot = solve(mu, mu, cfg)
    for i, atom in enumerate(mu.atoms):
        assert evaluate_f_at(atom, pot, mu) == pytest.approx(
            float(pot.f_values[i]), abs=cfg.residual_tol + 1e-14
        )


def test_potential_is_two_lipschitz():
    mu = uniform_ball_grid(1, 0.1)
    pot = solve(mu, mu, SolverConfig(epsilon=0.01))
    rng = np.random.default_rng(42)
    pts = rng.uniform(-1.0, 1.0, size=(100, 2))
    for x, y in pts:
        fx = evaluate_f_at([x], pot, mu)
        fy = evaluate_f_at([y], pot, mu)
        assert abs(fx - fy) <= 2.0 * abs(x - y) + 1e-12


def test_midpoint_concavity_of_shifted_potential():
    mu = uniform_ball_grid(1, 0.1)
    pot = solve(mu, mu, SolverConfig(epsilon=0.01))
    rng = np.random.default_rng(7)

    def shifted(x):
        return evaluate_f_at([x], pot, mu) - 0.5 * x * x

    for _ in range(100):
        x, y = rng.uniform(-1.0, 1.0, size=2)
        mid = 0.5 * (x + y)
        assert shifted(mid) >= 0.5 * (shifted(x) + shifted(y)) - 1e-9


def test_coupling_marginals_match_weights():
    mu = uniform_ball_grid(1, 0.2)
    cfg = SolverConfig(epsilon=0.05)
    pot = solve(mu, mu, cfg)
    cpl = assemble_coupling(pot, mu, mu, cfg)
    # equation residual <= tol translates to mass deviation mu_i * tol / eps
    scale = cfg.residual_tol * max(1.0, float(mu.weights.max()) / cfg.epsilon)
    assert np.abs(cpl.row_sums - mu.weights).max() <= scale
    assert np.abs(cpl.col_sums - mu.weights).max() <= scale


def test_coupling_marginals_literal_tolerance_at_moderate_eps():
    pot = solve(TWO_POINT, TWO_POINT, SolverConfig(epsilon=1.0))
    cpl = assemble_coupling(pot, TWO_POINT, TWO_POINT, SolverConfig(epsilon=1.0))
    assert np.abs(cpl.row_sums - TWO_POINT.weights).max() <= 1e-10
    assert np.abs(cpl.col_sums - TWO_POINT.weights).max() <= 1e-10


def test_assemble_rejects_stale_potentials():
    cfg = SolverConfig(epsilon=0.1)
    pot = solve(TWO_POINT, TWO_POINT, cfg)
    stale = DualPotentials(
        f_values=pot.f_values + 1e-3, g_values=pot.g_values, epsilon=0.1
    )
    with pytest.raises(InconsistencyError):
        assemble_coupling(stale, TWO_POINT, TWO_POINT, cfg)


def test_max_density_singleton():
    cfg = SolverConfig(epsilon=0.1)
    pot = solve(SINGLETON, SINGLETON, cfg)
    value, pair = max_density(pot, SINGLETON, SINGLETON)
    assert value == pytest.approx(0.1, abs=1e-12)
    assert pair == (0, 0)


def test_max_density_at_least_eps():
    for eps in (0.5, 0.05, 0.005):
        mu = uniform_ball_grid(1, 0.25)
        pot = solve(mu, mu, SolverConfig(epsilon=eps))
        value, _ = max_density(pot, mu, mu)
        assert value >= eps - 1e-12


def test_row_barycenter_single_entry():
    cfg = SolverConfig(epsilon=0.01)
    pot = solve(TWO_POINT, TWO_POINT, cfg)
    cpl = assemble_coupling(pot, TWO_POINT, TWO_POINT, cfg)
    assert row_barycenter(0, cpl, TWO_POINT)[0] == pytest.approx(-1.0)


def test_row_barycenter_weighted_mean():
    mu = uniform_ball_grid(1, 0.5)
    cfg = SolverConfig(epsilon=0.2)
    pot = solve(mu, mu, cfg)
    cpl = assemble_coupling(pot, mu, mu, cfg)
    mask = (cpl.i_idx == 2) & cpl.in_support
    cols = cpl.j_idx[mask]
    expected = (mu.weights[cols][:, None] * mu.atoms[cols]).sum(0) / mu.weights[cols].sum()
    assert row_barycenter(2, cpl, mu) == pytest.approx(expected)


def test_row_barycenter_empty_row_rejected():
    cpl = Coupling(
        n_mu=2,
        n_nu=2,
        epsilon=0.1,
        i_idx=np.array([0]),
        j_idx=np.array([0]),
        masses=np.array([1.0]),
        densities=np.array([1.0]),
        in_support=np.array([True]),
        row_sums=np.array([1.0, 0.0]),
        col_sums=np.array([1.0, 0.0]),
        residual=0.0,
    )
    with pytest.raises(InconsistencyError):
        row_barycenter(1, cpl, TWO_POINT)


def test_disconnected_support_self_transport_symmetrizes():
    # regression fixture: at this eps the support splits into two clusters,
    # the dual optimum is unique only up to one shift per cluster, and a
    # single global balancing shift cannot reach f = g
    atoms = [-0.407967, -0.299677, -0.281019, -0.097168, 0.053592, 0.180749]
    w = np.array([0.16959436, 0.24321162, 0.1806324, 0.16131904, 0.03502415, 0.21021843])
    mu = make_measure(atoms, w / w.sum())
    cfg = SolverConfig(epsilon=0.003)
    pot = solve(mu, mu, cfg)
    assert np.array_equal(pot.f_values, pot.g_values)
    assert pot.residual <= cfg.residual_tol
    cpl = assemble_coupling(pot, mu, mu, cfg)
    oracle = qp_oracle_coupling(mu, mu, 0.003)
    assert np.linalg.norm(cpl.to_dense() - oracle) <= 1e-6


def test_knife_edge_boundary_pair_does_not_merge_components():
    # regression fixture: a zero-mass boundary pair whose slack lands at
    # +7e-18 must not glue two rigid support components together during the
    # per-component balancing
    atoms = [-0.540069, -0.382124, 0.230835, 0.574625, 0.600539, 0.627554]
    w = np.array([0.32115887, 0.14235059, 0.11694054, 0.0978823, 0.22773608, 0.09393162])
    mu = make_measure(atoms, w / w.sum())
    cfg = SolverConfig(epsilon=0.01)
    pot = solve(mu, mu, cfg)
    assert np.array_equal(pot.f_values, pot.g_values)
    assert pot.residual <= cfg.residual_tol
    cpl = assemble_coupling(pot, mu, mu, cfg)
    oracle = qp_oracle_coupling(mu, mu, 0.01)
    assert np.linalg.norm(cpl.to_dense() - oracle) <= 1e-6


def test_support_tol_override_shrinks_support():
    mu = uniform_ball_grid(1, 0.5)
    cfg0 = SolverConfig(epsilon=0.2)
    pot = solve(mu, mu, cfg0)
    full = assemble_coupling(pot, mu, mu, cfg0)
    tight = assemble_coupling(pot, mu, mu, SolverConfig(epsilon=0.2, support_tol=0.05))
    assert tight.in_support.sum() < full.in_support.sum()
    # positive-mass entries are unchanged; only the support flag narrows
    assert np.array_equal(tight.masses, full.masses)


def test_coupling_export_schema():
    cfg = SolverConfig(epsilon=0.1)
    pot = solve(TWO_POINT, TWO_POINT, cfg)
    cpl = assemble_coupling(pot, TWO_POINT, TWO_POINT, cfg)
    record = cpl.to_dict()
    assert set(record) == {"epsilon", "entries", "residual"}
    assert all(len(entry) == 4 for entry in record["entries"])
    pot_record = pot.to_dict()
    assert pot_record["normalization"] == "balanced-integrals"
