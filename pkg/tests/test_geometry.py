import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import bisect_delta_st, brute_force_rho, floyd_warshall_max_geodesic
from qotlab.geometry import (
    GeometryError,
    asym_hausdorff,
    boundary_distance,
    build_spread,
    delta,
    delta_st,
    diameter,
    hull_faces,
    path_length_bound,
)
from qotlab.measures import make_measure, uniform_ball_grid


@pytest.fixture
def two_point():
    return make_measure([-1.0, 1.0], [0.5, 0.5])


def _random_measure(seed, n=8, d=2):
    rng = np.random.default_rng(seed)
    atoms = np.unique(np.round(rng.uniform(-0.7, 0.7, size=(n, d)), 6), axis=0)
    w = rng.uniform(0.2, 1.0, size=len(atoms))
    return make_measure(atoms, w / w.sum())


def test_spread_singleton():
    mu = make_measure([0.0], [1.0])
    prof = build_spread(mu)
    for r in (1e-6, 0.5, 1.0, 5.0):
        assert prof.rho_at(r) == 1.0


def test_spread_two_point(two_point):
    prof = build_spread(two_point)
    assert prof.rho_at(1e-9) == 0.5
    assert prof.rho_at(2.0) == 0.5  # open balls: the far atom enters only past r = 2
    assert prof.rho_at(2.0 + 1e-9) == 1.0


def test_spread_matches_brute_force_on_grid():
    mu = uniform_ball_grid(1, 0.5)
    prof = build_spread(mu)
    # frozen oracle values (direct double loop at inter-breakpoint radii)
    expected = {0.25: 0.2, 0.75: 0.4, 1.25: 0.6, 1.75: 0.8, 2.5: 1.0}
    for r, rho in expected.items():
        assert brute_force_rho(mu, r) == pytest.approx(rho, abs=1e-12)
        assert prof.rho_at(r) == pytest.approx(rho, abs=1e-12)


def test_spread_matches_brute_force_random():
    mu = _random_measure(7)
    prof = build_spread(mu)
    mids = 0.5 * (prof.radii[1:] + prof.radii[:-1])
    for r in mids:
        assert prof.rho_at(r) == pytest.approx(brute_force_rho(mu, r), abs=1e-12)


def test_spread_floor_is_min_weight():
    mu = _random_measure(3)
    prof = build_spread(mu)
    assert prof.rho_values.min() >= mu.weights.min() - 1e-15


def test_spread_csv_export():
    prof = build_spread(make_measure([-1.0, 1.0], [0.5, 0.5]))
    text = prof.to_csv()
    lines = text.strip().splitlines()
    assert lines[0] == "r,rho"
    assert len(lines) == 1 + len(prof.radii)


def test_delta_singleton_is_epsilon():
    prof = build_spread(make_measure([0.0], [1.0]))
    for eps in (0.01, 0.5, 1.9, 3.0):
        assert delta(prof, eps) == pytest.approx(eps, abs=1e-15)


def test_delta_two_point(two_point):
    prof = build_spread(two_point)
    assert delta(prof, 0.1) == pytest.approx(0.2, abs=1e-15)


def test_delta_equals_eps_beyond_two(two_point):
    prof = build_spread(two_point)
    assert delta(prof, 3.0) == pytest.approx(3.0, abs=1e-15)
    prof_grid = build_spread(uniform_ball_grid(1, 0.5))
    assert delta(prof_grid, 2.5) == pytest.approx(2.5, abs=1e-15)


def test_delta_st_trivial_profile():
    prof = build_spread(make_measure([0.0], [1.0]))
    assert delta_st(prof, 0.3) == pytest.approx(0.3, abs=1e-15)


def test_delta_st_two_point(two_point):
    prof = build_spread(two_point)
    assert delta_st(prof, 0.1) == pytest.approx(0.2, abs=1e-15)


def test_delta_st_equals_eps_beyond_four(two_point):
    # rho(sqrt r) reaches 1 only past r = 4
    prof = build_spread(two_point)
    assert delta_st(prof, 5.0) == pytest.approx(5.0, abs=1e-15)
    assert delta_st(prof, 3.0) == pytest.approx(4.0, abs=1e-15)


@pytest.mark.parametrize("h", [0.5, 0.25])
def test_delta_st_matches_bisection_oracle(h):
    prof = build_spread(uniform_ball_grid(1, h))
    for eps in (0.01, 0.05, 0.2, 1.0):
        assert delta_st(prof, eps) == pytest.approx(bisect_delta_st(prof, eps), abs=1e-12)


def test_delta_matches_bisection_oracle_random():
    prof = build_spread(_random_measure(11))
    for eps in (0.003, 0.02, 0.4):
        lo, hi = 0.0, 5.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if mid > 0 and mid * prof.rho_at(mid) > eps:
                hi = mid
            else:
                lo = mid
        assert delta(prof, eps) == pytest.approx(hi, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(
    seed=st.integers(min_value=0, max_value=500),
    eps=st.floats(min_value=1e-4, max_value=3.0),
    factor=st.floats(min_value=0.1, max_value=5.0),
)
def test_delta_property_list(seed, eps, factor):
    prof = build_spread(_random_measure(seed, n=5, d=1))
    d1 = delta(prof, eps)
    assert d1 >= eps - 1e-12
    assert delta(prof, eps * 1.5) >= d1 - 1e-12  # monotone
    assert delta(prof, factor * eps) <= max(factor, 1.0) * d1 + 1e-12
    s1 = delta_st(prof, eps)
    assert s1 >= eps - 1e-12
    assert delta_st(prof, eps * 1.5) >= s1 - 1e-12
    assert delta_st(prof, factor * eps) <= max(factor, 1.0) * s1 + 1e-12


def test_delta_rejects_nonpositive_eps(two_point):
    prof = build_spread(two_point)
    with pytest.raises(GeometryError):
        delta(prof, 0.0)
    with pytest.raises(GeometryError):
        delta_st(prof, -1.0)


def test_hausdorff_identical_sets():
    A = np.array([[0.0, 0.0], [1.0, 2.0]])
    assert asym_hausdorff(A, A) == 0.0


def test_hausdorff_three_four_five():
    assert asym_hausdorff([[0.0, 0.0]], [[3.0, 4.0]]) == pytest.approx(5.0)


def test_hausdorff_subset_and_asymmetry():
    A = np.array([[0.0, 0.0]])
    B = np.array([[0.0, 0.0], [3.0, 4.0]])
    assert asym_hausdorff(A, B) == 0.0
    assert asym_hausdorff(B, A) == pytest.approx(5.0)


def test_hausdorff_empty_rejected():
    with pytest.raises(GeometryError):
        asym_hausdorff(np.empty((0, 2)), [[0.0, 0.0]])


def test_path_length_two_atoms():
    mu = make_measure([0.0, 1.0], [0.5, 0.5])
    assert path_length_bound(mu, 1.0) == pytest.approx(1.0)


def test_path_length_chain():
    mu = make_measure([-1.0, 0.0, 1.0], [1 / 3, 1 / 3, 1 / 3])
    assert path_length_bound(mu, 1.0) == pytest.approx(2.0)


def test_path_length_matches_floyd_warshall():
    mu = uniform_ball_grid(2, 0.5)
    got = path_length_bound(mu, 0.55)
    assert got == pytest.approx(floyd_warshall_max_geodesic(mu.atoms, 0.55), abs=1e-12)


def test_path_length_disconnected_names_radius():
    mu = make_measure([-1.0, 1.0], [0.5, 0.5])
    with pytest.raises(GeometryError, match="2.0"):
        path_length_bound(mu, 0.5)


def test_diameter():
    assert diameter(make_measure([-1.0, 1.0], [0.5, 0.5])) == pytest.approx(2.0)
    with pytest.raises(GeometryError):
        diameter(make_measure([0.0], [1.0]))


def test_boundary_distance_d1():
    mu = uniform_ball_grid(1, 0.5)
    faces = hull_faces(mu)
    assert boundary_distance([1.0], mu, faces) == 0.0  # hull vertex
    assert boundary_distance([0.0], mu, faces) == pytest.approx(1.0)


def test_boundary_distance_d2():
    mu = make_measure([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], [1 / 3, 1 / 3, 1 / 3])
    faces = hull_faces(mu)
    assert boundary_distance([0.0, 0.0], mu, faces) == 0.0
    assert boundary_distance([0.25, 0.25], mu, faces) == pytest.approx(0.25)


def test_hull_degenerate_d2():
    mu = make_measure([[0.0, 0.0], [0.5, 0.0], [1.0, 0.0]], [1 / 3, 1 / 3, 1 / 3])
    with pytest.raises(GeometryError, match="hull"):
        hull_faces(mu)


def test_hull_rejects_d3():
    mu = uniform_ball_grid(3, 1.0)
    with pytest.raises(GeometryError):
        hull_faces(mu)


def test_hausdorff_zero_iff_subset():
    rng = np.random.default_rng(17)
    B = rng.uniform(-1.0, 1.0, size=(12, 4))
    A = B[::3]
    assert asym_hausdorff(A, B) == 0.0
    shifted = A + 0.01
    assert asym_hausdorff(shifted, B) > 0.0
