import numpy as np
import pytest

from kserverlab.geometry import (
    GeneratedCone,
    InfeasiblePointError,
    LocalMetric,
    Polyhedron,
    active_normal_generators,
    moreau_decompose,
    project_least_action,
    _cone_project,
)

from oracles import qp_cone_projection, random_generated_cone, random_metric_diag


def box2():
    return Polyhedron(
        np.array([[1.0, 0], [0, 1], [-1, 0], [0, -1]]),
        np.array([1.0, 1, 0, 0]),
    )


def simplex3():
    return Polyhedron(
        np.array([[-1.0, 0, 0], [0, -1, 0], [0, 0, -1], [1, 1, 1]]),
        np.array([0.0, 0, 0, 1]),
        equality_mask=np.array([False, False, False, True]),
    )


def test_interior_point_has_empty_normal_cone():
    cone = active_normal_generators(box2(), np.array([0.5, 0.5]))
    assert cone.is_empty


def test_single_tight_face():
    cone = active_normal_generators(box2(), np.array([1.0, 0.5]))
    assert cone.generators.shape == (1, 2)
    assert np.allclose(cone.generators[0], [1.0, 0.0])


def test_simplex_vertex_generators():
    cone = active_normal_generators(simplex3(), np.array([1.0, 0, 0]))
    got = {tuple(g) for g in cone.generators}
    expected = {(0.0, -1.0, 0.0), (0.0, 0.0, -1.0),
                (1.0, 1.0, 1.0), (-1.0, -1.0, -1.0)}
    assert got == expected


def test_infeasible_point_rejected_with_worst_row():
    with pytest.raises(InfeasiblePointError) as err:
        active_normal_generators(box2(), np.array([1.5, 0.5]))
    assert err.value.worst_row == 0


def test_duplicate_rows_deduplicated():
    poly = Polyhedron(
        np.array([[1.0, 0], [2.0, 0], [0, 1], [-1, 0], [0, -1]]),
        np.array([1.0, 2.0, 1, 0, 0]),
    )
    cone = active_normal_generators(poly, np.array([1.0, 0.5]))
    assert cone.generators.shape[0] == 1


def test_moreau_axis_cone_example():
    cone = GeneratedCone(np.array([[1.0, 0, 0], [0, 1.0, 0]]))
    u, v = moreau_decompose(cone, np.array([-1.0, 2, 3]), LocalMetric.euclidean(3))
    assert np.allclose(u, [0, 2, 0], atol=1e-10)
    assert np.allclose(v, [-1, 0, 3], atol=1e-10)


def test_moreau_fixed_points():
    cone = GeneratedCone(np.array([[1.0, 0, 0], [0, 1.0, 0]]))
    m = LocalMetric.euclidean(3)
    x = np.array([1.0, 1.0, 0.0])
    u, v = moreau_decompose(cone, x, m)
    assert np.allclose(u, x, atol=1e-10) and np.allclose(v, 0, atol=1e-10)
    y = np.array([-1.0, -1.0, 5.0])
    u, v = moreau_decompose(cone, y, m)
    assert np.allclose(u, 0, atol=1e-10) and np.allclose(v, y, atol=1e-10)


def test_least_action_interior_is_metric_scaled_drive():
    m = LocalMetric(np.array([0.5, 2.0]))
    f = np.array([1.0, -1.0])
    v = project_least_action(box2(), np.array([0.3, 0.6]), m, f)
    assert np.allclose(v, m.diag * f)


def test_least_action_drive_in_normal_cone_gives_zero():
    v = project_least_action(box2(), np.array([1.0, 0.5]),
                             LocalMetric.euclidean(2), np.array([2.0, 0.0]))
    assert np.allclose(v, 0, atol=1e-10)


def test_least_action_box_corner_qp():
    v = project_least_action(box2(), np.array([1.0, 0.5]),
                             LocalMetric.euclidean(2), np.array([1.0, 1.0]))
    assert np.allclose(v, [0.0, 1.0], atol=1e-10)


def test_moreau_random_sweep():
    rng = np.random.default_rng(7)
    for trial in range(300):
        gens = random_generated_cone(rng)
        n = gens.shape[1]
        metric = LocalMetric(random_metric_diag(rng, n))
        x = rng.normal(size=n) * 2.0
        cone = GeneratedCone(gens)
        u, v = moreau_decompose(cone, x, metric)
        assert np.allclose(u + v, x, atol=1e-8)
        assert abs(metric.inner(u, v)) <= 1e-8 * max(1.0, metric.norm(u) * metric.norm(v))
        assert cone.polar_contains(v, metric, tol=1e-8)
        if trial % 10 == 0:
            u_qp = qp_cone_projection(gens, x, metric.diag)
            assert np.allclose(u, u_qp, atol=1e-6)


def test_moreau_uniqueness_under_generator_permutation():
    rng = np.random.default_rng(11)
    for _ in range(50):
        gens = random_generated_cone(rng)
        n = gens.shape[1]
        metric = LocalMetric(random_metric_diag(rng, n))
        x = rng.normal(size=n) * 2.0
        u1, v1 = moreau_decompose(GeneratedCone(gens), x, metric)
        perm = rng.permutation(gens.shape[0])
        u2, v2 = moreau_decompose(GeneratedCone(gens[perm]), x, metric)
        assert np.allclose(u1, u2, atol=1e-8)
        assert np.allclose(v1, v2, atol=1e-8)


def test_least_action_optimality_against_tangent_samples():
    rng = np.random.default_rng(3)
    poly = box2()
    for _ in range(50):
        x = np.array([1.0, rng.uniform(0.2, 0.8)])
        metric = LocalMetric(random_metric_diag(rng, 2))
        f = rng.normal(size=2)
        vstar = project_least_action(poly, x, metric, f)
        hf = metric.diag * f
        best = float(np.dot(vstar - hf, metric.inv_diag * (vstar - hf)))
        cone = active_normal_generators(poly, x)
        for _ in range(20):
            w = rng.normal(size=2)
            if not cone.is_empty and np.any(cone.generators @ w > 0):
                continue  # not a tangent direction
            val = float(np.dot(w - hf, metric.inv_diag * (w - hf)))
            assert best <= val + 1e-8


def test_polar_involution_by_membership_sampling():
    rng = np.random.default_rng(19)
    for _ in range(30):
        gens = random_generated_cone(rng)
        n = gens.shape[1]
        metric = LocalMetric(random_metric_diag(rng, n))
        cone = GeneratedCone(gens)
        # polar samples arise as residuals of projections
        polar_pts = []
        for _ in range(10):
            _, v, _ = _cone_project(cone, rng.normal(size=n) * 3.0, metric)
            polar_pts.append(v)
        # every generator must make a nonpositive product with every polar point
        for g in gens:
            for v in polar_pts:
                assert metric.inner(g, v) <= 1e-8 * max(
                    1.0, metric.norm(g) * metric.norm(v))


def test_velocity_dual_norm_never_exceeds_drive_norm():
    rng = np.random.default_rng(23)
    poly = simplex3()
    for _ in range(100):
        x = rng.dirichlet(np.ones(3))
        metric = LocalMetric(random_metric_diag(rng, 3))
        f = rng.normal(size=3)
        v = project_least_action(poly, x, metric, f)
        assert metric.dual_norm(v) <= metric.norm(f) + 1e-9
