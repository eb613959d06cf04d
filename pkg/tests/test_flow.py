import numpy as np
import pytest

from kserverlab.flow import (
    DomainError,
    StepPolicy,
    Trajectory,
    bregman,
    bregman_hat,
    bregman_repair,
    check_descent_inequality,
    check_feasibility,
    check_orthogonality,
    check_velocity_bound,
    constant_control,
    entropy_field,
    integrate,
    linear_event,
    quadratic_field,
)
from kserverlab.geometry import Polyhedron


def line_box(lo=-1e9, hi=1e9):
    return Polyhedron(np.array([[1.0], [-1.0]]), np.array([hi, -lo]))


def unit_interval():
    return Polyhedron(np.array([[1.0], [-1.0]]), np.array([1.0, 0.0]))


def simplex3():
    return Polyhedron(
        np.array([[-1.0, 0, 0], [0, -1, 0], [0, 0, -1], [1, 1, 1]]),
        np.array([0.0, 0, 0, 1]),
        equality_mask=np.array([False, False, False, True]),
    )


def test_linear_flow_stops_at_event():
    traj = integrate(line_box(), quadratic_field(n=1), constant_control([-1.0]),
                     np.array([1.0]), events=[linear_event([1.0], 0.0, "hit-zero")],
                     horizon=5.0, policy=StepPolicy(h_max=0.05))
    assert traj.stop_reason == "event:hit-zero"
    assert abs(traj.terminal_t - 1.0) < 1e-6
    assert abs(traj.terminal_x[0]) < 1e-6
    # x(t) = 1 - t along the way
    assert np.allclose(traj.x[:, 0], 1.0 - traj.t, atol=1e-9)


def test_drive_absorbed_at_boundary_runs_to_horizon():
    traj = integrate(unit_interval(), quadratic_field(n=1), constant_control([1.0]),
                     np.array([1.0]), horizon=0.5, policy=StepPolicy(h_max=0.02))
    assert traj.stop_reason == "horizon"
    assert np.allclose(traj.x, 1.0)
    assert np.allclose(traj.v, 0.0, atol=1e-12)


def simplex_entropy_run(h, horizon=1.0):
    policy = StepPolicy(fixed_step=h)
    return integrate(simplex3(), entropy_field(np.ones(3)),
                     constant_control([-1.0, 0, 0]),
                     np.array([1 / 3, 1 / 3, 1 / 3]), horizon=horizon, policy=policy)


def test_simplex_entropy_against_fine_reference():
    traj = simplex_entropy_run(2e-3)
    ref = simplex_entropy_run(2e-4)
    assert np.max(np.abs(traj.terminal_x - ref.terminal_x)) < 1e-3
    # symmetry of the untouched coordinates, x_1 decreasing
    assert np.allclose(traj.x[:, 1], traj.x[:, 2], atol=1e-12)
    assert np.all(np.diff(traj.x[:, 0]) < 0)


def test_first_order_self_convergence():
    ref = simplex_entropy_run(5e-5).terminal_x
    err = [np.max(np.abs(simplex_entropy_run(h).terminal_x - ref))
           for h in (2e-3, 1e-3)]
    ratio = err[0] / err[1]
    assert 1.5 <= ratio <= 3.0


def test_velocity_bound_and_feasibility_along_trajectory():
    traj = simplex_entropy_run(1e-3)
    assert check_velocity_bound(traj, tol=1e-6).passed
    assert check_feasibility(traj, tol=1e-7).passed


def test_determinism_bit_identical():
    t1 = simplex_entropy_run(1e-3)
    t2 = simplex_entropy_run(1e-3)
    assert t1.x.tobytes() == t2.x.tobytes()
    assert t1.v.tobytes() == t2.v.tobytes()
    assert t1.t.tobytes() == t2.t.tobytes()


def test_infeasible_start_rejected():
    from kserverlab.flow import InfeasibleStart
    with pytest.raises(InfeasibleStart):
        integrate(unit_interval(), quadratic_field(n=1), constant_control([1.0]),
                  np.array([2.0]), horizon=1.0)


def test_bregman_hat_at_coincidence():
    fld = entropy_field(np.ones(2))
    x = np.array([0.3, 0.7])
    assert abs(bregman_hat(fld, x, x) + fld.phi(x)) < 1e-12


def test_bregman_hat_quadratic_hand_value():
    fld = quadratic_field(n=2)
    val = bregman_hat(fld, np.zeros(2), np.array([1.0, 0.0]))
    assert abs(val - 0.5) < 1e-12


def test_bregman_hat_symbolic_oracle():
    import sympy as sp

    fld = entropy_field(np.ones(3))
    x = np.array([1 / 2, 1 / 3, 1 / 6])
    y = np.array([1.0, 0.0, 0.0])
    xs = [sp.Rational(1, 2), sp.Rational(1, 3), sp.Rational(1, 6)]
    ys = [1, 0, 0]
    phi = sum(xi * sp.log(xi) for xi in xs)
    dhat = -phi - sum((1 + sp.log(xi)) * (yi - xi) for xi, yi in zip(xs, ys))
    assert abs(bregman_hat(fld, y, x) - float(dhat)) < 1e-12


def test_bregman_identity():
    fld = entropy_field(np.ones(3), shift=0.1)
    rng = np.random.default_rng(5)
    for _ in range(20):
        x = rng.dirichlet(np.ones(3))
        y = rng.dirichlet(np.ones(3))
        d = fld.phi(y) - fld.phi(x) - float(fld.grad(x) @ (y - x))
        assert abs(bregman(fld, y, x) - d) < 1e-10


def test_bregman_hat_rejects_log_boundary():
    fld = entropy_field(np.ones(2))
    with pytest.raises(DomainError):
        bregman_hat(fld, np.array([0.5, 0.5]), np.array([0.0, 1.0]))


def test_descent_inequality_on_simplex_run():
    traj = simplex_entropy_run(1e-3)
    rep = check_descent_inequality(traj, traj.field, traj.control,
                                   np.array([0.0, 1.0, 0.0]), slope_tol=1e-3)
    assert rep.passed, rep.line()


def test_descent_inequality_stationary():
    traj = integrate(unit_interval(), quadratic_field(n=1), constant_control([1.0]),
                     np.array([1.0]), horizon=0.2, policy=StepPolicy(h_max=0.02))
    rep = check_descent_inequality(traj, traj.field, traj.control, np.array([0.3]))
    assert rep.passed


def test_descent_inequality_rejects_outside_point():
    traj = simplex_entropy_run(1e-3)
    with pytest.raises(ValueError):
        check_descent_inequality(traj, traj.field, traj.control,
                                 np.array([2.0, -1.0, 0.0]))


def test_orthogonality_of_carried_generators():
    traj = integrate(unit_interval(), quadratic_field(n=1), constant_control([1.0]),
                     np.array([1.0]), horizon=0.2, policy=StepPolicy(h_max=0.02))
    assert check_orthogonality(traj).passed


def test_metric_field_self_check():
    fld = entropy_field(np.array([1.0, 2.0]), shift=0.05)
    rng = np.random.default_rng(2)
    pts = [rng.uniform(0.1, 0.9, size=2) for _ in range(5)]
    assert fld.self_check(pts).passed


def test_bregman_repair_matches_closed_form():
    fld = entropy_field(np.ones(3))
    x = np.array([0.4, 0.35, 0.3])  # mass 1.05, off the simplex
    z = bregman_repair(simplex3(), fld, x)
    assert np.allclose(z, x / x.sum(), atol=1e-6)


def test_trajectory_csv_roundtrip(tmp_path):
    traj = simplex_entropy_run(1e-2, horizon=0.1)
    path = tmp_path / "traj.csv"
    traj.to_csv(path)
    with open(path) as fh:
        first = fh.readline()
        header = fh.readline().strip().split(",")
    assert first.startswith("# problem ")
    assert header == ["t", "x_1", "x_2", "x_3", "v_1", "v_2", "v_3",
                      "residual", "step"]
    data = np.loadtxt(path, delimiter=",", skiprows=2)
    assert data.shape == (traj.n_samples, 9)
    assert np.allclose(data[:, 0], traj.t)
    assert np.allclose(data[:, 1:4], traj.x)
