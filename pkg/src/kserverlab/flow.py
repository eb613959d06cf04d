"""Trajectory integration for metric-projected constrained dynamics.

The integrator follows ``dx/dt = H(x) (f(t, x) - u)`` where ``u`` is the
normal-cone component of the drive at the current point, i.e. the
least-action velocity computed by :mod:`kserverlab.geometry`.  Explicit
Euler steps are taken with a step size adapted to the distance to the
nearest inactive constraint, events are localized by bisection on the
step, and a Bregman re-projection repairs the (tiny) feasibility drift
should it ever exceed tolerance.

The constraint set argument can be a plain ``Polyhedron`` or any
provider exposing ``at(x) -> Polyhedron`` (rows may depend on the
current point) and ``refine(x, v) -> extra generator rows or None``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .config import DEFAULT_TOLS
from .geometry import (
    ConeProjectionError,
    GeneratedCone,
    LocalMetric,
    _cone_project,
    _dedup_rows,
    active_normal_generators,
)
from .report import CheckReport


class DomainError(ValueError):
    """Potential evaluated outside the domain of its gradient."""


class IntegrationError(RuntimeError):
    pass


class MetricField:
    """Separable potential with evaluators for Phi, grad Phi and the
    diagonal of its Hessian; the local metric is the Hessian inverse.

    ``domain_shift`` marks log-type domains: the gradient exists only
    where ``x + domain_shift > 0`` componentwise.
    """

    def __init__(self, potential, gradient, hess_diag, domain_shift=None, name=""):
        self._potential = potential
        self._gradient = gradient
        self._hess_diag = hess_diag
        self.domain_shift = domain_shift
        self.name = name

    def phi(self, x):
        val = float(self._potential(np.asarray(x, dtype=float)))
        if not np.isfinite(val):
            raise DomainError(f"potential not finite at x (field {self.name!r})")
        return val

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        if self.domain_shift is not None and np.any(x + self.domain_shift <= 0):
            raise DomainError("gradient undefined on the log-domain boundary")
        return np.asarray(self._gradient(x), dtype=float)

    def hess_diag(self, x):
        return np.asarray(self._hess_diag(np.asarray(x, dtype=float)), dtype=float)

    def metric_at(self, x):
        return LocalMetric(1.0 / self.hess_diag(x))

    def self_check(self, points, fd_tol=1e-5, fd_h=1e-7):
        """Finite-difference check of grad vs Phi and H * hess == 1."""
        worst = 0.0
        n_checked = 0
        for x in points:
            x = np.asarray(x, dtype=float)
            g = self.grad(x)
            for i in range(x.size):
                e = np.zeros_like(x)
                e[i] = fd_h
                fd = (self.phi(x + e) - self.phi(x - e)) / (2 * fd_h)
                worst = max(worst, abs(fd - g[i]) / max(1.0, abs(g[i])))
                n_checked += 1
            h = self.hess_diag(x)
            if np.any(h <= 0):
                return CheckReport("metric-field", False, np.inf, fd_tol, n_checked,
                                   notes="nonpositive Hessian entry")
            worst = max(worst, float(np.max(np.abs(h * (1.0 / h) - 1.0))))
        return CheckReport("metric-field", worst <= fd_tol, worst, fd_tol, n_checked)


def quadratic_field(weights=None, n=None):
    """Phi(x) = 1/2 sum w_i x_i^2 (identity metric when w = 1)."""
    if weights is None:
        weights = np.ones(n)
    w = np.asarray(weights, dtype=float)
    return MetricField(
        potential=lambda x: 0.5 * float(np.dot(w, x * x)),
        gradient=lambda x: w * x,
        hess_diag=lambda x: np.broadcast_to(w, x.shape).copy(),
        name="quadratic",
    )


def entropy_field(weights, shift=0.0):
    """Phi(x) = sum_i w_i (x_i + shift) log (x_i + shift)."""
    w = np.asarray(weights, dtype=float)

    def potential(x):
        s = x + shift
        if np.any(s < 0):
            return np.inf
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(s > 0, s * np.log(np.maximum(s, 1e-300)), 0.0)
        return float(np.dot(w, t))

    return MetricField(
        potential=potential,
        gradient=lambda x: w * (1.0 + np.log(x + shift)),
        hess_diag=lambda x: w / (x + shift),
        domain_shift=shift,
        name="entropy",
    )


class ControlField:
    """Time-varying drive (t, x) -> vector."""

    def __init__(self, fn, name=""):
        self._fn = fn
        self.name = name

    def __call__(self, t, x):
        return np.asarray(self._fn(t, x), dtype=float)

    def bounded_on(self, points, times=(0.0,)):
        return max(float(np.max(np.abs(self(t, p)))) for p in points for t in times)


def constant_control(vec, name=""):
    v = np.asarray(vec, dtype=float)
    return ControlField(lambda t, x: v, name=name or "constant")


@dataclass
class Event:
    """Scalar stop function; integration halts at its first zero.

    ``value_tol`` widens the trigger to |fn| <= value_tol: necessary for
    stopping surfaces that coincide with a constraint face, which the
    step control approaches geometrically without ever crossing.  For
    linear events the hit is then snapped exactly onto the surface.
    """

    fn: callable
    name: str = "event"
    row: np.ndarray | None = None
    offset: float = 0.0
    value_tol: float = 0.0

    def __call__(self, x):
        return float(self.fn(x))


def linear_event(row, offset, name="event", value_tol=1e-9):
    row = np.asarray(row, dtype=float)
    return Event(fn=lambda x: float(row @ x - offset), name=name, row=row,
                 offset=offset, value_tol=value_tol)


@dataclass
class StepPolicy:
    h_max: float = 1e-2
    h_min: float = 1e-13
    safety: float = 0.2
    drift_tol: float = DEFAULT_TOLS.drift
    time_tol: float = DEFAULT_TOLS.time
    fixed_step: float | None = None
    max_steps: int = 2_000_000


@dataclass
class Trajectory:
    """Time-sampled solution with per-step diagnostics.

    ``active`` holds, per sample, the generator matrix of the normal
    cone carried at that step and ``multipliers`` the nonnegative
    coefficients assigned to them by the projection.
    """

    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    h: np.ndarray
    residual: np.ndarray
    dual_gap: np.ndarray
    active: list
    multipliers: list
    stop_reason: str
    repair_indices: tuple = ()
    n_repairs: int = 0
    n_refinements: int = 0
    provider: object = None
    field: MetricField = None
    control: ControlField = None

    @property
    def n_samples(self):
        return self.t.shape[0]

    @property
    def terminal_x(self):
        return self.x[-1]

    @property
    def terminal_t(self):
        return float(self.t[-1])

    def problem_hash(self):
        blob = self.x[0].tobytes() + str(self.stop_reason).encode()
        if self.field is not None:
            blob += self.field.name.encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_csv(self, path):
        n = self.x.shape[1]
        header = ",".join(["t"] + [f"x_{i+1}" for i in range(n)]
                          + [f"v_{i+1}" for i in range(n)] + ["residual", "step"])
        body = np.column_stack([self.t, self.x, self.v, self.residual, self.h])
        with open(path, "w") as fh:
            fh.write(f"# problem {self.problem_hash()}\n")
            fh.write(header + "\n")
            np.savetxt(fh, body, delimiter=",", fmt="%.17g")


def _project_velocity(provider, poly, x, metric, f, feas_tol, max_refines=12):
    """Least-action velocity with on-demand constraint refinement.

    Providers with state-dependent constraint families may report, for a
    candidate velocity, additional tight rows whose tangent condition is
    violated (ties in the family); those are appended and the projection
    re-solved.
    """
    cone = active_normal_generators(poly, x, feas_tol)
    gens = cone.generators
    n_ref = 0
    for _ in range(max_refines):
        u, _, coeffs = _cone_project(GeneratedCone(gens, n=poly.n), f, metric)
        v = metric.diag * (f - u)
        extra = provider.refine(x, v)
        if extra is None or len(extra) == 0:
            return v, u, coeffs, gens, n_ref
        rows = _dedup_rows(list(gens) + [np.asarray(r, dtype=float) for r in extra])
        if len(rows) == len(gens):
            return v, u, coeffs, gens, n_ref
        gens = np.array(rows)
        n_ref += 1
    raise IntegrationError("constraint refinement did not stabilize")


def bregman_repair(poly, fld, x, drift_tol=DEFAULT_TOLS.drift):
    """argmin_{z in K} D_Phi(z; x): pull a drifted point back onto K.

    Equivalent objective: Phi(z) - <grad Phi(x), z>, convex and smooth on
    the domain; solved with SLSQP over the polyhedron rows.
    """
    g0 = fld.grad(x)
    ineq = ~poly.equality_mask

    def obj(z):
        return fld.phi(z) - float(g0 @ z)

    def jac(z):
        return fld.grad(z) - g0

    cons = []
    if ineq.any():
        a_ub, b_ub = poly.a[ineq], poly.b[ineq]
        cons.append({"type": "ineq", "fun": lambda z: b_ub - a_ub @ z,
                     "jac": lambda z: -a_ub})
    if poly.equality_mask.any():
        a_eq, b_eq = poly.a[poly.equality_mask], poly.b[poly.equality_mask]
        cons.append({"type": "eq", "fun": lambda z: a_eq @ z - b_eq,
                     "jac": lambda z: a_eq})
    bounds = None
    if fld.domain_shift is not None:
        lo = -fld.domain_shift + 1e-12
        bounds = [(lo, None)] * x.size
        x = np.maximum(x, lo)
    res = minimize(obj, x, jac=jac, method="SLSQP", constraints=cons, bounds=bounds,
                   options={"maxiter": 200, "ftol": 1e-14})
    z = res.x
    if poly.max_violation(z) > drift_tol:
        raise IntegrationError(
            f"feasibility repair failed (violation {poly.max_violation(z):.3e})")
    return z


def _step_cap(poly, x, v, events, policy, active_tol):
    """min(h_max, safety * dist-to-inactive-face / ||v||_inf), with the
    stopping surfaces treated like faces for capping purposes."""
    vinf = float(np.max(np.abs(v))) if v.size else 0.0
    h = policy.h_max
    if vinf == 0.0:
        return h
    slack = poly.slacks(x)
    ineq = ~poly.equality_mask
    inactive = ineq & (slack > active_tol)
    if inactive.any():
        norms = np.abs(poly.a[inactive]).sum(axis=1)
        d_active = float(np.min(slack[inactive] / norms))
        h = min(h, max(policy.safety * d_active / vinf, policy.h_min))
    for ev in events:
        if ev.row is not None:
            rate = float(ev.row @ v)
            gap = ev(x)
            if rate < 0 and gap > 0:
                h = min(h, max(policy.safety * gap / (-rate), policy.h_min))
    return h


def integrate(constraints, fld, control, x0, events=(), horizon=1.0,
              policy=None, feas_tol=DEFAULT_TOLS.feasibility):
    """Integrate the projected dynamics from ``x0`` until an event or the
    horizon.

    ``constraints`` is a Polyhedron or provider (see module docstring).
    Events must be continuous scalar functions with a sign change at the
    stopping surface; the first zero crossing is localized by bisection
    on the step to within ``policy.time_tol``.
    """
    policy = policy or StepPolicy()
    provider = constraints
    x = np.asarray(x0, dtype=float).copy()
    poly = provider.at(x)
    v0 = poly.max_violation(x)
    if v0 > max(feas_tol, policy.drift_tol):
        raise InfeasibleStart(f"x0 violates constraints by {v0:.3e}")

    events = list(events)
    ts, xs, vs, hs, residuals, gaps = [], [], [], [], [], []
    actives, mults = [], []
    repair_idx = []
    n_repairs = 0
    n_refines = 0
    t = 0.0
    stop_reason = "horizon"

    ev_signs = [1.0 if ev(x) > 0 else -1.0 for ev in events]

    for _ in range(policy.max_steps):
        poly = provider.at(x)
        resid = poly.max_violation(x)
        if resid > policy.drift_tol:
            x = bregman_repair(poly, fld, x, policy.drift_tol)
            n_repairs += 1
            repair_idx.append(len(ts))
            poly = provider.at(x)
            resid = poly.max_violation(x)

        metric = fld.metric_at(x)
        f = control(t, x)
        v, _, coeffs, gens, nr = _project_velocity(
            provider, poly, x, metric, f, max(feas_tol, resid * 1.001))
        n_refines += nr
        gap = metric.dual_norm(v) - metric.norm(f)

        ts.append(t)
        xs.append(x.copy())
        vs.append(v.copy())
        residuals.append(resid)
        gaps.append(gap)
        actives.append(gens)
        mults.append(coeffs)

        if t >= horizon:
            hs.append(0.0)
            break

        if policy.fixed_step is not None:
            h = policy.fixed_step
        else:
            h = _step_cap(poly, x, v, events, policy, active_tol=feas_tol)
        if h < policy.h_min:
            hs.append(h)
            stop_reason = "aborted:step_underflow"
            break
        h = min(h, horizon - t)

        x_try = x + h * v

        # event localization: first crossing (or entry into the value
        # window) inside the step, by exact linear solve where possible,
        # bisection otherwise
        hit = None
        for j, ev in enumerate(events):
            if (ev(x_try) * ev_signs[j]) <= ev.value_tol:
                if ev.row is not None:
                    rate = float(ev.row @ v) * ev_signs[j]
                    gap = ev(x) * ev_signs[j]
                    cand = min(gap / (-rate), h) if rate < 0 else h
                else:
                    lo, hi = 0.0, h
                    while hi - lo > policy.time_tol:
                        mid = 0.5 * (lo + hi)
                        if (ev(x + mid * v) * ev_signs[j]) <= ev.value_tol:
                            hi = mid
                        else:
                            lo = mid
                    cand = hi
                if hit is None or cand < hit[1]:
                    hit = (j, cand)
        if hit is not None:
            j, h_ev = hit
            x = x + h_ev * v
            t += h_ev
            hs.append(h_ev)
            ts.append(t)
            xs.append(x.copy())
            vs.append(v.copy())
            hs.append(0.0)
            residuals.append(provider.at(x).max_violation(x))
            gaps.append(gap)
            actives.append(gens)
            mults.append(coeffs)
            stop_reason = f"event:{events[j].name}"
            break

        hs.append(h)
        x = x_try
        t += h
    else:
        stop_reason = "aborted:max_steps"

    return Trajectory(
        t=np.array(ts), x=np.array(xs), v=np.array(vs), h=np.array(hs[:len(ts)]),
        residual=np.array(residuals), dual_gap=np.array(gaps),
        active=actives, multipliers=mults, stop_reason=stop_reason,
        repair_indices=tuple(repair_idx),
        n_repairs=n_repairs, n_refinements=n_refines,
        provider=provider, field=fld, control=control,
    )


class InfeasibleStart(IntegrationError):
    pass


def bregman_hat(fld, y, x):
    """Offset Bregman divergence -Phi(x) - <grad Phi(x), y - x>.

    Satisfies D_Phi(y; x) = Phi(y) + bregman_hat(y, x) whenever Phi(y)
    is finite.  Rejects x on the boundary of a log domain.
    """
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    return -fld.phi(x) - float(fld.grad(x) @ (y - x))


def bregman(fld, y, x):
    return fld.phi(y) + bregman_hat(fld, y, x)


def check_descent_inequality(traj, fld, control, y, slope_tol=DEFAULT_TOLS.slope,
                             feas_tol=None):
    """Finite-difference check of d/dt D_hat(y; x(t)) <= <f, x - y>.

    ``y`` must belong to the constraint set carried by the trajectory.
    Report-only: violations are listed, nothing raises.
    """
    y = np.asarray(y, dtype=float)
    poly = traj.provider.at(y)
    if not poly.contains(y, feas_tol if feas_tol is not None else 1e-7):
        raise ValueError("comparison point outside the constraint set")
    dvals = np.array([bregman_hat(fld, y, traj.x[i]) for i in range(traj.n_samples)])
    worst = 0.0
    bad = []
    n = 0
    for i in range(traj.n_samples - 1):
        dt = traj.t[i + 1] - traj.t[i]
        if dt <= 0:
            continue
        slope = (dvals[i + 1] - dvals[i]) / dt
        f = control(traj.t[i], traj.x[i])
        bound = float(f @ (traj.x[i] - y))
        n += 1
        excess = slope - bound
        if excess > worst:
            worst = excess
        if excess > slope_tol:
            bad.append((float(traj.t[i]), float(excess)))
    return CheckReport("bregman-descent", len(bad) == 0, worst, slope_tol, n,
                       violations=bad)


def check_orthogonality(traj, tol=DEFAULT_TOLS.orthogonality, coeff_floor=1e-10):
    """|<g, v>| small for every normal generator carried with nonzero
    multiplier (discrete analogue of velocities orthogonal to the
    normal cone)."""
    worst = 0.0
    n = 0
    bad = []
    for i in range(traj.n_samples):
        gens = traj.active[i]
        coeffs = traj.multipliers[i]
        v = traj.v[i]
        vn = np.linalg.norm(v)
        if len(gens) == 0 or vn == 0:
            continue
        for g, c in zip(gens, coeffs):
            if c <= coeff_floor:
                continue
            rel = abs(float(g @ v)) / (np.linalg.norm(g) * vn + 1e-30)
            n += 1
            if rel > worst:
                worst = rel
            if rel > tol:
                bad.append((float(traj.t[i]), rel))
    return CheckReport("velocity-orthogonality", len(bad) == 0, worst, tol, n,
                       violations=bad)


def check_velocity_bound(traj, tol=DEFAULT_TOLS.dual_norm):
    """||v||_{x,*} <= ||f||_x + tol at every sample (recorded dual gap)."""
    worst = float(np.max(traj.dual_gap)) if traj.n_samples else 0.0
    return CheckReport("velocity-bound", worst <= tol, worst, tol, traj.n_samples)


def check_feasibility(traj, tol=DEFAULT_TOLS.drift):
    worst = float(np.max(traj.residual)) if traj.n_samples else 0.0
    return CheckReport("trajectory-feasibility", worst <= tol, worst, tol,
                       traj.n_samples)
