"""Polyhedral cone algebra in a point-dependent diagonal inner product.

Everything here works with the inner product ``<a, b>_H = a . (H b)`` for a
diagonal positive ``H`` supplied per point (``LocalMetric``).  The primal
norm is ``||a||_H = sqrt(a.(H a))`` and the dual norm uses ``H^{-1}``.

The three module-level operations are the building blocks of the
trajectory integrator:

* ``active_normal_generators`` -- outward normals of the tight faces of a
  polyhedron at a point (the normal cone, for polyhedra in general
  position);
* ``moreau_decompose`` -- the unique split ``x = u + v`` with ``u`` in a
  finitely generated cone, ``v`` in its polar w.r.t. the metric, and
  ``<u, v>_H = 0``;
* ``project_least_action`` -- the velocity ``H (f - u)`` obtained by
  absorbing the normal-cone component of a drive ``f``; it is the metric
  projection of ``H f`` onto the tangent cone.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import linprog, nnls

from .config import DEFAULT_TOLS


class GeometryError(Exception):
    """Base class for cone/polyhedron failures."""


class InfeasiblePointError(GeometryError):
    def __init__(self, message, worst_row=None, violation=None):
        super().__init__(message)
        self.worst_row = worst_row
        self.violation = violation


class ConeProjectionError(GeometryError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class LocalMetric:
    """Diagonal inner product <a,b> = a.(diag * b), diag > 0 entrywise.

    ``diag`` plays the role of the inverse Hessian of a separable convex
    potential; ``inv_diag`` is the Hessian diagonal itself.
    """

    __slots__ = ("diag", "inv_diag")

    def __init__(self, diag):
        diag = np.ascontiguousarray(diag, dtype=float)
        if diag.ndim != 1:
            raise ValueError("metric diagonal must be a vector")
        if not np.all(np.isfinite(diag)) or np.any(diag <= 0):
            raise ValueError("metric diagonal must be finite and strictly positive")
        self.diag = diag
        self.inv_diag = 1.0 / diag

    @classmethod
    def euclidean(cls, n):
        return cls(np.ones(n))

    @property
    def n(self):
        return self.diag.shape[0]

    def inner(self, a, b):
        return float(np.dot(a, self.diag * b))

    def norm(self, a):
        return float(np.sqrt(np.dot(a, self.diag * a)))

    def dual_norm(self, a):
        return float(np.sqrt(np.dot(a, self.inv_diag * a)))


class GeneratedCone:
    """Conic hull of finitely many nonzero generator vectors (rows)."""

    __slots__ = ("generators",)

    def __init__(self, generators, n=None):
        g = np.asarray(generators, dtype=float)
        if g.size == 0:
            if n is None:
                raise ValueError("empty cone needs an ambient dimension")
            g = np.zeros((0, n))
        if g.ndim != 2:
            raise ValueError("generators must be a 2-d array (rows)")
        norms = np.linalg.norm(g, axis=1)
        if np.any(norms == 0):
            raise ValueError("zero generator")
        self.generators = g

    @property
    def is_empty(self):
        return self.generators.shape[0] == 0

    @property
    def n(self):
        return self.generators.shape[1]

    def polar_contains(self, v, metric, tol=DEFAULT_TOLS.complementarity):
        """Whether <g, v>_H <= tol * scale for every generator g."""
        if self.is_empty:
            return True
        hv = metric.diag * v
        vals = self.generators @ hv
        scales = np.array([metric.norm(g) for g in self.generators])
        scale = np.maximum(scales * max(metric.norm(v), 1.0), 1.0)
        return bool(np.all(vals <= tol * scale))


class Polyhedron:
    """Feasible set {x : a_i.x <= b_i (or = b_i for equality rows)}.

    Constructed from the row matrix ``a``, right-hand side ``b`` and an
    optional boolean ``equality_mask``.  Nonemptiness is checked with a
    feasibility LP unless ``check_feasible=False`` (used by providers
    that rebuild rows every step).
    """

    def __init__(self, a, b, equality_mask=None, check_feasible=True, name=""):
        a = np.ascontiguousarray(a, dtype=float)
        b = np.ascontiguousarray(b, dtype=float)
        if a.ndim != 2 or b.ndim != 1 or a.shape[0] != b.shape[0]:
            raise ValueError("inconsistent constraint shapes")
        if a.shape[0] and np.any(np.all(a == 0.0, axis=1)):
            raise ValueError("identically zero constraint row")
        if equality_mask is None:
            equality_mask = np.zeros(a.shape[0], dtype=bool)
        else:
            equality_mask = np.asarray(equality_mask, dtype=bool)
            if equality_mask.shape != (a.shape[0],):
                raise ValueError("equality mask shape mismatch")
        self.a = a
        self.b = b
        self.equality_mask = equality_mask
        self.name = name
        if check_feasible:
            self._check_nonempty()

    def _check_nonempty(self):
        ineq = ~self.equality_mask
        res = linprog(
            c=np.zeros(self.n),
            A_ub=self.a[ineq] if ineq.any() else None,
            b_ub=self.b[ineq] if ineq.any() else None,
            A_eq=self.a[self.equality_mask] if self.equality_mask.any() else None,
            b_eq=self.b[self.equality_mask] if self.equality_mask.any() else None,
            bounds=(None, None),
            method="highs",
        )
        if not res.success:
            raise ValueError(f"empty polyhedron{f' {self.name}' if self.name else ''}")

    @property
    def n(self):
        return self.a.shape[1]

    @property
    def m(self):
        return self.a.shape[0]

    def slacks(self, x):
        return self.b - self.a @ x

    def violations(self, x):
        s = self.slacks(x)
        v = np.maximum(-s, 0.0)
        v[self.equality_mask] = np.abs(s[self.equality_mask])
        return v

    def max_violation(self, x):
        v = self.violations(x)
        return float(v.max()) if v.size else 0.0

    def contains(self, x, tol=DEFAULT_TOLS.feasibility):
        return self.max_violation(x) <= tol

    # provider protocol used by the integrator: a plain polyhedron is its
    # own (state-independent) provider with nothing to refine.
    def at(self, x):
        return self

    def refine(self, x, v, tol=DEFAULT_TOLS.feasibility):
        return None


def _dedup_rows(rows):
    """Drop duplicated rows up to positive scaling (normalized hashing)."""
    out = []
    seen = set()
    for r in rows:
        key = tuple(np.round(r / np.linalg.norm(r), 12))
        if key not in seen:
            seen.add(key)
            out.append(r)
    return out


def active_normal_generators(poly, x, tol=DEFAULT_TOLS.feasibility):
    """Outward normals of constraints tight at ``x`` (within ``tol``).

    Equality rows contribute both signs.  Raises ``InfeasiblePointError``
    (naming the worst row) when ``x`` violates the polyhedron by more
    than ``tol``.
    """
    x = np.asarray(x, dtype=float)
    viol = poly.violations(x)
    if viol.size:
        worst = int(np.argmax(viol))
        if viol[worst] > tol:
            raise InfeasiblePointError(
                f"point violates row {worst} by {viol[worst]:.3e}",
                worst_row=worst,
                violation=float(viol[worst]),
            )
    slack = poly.slacks(x)
    rows = []
    for i in range(poly.m):
        if poly.equality_mask[i]:
            rows.append(poly.a[i])
            rows.append(-poly.a[i])
        elif slack[i] <= tol:
            rows.append(poly.a[i])
    rows = _dedup_rows(rows)
    return GeneratedCone(np.array(rows).reshape(len(rows), poly.n), n=poly.n)


def _kkt_residual(a, b, c):
    """Max KKT violation of min ||a c - b|| over c >= 0 at the point c."""
    g = a.T @ (a @ c - b)
    scale = max(1.0, float(np.abs(a.T @ b).max(initial=0.0)))
    stat = float(np.max(-g, initial=0.0))          # g_j >= 0 required
    comp = float(np.max(np.abs(g[c > 0]), initial=0.0))
    return max(stat, comp) / scale


def _lawson_hanson(a, b, max_iter=None):
    """Reference active-set NNLS; deterministic, scale-relative tolerance."""
    m, n = a.shape
    if max_iter is None:
        max_iter = 10 * (n + 10)
    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    scale = max(1.0, float(np.abs(a.T @ b).max(initial=0.0)))
    tol = 1e-13 * scale
    for _ in range(max_iter):
        w = a.T @ (b - a @ x)
        w_masked = np.where(passive, -np.inf, w)
        j = int(np.argmax(w_masked))
        if w_masked[j] <= tol:
            return x
        passive[j] = True
        for _ in range(max_iter):
            idx = np.flatnonzero(passive)
            s_p, *_ = np.linalg.lstsq(a[:, idx], b, rcond=None)
            if np.all(s_p > 0):
                x = np.zeros(n)
                x[idx] = s_p
                break
            neg = s_p <= 0
            alpha = np.min(x[idx][neg] / (x[idx][neg] - s_p[neg]))
            x[idx] = x[idx] + alpha * (s_p - x[idx])
            passive[idx] = x[idx] > 1e-14 * scale
            x[~passive] = 0.0
    return x


def _cone_project(cone, x, metric):
    """Metric projection of x onto the cone; returns (u, v, coeffs).

    Solved as nonnegative least squares over the generators in the
    sqrt(H)-scaled coordinates, which is exactly
    ``min_{c >= 0} ||x - G^T c||_H``.  The library solver is verified
    against its own KKT conditions and replaced by a reference
    active-set iteration when it stops short.
    """
    x = np.asarray(x, dtype=float)
    if cone.is_empty:
        return np.zeros_like(x), x.copy(), np.zeros(0)
    root = np.sqrt(metric.diag)
    a = cone.generators.T * root[:, None]
    b = x * root
    try:
        coeffs, _ = nnls(a, b)
        bad = _kkt_residual(a, b, coeffs) > 1e-9
    except RuntimeError:
        bad = True
        coeffs = None
    if bad:
        coeffs = _lawson_hanson(a, b)
        if _kkt_residual(a, b, coeffs) > 1e-7:
            raise ConeProjectionError(
                "cone projection did not converge",
                residual=_kkt_residual(a, b, coeffs))
    u = cone.generators.T @ coeffs
    return u, x - u, coeffs


def moreau_decompose(cone, x, metric, tol=DEFAULT_TOLS.complementarity):
    """Split ``x = u + v`` with u in the cone, v in its metric polar.

    Postconditions (checked): ``x = u + v``, ``|<u, v>_H|`` small,
    ``<g, v>_H <= 0`` for every generator up to ``tol``; ``u`` is the
    metric projection of ``x`` onto the cone, hence unique.
    """
    u, v, coeffs = _cone_project(cone, np.asarray(x, dtype=float), metric)
    scale = max(metric.norm(u) * metric.norm(v), 1.0)
    ortho = abs(metric.inner(u, v))
    if ortho > tol * scale:
        raise ConeProjectionError(
            f"complementarity residual {ortho:.3e} exceeds {tol:.1e}*scale",
            residual=ortho,
        )
    if not cone.polar_contains(v, metric, tol):
        raise ConeProjectionError("residual not in the polar cone")
    return u, v


def project_least_action(poly, x, metric, drive,
                         feas_tol=DEFAULT_TOLS.feasibility,
                         comp_tol=DEFAULT_TOLS.complementarity):
    """Velocity of steepest admissible descent at ``x`` under ``drive``.

    Decomposes the drive against the normal cone at ``x`` and returns
    ``v* = H (drive - u)``; ``v*`` lies in the tangent cone and its dual
    norm never exceeds the metric norm of the drive.
    """
    cone = active_normal_generators(poly, x, feas_tol)
    u, _, _ = _cone_project(cone, np.asarray(drive, dtype=float), metric)
    return metric.diag * (drive - u)
