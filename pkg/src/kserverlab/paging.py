"""Fractional weighted paging driven by entropic dynamics.

State lives on the interior antipaging polytope
``P_delta = {x in [delta, 1]^n : sum x = n - k}`` where ``x_i`` is the
fractional absence of page ``i`` from the cache.  Serving a request at
page ``r`` evolves

    dx_i/dt = (x_i / w_i) (-1_{i=r} - lam_i + mu),
    lam_i = mu if x_i = 1 else 0,
    mu = (x_r / w_r) / sum_{i free} x_i / w_i,

until ``x_r`` hits ``delta``.  Between saturation events the system is
integrated exactly: with ``m(t)`` the integrated multiplier, every free
coordinate satisfies ``x_i(t) = x_i(0) exp(m / w_i)`` (an extra factor
``exp(-t / w_r)`` for the requested page), and mass conservation pins
``m`` by a monotone scalar equation.

The sigma transform rounds the resulting mass-``k/(1-delta)`` cache
trajectory down to a genuine fractional k-paging schedule.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .config import DEFAULT_TOLS
from .flow import entropy_field, linear_event
from .geometry import Polyhedron
from .offline import default_initial_cache, opt_weighted_paging
from .report import CheckReport

_SAT_TOL = 1e-12


@dataclass(frozen=True)
class PagingInstance:
    n: int
    k: int
    weights: np.ndarray
    delta: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "weights", w)
        if not (1 <= self.k < self.n):
            raise ValueError("need 1 <= k < n")
        if w.shape != (self.n,) or np.any(w <= 0):
            raise ValueError("weights must be n strictly positive reals")
        if not (0 < self.delta and self.n * self.delta <= self.n - self.k):
            raise ValueError("interior margin too large: need n*delta <= n-k")

    @classmethod
    def make(cls, n, k, weights=None, delta=None):
        """Default margin 1/(2k); for k = 1 that would push the rounding
        plateau eps = delta*k/(1-delta) to 1, so the margin shrinks to
        1/(2(k+1)) there."""
        if weights is None:
            weights = np.ones(n)
        if delta is None:
            delta = 1.0 / (2 * k) if k >= 2 else 1.0 / (2 * (k + 1))
        return cls(n=n, k=k, weights=np.asarray(weights, dtype=float), delta=delta)

    def polytope(self):
        n = self.n
        eye = np.eye(n)
        a = np.vstack([eye, -eye, np.ones((1, n))])
        b = np.concatenate([np.ones(n), -self.delta * np.ones(n), [n - self.k]])
        eq = np.zeros(2 * n + 1, dtype=bool)
        eq[-1] = True
        return Polyhedron(a, b, equality_mask=eq, check_feasible=False,
                          name="antipaging")

    def entropy(self):
        return entropy_field(self.weights)


@dataclass
class AntipagingState:
    x: np.ndarray

    def cache_content(self, delta):
        return (1.0 - self.x) / (1.0 - delta)


def initial_state(inst, requests):
    """Integral point with the first k distinct pages cached, nudged into
    the interior by the minimal move toward the barycenter."""
    cached = default_initial_cache(inst.n, inst.k, requests)
    x_hat = np.ones(inst.n)
    x_hat[list(cached)] = 0.0
    theta = inst.delta * inst.n / (inst.n - inst.k)
    bary = (inst.n - inst.k) / inst.n
    return AntipagingState(x=(1 - theta) * x_hat + theta * bary)


def mu_value(x, w, r):
    """Equality-constraint multiplier (x_r/w_r) / sum_{i: x_i < 1} x_i/w_i."""
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    free = x < 1.0 - _SAT_TOL
    free[r] = True
    denom = float(np.sum(x[free] / w[free]))
    return float((x[r] / w[r]) / denom)


@dataclass
class Phase:
    duration: float
    m_end: float
    saturated: tuple
    mu_start: float
    mu_end: float
    cost_into: float   # integral of w_r |dx_r/dt| over the phase
    cost_out: float    # weighted increase of all other coordinates
    x_start: np.ndarray
    x_end: np.ndarray


@dataclass
class PhaseLog:
    request: int
    phases: list = field(default_factory=list)
    t: np.ndarray = None
    x: np.ndarray = None
    mu: np.ndarray = None

    @property
    def cost_into(self):
        return sum(p.cost_into for p in self.phases)

    @property
    def cost_out(self):
        return sum(p.cost_out for p in self.phases)

    @property
    def duration(self):
        return sum(p.duration for p in self.phases)


def _solve_sample(x, w, r, free_others, c_free, t_s, m_hi):
    """m(t_s) from mass conservation within a phase (monotone root)."""
    def f(m):
        return (x[r] * np.exp((m - t_s) / w[r])
                + float(np.sum(x[free_others] * np.exp(m / w[free_others])))
                - c_free)
    if f(0.0) >= 0.0:
        return 0.0
    return brentq(f, 0.0, m_hi, xtol=1e-15, rtol=8.882e-16)


def serve_page_request(state, inst, r, samples_per_phase=8):
    """Drive x_r down to delta by exact piecewise integration.

    Returns the new state and a PhaseLog carrying, per phase, the
    saturated set, multiplier endpoints, duration and movement costs,
    plus a time-sampled path for the verification passes.
    """
    w = inst.weights
    delta = inst.delta
    x = np.array(state.x, dtype=float)
    n = inst.n
    if x[r] < delta - 1e-9:
        raise ValueError("state outside the interior polytope at the request")
    log = PhaseLog(request=r)
    ts, xs, mus = [0.0], [x.copy()], [mu_value(x, w, r)]
    if x[r] <= delta + 1e-12:
        log.t, log.x, log.mu = map(np.array, (ts, xs, mus))
        return AntipagingState(x=x), log

    t_abs = 0.0
    for _ in range(4 * n):  # each phase saturates a coordinate; n bounds them
        free = x < 1.0 - _SAT_TOL
        free[r] = True
        others = free.copy()
        others[r] = False
        if not others.any():
            raise RuntimeError(
                "all pages saturated except the request; impossible under "
                "the mass invariant")
        c_free = float(np.sum(x[free]))
        target = c_free - delta

        with np.errstate(divide="ignore"):
            m_sat = np.where(others, w * np.log(np.maximum(1.0 / np.maximum(x, 1e-300), 1.0)), np.inf)
        m_star = float(np.min(m_sat))

        def others_sum(m):
            return float(np.sum(x[others] * np.exp(m / w[others])))

        finishing = others_sum(m_star) >= target if np.isfinite(m_star) else True
        if finishing:
            hi = m_star if np.isfinite(m_star) else max(
                1.0, float(np.max(w)) * np.log(target / max(float(np.sum(x[others])), 1e-300) + 1.0) + 1.0)
            while others_sum(hi) < target:
                hi *= 2.0
            m_end = brentq(lambda m: others_sum(m) - target, 0.0, hi,
                           xtol=1e-15, rtol=8.882e-16)
            t_end = m_end + w[r] * np.log(x[r] / delta)
            x_r_end = delta
            saturating = ()
        else:
            m_end = m_star
            saturating = tuple(int(i) for i in np.flatnonzero(
                others & (m_sat <= m_star + 1e-14)))
            x_r_end = c_free - others_sum(m_star)
            t_end = m_end + w[r] * np.log(x[r] / x_r_end)

        x_new = x.copy()
        x_new[others] = x[others] * np.exp(m_end / w[others])
        for i in saturating:
            x_new[i] = 1.0
        x_new[r] = x_r_end

        # time samples strictly inside the phase, then the endpoint
        free_others = np.flatnonzero(others)
        for t_s in np.linspace(0.0, t_end, samples_per_phase + 1)[1:-1]:
            m_s = _solve_sample(x, w, r, free_others, c_free, t_s, m_end)
            x_s = x.copy()
            x_s[free_others] = x[free_others] * np.exp(m_s / w[free_others])
            x_s[r] = x[r] * np.exp((m_s - t_s) / w[r])
            ts.append(t_abs + t_s)
            xs.append(x_s)
            mus.append(mu_value(x_s, w, r))
        ts.append(t_abs + t_end)
        xs.append(x_new.copy())
        mus.append(mu_value(x_new, w, r))

        log.phases.append(Phase(
            duration=t_end, m_end=m_end, saturated=saturating,
            mu_start=mu_value(x, w, r), mu_end=mus[-1],
            cost_into=float(w[r] * (x[r] - x_r_end)),
            cost_out=float(np.sum(w[others] * (x_new[others] - x[others]))),
            x_start=x, x_end=x_new.copy(),
        ))
        x = x_new
        t_abs += t_end
        if not saturating:
            break
    else:
        raise RuntimeError("phase iteration did not terminate")

    log.t, log.x, log.mu = np.array(ts), np.array(xs), np.array(mus)
    return AntipagingState(x=x), log


def mirror_flow_problem(inst, r):
    """The same service as a generic integrate() problem (oracle hook)."""
    return {
        "constraints": inst.polytope(),
        "field": inst.entropy(),
        "control": _unit_drive(inst.n, r),
        "event": linear_event(np.eye(inst.n)[r], inst.delta, name="request-served"),
    }


def _unit_drive(n, r):
    from .flow import constant_control
    e = np.zeros(n)
    e[r] = -1.0
    return constant_control(e, name=f"-e_{r}")


def sigma_map(v, eps):
    """Collapse [l, l+eps] to l for integer l, stretch the remainder.

    Nondecreasing, 1/(1-eps)-Lipschitz, superadditive, identity on the
    integers.
    """
    if not 0 <= eps < 1:
        raise ValueError("eps must lie in [0, 1)")
    arr = np.asarray(v, dtype=float)
    if np.any(arr < -1e-9):
        raise ValueError("sigma_map expects nonnegative input")
    arr = np.maximum(arr, 0.0)
    ell = np.floor(arr)
    out = ell + np.maximum(0.0, arr - ell - eps) / (1.0 - eps)
    return out if isinstance(v, np.ndarray) else float(out)


@dataclass
class FractionalCacheSchedule:
    """sigma-rounded cache trajectory: at most k fractional server mass,
    topped up to exactly k through the star center."""

    times: np.ndarray
    sigma_z: np.ndarray
    center: np.ndarray
    eps: float
    cost_total: float
    cost_into: float
    cost_out: float


def round_paging(logs, inst):
    """Transform the antipaging trajectory into a fractional k-paging
    schedule via z = (1-x)/(1-delta) and the sigma transform."""
    eps = inst.delta * inst.k / (1.0 - inst.delta)
    if not logs:
        return FractionalCacheSchedule(
            times=np.zeros(0), sigma_z=np.zeros((0, inst.n)),
            center=np.zeros(0), eps=eps,
            cost_total=0.0, cost_into=0.0, cost_out=0.0)
    times, xs = _concat_logs(logs)
    z = (1.0 - xs) / (1.0 - inst.delta)
    sz = sigma_map(z, eps)
    mass = sz.sum(axis=1)
    if np.any(mass > inst.k + 1e-9):
        raise RuntimeError("sigma schedule exceeds k server mass")
    diffs = np.diff(sz, axis=0)
    into = float(np.sum(np.maximum(diffs, 0.0) @ inst.weights))
    out = float(np.sum(np.maximum(-diffs, 0.0) @ inst.weights))
    return FractionalCacheSchedule(
        times=times, sigma_z=sz, center=inst.k - mass, eps=eps,
        cost_total=into + out, cost_into=into, cost_out=out,
    )


def elementary_moves(phase, r):
    """Decompose a phase into moves of antipaging mass from r to each
    grown coordinate."""
    d = phase.x_end - phase.x_start
    return [(r, int(i), float(d[i])) for i in np.flatnonzero(d > 0) if i != r]


def _concat_logs(logs):
    ts, xs = [], []
    offset = 0.0
    last_t = None
    for lg in logs:
        t = lg.t + offset
        xl = lg.x
        if last_t is not None and t.size and abs(last_t - t[0]) < 1e-15:
            t, xl = t[1:], xl[1:]
        if t.size:
            ts.append(t)
            xs.append(xl)
            last_t = t[-1]
        offset += lg.duration
    if not ts:
        return np.zeros(0), logs[0].x[:0]
    return np.concatenate(ts), np.vstack(xs)


# ---------------------------------------------------------------------------
# verification passes


def check_mass_conservation(logs, inst, tol=1e-10):
    worst = 0.0
    n_checked = 0
    target = inst.n - inst.k
    for lg in logs:
        err = float(np.max(np.abs(lg.x.sum(axis=1) - target)))
        worst = max(worst, err)
        n_checked += lg.x.shape[0]
    return CheckReport("paging-mass-conservation", worst <= tol, worst, tol,
                       n_checked)


def check_monotone_nonrequested(logs, tol=1e-12):
    worst = 0.0
    n_checked = 0
    for lg in logs:
        d = np.diff(lg.x, axis=0)
        d[:, lg.request] = 0.0
        worst = max(worst, float(np.max(-d, initial=0.0)))
        n_checked += d.size
    return CheckReport("paging-monotone-nonrequested", worst <= tol, worst, tol,
                       n_checked)


def check_potential_descent(logs, inst, comparators_per_request=3, seed=0,
                            tol=DEFAULT_TOLS.slope):
    """Finite-difference slope of D_hat(x_hat; x(t)) <= -x_r(t) + tol for
    integral antipaging points x_hat with x_hat_r = 0."""
    rng = np.random.default_rng(seed)
    fld = inst.entropy()
    worst = 0.0
    n_checked = 0
    for lg in logs:
        r = lg.request
        comps = [_integral_comparator(inst, r, rng) for _ in
                 range(comparators_per_request)]
        comps.append(_greedy_comparator(inst, r, lg.x[0]))
        for x_hat in comps:
            dvals = np.array([-fld.phi(x) - float(fld.grad(x) @ (x_hat - x))
                              for x in lg.x])
            dt = np.diff(lg.t)
            ok = dt > 1e-14
            slopes = (np.diff(dvals)[ok]) / dt[ok]
            # x_r is nonincreasing, so the mean of -x_r over a step is
            # dominated by its right endpoint
            bound = -lg.x[1:, r][ok]
            excess = float(np.max(slopes - bound, initial=-np.inf))
            worst = max(worst, excess)
            n_checked += int(ok.sum())
    return CheckReport("paging-potential-descent", worst <= tol, worst, tol,
                       n_checked)


def _integral_comparator(inst, r, rng):
    others = [i for i in range(inst.n) if i != r]
    cached = rng.choice(others, size=inst.k - 1, replace=False).tolist() + [r]
    x_hat = np.ones(inst.n)
    x_hat[cached] = 0.0
    return x_hat


def _greedy_comparator(inst, r, x):
    order = [i for i in np.argsort(x) if i != r][: inst.k - 1]
    x_hat = np.ones(inst.n)
    x_hat[order + [r]] = 0.0
    return x_hat


def check_movement_rate(logs, inst, tol=DEFAULT_TOLS.slope):
    """w_r |dx_r/dt| <= x_r (1 + tol) whenever x_r < 1 (finite diffs)."""
    worst = 0.0
    n_checked = 0
    for lg in logs:
        r = lg.request
        dt = np.diff(lg.t)
        ok = dt > 1e-14
        rate = inst.weights[r] * np.abs(np.diff(lg.x[:, r]))[ok] / dt[ok]
        cap = lg.x[:-1, r][ok] * (1.0 + tol)
        applicable = lg.x[:-1, r][ok] < 1.0 - 1e-12
        if applicable.any():
            rel = float(np.max((rate - cap)[applicable], initial=0.0))
            worst = max(worst, rel)
            n_checked += int(applicable.sum())
    return CheckReport("paging-movement-rate", worst <= 0.0 + 1e-12, worst,
                       tol, n_checked)


def check_gradient_bound(logs, inst):
    bound = np.log(1.0 / inst.delta) + 1.0
    worst = 0.0
    n_checked = 0
    for lg in logs:
        vals = np.abs(1.0 + np.log(lg.x))
        worst = max(worst, float(vals.max()))
        n_checked += vals.size
    return CheckReport("paging-gradient-bound", worst <= bound, worst, bound,
                       n_checked)


def run_paging(inst, requests, verify="fast", samples_per_phase=8, seed=0):
    """Serve a request sequence, round the trajectory, and compare with
    the offline optimum.  Returns costs, the ratio on the charged
    (into-cache) movement, per-request logs, and verification reports.
    """
    requests = list(requests)
    state = initial_state(inst, requests)
    logs = []
    for r in requests:
        state, lg = serve_page_request(state, inst, int(r),
                                       samples_per_phase=samples_per_phase)
        logs.append(lg)
    schedule = round_paging(logs, inst)
    opt = opt_weighted_paging(inst.weights, inst.k, requests)["cost"]
    raw_into = sum(lg.cost_into for lg in logs)
    raw_out = sum(lg.cost_out for lg in logs)
    reports = []
    if verify in ("fast", "full"):
        reports.append(check_mass_conservation(logs, inst))
        reports.append(check_monotone_nonrequested(logs))
        reports.append(check_gradient_bound(logs, inst))
    if verify == "full":
        reports.append(check_potential_descent(logs, inst, seed=seed))
        reports.append(check_movement_rate(logs, inst))
    return {
        "alg_cost_into": schedule.cost_into,
        "alg_cost_out": schedule.cost_out,
        "alg_cost_total": schedule.cost_total,
        "raw_cost_into": raw_into,
        "raw_cost_out": raw_out,
        "opt_cost": opt,
        "ratio": schedule.cost_into / opt if opt > 0 else float("nan"),
        "logs": logs,
        "schedule": schedule,
        "reports": reports,
    }
