"""k-server dynamics on tau-adic HSTs.

State is a point on the assignment polytope: vertex ``u`` carries
coordinates ``x_{u,1} <= ... <= x_{u,N_u}`` (``N_u`` leaves below ``u``)
with root coordinates pinned to ``1_{i > k}`` and, for every vertex and
every cardinality ``m``, the prefix constraint

    sum_{i <= m} x_{u,i}  <=  sum of the m smallest child coordinates.

Root coordinates are constants and are eliminated from the state; the
root's prefix constraints become lower bounds on its children's
coordinate sums.  The subset constraint family is exponential, but under
sortedness the minimal-sum subset per cardinality dominates; the
provider rebuilds that reduced family from the current sorted order at
every step and, when ties make the reduced family miss a binding
subset, reports the violated row through ``refine``.

Serving a request at leaf ``l`` integrates the projected dynamics for
the shifted multiscale entropy ``sum_u w_u sum_i (x+delta) log (x+delta)``
under the drive ``-e_{l,1}`` until ``x_{l,1}`` falls to ``delta``.  The
associated server measure is ``z_u = (1/(1-delta)) sum_i (1 - x_{u,i})``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import DEFAULT_TOLS
from .flow import (
    StepPolicy,
    constant_control,
    entropy_field,
    integrate,
    linear_event,
)
from .geometry import Polyhedron
from .offline import opt_kserver_flow
from .paging import sigma_map
from .report import CheckReport, merge_reports
from .tree import HstTree, residuals, w1_distance


class AssignmentPolytope:
    """Constraint provider, index maps, and measure algebra for a tree.

    Coordinates of non-root vertices are flattened in DFS order; use
    ``coord_slice(u)`` / ``leaf_coord(leaf)`` to address them.
    """

    def __init__(self, tree, k, delta=None):
        if not (1 <= k <= tree.n_leaves):
            raise ValueError("need 1 <= k <= number of leaves")
        self.tree = tree
        self.k = k
        self.delta = float(delta) if delta is not None else 1.0 / (2 * k)
        if not (0 < self.delta < 1):
            raise ValueError("delta must lie in (0, 1)")

        self._slice = {}
        self.coord_vertex = []
        start = 0
        for v in tree.dfs:
            if v == tree.root:
                continue
            n = int(tree.n_below[v])
            self._slice[v] = (start, start + n)
            self.coord_vertex.extend([v] * n)
            start += n
        self.dim = start
        self.coord_vertex = np.array(self.coord_vertex)
        self.coord_weight = tree.w[self.coord_vertex]

        # per constraint-owning vertex: flat indices of child coordinates
        self._groups = []   # (vertex, row_start, child_coord_idx, rhs_consts)
        rows = 0
        for v in tree.dfs:
            if not tree.children[v]:
                continue
            ci = np.concatenate([np.arange(*self._slice[c])
                                 for c in tree.children[v]])
            n = int(tree.n_below[v])
            if v == tree.root:
                rhs = -np.maximum(0, np.arange(1, n + 1) - k).astype(float)
            else:
                rhs = np.zeros(n)
            self._groups.append((v, rows, ci, rhs))
            rows += n
        self.n_rows = rows

        self._static = np.zeros((rows, self.dim))
        self._rhs = np.zeros(rows)
        for v, r0, ci, rhs in self._groups:
            self._rhs[r0:r0 + len(ci)] = rhs
            if v != self.tree.root:
                s0, s1 = self._slice[v]
                block = self._static[r0:r0 + len(ci), s0:s1]
                block[np.tril_indices(s1 - s0)] = 1.0

        wn = np.array([tree.w[v] * tree.n_below[v] for v in tree.dfs
                       if v != tree.root])
        self.default_horizon = float(
            (4.0 + 4.0 * np.log(1.0 / self.delta)) * max(wn.sum(), 1.0)
            / self.delta + 10.0)

    # -- indexing -----------------------------------------------------------

    def coord_slice(self, v):
        return self._slice[v]

    def leaf_coord(self, leaf):
        return self._slice[leaf][0]

    # -- provider protocol ----------------------------------------------------

    def at(self, x):
        a = self._static.copy()
        for v, r0, ci, _ in self._groups:
            vals = x[ci]
            order = np.argsort(vals, kind="stable")
            m = len(ci)
            sel = np.zeros((m, self.dim))
            sel[np.arange(m), ci[order]] = 1.0
            np.cumsum(sel, axis=0, out=sel)
            a[r0:r0 + m] -= sel
        return Polyhedron(a, self._rhs, check_feasible=False, name="assignment")

    def refine(self, x, v, tol=1e-9, tie_quant=1e-11):
        """Rows for tight subsets (ties broken toward small velocity)
        whose tangent condition the candidate velocity violates."""
        vtol = 1e-10 * max(1.0, float(np.max(np.abs(v))))
        extras = []
        for u, _, ci, rhs in self._groups:
            xv = x[ci]
            vv = v[ci]
            q = np.round(xv / tie_quant)
            order = np.lexsort((np.arange(len(ci)), vv, q))
            cx = np.cumsum(xv[order])
            cv = np.cumsum(vv[order])
            if u == self.tree.root:
                px = np.zeros(len(ci))
                pv = np.zeros(len(ci))
                base = -rhs  # max(0, m-k)
            else:
                s0, s1 = self._slice[u]
                px = np.cumsum(x[s0:s1])
                pv = np.cumsum(v[s0:s1])
                base = np.zeros(len(ci))
            tight = (cx - (px + base)) <= tol
            viol = (pv - cv) > vtol
            for m in np.flatnonzero(tight & viol):
                row = np.zeros(self.dim)
                if u != self.tree.root:
                    s0, _ = self._slice[u]
                    row[s0:s0 + m + 1] = 1.0
                row[ci[order[: m + 1]]] -= 1.0
                extras.append(row)
        return extras or None

    # -- state construction and measures --------------------------------------

    def initial_point(self, server_leaves=None):
        """Integral point with servers on the given distinct leaves
        (default: the first k leaves in canonical order)."""
        tree = self.tree
        if server_leaves is None:
            server_leaves = tree.leaves[: self.k]
        if len(server_leaves) != self.k or len(set(server_leaves)) != self.k:
            raise ValueError("need k distinct server leaves")
        count = np.zeros(tree.n_vertices, dtype=int)
        for leaf in server_leaves:
            for a in tree.ancestors(leaf):
                count[a] += 1
        x = np.zeros(self.dim)
        for v in tree.dfs:
            if v == tree.root:
                continue
            s0, s1 = self._slice[v]
            x[s0:s1] = (np.arange(1, s1 - s0 + 1) > count[v]).astype(float)
        return x

    def server_measure(self, x):
        z = np.zeros(self.tree.n_vertices)
        z[self.tree.root] = self.k / (1.0 - self.delta)
        for v, (s0, s1) in self._slice.items():
            z[v] = (s1 - s0 - x[s0:s1].sum()) / (1.0 - self.delta)
        return z

    def measure_path(self, xs):
        out = np.full((xs.shape[0], self.tree.n_vertices),
                      self.k / (1.0 - self.delta))
        for v, (s0, s1) in self._slice.items():
            out[:, v] = (s1 - s0 - xs[:, s0:s1].sum(axis=1)) / (1.0 - self.delta)
        return out

    def entropy(self):
        return entropy_field(self.coord_weight, shift=self.delta)

    def bregman_hat_path(self, xs, y):
        """Offset divergence of every sample against a fixed point y."""
        w = self.coord_weight
        s = xs + self.delta
        phi = (w * s * np.log(s)).sum(axis=1)
        grad_dot = ((1.0 + np.log(s)) * w * (y[None, :] - xs)).sum(axis=1)
        return -phi - grad_dot

    def event_for_leaf(self, leaf):
        row = np.zeros(self.dim)
        row[self.leaf_coord(leaf)] = 1.0
        return linear_event(row, self.delta,
                            name=f"served:{self.tree.ids[leaf]}", value_tol=1e-9)

    def sorted_pairs(self):
        left, right = [], []
        for v, (s0, s1) in self._slice.items():
            if s1 - s0 >= 2:
                left.extend(range(s0, s1 - 1))
                right.extend(range(s0 + 1, s1))
        return np.array(left, dtype=int), np.array(right, dtype=int)


def serve_leaf_request(x, ap, leaf, policy=None, horizon=None):
    """Drive the requested leaf coordinate down to delta.

    Returns (new state vector, trajectory); the trajectory is None when
    the leaf already holds a full server.  A horizon hit is an error:
    the divergence argument guarantees finite service time, so running
    out the clock indicates a bug.
    """
    idx = ap.leaf_coord(leaf)
    if x[idx] <= ap.delta + 1e-12:
        return x, None
    drive = np.zeros(ap.dim)
    drive[idx] = -1.0
    policy = policy or StepPolicy(h_max=0.05, safety=0.35)
    traj = integrate(ap, ap.entropy(), constant_control(drive, name="request"),
                     x, events=[ap.event_for_leaf(leaf)],
                     horizon=horizon or ap.default_horizon, policy=policy)
    if not traj.stop_reason.startswith("event"):
        raise RuntimeError(
            f"service did not finish ({traj.stop_reason}); finite-time "
            "termination is guaranteed, so this is a bug")
    return traj.x[-1], traj


# ---------------------------------------------------------------------------
# dynamics verifiers


def _pair_mask(traj):
    dt = np.diff(traj.t)
    ok = dt > 1e-14
    for idx in traj.repair_indices:
        if 1 <= idx < traj.n_samples:
            ok[idx - 1] = False
    return ok, dt


def verify_dynamics_lemmas(traj, ap, leaf,
                           mass_tol=DEFAULT_TOLS.mass,
                           sort_tol=DEFAULT_TOLS.sorted_slack,
                           sign_tol=1e-6):
    """Structural facts of the service dynamics, checked pointwise:

    (a) per-vertex coordinate sortedness;
    (b) per-level server mass constant;
    (c) measure flow directed toward the requested leaf;
    (d) non-requested leaf coordinates never decrease;
    (e) leaf floor: coordinates that start above delta stay above.
    """
    tree = ap.tree
    xs = traj.x
    reports = []

    left, right = ap.sorted_pairs()
    sort_slack = float(np.max(xs[:, left] - xs[:, right], initial=0.0))
    reports.append(CheckReport("sortedness", sort_slack <= sort_tol,
                               sort_slack, sort_tol, xs.shape[0] * len(left)))

    z = ap.measure_path(xs)
    levels = tree.levels()
    worst = 0.0
    for h, verts in levels.items():
        lv = z[:, verts].sum(axis=1)
        worst = max(worst, float(np.max(np.abs(lv - lv[0]))))
    reports.append(CheckReport("level-mass", worst <= mass_tol, worst,
                               mass_tol, z.shape[0] * len(levels)))

    ok, dt = _pair_mask(traj)
    dz = (z[1:] - z[:-1])[ok] / dt[ok, None]
    anc = np.zeros(tree.n_vertices, dtype=bool)
    anc[tree.ancestors(leaf)] = True
    scale = np.maximum(1.0, np.max(np.abs(dz), axis=1))
    bad_anc = float(np.max((-dz[:, anc]) / scale[:, None], initial=0.0))
    bad_other = float(np.max(dz[:, ~anc] / scale[:, None], initial=0.0))
    flow_worst = max(bad_anc, bad_other)
    reports.append(CheckReport("flow-direction", flow_worst <= sign_tol,
                               flow_worst, sign_tol, dz.size))

    other_leaf_coords = np.array([ap.leaf_coord(l) for l in tree.leaves
                                  if l != leaf], dtype=int)
    dx = (xs[1:] - xs[:-1])[ok] / dt[ok, None]
    mono = float(np.max(-dx[:, other_leaf_coords] /
                        np.maximum(1.0, np.max(np.abs(dx), axis=1))[:, None],
                        initial=0.0))
    reports.append(CheckReport("nonrequested-monotone", mono <= sign_tol,
                               mono, sign_tol, dx.shape[0] * len(other_leaf_coords)))

    floor0 = xs[0, other_leaf_coords] >= ap.delta - 1e-12
    if floor0.all():
        end = float(np.min(xs[-1, other_leaf_coords], initial=np.inf))
        ok_floor = end >= ap.delta - 1e-9
        reports.append(CheckReport("leaf-floor", ok_floor,
                                   max(0.0, ap.delta - end), 1e-9,
                                   len(other_leaf_coords)))
    return merge_reports("dynamics-lemmas", reports), reports


def check_bregman_descent(traj, ap, y, leaf, tol=DEFAULT_TOLS.slope):
    """d/dt D_hat(y; x(t)) <= -x_{l,1}(t) for y in A with y_l = 0."""
    idx = ap.leaf_coord(leaf)
    if y[idx] != 0.0:
        raise ValueError("comparison point must hold a server at the request")
    dvals = ap.bregman_hat_path(traj.x, y)
    ok, dt = _pair_mask(traj)
    slopes = np.diff(dvals)[ok] / dt[ok]
    xl = traj.x[:, idx]
    bound = -np.minimum(xl[:-1], xl[1:])[ok]
    worst = float(np.max(slopes - bound, initial=0.0))
    return CheckReport("bregman-descent", worst <= tol, worst, tol,
                       int(ok.sum()))


def entropy_gradient_bound(ap, n_samples=50, seed=0):
    """max |1 + log(x+delta)| over sampled polytope points, against the
    closed-form cap 1 + log(1/delta) + log 2."""
    rng = np.random.default_rng(seed)
    tree = ap.tree
    bound = 1.0 + np.log(1.0 / ap.delta) + np.log(2.0)
    worst = 0.0
    for _ in range(n_samples):
        mix = rng.dirichlet(np.ones(4))
        pts = []
        for _ in range(4):
            leaves = rng.choice(tree.n_leaves, size=ap.k, replace=False)
            pts.append(ap.initial_point([tree.leaves[i] for i in leaves]))
        x = np.tensordot(mix, np.array(pts), axes=1)
        worst = max(worst, float(np.max(np.abs(1.0 + np.log(x + ap.delta)))))
    return CheckReport("entropy-gradient-bound", worst <= bound, worst, bound,
                       n_samples)


def check_opt_move_bound(ap, n_trials=50, seed=0):
    """|D_hat(y'; x) - D_hat(y; x)| <= (1 + log(1/delta) + log 2) *
    ||y' - y||_{l1(w)} for elementary comparator moves."""
    rng = np.random.default_rng(seed)
    tree = ap.tree
    cap = 1.0 + np.log(1.0 / ap.delta) + np.log(2.0)
    worst = 0.0
    for _ in range(n_trials):
        leaves = list(rng.choice(tree.n_leaves, size=ap.k, replace=False))
        y1 = ap.initial_point([tree.leaves[i] for i in leaves])
        off = [i for i in range(tree.n_leaves) if i not in leaves]
        swap_out = int(rng.integers(0, ap.k))
        leaves2 = list(leaves)
        leaves2[swap_out] = int(rng.choice(off))
        y2 = ap.initial_point([tree.leaves[i] for i in leaves2])
        mix = rng.dirichlet(np.ones(3))
        pts = [ap.initial_point([tree.leaves[i] for i in
                                 rng.choice(tree.n_leaves, size=ap.k,
                                            replace=False)]) for _ in range(3)]
        x = np.tensordot(mix, np.array(pts), axes=1)
        gap = abs(float(ap.bregman_hat_path(x[None, :], y2)[0]
                        - ap.bregman_hat_path(x[None, :], y1)[0]))
        move = float(np.dot(ap.coord_weight, np.abs(y2 - y1)))
        worst = max(worst, gap - cap * move)
    return CheckReport("opt-move-bound", worst <= 1e-9, worst, 0.0, n_trials)


def check_union_closure(ap, x, rng, n_pairs=200, tol=1e-9):
    """If two sampled subset constraints are tight, so is their union."""
    tree = ap.tree
    worst = 0.0
    found = 0
    internal = [g for g in ap._groups]
    for _ in range(n_pairs):
        u, _, ci, _ = internal[int(rng.integers(0, len(internal)))]
        if len(ci) < 2:
            continue
        def subset_slack(sel):
            rhs = float(x[ci[sel]].sum())
            if u == ap.tree.root:
                lhs = max(0, int(sel.sum()) - ap.k)
            else:
                s0, _ = ap._slice[u]
                lhs = float(x[s0:s0 + int(sel.sum())].sum())
            return rhs - lhs
        s1 = rng.random(len(ci)) < 0.5
        s2 = rng.random(len(ci)) < 0.5
        if not s1.any() or not s2.any():
            continue
        if subset_slack(s1) <= tol and subset_slack(s2) <= tol:
            found += 1
            slack = subset_slack(s1 | s2)
            worst = max(worst, slack)
    return CheckReport("tight-union-closure", worst <= 10 * tol, worst,
                       10 * tol, found)


# ---------------------------------------------------------------------------
# potentials


@dataclass(frozen=True)
class PotentialSpec:
    """Weighted-depth auxiliary potential, one of three depth notions:
    combinatorial (edge depth), cardinality (log n/N_u), or the
    time-varying server-weighted depth."""

    variant: str
    delta: float
    k: int
    eps: float = None

    def __post_init__(self):
        if self.variant not in ("combinatorial", "cardinality", "weighted"):
            raise ValueError(f"unknown potential variant {self.variant!r}")
        if self.variant == "weighted" and not (self.eps and 0 < self.eps < 1):
            raise ValueError("weighted variant needs eps in (0, 1)")

    def delta_values(self, tree, z_row=None):
        if self.variant == "combinatorial":
            return tree.depth.astype(float)
        if self.variant == "cardinality":
            return np.log(tree.n_leaves / tree.n_below)
        zb = np.asarray(z_row) + self.eps
        return np.log((self.k + 2 * self.eps) / zb) / (1.0 - self.delta)

    def q_values(self, tree, z_row=None):
        dv = self.delta_values(tree, z_row)
        q = np.zeros(tree.n_vertices)
        for v in range(tree.n_vertices):
            if v != tree.root:
                q[v] = dv[v] - dv[tree.parent[v]]
        return q

    def psi_path(self, ap, xs, zs):
        tree = ap.tree
        if self.variant in ("combinatorial", "cardinality"):
            dv = self.delta_values(tree)
            coeff = np.zeros(ap.dim)
            for v, (s0, s1) in ap._slice.items():
                coeff[s0:s1] = tree.w[v] * (dv[v] + dv[tree.parent[v]])
            return xs @ coeff
        eps = self.eps
        out = np.zeros(xs.shape[0])
        is_leaf = np.zeros(tree.n_vertices, dtype=bool)
        is_leaf[tree.leaves] = True
        for v in range(tree.n_vertices):
            if v == tree.root:
                continue
            c = 1.0 + (0.0 if is_leaf[v] else 1.0 / tree.tau) * eps
            zv = zs[:, v]
            zp = zs[:, tree.parent[v]]
            out += tree.w[v] * ((zv + c) * np.log(zv + eps)
                                + zv * np.log(zp + eps))
        return out

    def weighted_slope_identity(self, ap, traj, zs, fd_tol=1e-4):
        """Closed-form dPsi/dt = sum_u w_u z_u' [log(z_u+e)+log(z_p+e)],
        valid because mass per weight class is conserved; cross-checked
        against finite differences of the raw potential."""
        tree = ap.tree
        psi = self.psi_path(ap, traj.x, zs)
        ok, dt = _pair_mask(traj)
        fd = np.diff(psi)[ok] / dt[ok]
        zm = 0.5 * (zs[1:] + zs[:-1])[ok]
        dz = (zs[1:] - zs[:-1])[ok] / dt[ok, None]
        closed = np.zeros(fd.shape[0])
        for v in range(tree.n_vertices):
            if v == tree.root:
                continue
            closed += tree.w[v] * dz[:, v] * (
                np.log(zm[:, v] + self.eps)
                + np.log(zm[:, tree.parent[v]] + self.eps))
        scale = np.maximum(np.abs(fd), 1.0)
        worst = float(np.max(np.abs(fd - closed) / scale, initial=0.0))
        return CheckReport("weighted-psi-closed-form", worst <= fd_tol, worst,
                           fd_tol, fd.shape[0])


def evaluate_potential(spec, ap, traj):
    zs = ap.measure_path(traj.x)
    psi = spec.psi_path(ap, traj.x, zs)
    ok, dt = _pair_mask(traj)
    out = {
        "t": traj.t,
        "psi": psi,
        "slopes": np.diff(psi)[ok] / dt[ok],
        "pair_mask": ok,
        "z": zs,
    }
    if spec.variant == "weighted":
        out["closed_form"] = spec.weighted_slope_identity(ap, traj, zs)
    return out


def verify_depth_inequalities(traj, ap, spec, y, leaf,
                              rel_tol=1e-2, min_frac=0.99):
    """Pointwise movement-vs-potential inequalities along a service.

    Checked with finite differences between consecutive samples:

    * movement in the q-weighted norm <= 3 Delta_l (x_l + delta) + dPsi;
    * the same with the Bregman slope replacing the direct term;
    * for variants with a uniform floor c on the two-smallest-children
      functional of q, the l1(w) movement bound with constant c(1-d)/4;
    * for the weighted variant, the sigma-movement inequality with
      constants (1-e)/4 log(4/3) and 6 log(2 + k/e).

    Each report carries the max relative slack and the fraction of
    sample pairs satisfying the bound within ``rel_tol``.
    """
    tree = ap.tree
    idx = ap.leaf_coord(leaf)
    if y[idx] != 0.0:
        raise ValueError("comparison point must hold a server at the request")
    xs = traj.x
    zs = ap.measure_path(xs)
    psi = spec.psi_path(ap, xs, zs)
    dhat = ap.bregman_hat_path(xs, y)
    ok, dt = _pair_mask(traj)
    dtv = dt[ok]
    dx = (xs[1:] - xs[:-1])[ok] / dtv[:, None]
    dz = (zs[1:] - zs[:-1])[ok] / dtv[:, None]
    dpsi = np.diff(psi)[ok] / dtv
    ddhat = np.diff(dhat)[ok] / dtv
    zmid = 0.5 * (zs[1:] + zs[:-1])[ok]
    xmid = 0.5 * (xs[1:] + xs[:-1])[ok]

    n_pairs = dtv.shape[0]
    if spec.variant == "weighted":
        q = np.zeros((n_pairs, tree.n_vertices))
        dval_leaf = np.zeros(n_pairs)
        for i in range(n_pairs):
            dv = spec.delta_values(tree, zmid[i])
            q[i] = spec.q_values(tree, zmid[i])
            dval_leaf[i] = dv[leaf]
    else:
        q = np.broadcast_to(spec.q_values(tree), (n_pairs, tree.n_vertices))
        dval_leaf = np.full(n_pairs, spec.delta_values(tree)[leaf])

    qw_coord = q[:, ap.coord_vertex] * ap.coord_weight[None, :]
    move_x_qw = np.abs(dx * qw_coord).sum(axis=1)
    nonroot = np.array([v for v in range(tree.n_vertices) if v != tree.root])
    qw_vert = q[:, nonroot] * tree.w[nonroot][None, :]
    move_z_qw = np.abs(dz[:, nonroot] * qw_vert).sum(axis=1)
    move_z_w = np.abs(dz[:, nonroot] * tree.w[nonroot][None, :]).sum(axis=1)
    xl_mid = xmid[:, idx]

    def _report(name, lhs, rhs):
        slack = lhs - rhs
        scale = np.maximum(np.maximum(np.abs(lhs), np.abs(rhs)), 1e-8)
        rel = slack / scale
        frac = float(np.mean(rel <= rel_tol)) if rel.size else 1.0
        return CheckReport(
            name, frac >= min_frac, float(np.max(rel, initial=0.0)), rel_tol,
            rel.size, notes=f"fraction within tol: {frac:.4f}")

    reports = [
        _report("movement-vs-depth",
                move_x_qw, 3 * dval_leaf * (xl_mid + ap.delta) + dpsi),
        _report("movement-vs-bregman",
                (1 - ap.delta) * move_z_qw, dpsi - 6 * dval_leaf * ddhat),
    ]
    if spec.variant in ("combinatorial", "cardinality"):
        c = 1.0 if spec.variant == "combinatorial" else np.log(2.0)
        reports.append(_report(
            f"l1-movement-floor({spec.variant})",
            c * (1 - ap.delta) / 4.0 * move_z_w,
            dpsi - 6 * dval_leaf * ddhat))
    else:
        eps = spec.eps
        sz = sigma_map(zs, eps)
        dsz = (sz[1:] - sz[:-1])[ok] / dtv[:, None]
        move_sz = np.abs(dsz[:, nonroot] * tree.w[nonroot][None, :]).sum(axis=1)
        reports.append(_report(
            "sigma-movement-bound",
            (1 - eps) / 4.0 * np.log(4.0 / 3.0) * move_sz,
            (1 - ap.delta) * dpsi - 6 * np.log(2.0 + spec.k / eps) * ddhat))
    return merge_reports(f"depth-inequalities({spec.variant})", reports), reports


# ---------------------------------------------------------------------------
# rounding and leaf conversion


def sigma_round_measure(z_vertices, tree, eps):
    """Componentwise sigma transform of an internal measure of mass
    k + eps' (eps' <= eps); yields an internal supermeasure of mass
    exactly k."""
    z = np.asarray(z_vertices, dtype=float)
    mass = float(z[tree.root])
    k = int(np.floor(mass + 1e-9))
    if not (-1e-9 <= mass - k <= eps + 1e-9):
        raise ValueError("mass excess above k must not exceed eps")
    sz = sigma_map(z, eps)
    sz[tree.root] = float(k)
    r = residuals(sz, tree)
    if np.min(r) < -1e-9:
        worst = int(np.argmin(r))
        raise RuntimeError(
            f"sigma rounding broke the supermeasure property at "
            f"{tree.ids[worst]}")
    return sz


class LeafConverter:
    """Adapts a supermeasure path to a leaf-measure path.

    Mass parcels carry (virtual vertex, assigned leaf): residual mass
    parked at internal vertices keeps its last assigned leaf until the
    flow delivers it to a leaf vertex, at which point the assignment
    snaps there (the only real movement).  Per parcel the real jumps are
    leaf-to-leaf shortcuts of its virtual path, so the real cost never
    exceeds the virtual flow cost plus the initial parking allowance.
    """

    def __init__(self, tree, y0, tol=1e-9):
        self.tree = tree
        self.tol = tol
        r0 = residuals(y0, tree)
        bad = int(np.argmin(r0))
        if r0[bad] < -tol:
            raise ValueError(
                f"input is not a supermeasure: negative residual at "
                f"{tree.ids[bad]}")
        self._first_leaf = {}
        for v in reversed(tree.dfs):
            self._first_leaf[v] = (v if not tree.children[v]
                                   else self._first_leaf[tree.children[v][0]])
        self.pools = [[] for _ in range(tree.n_vertices)]
        self.allowance = 0.0
        for v in range(tree.n_vertices):
            if r0[v] > tol:
                home = self._first_leaf[v]
                self.pools[v].append([home, float(r0[v])])
                if v != home:
                    self.allowance += r0[v] * tree.dist(v, home)
        self.y = np.asarray(y0, dtype=float).copy()
        self.real_cost = 0.0
        self.virtual_cost = 0.0

    def _take(self, pool, amount):
        taken = []
        need = amount
        while need > self.tol and pool:
            leaf, amt = pool[-1]
            if amt <= need + self.tol:
                taken.append(pool.pop())
                need -= amt
            else:
                pool[-1][1] = amt - need
                taken.append([leaf, need])
                need = 0.0
        return taken

    def step(self, y_new):
        tree = self.tree
        y_new = np.asarray(y_new, dtype=float)
        r_new = residuals(y_new, tree)
        bad = int(np.argmin(r_new))
        if r_new[bad] < -self.tol:
            raise ValueError(
                f"input is not a supermeasure: negative residual at "
                f"{tree.ids[bad]}")
        g = y_new - self.y   # flow into each subtree across its top edge
        self.virtual_cost += float(np.dot(tree.w, np.abs(g)))
        for v in reversed(tree.dfs):            # upward moves first
            if v != tree.root and g[v] < -self.tol:
                self.pools[tree.parent[v]].extend(
                    self._take(self.pools[v], -g[v]))
        for v in tree.dfs:                      # then downward
            if v != tree.root and g[v] > self.tol:
                self.pools[v].extend(self._take(self.pools[tree.parent[v]], g[v]))
        for leaf in tree.leaves:                # snap arrivals
            pool = self.pools[leaf]
            for parcel in pool:
                if parcel[0] != leaf:
                    self.real_cost += parcel[1] * tree.dist(parcel[0], leaf)
                    parcel[0] = leaf
            if len(pool) > 1:
                total = sum(p[1] for p in pool)
                pool.clear()
                pool.append([leaf, total])
        self.y = y_new.copy()
        return self.leaf_measure()

    def leaf_measure(self):
        out = np.zeros(self.tree.n_leaves)
        for pool in self.pools:
            for leaf, amt in pool:
                out[self.tree.leaf_pos[leaf]] += amt
        return out


def supermeasure_to_leaves(y_path, tree):
    """One-shot conversion of a supermeasure trajectory; returns the leaf
    path, certified costs, and the comparison report."""
    y_path = np.asarray(y_path, dtype=float)
    conv = LeafConverter(tree, y_path[0])
    leaves = [conv.leaf_measure()]
    for row in y_path[1:]:
        leaves.append(conv.step(row))
    leaf_path = np.array(leaves)
    bound = conv.virtual_cost + conv.allowance
    ok = conv.real_cost <= bound + 1e-9
    # demand satisfaction: leaf values dominate the supermeasure there
    demand_gap = float(np.min(leaf_path - y_path[:, tree.leaves], initial=0.0))
    report = CheckReport("leaf-conversion", ok and demand_gap >= -1e-9,
                         max(conv.real_cost - bound, -demand_gap, 0.0), 1e-9,
                         y_path.shape[0])
    return {
        "leaf_path": leaf_path,
        "real_cost": conv.real_cost,
        "virtual_cost": conv.virtual_cost,
        "allowance": conv.allowance,
        "report": report,
    }


# ---------------------------------------------------------------------------
# end-to-end runs


def run_kserver(tree, k, requests, variant="weighted", eps=None, delta=None,
                verify="fast", policy=None, placement=None, seed=0,
                converter_stride=12):
    """Serve a leaf-request sequence and report costs against the
    offline optimum.

    The deliverable algorithm is the sigma-rounded, leaf-converted
    fractional k-server trajectory; its cost is the sum of
    transportation distances between consecutive leaf measures at
    request boundaries.
    """
    requests = [tree.index[r] if isinstance(r, str) else int(r)
                for r in requests]
    for r in requests:
        if r not in tree.leaf_pos:
            raise ValueError(f"request {tree.ids[r]!r} is not a leaf")
    delta = delta if delta is not None else 1.0 / (2 * k)
    eps = eps if eps is not None else delta * k / (1.0 - delta)
    if not (0 < eps < 1):
        raise ValueError("sigma plateau eps must lie in (0, 1)")
    ap = AssignmentPolytope(tree, k, delta)
    spec = PotentialSpec(variant=variant, delta=delta, k=k,
                         eps=eps if variant == "weighted" else None)
    x = ap.initial_point(placement)
    init_leaves = placement or tree.leaves[:k]

    conv = LeafConverter(tree, sigma_round_measure(ap.server_measure(x), tree, eps))
    l_prev = conv.leaf_measure()
    alg_cost = 0.0
    sigma_path_cost = 0.0
    reports = []
    per_request = []
    rng = np.random.default_rng(seed)

    for t, r in enumerate(requests):
        x_new, traj = serve_leaf_request(x, ap, r, policy=policy)
        if traj is None:
            per_request.append({"request": tree.ids[r], "samples": 0,
                                "duration": 0.0, "cost": 0.0})
            continue
        zs = ap.measure_path(traj.x)
        sz = sigma_map(zs, eps)
        sz[:, tree.root] = float(k)
        sigma_path_cost += float(
            (np.abs(np.diff(sz, axis=0)) * tree.w[None, :]).sum())
        stride_rows = list(range(1, sz.shape[0], converter_stride))
        if not stride_rows or stride_rows[-1] != sz.shape[0] - 1:
            stride_rows.append(sz.shape[0] - 1)
        for i in stride_rows:
            conv.step(sz[i])
        l_now = conv.leaf_measure()
        step_cost = w1_distance(l_prev, l_now, tree)
        alg_cost += step_cost
        served = l_now[tree.leaf_pos[r]]
        if served < 1.0 - 1e-6:
            raise RuntimeError(
                f"request {tree.ids[r]!r} not served (mass {served:.6f})")
        per_request.append({"request": tree.ids[r],
                            "samples": traj.n_samples,
                            "duration": traj.terminal_t,
                            "cost": step_cost})
        if verify in ("fast", "full"):
            rep, _ = verify_dynamics_lemmas(traj, ap, r)
            reports.append(rep)
        if verify == "full":
            y = _comparator_point(ap, r, rng)
            reports.append(check_bregman_descent(traj, ap, y, r))
            rep, _ = verify_depth_inequalities(traj, ap, spec, y, r)
            reports.append(rep)
            if spec.variant == "weighted":
                reports.append(spec.weighted_slope_identity(ap, traj, zs))
        l_prev = l_now
        x = x_new

    dist = tree.leaf_dist_matrix()
    rho0 = [tree.leaf_pos[l] for l in init_leaves]
    opt = opt_kserver_flow(dist, k, [tree.leaf_pos[r] for r in requests], rho0)
    out = {
        "alg_cost": alg_cost,
        "sigma_path_cost": sigma_path_cost,
        "converter_real_cost": conv.real_cost,
        "converter_virtual_cost": conv.virtual_cost,
        "opt_cost": opt["cost"],
        "ratio": alg_cost / opt["cost"] if opt["cost"] > 0 else float("nan"),
        "per_request": per_request,
        "reports": reports,
        "opt_schedule": opt["schedule"],
        "final_state": x,
    }
    if verify in ("fast", "full"):
        reports.append(entropy_gradient_bound(ap, n_samples=10, seed=seed))
    return out


def _comparator_point(ap, leaf, rng):
    tree = ap.tree
    others = [l for l in tree.leaves if l != leaf]
    pick = list(rng.choice(len(others), size=ap.k - 1, replace=False))
    return ap.initial_point([leaf] + [others[i] for i in pick])
