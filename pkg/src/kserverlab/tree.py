"""Rooted tau-adic weighted trees with leaf/internal measures.

A tree is tau-adic when every non-root vertex weight is an integer power
of tau and each child weight is its parent's divided by tau (root edges
exempt, the root carries weight zero).  All leaves sit at the same
combinatorial depth.  The validator additionally requires one weight
value per level: the per-scale mass identities used by the dynamics
verifiers group vertices by weight, and level-uniform weights make
those groups coincide with the levels.
"""

from __future__ import annotations

import math

import numpy as np

from .report import CheckReport


class TreeError(ValueError):
    pass


class HstTree:
    """Vertices are indexed 0..V-1; string ids are kept for I/O.

    Children are ordered by insertion; leaves are listed in depth-first
    order, which is the canonical order used for initial placements.
    """

    def __init__(self, ids, parents, weights, tau, validate=True):
        self.ids = list(ids)
        self.parent = np.asarray(parents, dtype=int)        # -1 at the root
        self.w = np.asarray(weights, dtype=float)
        self.tau = float(tau)
        self.n_vertices = len(self.ids)
        self.index = {vid: i for i, vid in enumerate(self.ids)}
        if len(self.index) != self.n_vertices:
            raise TreeError("duplicate vertex ids")
        roots = np.flatnonzero(self.parent < 0)
        if roots.size != 1:
            raise TreeError("tree must have exactly one root")
        self.root = int(roots[0])
        self.children = [[] for _ in range(self.n_vertices)]
        for v in range(self.n_vertices):
            if v != self.root:
                self.children[self.parent[v]].append(v)
        self.depth = np.zeros(self.n_vertices, dtype=int)
        order = self._dfs_order()
        for v in order[1:]:
            self.depth[v] = self.depth[self.parent[v]] + 1
        self.leaves = [v for v in order if not self.children[v]]
        self.n_leaves = len(self.leaves)
        self.leaf_pos = {v: i for i, v in enumerate(self.leaves)}
        self.n_below = np.zeros(self.n_vertices, dtype=int)
        for v in reversed(order):
            self.n_below[v] = (1 if not self.children[v]
                               else sum(self.n_below[c] for c in self.children[v]))
        self.dfs = order
        if validate:
            self.validate()

    def _dfs_order(self):
        order = []
        stack = [self.root]
        while stack:
            v = stack.pop()
            order.append(v)
            stack.extend(reversed(self.children[v]))
        if len(order) != self.n_vertices:
            raise TreeError("disconnected vertices present")
        return order

    # -- construction -----------------------------------------------------

    @classmethod
    def from_edges(cls, edges, root, tau, validate=True):
        """edges: iterable of (parent_id, child_id, weight)."""
        ids = [root]
        seen = {root}
        parents = {root: -1}
        weights = {root: 0.0}
        for p, c, w in edges:
            if c in seen:
                raise TreeError(f"vertex {c!r} has two parents")
            if p not in seen:
                raise TreeError(f"edge parent {p!r} unknown (order edges root-first)")
            seen.add(c)
            ids.append(c)
            parents[c] = p
            weights[c] = float(w)
        index = {vid: i for i, vid in enumerate(ids)}
        par_idx = [index[parents[v]] if parents[v] != -1 else -1 for v in ids]
        return cls(ids, par_idx, [weights[v] for v in ids], tau, validate=validate)

    @classmethod
    def from_file(cls, path, validate=True):
        """Format: lines 'root <id>', 'tau <value>', and
        'edge <parent-id> <child-id> <weight>'."""
        root = None
        tau = None
        edges = []
        with open(path) as fh:
            for line in fh:
                parts = line.split()
                if not parts or parts[0].startswith("#"):
                    continue
                if parts[0] == "root":
                    root = parts[1]
                elif parts[0] == "tau":
                    tau = float(parts[1])
                elif parts[0] == "edge":
                    edges.append((parts[1], parts[2], float(parts[3])))
                else:
                    raise TreeError(f"unrecognized line: {line.strip()!r}")
        if root is None or tau is None:
            raise TreeError("tree file needs 'root' and 'tau' lines")
        return cls.from_edges(edges, root, tau, validate=validate)

    def to_file(self, path):
        with open(path, "w") as fh:
            fh.write(f"root {self.ids[self.root]}\n")
            fh.write(f"tau {self.tau:g}\n")
            for v in self.dfs[1:]:
                fh.write(f"edge {self.ids[self.parent[v]]} {self.ids[v]} "
                         f"{self.w[v]:.17g}\n")

    @classmethod
    def balanced(cls, tau, depth, arity, top_weight=1.0):
        """Complete arity^depth-leaf tree; level-h weight top/tau^(h-1)."""
        edges = []
        frontier = ["r"]
        for h in range(1, depth + 1):
            w = top_weight / tau ** (h - 1)
            nxt = []
            for node in frontier:
                for a in range(arity):
                    child = f"{node}.{a}" if node != "r" else f"v{a}"
                    edges.append((node, child, w))
                    nxt.append(child)
            frontier = nxt
        return cls.from_edges(edges, "r", tau)

    # -- validation and normalization --------------------------------------

    def validate(self):
        if self.tau < 2:
            raise TreeError("tau must be at least 2")
        if self.w[self.root] != 0.0:
            raise TreeError("root weight must be zero")
        log_tau = math.log(self.tau)
        for v in range(self.n_vertices):
            if v == self.root:
                continue
            if self.w[v] <= 0:
                raise TreeError(f"vertex {self.ids[v]!r} has nonpositive weight")
            j = math.log(self.w[v]) / log_tau
            if abs(j - round(j)) > 1e-9:
                raise TreeError(
                    f"weight {self.w[v]} at {self.ids[v]!r} is not a power of tau")
            p = self.parent[v]
            if p != self.root and abs(self.w[v] - self.w[p] / self.tau) > 1e-12 * self.w[p]:
                raise TreeError(
                    f"weight at {self.ids[v]!r} is not parent/tau")
        depths = {self.depth[v] for v in self.leaves}
        if len(depths) > 1:
            raise TreeError("leaves at unequal depth (run normalize() first)")
        for h in range(1, int(self.depth.max()) + 1):
            lvl = [v for v in range(self.n_vertices) if self.depth[v] == h]
            if len({float(self.w[v]) for v in lvl}) > 1:
                raise TreeError(f"level {h} carries mixed weights")
        return True

    def normalize(self):
        """Pad shallow leaves with unary chains of geometrically
        decreasing weights; leaf ids are preserved at the bottom, so the
        leaf ultrametric (lca weights) is unchanged."""
        target = max(self.depth[v] for v in self.leaves)
        out_edges = [(self.ids[self.parent[v]], self.ids[v], self.w[v])
                     for v in self.dfs[1:]]
        for v in list(self.leaves):
            gap = target - self.depth[v]
            if gap == 0:
                continue
            vid = self.ids[v]
            # the old leaf position becomes the chain top '<id>~0'
            out_edges = [(p, f"{c}~0" if c == vid else c, w)
                         for (p, c, w) in out_edges]
            chain_parent = f"{vid}~0"
            w = self.w[v]
            for d in range(1, gap):
                w = w / self.tau
                nid = f"{vid}~{d}"
                out_edges.append((chain_parent, nid, w))
                chain_parent = nid
            out_edges.append((chain_parent, vid, w / self.tau))
        return HstTree.from_edges(out_edges, self.ids[self.root], self.tau)

    # -- metric -------------------------------------------------------------

    def ancestors(self, v):
        path = [v]
        while path[-1] != self.root:
            path.append(int(self.parent[path[-1]]))
        return path

    def lca(self, u, v):
        au = set(self.ancestors(u))
        x = v
        while x not in au:
            x = int(self.parent[x])
        return x

    def dist(self, u, v):
        """Weighted path distance (edge entering x has length w_x)."""
        a = self.lca(u, v)
        d = 0.0
        for x in (u, v):
            while x != a:
                d += self.w[x]
                x = int(self.parent[x])
        return d

    def leaf_dist_matrix(self):
        n = self.n_leaves
        mat = np.zeros((n, n))
        for i in range(n):
            for j in range(i + 1, n):
                mat[i, j] = mat[j, i] = self.dist(self.leaves[i], self.leaves[j])
        return mat

    def levels(self):
        out = {}
        for v in range(self.n_vertices):
            out.setdefault(int(self.depth[v]), []).append(v)
        return out


# -- measures ----------------------------------------------------------------


def lift(z_leaves, tree):
    """Internal measure with each vertex holding its subtree's leaf mass."""
    z_leaves = np.asarray(z_leaves, dtype=float)
    if z_leaves.shape != (tree.n_leaves,):
        raise ValueError("leaf measure has wrong length")
    out = np.zeros(tree.n_vertices)
    for i, leaf in enumerate(tree.leaves):
        out[leaf] = z_leaves[i]
    for v in reversed(tree.dfs):
        if tree.children[v]:
            out[v] = sum(out[c] for c in tree.children[v])
    return out


def residuals(z_vertices, tree):
    """Per-vertex slack z_u - sum of children (zero iff internal measure)."""
    z = np.asarray(z_vertices, dtype=float)
    out = z.copy()
    for v in range(tree.n_vertices):
        if tree.children[v]:
            out[v] = z[v] - sum(z[c] for c in tree.children[v])
    return out


def is_supermeasure(z_vertices, tree, tol=1e-9):
    r = residuals(z_vertices, tree)
    return bool(np.all(r >= -tol) and np.all(np.asarray(z_vertices) >= -tol))


def w1_distance(y_leaves, z_leaves, tree):
    """Transportation distance between equal-mass leaf measures: the
    weighted l1 gap of the liftings."""
    y_leaves = np.asarray(y_leaves, dtype=float)
    z_leaves = np.asarray(z_leaves, dtype=float)
    if abs(y_leaves.sum() - z_leaves.sum()) > 1e-9 * max(1.0, y_leaves.sum()):
        raise ValueError("transportation distance needs equal masses")
    gap = lift(y_leaves, tree) - lift(z_leaves, tree)
    return float(np.dot(tree.w, np.abs(gap)))


def check_w1_metric_axioms(tree, rng, n_triples=50, tol=1e-10):
    """Symmetry and triangle inequality on sampled equal-mass triples."""
    worst = 0.0
    for _ in range(n_triples):
        a, b, c = rng.random((3, tree.n_leaves))
        b *= a.sum() / b.sum()
        c *= a.sum() / c.sum()
        dab, dba = w1_distance(a, b, tree), w1_distance(b, a, tree)
        worst = max(worst, abs(dab - dba))
        worst = max(worst, w1_distance(a, c, tree)
                    - (dab + w1_distance(b, c, tree)))
    return CheckReport("w1-metric-axioms", worst <= tol, worst, tol, n_triples)
