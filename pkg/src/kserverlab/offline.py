"""Ground-truth offline optima for k-server and weighted paging.

Both optima are computed by min-cost-flow on integer-scaled costs
(successive shortest paths with Johnson potentials), which keeps the
certification chain exact on the scaled instance.  A configuration-space
dynamic program serves as the independent brute-force oracle on tiny
instances.
"""

from __future__ import annotations

import heapq
import itertools

import numpy as np
from scipy.optimize import linear_sum_assignment

from .config import FLOW_COST_SCALE
from .report import CheckReport


class MinCostFlow:
    """Successive-shortest-paths min-cost flow on nonnegative int costs."""

    def __init__(self, n_nodes):
        self.n = n_nodes
        self.graph = [[] for _ in range(n_nodes)]
        self.to = []
        self.cap = []
        self.cost = []

    def add_edge(self, u, v, cap, cost):
        eid = len(self.to)
        self.to.append(v)
        self.cap.append(cap)
        self.cost.append(cost)
        self.graph[u].append(eid)
        self.to.append(u)
        self.cap.append(0)
        self.cost.append(-cost)
        self.graph[v].append(eid + 1)
        return eid

    def flow_on(self, eid):
        return self.cap[eid ^ 1]

    def solve(self, s, t, want_flow):
        """Send ``want_flow`` units s -> t; returns (flow, cost)."""
        n = self.n
        to, cap, cost, graph = self.to, self.cap, self.cost, self.graph
        potential = [0] * n
        total_flow = 0
        total_cost = 0
        inf = float("inf")
        while total_flow < want_flow:
            dist = [inf] * n
            par_edge = [-1] * n
            dist[s] = 0
            pq = [(0, s)]
            while pq:
                d, u = heapq.heappop(pq)
                if d > dist[u]:
                    continue
                pu = potential[u]
                for eid in graph[u]:
                    if cap[eid] <= 0:
                        continue
                    v = to[eid]
                    nd = d + cost[eid] + pu - potential[v]
                    if nd < dist[v]:
                        dist[v] = nd
                        par_edge[v] = eid
                        heapq.heappush(pq, (nd, v))
            if dist[t] == inf:
                break
            for i in range(n):
                if dist[i] < inf:
                    potential[i] += dist[i]
            # bottleneck along the shortest path
            push = want_flow - total_flow
            v = t
            while v != s:
                eid = par_edge[v]
                push = min(push, cap[eid])
                v = to[eid ^ 1]
            v = t
            while v != s:
                eid = par_edge[v]
                cap[eid] -= push
                cap[eid ^ 1] += push
                total_cost += push * cost[eid]
                v = to[eid ^ 1]
            total_flow += push
        return total_flow, total_cost


def _scaled(value, scale):
    return int(round(value * scale))


def opt_kserver_flow(dist, k, requests, rho0, scale=FLOW_COST_SCALE):
    """Offline k-server optimum via the request-chain flow network.

    ``dist`` is an (n, n) matrix, ``requests`` a sequence of point ids,
    ``rho0`` the initial placement (k ids).  Returns a dict with the
    exact cost (descaled) and a conservative schedule: per time step the
    server configuration, with at most the serving server moving.
    """
    dist = np.asarray(dist, dtype=float)
    n_pts = dist.shape[0]
    if k > n_pts:
        raise ValueError("more servers than points")
    if len(rho0) != k:
        raise ValueError("initial placement must have k entries")
    reqs = list(requests)
    t_len = len(reqs)
    if t_len == 0:
        return {"cost": 0.0, "schedule": [tuple(rho0)], "serving": []}

    src = 0
    server0 = 1
    req_in = lambda j: 1 + k + 2 * j
    req_out = lambda j: 1 + k + 2 * j + 1
    fs = 1 + k + 2 * t_len
    ss = fs + 1
    mcf = MinCostFlow(ss + 1)

    serve_edges = {}
    chain_edges = {}
    for i in range(k):
        mcf.add_edge(src, server0 + i, 1, 0)
        mcf.add_edge(server0 + i, fs, 1, 0)
        for j in range(t_len):
            eid = mcf.add_edge(server0 + i, req_in(j), 1,
                               _scaled(dist[rho0[i], reqs[j]], scale))
            serve_edges[(i, j)] = eid
    for j in range(t_len):
        mcf.add_edge(req_in(j), ss, 1, 0)
        mcf.add_edge(src, req_out(j), 1, 0)
        mcf.add_edge(req_out(j), fs, 1, 0)
        for m in range(j + 1, t_len):
            eid = mcf.add_edge(req_out(j), req_in(m), 1,
                               _scaled(dist[reqs[j], reqs[m]], scale))
            chain_edges[(j, m)] = eid
    mcf.add_edge(fs, ss, k, 0)

    flow, cost = mcf.solve(src, ss, k + t_len)
    if flow != k + t_len:
        raise RuntimeError("k-server flow infeasible (internal error)")

    # reconstruct which server serves each request
    serving = [-1] * t_len
    next_req = {}
    for (i, j), eid in serve_edges.items():
        if mcf.flow_on(eid):
            serving[j] = i
    for (j, m), eid in chain_edges.items():
        if mcf.flow_on(eid):
            next_req[j] = m
    for j in range(t_len):
        if serving[j] >= 0:
            i = serving[j]
            cur = j
            while cur in next_req:
                nxt = next_req[cur]
                serving[nxt] = i
                cur = nxt
    if any(s < 0 for s in serving):
        raise RuntimeError("request left unserved in flow decomposition")

    positions = list(rho0)
    schedule = [tuple(positions)]
    moves = []
    for j, r in enumerate(reqs):
        i = serving[j]
        if positions[i] != r:
            moves.append((j, i, positions[i], r))
            positions[i] = r
        schedule.append(tuple(positions))
    return {"cost": cost / scale, "schedule": schedule, "serving": serving,
            "moves": moves}


def _config_move_cost(dist, c1, c2):
    """d_{X^k} between multisets: optimal matching of the two tuples."""
    k = len(c1)
    mat = dist[np.array(c1)[:, None], np.array(c2)[None, :]]
    rows, cols = linear_sum_assignment(mat)
    return float(mat[rows, cols].sum())


def opt_kserver_bruteforce(dist, k, requests, rho0,
                           max_points=7, max_requests=8):
    """Exact DP over all server configurations; exponential, gated small."""
    dist = np.asarray(dist, dtype=float)
    n_pts = dist.shape[0]
    reqs = list(requests)
    if n_pts > max_points or len(reqs) > max_requests:
        raise ValueError("instance too large for the brute-force oracle")
    configs = [tuple(sorted(c))
               for c in itertools.combinations_with_replacement(range(n_pts), k)]
    idx = {c: i for i, c in enumerate(configs)}
    n_cfg = len(configs)
    move = np.zeros((n_cfg, n_cfg))
    for i, c1 in enumerate(configs):
        for j, c2 in enumerate(configs):
            if j > i:
                move[i, j] = move[j, i] = _config_move_cost(dist, c1, c2)
    dp = np.full(n_cfg, np.inf)
    dp[idx[tuple(sorted(rho0))]] = 0.0
    for r in reqs:
        valid = np.array([r in c for c in configs])
        new = np.min(dp[:, None] + move, axis=0)
        new[~valid] = np.inf
        dp = new
    return float(dp.min())


def opt_weighted_paging(weights, k, requests, initial_cache=None,
                        scale=FLOW_COST_SCALE):
    """Offline weighted-paging optimum (total fetch cost) via flow.

    Cache slots are flow units moving between page occurrences and an
    idle chain; fetching page p costs w_p, retaining and releasing cost
    nothing.  Exact on integer-scaled weights.
    """
    w = np.asarray(weights, dtype=float)
    reqs = list(requests)
    t_len = len(reqs)
    if initial_cache is None:
        initial_cache = default_initial_cache(w.shape[0], k, reqs)
    c0 = set(initial_cache)
    if len(initial_cache) != k or len(c0) != k:
        raise ValueError("initial cache must hold k distinct pages")
    if t_len == 0:
        return {"cost": 0.0}

    occ_of_page = {}
    for t, p in enumerate(reqs):
        occ_of_page.setdefault(p, []).append(t)
    nxt_occ = {}
    for p, ts in occ_of_page.items():
        for a, b in zip(ts, ts[1:]):
            nxt_occ[(p, a)] = b

    src = 0
    slot_src = 1
    idle0 = 2                      # idle nodes: idle0 + t for t = 0..T
    occ_in = lambda t: idle0 + t_len + 1 + 2 * t
    occ_out = lambda t: idle0 + t_len + 1 + 2 * t + 1
    ss = idle0 + t_len + 1 + 2 * t_len
    mcf = MinCostFlow(ss + 1)

    mcf.add_edge(src, slot_src, k, 0)
    mcf.add_edge(slot_src, idle0, k, 0)
    for p in sorted(c0):
        ts = occ_of_page.get(p)
        if ts:
            mcf.add_edge(slot_src, occ_in(ts[0]), 1, 0)
    for t in range(t_len):
        mcf.add_edge(idle0 + t, idle0 + t + 1, k, 0)
    for t, p in enumerate(reqs):
        mcf.add_edge(idle0 + t, occ_in(t), 1, _scaled(w[p], scale))
        mcf.add_edge(occ_in(t), ss, 1, 0)
        mcf.add_edge(src, occ_out(t), 1, 0)
        if (p, t) in nxt_occ:
            mcf.add_edge(occ_out(t), occ_in(nxt_occ[(p, t)]), 1, 0)
        mcf.add_edge(occ_out(t), idle0 + t + 1, 1, 0)
    mcf.add_edge(idle0 + t_len, ss, k, 0)

    flow, cost = mcf.solve(src, ss, k + t_len)
    if flow != k + t_len:
        raise RuntimeError("paging flow infeasible (internal error)")
    return {"cost": cost / scale}


def default_initial_cache(n_pages, k, requests):
    """First k distinct requested pages, padded with lowest unused ids."""
    cache = []
    for p in requests:
        if p not in cache:
            cache.append(p)
        if len(cache) == k:
            return cache
    for p in range(n_pages):
        if p not in cache:
            cache.append(p)
        if len(cache) == k:
            break
    return cache


def belady_misses(k, requests, initial_cache):
    """Farthest-in-future eviction; optimal miss count (uniform weights)."""
    cache = set(initial_cache)
    reqs = list(requests)
    misses = 0
    for t, p in enumerate(reqs):
        if p in cache:
            continue
        misses += 1
        if len(cache) >= k:
            far, victim = -1, None
            for q in cache:
                try:
                    nxt = reqs.index(q, t + 1)
                except ValueError:
                    nxt = len(reqs) + 1
                if nxt > far:
                    far, victim = nxt, q
            cache.discard(victim)
        cache.add(p)
    return misses


def _canonical_metric(mat, n):
    best = None
    for perm in itertools.permutations(range(n)):
        key = tuple(mat[perm[i], perm[j]] for i in range(n) for j in range(i + 1, n))
        if best is None or key < best:
            best = key
    return best


def enumerate_tiny_metrics(n, values=(1, 2, 3)):
    """All metrics on n labelled points with the given distance values,
    deduplicated up to relabelling."""
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    seen = set()
    out = []
    for combo in itertools.product(values, repeat=len(pairs)):
        mat = np.zeros((n, n))
        for (i, j), d in zip(pairs, combo):
            mat[i, j] = mat[j, i] = d
        ok = True
        for a, b, c in itertools.combinations(range(n), 3):
            if (mat[a, b] > mat[a, c] + mat[c, b]
                    or mat[a, c] > mat[a, b] + mat[b, c]
                    or mat[b, c] > mat[b, a] + mat[a, c]):
                ok = False
                break
        if not ok:
            continue
        key = _canonical_metric(mat.astype(int), n)
        if key not in seen:
            seen.add(key)
            out.append(mat)
    return out


def exhaustive_grid_certification(max_points=4, values=(1, 2, 3),
                                  k_values=(1, 2), max_len=5):
    """Flow OPT vs brute-force DP over the full tiny-instance grid.

    Enumerates every metric (up to relabelling; both solvers are
    label-equivariant) on 2..max_points points with distances drawn from
    ``values``, every k, and every request string of length <= max_len.
    Returns a CheckReport with zero tolerance.
    """
    n_checked = 0
    worst = 0.0
    bad = []
    for n in range(2, max_points + 1):
        for mat in enumerate_tiny_metrics(n, values):
            for k in k_values:
                if k > n:
                    continue
                rho0 = list(range(k))
                configs = [tuple(sorted(c)) for c in
                           itertools.combinations_with_replacement(range(n), k)]
                n_cfg = len(configs)
                move = np.zeros((n_cfg, n_cfg))
                for i, c1 in enumerate(configs):
                    for j in range(i + 1, n_cfg):
                        move[i, j] = move[j, i] = _config_move_cost(mat, c1, configs[j])
                valid_mask = {r: np.array([r in c for c in configs])
                              for r in range(n)}
                start = np.full(n_cfg, np.inf)
                start[configs.index(tuple(sorted(rho0)))] = 0.0

                # DFS over request strings, sharing DP prefixes
                stack = [((), start)]
                while stack:
                    prefix, dp = stack.pop()
                    if prefix:
                        dp_opt = float(dp.min())
                        flow_opt = opt_kserver_flow(mat, k, list(prefix), rho0,
                                                    scale=1)["cost"]
                        n_checked += 1
                        diff = abs(dp_opt - flow_opt)
                        if diff > worst:
                            worst = diff
                        if diff > 1e-9:
                            bad.append(((n, k, prefix), diff))
                    if len(prefix) < max_len:
                        for r in range(n):
                            new = np.min(dp[:, None] + move, axis=0)
                            new = np.where(valid_mask[r], new, np.inf)
                            stack.append((prefix + (r,), new))
    return CheckReport("offline-flow-vs-dp", len(bad) == 0, worst, 0.0,
                       n_checked, violations=bad[:20])
