"""Exact max-flow/min-cut on small-capacity residual graphs.

Arcs are stored in pairs so that arc ``i`` and arc ``i ^ 1`` are mutual
reverses; pushing flow along one adds residual capacity to the other.  Dinic's
algorithm terminates regardless of capacity values because every augmentation
saturates at least one arc exactly (IEEE subtraction of a path bottleneck from
the arc that attains it yields exactly zero).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit


@njit(cache=True)
def _dinic(adj_start, adj_arc, arc_to, cap, s, t):
    n = adj_start.shape[0] - 1
    level = np.empty(n, np.int64)
    pointer = np.empty(n, np.int64)
    queue = np.empty(n, np.int64)
    path = np.empty(n, np.int64)
    total = 0.0
    while True:
        for i in range(n):
            level[i] = -1
        level[s] = 0
        queue[0] = s
        qh, qt = 0, 1
        while qh < qt:
            u = queue[qh]
            qh += 1
            for k in range(adj_start[u], adj_start[u + 1]):
                a = adj_arc[k]
                if cap[a] > 0.0:
                    v = arc_to[a]
                    if level[v] < 0:
                        level[v] = level[u] + 1
                        queue[qt] = v
                        qt += 1
        if level[t] < 0:
            break
        for i in range(n):
            pointer[i] = adj_start[i]
        while True:
            u = s
            depth = 0
            reached = False
            while True:
                if u == t:
                    reached = True
                    break
                moved = False
                while pointer[u] < adj_start[u + 1]:
                    a = adj_arc[pointer[u]]
                    v = arc_to[a]
                    if cap[a] > 0.0 and level[v] == level[u] + 1:
                        path[depth] = a
                        depth += 1
                        u = v
                        moved = True
                        break
                    pointer[u] += 1
                if not moved:
                    if depth == 0:
                        break
                    level[u] = -2
                    depth -= 1
                    a = path[depth]
                    u = arc_to[a ^ 1]
                    pointer[u] += 1
            if not reached:
                break
            bottleneck = cap[path[0]]
            for d in range(1, depth):
                c = cap[path[d]]
                if c < bottleneck:
                    bottleneck = c
            for d in range(depth):
                a = path[d]
                cap[a] -= bottleneck
                cap[a ^ 1] += bottleneck
            total += bottleneck
    side = np.zeros(n, np.uint8)
    side[s] = 1
    queue[0] = s
    qh, qt = 0, 1
    while qh < qt:
        u = queue[qh]
        qh += 1
        for k in range(adj_start[u], adj_start[u + 1]):
            a = adj_arc[k]
            if cap[a] > 0.0:
                v = arc_to[a]
                if side[v] == 0:
                    side[v] = 1
                    queue[qt] = v
                    qt += 1
    return total, side


@dataclass
class MinCutResult:
    flow: float
    source_side: np.ndarray  # bool per interior node


class FlowGraph:
    """s-t network over ``n_nodes`` interior nodes plus implicit source/sink."""

    def __init__(self, n_nodes: int):
        if n_nodes < 0:
            raise ValueError("node count must be non-negative")
        self.n_nodes = n_nodes
        self.source = n_nodes
        self.sink = n_nodes + 1
        self._tail: list = []
        self._head: list = []
        self._cap: list = []

    def add_arc(self, u: int, v: int, cap_uv: float, cap_vu: float = 0.0) -> None:
        if cap_uv < 0.0 or cap_vu < 0.0:
            raise ValueError("negative capacity")
        total = self.n_nodes + 2
        if not (0 <= u < total and 0 <= v < total) or u == v:
            raise ValueError("bad arc endpoints")
        self._tail.append(u)
        self._head.append(v)
        self._cap.append(float(cap_uv))
        self._tail.append(v)
        self._head.append(u)
        self._cap.append(float(cap_vu))

    def add_terminal(self, node: int, cap_source: float, cap_sink: float) -> None:
        self.add_arc(self.source, node, cap_source)
        self.add_arc(node, self.sink, cap_sink)

    def add_arcs(self, tails, heads, caps_forward, caps_backward) -> None:
        """Bulk arc insertion; arrays must share length."""
        tails = np.asarray(tails, dtype=np.int64)
        heads = np.asarray(heads, dtype=np.int64)
        cf = np.asarray(caps_forward, dtype=np.float64)
        cb = np.asarray(caps_backward, dtype=np.float64)
        if not tails.shape == heads.shape == cf.shape == cb.shape:
            raise ValueError("bulk arc arrays must share a length")
        if cf.size and (cf.min() < 0.0 or cb.min() < 0.0):
            raise ValueError("negative capacity")
        total = self.n_nodes + 2
        if tails.size and not (
            tails.min() >= 0 and tails.max() < total
            and heads.min() >= 0 and heads.max() < total
            and np.all(tails != heads)
        ):
            raise ValueError("bad arc endpoints")
        interleaved_tail = np.empty(2 * tails.size, dtype=np.int64)
        interleaved_tail[0::2] = tails
        interleaved_tail[1::2] = heads
        interleaved_head = np.empty(2 * heads.size, dtype=np.int64)
        interleaved_head[0::2] = heads
        interleaved_head[1::2] = tails
        interleaved_cap = np.empty(2 * cf.size, dtype=np.float64)
        interleaved_cap[0::2] = cf
        interleaved_cap[1::2] = cb
        self._tail.extend(interleaved_tail.tolist())
        self._head.extend(interleaved_head.tolist())
        self._cap.extend(interleaved_cap.tolist())

    def solve(self) -> MinCutResult:
        n = self.n_nodes + 2
        tail = np.asarray(self._tail, dtype=np.int64)
        head = np.asarray(self._head, dtype=np.int64)
        cap = np.asarray(self._cap, dtype=np.float64)
        degree = np.bincount(tail, minlength=n)
        adj_start = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(degree, out=adj_start[1:])
        adj_arc = np.argsort(tail, kind="stable")
        flow, side = _dinic(adj_start, adj_arc, head, cap, self.source, self.sink)
        return MinCutResult(flow=float(flow), source_side=side[: self.n_nodes].astype(bool))
