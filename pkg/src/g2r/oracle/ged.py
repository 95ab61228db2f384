"""Exact unit-cost graph edit distance by best-first search.

Nodes of the first graph are assigned in a fixed order, each either to an
unused node of the second graph (substitution, cost 1 if labels differ) or to
nothing (deletion). Edge costs between already-assigned nodes are charged as
soon as both endpoints are assigned; the second graph's leftover nodes and
their edges are inserted at the end.

The lower bound on the remaining cost sums three independent parts:

* nodes: ``max(|U1|, |U2|)`` minus the common label multiset of the
  unassigned sets;
* cross edges: for each assigned pair, the difference between its edge counts
  into ``U1`` and into ``U2``;
* inner edges: the difference between the edge counts inside ``U1`` and ``U2``.

Edges in different parts can never be matched to each other, so the sum is
admissible and the first complete assignment popped is optimal.
"""

from __future__ import annotations

import heapq
import itertools
import time
from dataclasses import dataclass
from typing import NamedTuple

from g2r.graph import Graph, GraphError
from g2r.oracle.errors import BudgetExceeded, OracleError, OracleTimeout

DEFAULT_GED_MAX_NODES = 10


class EditOp(NamedTuple):
    """One unit-cost edit.

    ``kind`` is one of ``delete_edge``, ``delete_node``, ``substitute``,
    ``insert_node``, ``insert_edge``. Node arguments refer to ids of the first
    graph; inserted nodes take ids ``n1, n1 + 1, ...`` in insertion order.
    """

    kind: str
    args: tuple


@dataclass(frozen=True)
class GedResult:
    cost: int
    edit_path: tuple[EditOp, ...] | None = None
    mapping: tuple[tuple[int, int | None], ...] | None = None


def _popcount(x: int) -> int:
    return x.bit_count()


def _bits(x: int):
    while x:
        low = x & -x
        yield low.bit_length() - 1
        x ^= low


def _node_order(g: Graph) -> list[int]:
    # BFS from the highest-degree node keeps assigned nodes adjacent, which
    # lets the cross-edge bound bite early.
    start = max(range(g.num_nodes), key=lambda v: (g.degree(v), -v))
    return g.bfs_order(start)


class _Search:
    def __init__(self, g1: Graph, g2: Graph, upper_bound: int | None, timeout: float | None):
        self.g1, self.g2 = g1, g2
        self.n1, self.n2 = g1.num_nodes, g2.num_nodes
        self.order = _node_order(g1)
        adj1 = g1.adjacency_bits()
        # relabel g1 so that processing order is 0..n1-1
        pos = {u: i for i, u in enumerate(self.order)}
        self.adj1 = [0] * self.n1
        for u, bits in enumerate(adj1):
            row = 0
            for w in _bits(bits):
                row |= 1 << pos[w]
            self.adj1[pos[u]] = row
        self.lab1 = [g1.labels[u] for u in self.order]
        self.adj2 = g2.adjacency_bits()
        self.lab2 = list(g2.labels)
        self.all2 = (1 << self.n2) - 1
        labels = sorted(set(self.lab1) | set(self.lab2))
        self.lab2_masks = [sum(1 << v for v in range(self.n2) if self.lab2[v] == l) for l in labels]
        # label counts and inner edge counts of U1 = {depth, ..., n1-1}
        self.cnt1 = []
        self.inner1 = []
        for depth in range(self.n1 + 1):
            rest = range(depth, self.n1)
            self.cnt1.append([sum(1 for i in rest if self.lab1[i] == l) for l in labels])
            mask = ((1 << self.n1) - 1) & ~((1 << depth) - 1)
            self.inner1.append(sum(_popcount(self.adj1[i] & mask) for i in rest) // 2)
        self.upper = upper_bound
        self.timeout = timeout
        self.start = time.monotonic()

    def _h(self, depth: int, assign: tuple[int, ...], used2: int) -> int:
        u2 = self.all2 & ~used2
        size1 = self.n1 - depth
        size2 = _popcount(u2)
        common = 0
        for c1, m2 in zip(self.cnt1[depth], self.lab2_masks):
            c2 = _popcount(m2 & u2)
            common += c1 if c1 < c2 else c2
        h = (size1 if size1 > size2 else size2) - common
        u1 = ((1 << self.n1) - 1) & ~((1 << depth) - 1)
        adj1, adj2 = self.adj1, self.adj2
        for i, v in enumerate(assign):
            d1 = _popcount(adj1[i] & u1)
            d2 = _popcount(adj2[v] & u2) if v >= 0 else 0
            h += d1 - d2 if d1 > d2 else d2 - d1
        inner2 = sum(_popcount(adj2[w] & u2) for w in _bits(u2)) // 2
        inner1 = self.inner1[depth]
        h += inner1 - inner2 if inner1 > inner2 else inner2 - inner1
        return h

    def _step_cost(self, depth: int, assign: tuple[int, ...], v: int) -> int:
        if v < 0:
            cost = 1
        else:
            cost = int(self.lab1[depth] != self.lab2[v])
        row1 = self.adj1[depth]
        row2 = self.adj2[v] if v >= 0 else 0
        for j, w in enumerate(assign):
            e1 = (row1 >> j) & 1
            e2 = (row2 >> w) & 1 if w >= 0 else 0
            cost += e1 ^ e2
        return cost

    def _completion_cost(self, used2: int) -> int:
        u2 = self.all2 & ~used2
        # leftover nodes plus every second-graph edge touching them
        touching = sum(_popcount(self.adj2[w]) for w in _bits(u2))
        inner = sum(_popcount(self.adj2[w] & u2) for w in _bits(u2)) // 2
        return _popcount(u2) + touching - inner

    def run(self) -> tuple[int, tuple[int, ...]]:
        counter = itertools.count()
        h0 = self._h(0, (), 0)
        # (f, -depth, tiebreak, g, assign, used2, complete)
        heap = [(h0, 0, next(counter), 0, (), 0, False)]
        upper = self.upper
        expansions = 0
        while heap:
            f, _, _, g, assign, used2, complete = heapq.heappop(heap)
            if complete:
                return g, assign
            expansions += 1
            if self.timeout is not None and expansions % 256 == 0:
                elapsed = time.monotonic() - self.start
                if elapsed > self.timeout:
                    raise OracleTimeout(f"GED search exceeded {self.timeout}s (elapsed {elapsed:.2f}s)")
            depth = len(assign)
            choices = [v for v in _bits(self.all2 & ~used2)]
            choices.append(-1)
            for v in choices:
                g_new = g + self._step_cost(depth, assign, v)
                new_assign = assign + (v,)
                new_used = used2 | (1 << v) if v >= 0 else used2
                if depth + 1 == self.n1:
                    total = g_new + self._completion_cost(new_used)
                    if upper is not None and total > upper:
                        continue
                    upper = total if upper is None else min(upper, total)
                    heapq.heappush(heap, (total, -(depth + 1), next(counter), total, new_assign, new_used, True))
                else:
                    f_new = g_new + self._h(depth + 1, new_assign, new_used)
                    if upper is not None and f_new > upper:
                        continue
                    heapq.heappush(heap, (f_new, -(depth + 1), next(counter), g_new, new_assign, new_used, False))
        raise OracleError("GED search exhausted without a solution; upper bound was too small")

    def mapping(self, assign: tuple[int, ...]) -> tuple[tuple[int, int | None], ...]:
        pairs = [(self.order[i], v if v >= 0 else None) for i, v in enumerate(assign)]
        return tuple(sorted(pairs))


def edit_path_from_mapping(g1: Graph, g2: Graph, mapping) -> tuple[EditOp, ...]:
    """Unit-cost edit operations realising a node mapping from ``g1`` to ``g2``.

    ``mapping`` pairs each ``g1`` node with a ``g2`` node or ``None``
    (deleted). Unmatched ``g2`` nodes are inserted.
    """
    f = dict(mapping)
    inv = {v: u for u, v in f.items() if v is not None}
    lab1, lab2 = g1.labels, g2.labels
    ops: list[EditOp] = []
    for u, w in g1.edges:
        fu, fw = f.get(u), f.get(w)
        if fu is None or fw is None or not g2.has_edge(fu, fw):
            ops.append(EditOp("delete_edge", (u, w)))
    for u in range(g1.num_nodes):
        if f.get(u) is None:
            ops.append(EditOp("delete_node", (u,)))
    for u in range(g1.num_nodes):
        v = f.get(u)
        if v is not None and lab1[u] != lab2[v]:
            ops.append(EditOp("substitute", (u, lab2[v])))
    image = dict(inv)
    next_id = g1.num_nodes
    for v in range(g2.num_nodes):
        if v not in image:
            image[v] = next_id
            ops.append(EditOp("insert_node", (next_id, lab2[v])))
            next_id += 1
    for a, b in g2.edges:
        ia, ib = image[a], image[b]
        ua, ub = inv.get(a), inv.get(b)
        if ua is None or ub is None or not g1.has_edge(ua, ub):
            ops.append(EditOp("insert_edge", (ia, ib)))
    return tuple(ops)


def apply_edit_path(g1: Graph, path) -> Graph:
    """Replay ``path`` on ``g1`` and return the resulting (compacted) graph."""
    labels = dict(enumerate(g1.labels))
    edges = {frozenset(e) for e in g1.edges}
    for op in path:
        kind, args = op
        if kind == "delete_edge":
            edges.remove(frozenset(args))
        elif kind == "delete_node":
            (u,) = args
            if any(u in e for e in edges):
                raise GraphError(f"node {u} deleted while it still has edges")
            del labels[u]
        elif kind == "substitute":
            u, lab = args
            labels[u] = lab
        elif kind == "insert_node":
            u, lab = args
            labels[u] = lab
        elif kind == "insert_edge":
            edges.add(frozenset(args))
        else:
            raise ValueError(f"unknown edit operation {kind!r}")
    ids = {u: i for i, u in enumerate(sorted(labels))}
    new_edges = tuple(tuple(sorted(ids[x] for x in e)) for e in edges)
    new_labels = tuple(labels[u] for u in sorted(labels))
    return Graph(len(ids), new_edges, new_labels)


def ged_exact(
    g1: Graph,
    g2: Graph,
    *,
    max_nodes: int = DEFAULT_GED_MAX_NODES,
    timeout: float | None = None,
    upper_bound: int | None = None,
    with_path: bool = True,
) -> GedResult:
    """Exact graph edit distance with unit costs for all six operations.

    ``upper_bound``, when given, must be the cost of some valid edit path
    (for instance Bunke GED plus phi); it only prunes the search.
    """
    largest = max(g1.num_nodes, g2.num_nodes)
    if largest > max_nodes:
        raise BudgetExceeded(f"GED budget is {max_nodes} nodes, pair has {largest}")
    search = _Search(g1, g2, upper_bound, timeout)
    cost, assign = search.run()
    mapping = search.mapping(assign)
    path = edit_path_from_mapping(g1, g2, mapping) if with_path else None
    if path is not None and len(path) != cost:
        raise OracleError(f"edit path has {len(path)} operations but cost is {cost}")
    return GedResult(cost, path, mapping)
