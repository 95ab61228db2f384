"""Exact maximum common connected subgraph by branch and bound.

The search grows a connected mapping one pair at a time. At each node it picks
an unmatched vertex ``u`` of the first graph on the frontier of the mapping,
branches on each compatible image ``v`` and then on the remainder with those
pairs forbidden, so every mapping is visited at most once (an include/exclude
scheme in the style of McSplit). Vertex sets are int bitmasks.

Two variants are supported:

* partial (default): the common subgraph keeps only edges present in both
  graphs under the mapping; the kept edges must connect all matched nodes.
* induced: adjacency must agree on every matched pair, and the induced common
  subgraph must be connected.

Among mappings with the maximum node count the solver keeps one with the most
common edges.

For partial mappings the bound walks the product graph from the mapped pairs,
so a vertex only counts if some chain of common edges can still reach it. A
cheap incomplete pass (vertices rejected outright) seeds the incumbent.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from functools import lru_cache

from g2r.graph import Graph
from g2r.oracle.errors import BudgetExceeded, OracleTimeout

DEFAULT_MCS_MAX_NODES = 16


@dataclass(frozen=True)
class McsResult:
    node_count: int
    edge_count: int
    mapping: tuple[tuple[int, int], ...]


@lru_cache(maxsize=1 << 17)
def _bits(x: int) -> tuple[int, ...]:
    out = []
    while x:
        low = x & -x
        out.append(low.bit_length() - 1)
        x ^= low
    return tuple(out)


def _label_masks(g: Graph) -> dict[int, int]:
    masks: dict[int, int] = {}
    for v, lab in enumerate(g.labels):
        masks[lab] = masks.get(lab, 0) | (1 << v)
    return masks


def _reach(adj: list[int], seed: int, allowed: int, cache: dict[tuple[int, int], int]) -> int:
    """Vertices of ``allowed`` reachable from ``seed`` through ``allowed``."""
    key = (seed, allowed)
    hit = cache.get(key)
    if hit is not None:
        return hit
    reach = 0
    frontier = seed
    while frontier:
        nbrs = 0
        for v in _bits(frontier):
            nbrs |= adj[v]
        frontier = nbrs & allowed & ~reach
        reach |= frontier
    cache[key] = reach
    return reach


def _edges_within(adj: list[int], mask: int, cache: dict[int, int]) -> int:
    hit = cache.get(mask)
    if hit is None:
        hit = cache[mask] = sum((adj[v] & mask).bit_count() for v in _bits(mask)) // 2
    return hit


class _Search:
    def __init__(self, g1: Graph, g2: Graph, induced: bool, timeout: float | None, complete: bool = True):
        self.n1, self.n2 = g1.num_nodes, g2.num_nodes
        self.adj1, self.adj2 = g1.adjacency_bits(), g2.adjacency_bits()
        self.lab1, self.lab2 = g1.labels, g2.labels
        masks1, masks2 = _label_masks(g1), _label_masks(g2)
        self.label_pairs = [(masks1[l], masks2[l]) for l in masks1 if l in masks2]
        self.all1 = (1 << self.n1) - 1
        self.all2 = (1 << self.n2) - 1
        self.induced = induced
        self.complete = complete
        self.best_nodes = 0
        self.best_edges = -1
        self.best_map: dict[int, int] = {}
        self.f: dict[int, int] = {}
        self.forbidden = [0] * self.n1
        self.img_mask = [masks2.get(l, 0) for l in self.lab1]
        self.timeout = timeout
        self.start = time.monotonic()
        self.steps = 0
        self.edge_cache1: dict[int, int] = {}
        self.edge_cache2: dict[int, int] = {}
        self.reach_cache1: dict[tuple[int, int], int] = {}
        self.reach_cache2: dict[tuple[int, int], int] = {}

    def _check_time(self) -> None:
        self.steps += 1
        if self.timeout is not None and self.steps % 256 == 1:
            elapsed = time.monotonic() - self.start
            if elapsed > self.timeout:
                raise OracleTimeout(f"MCS search exceeded {self.timeout}s (elapsed {elapsed:.2f}s)")

    def run(self, incumbent: McsResult | None = None) -> McsResult:
        if incumbent is not None:
            self.best_nodes, self.best_edges = incumbent.node_count, incumbent.edge_count
            self.best_map = dict(incumbent.mapping)
        self._search(0, 0, 0, 0)
        mapping = tuple(sorted(self.best_map.items()))
        return McsResult(self.best_nodes, max(self.best_edges, 0), mapping)

    def _search(self, m1: int, m2: int, rejected: int, edges: int) -> None:
        self._check_time()
        count = len(self.f)
        if count > self.best_nodes or (count == self.best_nodes and edges > self.best_edges):
            self.best_nodes, self.best_edges = count, edges
            self.best_map = dict(self.f)

        avail1 = self.all1 & ~m1 & ~rejected
        avail2 = self.all2 & ~m2
        if m1:
            avail1 = _reach(self.adj1, m1, avail1, self.reach_cache1)
            avail2 = _reach(self.adj2, m2, avail2, self.reach_cache2)
            if not self.induced:
                avail1, avail2 = self._pair_reach(m1, avail1, avail2)
        bound = count
        for mask1, mask2 in self.label_pairs:
            bound += min((avail1 & mask1).bit_count(), (avail2 & mask2).bit_count())
        if bound < self.best_nodes:
            return
        if bound == self.best_nodes:
            # new common edges need an endpoint outside the current mapping
            edge_bound = edges + min(
                _edges_within(self.adj1, m1 | avail1, self.edge_cache1)
                - _edges_within(self.adj1, m1, self.edge_cache1),
                _edges_within(self.adj2, m2 | avail2, self.edge_cache2)
                - _edges_within(self.adj2, m2, self.edge_cache2),
            )
            if m1 and not self.induced and edge_bound > self.best_edges:
                edge_bound = min(edge_bound, edges + self._new_edge_bound(m1, avail1, avail2))
            if edge_bound <= self.best_edges:
                return
        if not avail1:
            return

        if m1:
            frontier = 0
            for u in _bits(m1):
                frontier |= self.adj1[u]
            frontier &= avail1
        else:
            frontier = avail1
        order = sorted(
            _bits(frontier),
            key=lambda w: (-(self.adj1[w] & m1).bit_count(), -self.adj1[w].bit_count(), w),
        )
        for u in order:
            candidates = self._candidates(u, m1, m2, avail2)
            if candidates:
                break
        else:
            return

        # Branch on each candidate image of u, forbidding it for later
        # siblings, then on "none of these". A partial mapping may still pair
        # u with an image that only becomes adjacent once more nodes are
        # mapped, so u itself stays available unless no image can appear.
        saved = self.forbidden[u]
        for kept, v in candidates:
            self.f[u] = v
            self._search(m1 | (1 << u), m2 | (1 << v), rejected, edges + kept)
            del self.f[u]
            self.forbidden[u] |= 1 << v
        if self.induced or not m1 or not self.complete:
            self._search(m1, m2, rejected | (1 << u), edges)
        else:
            self._search(m1, m2, rejected, edges)
        self.forbidden[u] = saved

    def _pair_reach(self, m1: int, avail1: int, avail2: int) -> tuple[int, int]:
        """Vertices still joinable through chains of common edges.

        Walks the product graph from the mapped pairs: ``(u, v)`` is reachable
        if ``u`` neighbours some reachable or mapped ``w`` in the first graph,
        ``v`` neighbours its image in the second, labels agree and the pair
        is not forbidden. Injectivity is ignored, so this only relaxes.
        """
        adj1, adj2, img, forb = self.adj1, self.adj2, self.img_mask, self.forbidden
        reach = [0] * self.n1
        pending: dict[int, int] = {}
        for w in _bits(m1):
            nb2 = adj2[self.f[w]]
            for u in _bits(adj1[w] & avail1):
                add = nb2 & avail2 & img[u] & ~forb[u] & ~reach[u]
                if add:
                    reach[u] |= add
                    pending[u] = pending.get(u, 0) | add
        while pending:
            u, got = pending.popitem()
            nb2 = 0
            for v in _bits(got):
                nb2 |= adj2[v]
            nb2 &= avail2
            for x in _bits(adj1[u] & avail1):
                add = nb2 & img[x] & ~forb[x] & ~reach[x]
                if add:
                    reach[x] |= add
                    pending[x] = pending.get(x, 0) | add
        self.last_reach = reach
        left = right = 0
        for u in range(self.n1):
            if reach[u]:
                left |= 1 << u
                right |= reach[u]
        return left, right

    def _new_edge_bound(self, m1: int, left: int, right: int) -> int:
        """Common edges still obtainable, given the sets from ``_pair_reach``.

        Each new vertex keeps at most as many edges to the mapped part as its
        best reachable image preserves; edges among new vertices are bounded
        by the sparser side.
        """
        adj1, adj2, f, reach = self.adj1, self.adj2, self.f, self.last_reach
        total = min(_edges_within(adj1, left, self.edge_cache1), _edges_within(adj2, right, self.edge_cache2))
        for u in _bits(left):
            images = 0
            for w in _bits(adj1[u] & m1):
                images |= 1 << f[w]
            total += max((adj2[v] & images).bit_count() for v in _bits(reach[u]))
        return total

    def _candidates(self, u: int, m1: int, m2: int, avail2: int) -> list[tuple[int, int]]:
        """Images ``v`` for ``u`` with the common edges they would add, best first."""
        mapped_nbrs = _bits(self.adj1[u] & m1)
        allowed2 = avail2 & ~self.forbidden[u]
        if m1:
            reach2 = 0
            for w in mapped_nbrs:
                reach2 |= self.adj2[self.f[w]]
            allowed2 &= reach2
        expected = 0
        if self.induced:
            for w in mapped_nbrs:
                expected |= 1 << self.f[w]
        out = []
        for v in _bits(allowed2):
            if self.lab2[v] != self.lab1[u]:
                continue
            if self.induced and (self.adj2[v] & m2) != expected:
                continue
            kept = sum(1 for w in mapped_nbrs if (self.adj2[v] >> self.f[w]) & 1)
            out.append((kept, v))
        out.sort(key=lambda kv: (-kv[0], kv[1]))
        return out


def mcs_exact(
    g1: Graph,
    g2: Graph,
    *,
    induced: bool = False,
    max_nodes: int = DEFAULT_MCS_MAX_NODES,
    timeout: float | None = None,
) -> McsResult:
    """Maximum common connected subgraph of ``g1`` and ``g2``.

    ``mapping`` lists matched ``(g1_node, g2_node)`` pairs. Labels must match
    when present. Raises :class:`BudgetExceeded` if either graph has more
    than ``max_nodes`` nodes and :class:`OracleTimeout` after ``timeout``
    seconds.
    """
    largest = max(g1.num_nodes, g2.num_nodes)
    if largest > max_nodes:
        raise BudgetExceeded(f"MCS budget is {max_nodes} nodes, pair has {largest}")
    search = _Search(g1, g2, induced, timeout)
    incumbent = None
    if not induced:
        # Rejecting a vertex outright after trying its current images is
        # incomplete for partial mappings but finds a strong first solution.
        greedy = _Search(g1, g2, induced, timeout, complete=False)
        incumbent = greedy.run()
        search.start, search.steps = greedy.start, greedy.steps
    return search.run(incumbent)


def common_edges(g1: Graph, g2: Graph, mapping) -> int:
    """Edges of ``g1`` whose image under ``mapping`` is an edge of ``g2``."""
    f = dict(mapping)
    return sum(1 for u, v in g1.edges if u in f and v in f and g2.has_edge(f[u], f[v]))
