"""Graph data model, connected Erdős–Rényi sampling and JSON graph formats."""

from __future__ import annotations

import json
from collections import deque
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from g2r.rng import stream

__all__ = [
    "Graph",
    "GraphError",
    "GraphFormatError",
    "LabelVocab",
    "Dataset",
    "cardinality",
    "generate_er",
    "permute",
    "graph_from_json",
    "graph_to_json",
    "load_graph",
    "save_graph",
    "load_dataset",
    "save_dataset",
]


class GraphError(ValueError):
    """A graph violates one of its structural invariants."""


class GraphFormatError(GraphError):
    """A graph file could not be parsed."""


@dataclass(frozen=True)
class Graph:
    """Undirected, connected, optionally node-labelled graph.

    ``edges`` is normalised to a sorted tuple of ``(u, v)`` pairs with
    ``u < v``. ``node_labels`` holds interned integer label ids, or ``None``
    for an unlabelled graph.
    """

    num_nodes: int
    edges: tuple[tuple[int, int], ...] = ()
    node_labels: tuple[int, ...] | None = None
    _adj: tuple[frozenset[int], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        n = self.num_nodes
        if not isinstance(n, (int, np.integer)) or n < 1:
            raise GraphError(f"num_nodes must be a positive integer, got {n!r}")
        object.__setattr__(self, "num_nodes", int(n))
        normalised = set()
        for e in self.edges:
            if len(e) != 2:
                raise GraphError(f"edge {e!r} must have exactly two endpoints")
            u, v = int(e[0]), int(e[1])
            for w in (u, v):
                if not 0 <= w < n:
                    raise GraphError(f"edge endpoint {w} out of range [0, {n})")
            if u == v:
                raise GraphError(f"self-loop on node {u}")
            key = (u, v) if u < v else (v, u)
            if key in normalised:
                raise GraphError(f"duplicate edge {key}")
            normalised.add(key)
        object.__setattr__(self, "edges", tuple(sorted(normalised)))
        if self.node_labels is not None:
            labels = tuple(int(x) for x in self.node_labels)
            if len(labels) != n:
                raise GraphError(f"{len(labels)} labels given for {n} nodes")
            object.__setattr__(self, "node_labels", labels)
        adj: list[set[int]] = [set() for _ in range(n)]
        for u, v in self.edges:
            adj[u].add(v)
            adj[v].add(u)
        object.__setattr__(self, "_adj", tuple(frozenset(a) for a in adj))
        if not _is_connected(self._adj):
            raise GraphError("graph is not connected")

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def labels(self) -> tuple[int, ...]:
        """Label ids per node; unlabelled graphs share the single label 0."""
        if self.node_labels is None:
            return (0,) * self.num_nodes
        return self.node_labels

    def neighbors(self, v: int) -> frozenset[int]:
        return self._adj[v]

    def degree(self, v: int) -> int:
        return len(self._adj[v])

    def has_edge(self, u: int, v: int) -> bool:
        return v in self._adj[u]

    def adjacency_bits(self) -> list[int]:
        """Adjacency rows as integer bitmasks."""
        rows = []
        for nbrs in self._adj:
            bits = 0
            for w in nbrs:
                bits |= 1 << w
            rows.append(bits)
        return rows

    def bfs_order(self, start: int = 0) -> list[int]:
        seen = [False] * self.num_nodes
        seen[start] = True
        order = []
        queue = deque([start])
        while queue:
            v = queue.popleft()
            order.append(v)
            for w in sorted(self._adj[v]):
                if not seen[w]:
                    seen[w] = True
                    queue.append(w)
        return order


def _is_connected(adj: Sequence[Iterable[int]]) -> bool:
    n = len(adj)
    seen = {0}
    queue = deque([0])
    while queue:
        v = queue.popleft()
        for w in adj[v]:
            if w not in seen:
                seen.add(w)
                queue.append(w)
    return len(seen) == n


def cardinality(g: Graph) -> int:
    """Number of nodes plus number of edges."""
    return g.num_nodes + g.num_edges


class GenerationError(RuntimeError):
    pass


def generate_er(n: int, p: float, seed: int, max_attempts: int = 10_000) -> Graph:
    """Sample a connected G(n, p) graph by rejection.

    Every attempt draws a fresh G(n, p) sample from the same seeded stream, so
    the result is a function of ``(n, p, seed)`` only.
    """
    if n < 1:
        raise GraphError(f"n must be >= 1, got {n}")
    if not 0.0 < p <= 1.0:
        raise GraphError(f"p must be in (0, 1], got {p}")
    if n == 1:
        return Graph(1)
    rng = stream(seed, "er")
    iu, ju = np.triu_indices(n, k=1)
    for _ in range(max_attempts):
        keep = rng.random(iu.size) < p
        edges = list(zip(iu[keep].tolist(), ju[keep].tolist()))
        try:
            return Graph(n, tuple(edges))
        except GraphError:
            continue
    raise GenerationError(
        f"cannot produce connected graph with n={n}, p={p} after {max_attempts} attempts"
    )


def permute(g: Graph, perm: Sequence[int]) -> Graph:
    """Relabel node ``v`` as ``perm[v]``."""
    perm = [int(x) for x in perm]
    if sorted(perm) != list(range(g.num_nodes)):
        raise GraphError(f"{perm} is not a permutation of range({g.num_nodes})")
    edges = tuple((perm[u], perm[v]) for u, v in g.edges)
    labels = None
    if g.node_labels is not None:
        new = [0] * g.num_nodes
        for v, lab in enumerate(g.node_labels):
            new[perm[v]] = lab
        labels = tuple(new)
    return Graph(g.num_nodes, edges, labels)


# --- serialisation ---------------------------------------------------------


class LabelVocab:
    """Dataset-level dictionary interning label names to dense ids."""

    def __init__(self, names: Iterable[str] = ()) -> None:
        self.names: list[str] = []
        self._ids: dict[str, int] = {}
        for name in names:
            self.intern(name)

    def intern(self, name: str) -> int:
        if name not in self._ids:
            self._ids[name] = len(self.names)
            self.names.append(name)
        return self._ids[name]

    def name(self, label_id: int) -> str:
        return self.names[label_id]

    def __len__(self) -> int:
        return len(self.names)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, LabelVocab) and self.names == other.names


def graph_from_json(obj: object, vocab: LabelVocab | None = None, where: str = "") -> Graph:
    """Build a graph from ``{"nodes": int | [label, ...], "edges": [[u, v], ...]}``.

    String labels are interned through ``vocab``; integer labels are taken as
    ids directly.
    """
    prefix = f"{where}: " if where else ""
    if not isinstance(obj, dict):
        raise GraphFormatError(f"{prefix}expected a JSON object, got {type(obj).__name__}")
    if "nodes" not in obj:
        raise GraphFormatError(f"{prefix}missing field 'nodes'")
    nodes = obj["nodes"]
    labels: tuple[int, ...] | None = None
    if isinstance(nodes, bool):
        raise GraphFormatError(f"{prefix}field 'nodes' must be an int or a list")
    if isinstance(nodes, int):
        num_nodes = nodes
    elif isinstance(nodes, list):
        num_nodes = len(nodes)
        ids = []
        for i, lab in enumerate(nodes):
            if isinstance(lab, str):
                if vocab is None:
                    raise GraphFormatError(f"{prefix}string label at nodes[{i}] needs a label vocabulary")
                ids.append(vocab.intern(lab))
            elif isinstance(lab, int) and not isinstance(lab, bool) and lab >= 0:
                ids.append(lab)
            else:
                raise GraphFormatError(f"{prefix}invalid label {lab!r} at nodes[{i}]")
        labels = tuple(ids)
    else:
        raise GraphFormatError(f"{prefix}field 'nodes' must be an int or a list")
    edges = obj.get("edges", [])
    if not isinstance(edges, list):
        raise GraphFormatError(f"{prefix}field 'edges' must be a list")
    parsed = []
    for i, e in enumerate(edges):
        if (
            not isinstance(e, list)
            or len(e) != 2
            or not all(isinstance(x, int) and not isinstance(x, bool) for x in e)
        ):
            raise GraphFormatError(f"{prefix}edges[{i}] must be a pair of integers, got {e!r}")
        parsed.append((e[0], e[1]))
    try:
        return Graph(num_nodes, tuple(parsed), labels)
    except GraphFormatError:
        raise
    except GraphError as exc:
        raise GraphError(f"{prefix}{exc}") from None


def graph_to_json(g: Graph, vocab: LabelVocab | None = None) -> dict:
    if g.node_labels is None:
        nodes: int | list = g.num_nodes
    elif vocab is None:
        nodes = list(g.node_labels)
    else:
        nodes = [vocab.name(x) for x in g.node_labels]
    return {"nodes": nodes, "edges": [list(e) for e in g.edges]}


def load_graph(path: str | Path, vocab: LabelVocab | None = None) -> Graph:
    text = Path(path).read_text()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"{path}: line {exc.lineno} col {exc.colno}: {exc.msg}") from None
    return graph_from_json(obj, vocab if vocab is not None else LabelVocab(), where=str(path))


def save_graph(g: Graph, path: str | Path, vocab: LabelVocab | None = None) -> None:
    Path(path).write_text(json.dumps(graph_to_json(g, vocab)) + "\n")


@dataclass
class Dataset:
    """Graphs indexed by their line number in a JSON-lines dataset file."""

    graphs: list[Graph]
    vocab: LabelVocab = field(default_factory=LabelVocab)

    def __len__(self) -> int:
        return len(self.graphs)

    def __getitem__(self, i: int) -> Graph:
        return self.graphs[i]

    @property
    def num_labels(self) -> int:
        """Size of the one-hot label space (at least 1)."""
        ids = [x for g in self.graphs if g.node_labels is not None for x in g.node_labels]
        return max(len(self.vocab), max(ids) + 1 if ids else 0, 1)


def load_dataset(path: str | Path) -> Dataset:
    vocab = LabelVocab()
    graphs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise GraphFormatError(f"{path}: line {lineno} col {exc.colno}: {exc.msg}") from None
            graphs.append(graph_from_json(obj, vocab, where=f"{path}: line {lineno}"))
    return Dataset(graphs, vocab)


def save_dataset(ds: Dataset, path: str | Path) -> None:
    vocab = ds.vocab if len(ds.vocab) else None
    with open(path, "w") as fh:
        for g in ds.graphs:
            fh.write(json.dumps(graph_to_json(g, vocab)) + "\n")
