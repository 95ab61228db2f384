"""Graph-to-region encoder.

A graph is turned into ``k`` region corner vectors (one per GIN layer):

1. one-hot labels -> ``Linear0`` -> ``k`` GIN layers with additive skips;
2. each layer's node embeddings -> shared ``MLP_e`` -> node regions ``r``;
3. multi-sink propagation of random sink values -> landing-point sequences
   ``S`` -> ``MLP_pe`` -> relative positions ``o``;
4. ``R = sum_v (r_v + o_v)`` per graph and scale, shifted back by the
   per-graph dimension-wise minimum of ``o``;
5. a shared projection plus softplus gives strictly positive corners.

Graphs are encoded in batches as one disjoint union; ``encode`` is the
single-graph convenience wrapper.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from g2r import tensor as T
from g2r.graph import Graph, cardinality
from g2r.rng import stream

__all__ = [
    "EncoderConfig",
    "EncoderParams",
    "SinkAssignment",
    "GraphRegion",
    "PreparedGraph",
    "GraphBatch",
    "init_linear",
    "multi_sink_propagation",
    "sample_sinks",
    "gin_forward",
    "encode",
    "encode_batch",
    "encode_many",
    "CachedRegion",
    "RegionCacheError",
    "save_regions",
    "load_regions",
]


@dataclass(frozen=True)
class EncoderConfig:
    k: int = 8
    d: int = 64
    D: int = 64
    out: int = 32
    n_paths: int = 5
    path_len: int = 3
    label_vocab: int = 1
    use_pe: bool = True
    use_clamp: bool = True

    def __post_init__(self) -> None:
        for f in ("k", "d", "D", "out", "n_paths", "path_len", "label_vocab"):
            if getattr(self, f) < 1:
                raise ValueError(f"EncoderConfig.{f} must be >= 1, got {getattr(self, f)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> EncoderConfig:
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown encoder config keys: {sorted(unknown)}")
        return cls(**d)


# --- parameters ---------------------------------------------------------------


def init_linear(rng: np.random.Generator, fan_in: int, fan_out: int) -> tuple[T.Tensor, T.Tensor]:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero bias."""
    bound = 1.0 / math.sqrt(fan_in)
    W = T.parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    b = T.parameter(np.zeros(fan_out))
    return W, b


@dataclass
class EncoderParams:
    lin0: tuple[T.Tensor, T.Tensor]
    gin: list[tuple[T.Tensor, T.Tensor, T.Tensor, T.Tensor]]
    mlp_e: tuple[T.Tensor, T.Tensor, T.Tensor, T.Tensor]
    mlp_pe: tuple[T.Tensor, T.Tensor, T.Tensor, T.Tensor]
    proj: tuple[T.Tensor, T.Tensor]

    @classmethod
    def init(cls, cfg: EncoderConfig, rng: np.random.Generator) -> EncoderParams:
        def mlp(a, b, c):
            return init_linear(rng, a, b) + init_linear(rng, b, c)

        return cls(
            lin0=init_linear(rng, cfg.label_vocab, cfg.d),
            gin=[mlp(cfg.d, cfg.d, cfg.d) for _ in range(cfg.k)],
            mlp_e=mlp(cfg.d, cfg.D, cfg.D),
            mlp_pe=mlp(cfg.n_paths * cfg.path_len, cfg.D, cfg.D),
            proj=init_linear(rng, cfg.D, cfg.out),
        )

    def named(self) -> list[tuple[str, T.Tensor]]:
        items = [("lin0.W", self.lin0[0]), ("lin0.b", self.lin0[1])]
        for i, layer in enumerate(self.gin):
            items += [(f"gin{i}.{n}", t) for n, t in zip(("W1", "b1", "W2", "b2"), layer)]
        items += [(f"mlp_e.{n}", t) for n, t in zip(("W1", "b1", "W2", "b2"), self.mlp_e)]
        items += [(f"mlp_pe.{n}", t) for n, t in zip(("W1", "b1", "W2", "b2"), self.mlp_pe)]
        items += [("proj.W", self.proj[0]), ("proj.b", self.proj[1])]
        return items

    @classmethod
    def from_named(cls, cfg: EncoderConfig, arrays: dict[str, np.ndarray]) -> EncoderParams:
        template = cls.init(cfg, np.random.default_rng(0))
        expected = dict(template.named())
        missing = set(expected) - set(arrays)
        if missing:
            raise ValueError(f"missing encoder parameters: {sorted(missing)}")
        made = {}
        for name, t in expected.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"parameter {name}: shape {arr.shape} does not match config {t.shape}")
            made[name] = T.parameter(arr)

        def mlp(prefix):
            return tuple(made[f"{prefix}.{n}"] for n in ("W1", "b1", "W2", "b2"))

        return cls(
            lin0=(made["lin0.W"], made["lin0.b"]),
            gin=[mlp(f"gin{i}") for i in range(cfg.k)],
            mlp_e=mlp("mlp_e"),
            mlp_pe=mlp("mlp_pe"),
            proj=(made["proj.W"], made["proj.b"]),
        )


def _mlp(x: T.Tensor, p) -> T.Tensor:
    W1, b1, W2, b2 = p
    return T.linear(T.relu(T.linear(x, W1, b1)), W2, b2)


# --- multi-sink propagation ------------------------------------------------


@dataclass(frozen=True)
class SinkAssignment:
    """Initial sink values, one column per flow network."""

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"sink assignment must be 2-d, got shape {v.shape}")
        for c in range(v.shape[1]):
            if np.unique(v[:, c]).size != v.shape[0]:
                raise ValueError(f"sink values in column {c} are not distinct")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def permuted(self, perm) -> SinkAssignment:
        """Assignment for ``permute(g, perm)``: row ``v`` moves to ``perm[v]``."""
        out = np.empty_like(self.values)
        out[np.asarray(perm)] = self.values
        return SinkAssignment(out)


def sample_sinks(num_nodes: int, n_paths: int, seed: int, graph_id: int) -> SinkAssignment:
    """Uniform (0, 1) sink values for one graph, reproducible from the seed."""
    rng = stream(seed, "sinks", graph_id)
    while True:
        v = rng.random((num_nodes, n_paths))
        if all(np.unique(v[:, c]).size == num_nodes for c in range(n_paths)):
            return SinkAssignment(v)


def _directed_edges(g: Graph) -> tuple[np.ndarray, np.ndarray]:
    if not g.edges:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    e = np.asarray(g.edges, dtype=np.int64)
    src = np.concatenate([e[:, 0], e[:, 1]])
    dst = np.concatenate([e[:, 1], e[:, 0]])
    return src, dst


def multi_sink_propagation(g: Graph, assign: SinkAssignment, path_len: int) -> np.ndarray:
    """Landing-point sequences, ``[num_nodes, n_paths * path_len]``.

    Each step replaces a node's value with the maximum over its neighbours'
    previous values (the node's own value is not included). A node without
    neighbours keeps its value. Columns are grouped by flow network.
    """
    s = np.asarray(assign.values, dtype=np.float64)
    n, n_paths = s.shape
    if n != g.num_nodes:
        raise ValueError(f"assignment has {n} rows for a {g.num_nodes}-node graph")
    src, dst = _directed_edges(g)
    steps = []
    for _ in range(path_len):
        if src.size:
            nxt = np.full_like(s, -np.inf)
            np.maximum.at(nxt, dst, s[src])
            isolated = np.isneginf(nxt[:, 0])
            nxt[isolated] = s[isolated]
        else:
            nxt = s.copy()
        steps.append(nxt)
        s = nxt
    # [path_len, n, n_paths] -> [n, n_paths, path_len] -> flatten per node
    return np.stack(steps).transpose(1, 2, 0).reshape(n, n_paths * path_len)


# --- GIN ----------------------------------------------------------------------


def gin_forward(x0: T.Tensor, src, dst, layers, skip: bool = True) -> list[T.Tensor]:
    """``k`` GIN layers (sum aggregation, epsilon = 0) with optional additive skips.

    ``x^l = MLP_l(x^{l-1}_v + sum_{u in N(v)} x^{l-1}_u) + x^{l-1}``.
    ``src``/``dst`` list every undirected edge in both directions.
    """
    n = x0.shape[0]
    x = x0
    scales = []
    for layer in layers:
        agg = x
        if len(src):
            agg = T.add(x, T.segment_sum(T.gather_rows(x, src), dst, n))
        h = _mlp(agg, layer)
        x = T.add(h, x) if skip else h
        scales.append(x)
    return scales


# --- batching and encoding ---------------------------------------------------


@dataclass(frozen=True)
class PreparedGraph:
    """Parameter-independent per-graph inputs, computed once and cached."""

    num_nodes: int
    size: int
    labels: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    flows: np.ndarray
    assign: SinkAssignment

    @classmethod
    def build(cls, g: Graph, assign: SinkAssignment, cfg: EncoderConfig) -> PreparedGraph:
        if assign.values.shape != (g.num_nodes, cfg.n_paths):
            raise ValueError(f"assignment shape {assign.values.shape} != ({g.num_nodes}, {cfg.n_paths})")
        labels = np.asarray(g.labels, dtype=np.int64)
        if labels.max() >= cfg.label_vocab:
            raise ValueError(f"label id {labels.max()} outside vocabulary of size {cfg.label_vocab}")
        src, dst = _directed_edges(g)
        return cls(
            g.num_nodes,
            cardinality(g),
            labels,
            src,
            dst,
            multi_sink_propagation(g, assign, cfg.path_len),
            assign,
        )


@dataclass(frozen=True)
class GraphBatch:
    num_graphs: int
    node_graph: np.ndarray
    onehot: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    flows: np.ndarray

    @classmethod
    def build(cls, graphs: list[PreparedGraph], cfg: EncoderConfig) -> GraphBatch:
        offsets = np.cumsum([0] + [p.num_nodes for p in graphs])
        n = int(offsets[-1])
        labels = np.concatenate([p.labels for p in graphs])
        onehot = np.zeros((n, cfg.label_vocab))
        onehot[np.arange(n), labels] = 1.0
        return cls(
            len(graphs),
            np.repeat(np.arange(len(graphs)), [p.num_nodes for p in graphs]),
            onehot,
            np.concatenate([p.src + o for p, o in zip(graphs, offsets)]),
            np.concatenate([p.dst + o for p, o in zip(graphs, offsets)]),
            np.concatenate([p.flows for p in graphs], axis=0),
        )


def encode_batch(batch: GraphBatch, params: EncoderParams, cfg: EncoderConfig) -> T.Tensor:
    """Regions of every graph in the batch, ``[num_graphs * k, out]``.

    Row ``g * k + l`` is scale ``l`` of graph ``g``.
    """
    n = batch.onehot.shape[0]
    G, k = batch.num_graphs, cfg.k
    x0 = T.linear(T.tensor(batch.onehot), *params.lin0)
    scales = gin_forward(x0, batch.src, batch.dst, params.gin)
    r = _mlp(T.concat_rows(scales), params.mlp_e)  # row l * n + v
    scale_of_row = np.repeat(np.arange(k), n)
    node_of_row = np.tile(np.arange(n), k)
    pool_seg = batch.node_graph[node_of_row] * k + scale_of_row
    if cfg.use_pe:
        o = _mlp(T.tensor(batch.flows), params.mlp_pe)
        r = T.add(r, T.gather_rows(o, node_of_row))
    R = T.segment_sum(r, pool_seg, G * k)
    if cfg.use_pe and cfg.use_clamp:
        corner = T.segment_min(o, batch.node_graph, G)
        R = T.sub(R, T.gather_rows(corner, np.repeat(np.arange(G), k)))
    return T.softplus(T.linear(R, *params.proj))


@dataclass(frozen=True)
class GraphRegion:
    """Multi-scale region of one graph plus the scale metadata scoring needs."""

    region: np.ndarray
    mean_region: np.ndarray
    size: int
    num_nodes: int

    def __post_init__(self) -> None:
        region = np.asarray(self.region, dtype=np.float64)
        if region.ndim != 2:
            raise ValueError(f"region must be [k, out], got shape {region.shape}")
        region.setflags(write=False)
        object.__setattr__(self, "region", region)
        mean = np.asarray(self.mean_region, dtype=np.float64)
        mean.setflags(write=False)
        object.__setattr__(self, "mean_region", mean)

    @classmethod
    def from_region(cls, region, size: int, num_nodes: int) -> GraphRegion:
        region = np.asarray(region, dtype=np.float64)
        return cls(region, T.mean_rows(T.tensor(region)).data, size, num_nodes)


def encode(g: Graph, params: EncoderParams, cfg: EncoderConfig, assign: SinkAssignment) -> GraphRegion:
    prepared = PreparedGraph.build(g, assign, cfg)
    out = encode_batch(GraphBatch.build([prepared], cfg), params, cfg)
    return GraphRegion.from_region(out.data, prepared.size, prepared.num_nodes)


def encode_many(
    graphs: list[PreparedGraph], params: EncoderParams, cfg: EncoderConfig, chunk: int = 256
) -> list[GraphRegion]:
    regions = []
    for i in range(0, len(graphs), chunk):
        part = graphs[i : i + chunk]
        out = encode_batch(GraphBatch.build(part, cfg), params, cfg).data.reshape(len(part), cfg.k, cfg.out)
        regions += [GraphRegion.from_region(out[j], p.size, p.num_nodes) for j, p in enumerate(part)]
    return regions


# --- region cache ------------------------------------------------------------


class RegionCacheError(ValueError):
    pass


@dataclass(frozen=True)
class CachedRegion:
    id: int
    region: GraphRegion
    assign: SinkAssignment


def save_regions(path, entries: list[CachedRegion]) -> None:
    """JSON-lines region cache; floats are written with round-trip precision."""
    with open(path, "w") as fh:
        for e in entries:
            obj = {
                "id": e.id,
                "region": e.region.region.tolist(),
                "size": e.region.size,
                "nodes": e.region.num_nodes,
                "assign": e.assign.values.tolist(),
            }
            fh.write(json.dumps(obj) + "\n")


def load_regions(path) -> list[CachedRegion]:
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}: line {lineno}"
            try:
                obj = json.loads(line)
                region = np.asarray(obj["region"], dtype=np.float64)
                entry = CachedRegion(
                    int(obj["id"]),
                    GraphRegion.from_region(region, int(obj["size"]), int(obj["nodes"])),
                    SinkAssignment(np.asarray(obj["assign"], dtype=np.float64)),
                )
            except json.JSONDecodeError as exc:
                raise RegionCacheError(f"{where} col {exc.colno}: {exc.msg}") from None
            except (KeyError, TypeError, ValueError) as exc:
                raise RegionCacheError(f"{where}: {exc}") from None
            if entry.id != len(entries):
                raise RegionCacheError(f"{where}: expected id {len(entries)}, got {entry.id}")
            entries.append(entry)
    if entries and len({e.region.region.shape for e in entries}) != 1:
        raise RegionCacheError(f"{path}: regions have inconsistent shapes")
    return entries
