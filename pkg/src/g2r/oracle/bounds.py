"""Bunke GED, the edge-side counterpart phi, the loose GED upper bound and
normalised training targets."""

from __future__ import annotations

import json
import math
from collections.abc import Sequence
from dataclasses import dataclass

from g2r.graph import Graph
from g2r.oracle.errors import InconsistentCount
from g2r.oracle.ged import DEFAULT_GED_MAX_NODES, ged_exact
from g2r.oracle.mcs import DEFAULT_MCS_MAX_NODES, mcs_exact


def bunke_ged(g1: Graph, g2: Graph, mcs_nodes: int) -> int:
    """GED when edges incident to inserted/deleted nodes are free."""
    value = g1.num_nodes + g2.num_nodes - 2 * mcs_nodes
    if value < 0 or mcs_nodes < 0:
        raise InconsistentCount(f"mcs_nodes={mcs_nodes} is impossible for graphs of size {g1.num_nodes} and {g2.num_nodes}")
    return value


def phi(g1: Graph, g2: Graph, mcs_edges: int) -> int:
    """Edges outside the common subgraph, summed over both graphs."""
    value = g1.num_edges + g2.num_edges - 2 * mcs_edges
    if value < 0 or mcs_edges < 0:
        raise InconsistentCount(f"mcs_edges={mcs_edges} is impossible for graphs with {g1.num_edges} and {g2.num_edges} edges")
    return value


def check_edit_bound(ged: int, bunke: int, phi_value: int) -> bool:
    """True iff ``ged <= bunke + phi``, the upper bound with no extra shared structure."""
    return ged <= bunke + phi_value


def _mean_nodes(g1: Graph, g2: Graph) -> float:
    return (g1.num_nodes + g2.num_nodes) / 2.0


def nmcs_target(g1: Graph, g2: Graph, mcs_nodes: int) -> float:
    return mcs_nodes / _mean_nodes(g1, g2)


def nged_target(g1: Graph, g2: Graph, ged: int) -> float:
    return math.exp(-ged / _mean_nodes(g1, g2))


@dataclass(frozen=True)
class LabeledPair:
    graph_a_id: int
    graph_b_id: int
    mcs_nodes: int
    mcs_edges: int
    ged: int
    nmcs_target: float
    nged_target: float

    @classmethod
    def from_counts(cls, a: int, b: int, ga: Graph, gb: Graph, mcs_nodes: int, mcs_edges: int, ged: int) -> LabeledPair:
        if mcs_nodes > min(ga.num_nodes, gb.num_nodes) or mcs_edges > min(ga.num_edges, gb.num_edges):
            raise InconsistentCount(f"pair ({a}, {b}): MCS counts exceed graph sizes")
        return cls(a, b, mcs_nodes, mcs_edges, ged, nmcs_target(ga, gb, mcs_nodes), nged_target(ga, gb, ged))

    def to_json(self) -> dict:
        return {
            "a": self.graph_a_id,
            "b": self.graph_b_id,
            "mcs_nodes": self.mcs_nodes,
            "mcs_edges": self.mcs_edges,
            "ged": self.ged,
            "nmcs": self.nmcs_target,
            "nged": self.nged_target,
        }


def label_pair(
    a: int,
    b: int,
    ga: Graph,
    gb: Graph,
    *,
    mcs_max_nodes: int = DEFAULT_MCS_MAX_NODES,
    ged_max_nodes: int = DEFAULT_GED_MAX_NODES,
    timeout: float | None = None,
) -> tuple[LabeledPair, bool]:
    """Exact labels for one pair plus whether the loose GED bound holds."""
    mcs = mcs_exact(ga, gb, max_nodes=mcs_max_nodes, timeout=timeout)
    bound = bunke_ged(ga, gb, mcs.node_count) + phi(ga, gb, mcs.edge_count)
    ged = ged_exact(ga, gb, max_nodes=ged_max_nodes, timeout=timeout, with_path=False).cost
    pair = LabeledPair.from_counts(a, b, ga, gb, mcs.node_count, mcs.edge_count, ged)
    return pair, check_edit_bound(ged, bunke_ged(ga, gb, mcs.node_count), phi(ga, gb, mcs.edge_count)) and ged <= bound


class PairFormatError(ValueError):
    pass


def save_pairs(pairs, path) -> None:
    with open(path, "w") as fh:
        for p in pairs:
            fh.write(json.dumps(p.to_json()) + "\n")


def load_pairs(path, graphs: Sequence[Graph]) -> list[LabeledPair]:
    """Read a pair-label JSON-lines file; targets are recomputed from the counts."""
    pairs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}: line {lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise PairFormatError(f"{where} col {exc.colno}: {exc.msg}") from None
            if not isinstance(obj, dict):
                raise PairFormatError(f"{where}: expected a JSON object")
            values = {}
            for key in ("a", "b", "mcs_nodes", "mcs_edges", "ged"):
                v = obj.get(key)
                if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                    raise PairFormatError(f"{where}: field {key!r} must be a non-negative integer, got {v!r}")
                values[key] = v
            a, b = values["a"], values["b"]
            for gid in (a, b):
                if gid >= len(graphs):
                    raise PairFormatError(f"{where}: graph id {gid} out of range (dataset has {len(graphs)} graphs)")
            try:
                pairs.append(
                    LabeledPair.from_counts(
                        a, b, graphs[a], graphs[b], values["mcs_nodes"], values["mcs_edges"], values["ged"]
                    )
                )
            except InconsistentCount as exc:
                raise PairFormatError(f"{where}: {exc}") from None
    return pairs
