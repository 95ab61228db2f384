"""Geometric operators on graph regions and the MCS / GED similarity scores.

MCS:  alpha1 * MLP_mcs(concat_l min(R1^l, R2^l)) / avg_size
      + beta1 * Vol(min(M1, M2)) / avg(Vol(M1), Vol(M2))
GED:  alpha2 * MLP_ged(concat_l diff(R1^l, R2^l)) / avg_size
      + beta2 * exp(-gamma * Vol(diff(M1, M2)) / avg(Vol(M1), Vol(M2)))

where ``M`` is the mean over scales and ``diff(a, b) = a + b - 2 min(a, b)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from g2r import tensor as T
from g2r.encoder import GraphRegion, init_linear

__all__ = [
    "ScoreConfig",
    "ScoreParams",
    "inter",
    "volume",
    "difference",
    "score_pairs",
    "score_mcs",
    "score_ged",
    "pair_sizes",
]

SIZE_METRICS = ("nodes", "nodes_plus_edges")


@dataclass(frozen=True)
class ScoreConfig:
    hidden: int = 32
    size_metric: str = "nodes_plus_edges"
    shared_mlp: bool = False
    use_shape: bool = True
    use_volume: bool = True

    def __post_init__(self) -> None:
        if self.size_metric not in SIZE_METRICS:
            raise ValueError(f"size_metric must be one of {SIZE_METRICS}, got {self.size_metric!r}")
        if self.hidden < 1:
            raise ValueError("ScoreConfig.hidden must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ScoreConfig:
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown score config keys: {sorted(unknown)}")
        return cls(**d)


_SCALARS = ("alpha1", "beta1", "alpha2", "beta2", "gamma", "lam")


@dataclass
class ScoreParams:
    mlp_mcs: tuple[T.Tensor, T.Tensor, T.Tensor, T.Tensor]
    mlp_ged: tuple[T.Tensor, T.Tensor, T.Tensor, T.Tensor]
    alpha1: T.Tensor
    beta1: T.Tensor
    alpha2: T.Tensor
    beta2: T.Tensor
    gamma: T.Tensor
    lam: T.Tensor
    cfg: ScoreConfig

    @classmethod
    def init(cls, k: int, out: int, cfg: ScoreConfig, rng: np.random.Generator) -> ScoreParams:
        def mlp():
            return init_linear(rng, k * out, cfg.hidden) + init_linear(rng, cfg.hidden, 1)

        mlp_mcs = mlp()
        mlp_ged = mlp()
        return cls(mlp_mcs, mlp_ged, *(T.parameter(1.0) for _ in _SCALARS), cfg=cfg)

    def named(self) -> list[tuple[str, T.Tensor]]:
        items = [(f"mlp_mcs.{n}", t) for n, t in zip(("W1", "b1", "W2", "b2"), self.mlp_mcs)]
        items += [(f"mlp_ged.{n}", t) for n, t in zip(("W1", "b1", "W2", "b2"), self.mlp_ged)]
        items += [(name, getattr(self, name)) for name in _SCALARS]
        return items

    @classmethod
    def from_named(cls, k: int, out: int, cfg: ScoreConfig, arrays: dict[str, np.ndarray]) -> ScoreParams:
        template = cls.init(k, out, cfg, np.random.default_rng(0))
        made = {}
        for name, t in template.named():
            if name not in arrays:
                raise ValueError(f"missing score parameter {name}")
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"parameter {name}: shape {arr.shape} does not match config {t.shape}")
            made[name] = T.parameter(arr)

        def mlp(prefix):
            return tuple(made[f"{prefix}.{n}"] for n in ("W1", "b1", "W2", "b2"))

        return cls(mlp("mlp_mcs"), mlp("mlp_ged"), *(made[s] for s in _SCALARS), cfg=cfg)


def inter(r1: T.Tensor, r2: T.Tensor) -> T.Tensor:
    return T.ewise_min(r1, r2)


def volume(r: T.Tensor) -> T.Tensor:
    return T.prod_reduce(r)


def difference(r1: T.Tensor, r2: T.Tensor) -> T.Tensor:
    return T.sub(T.add(r1, r2), T.scale(inter(r1, r2), 2.0))


def _mlp_scalar(x: T.Tensor, p) -> T.Tensor:
    W1, b1, W2, b2 = p
    h = T.linear(T.relu(T.linear(x, W1, b1)), W2, b2)
    return T.reshape(h, (x.shape[0],))


def pair_sizes(size_a, size_b) -> np.ndarray:
    return (np.asarray(size_a, dtype=np.float64) + np.asarray(size_b, dtype=np.float64)) / 2.0


def score_pairs(
    regions: T.Tensor,
    sizes,
    idx_a,
    idx_b,
    p: ScoreParams,
    k: int,
    want: tuple[str, ...] = ("mcs", "ged"),
) -> dict[str, T.Tensor]:
    """Score many pairs of graphs at once.

    ``regions`` is ``[G * k, out]`` (row ``g * k + l`` is scale ``l`` of graph
    ``g``); ``sizes`` holds each graph's size under the configured metric.
    Returns a ``[P]`` score vector per requested task.
    """
    cfg = p.cfg
    idx_a = np.asarray(idx_a, dtype=np.int64)
    idx_b = np.asarray(idx_b, dtype=np.int64)
    P = idx_a.size
    out = regions.shape[1]
    G = regions.shape[0] // k
    avg_size = T.tensor(pair_sizes(np.asarray(sizes)[idx_a], np.asarray(sizes)[idx_b]))

    rows = np.arange(k)
    Ra = T.gather_rows(regions, (idx_a[:, None] * k + rows).reshape(-1))
    Rb = T.gather_rows(regions, (idx_b[:, None] * k + rows).reshape(-1))
    means = T.mean_rows(T.reshape(regions, (G, k, out)))
    Ma = T.gather_rows(means, idx_a)
    Mb = T.gather_rows(means, idx_b)
    inter_rows = inter(Ra, Rb)
    inter_mean = inter(Ma, Mb)
    vol_avg = T.scale(T.add(volume(Ma), volume(Mb)), 0.5)

    scores = {}
    if "mcs" in want:
        terms = []
        if cfg.use_shape:
            shape = _mlp_scalar(T.reshape(inter_rows, (P, k * out)), p.mlp_mcs)
            terms.append(T.scale(T.div(shape, avg_size), p.alpha1))
        if cfg.use_volume:
            terms.append(T.scale(T.div(volume(inter_mean), vol_avg), p.beta1))
        scores["mcs"] = _sum_terms(terms, P)
    if "ged" in want:
        terms = []
        if cfg.use_shape:
            diff_rows = T.sub(T.add(Ra, Rb), T.scale(inter_rows, 2.0))
            flat = T.reshape(diff_rows, (P, k * out))
            if cfg.shared_mlp:
                shape = T.scale(_mlp_scalar(flat, p.mlp_mcs), p.lam)
            else:
                shape = _mlp_scalar(flat, p.mlp_ged)
            terms.append(T.scale(T.div(shape, avg_size), p.alpha2))
        if cfg.use_volume:
            diff_mean = T.sub(T.add(Ma, Mb), T.scale(inter_mean, 2.0))
            ratio = T.div(volume(diff_mean), vol_avg)
            terms.append(T.scale(T.exp_neg(T.scale(ratio, p.gamma)), p.beta2))
        scores["ged"] = _sum_terms(terms, P)
    return scores


def _sum_terms(terms: list[T.Tensor], P: int) -> T.Tensor:
    if not terms:
        return T.tensor(np.zeros(P))
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total


def _region_size(r: GraphRegion, metric: str) -> int:
    return r.size if metric == "nodes_plus_edges" else r.num_nodes


def _score_one(a: GraphRegion, b: GraphRegion, p: ScoreParams, task: str) -> float:
    if a.region.shape != b.region.shape:
        raise ValueError(f"region shapes differ: {a.region.shape} vs {b.region.shape}")
    k, out = a.region.shape
    if p.mlp_mcs[0].shape[0] != k * out:
        raise ValueError(f"score parameters expect k*out={p.mlp_mcs[0].shape[0]}, regions give {k * out}")
    regions = T.tensor(np.concatenate([a.region, b.region], axis=0))
    sizes = [_region_size(a, p.cfg.size_metric), _region_size(b, p.cfg.size_metric)]
    return score_pairs(regions, sizes, [0], [1], p, k, want=(task,))[task].data[0]


def score_mcs(a: GraphRegion, b: GraphRegion, p: ScoreParams) -> float:
    """Predicted normalised MCS similarity of one pair."""
    return float(_score_one(a, b, p, "mcs"))


def score_ged(a: GraphRegion, b: GraphRegion, p: ScoreParams) -> float:
    """Predicted GED similarity (exp of negative normalised GED) of one pair."""
    return float(_score_one(a, b, p, "ged"))
