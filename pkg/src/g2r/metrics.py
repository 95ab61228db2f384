"""Prediction and ranking metrics."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

__all__ = ["EvalReport", "mse", "mae", "spearman", "kendall", "precision_at_k", "evaluate"]


def _pair(preds, targets) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if p.size != t.size:
        raise ValueError(f"length mismatch: {p.size} predictions vs {t.size} targets")
    if p.size == 0:
        raise ValueError("empty input")
    return p, t


def mse(preds, targets) -> float:
    p, t = _pair(preds, targets)
    return float(np.mean((p - t) ** 2))


def mae(preds, targets) -> float:
    p, t = _pair(preds, targets)
    return float(np.mean(np.abs(p - t)))


def spearman(x, y) -> float:
    """Spearman's rho with average ranks for ties; ``nan`` if either side is constant."""
    a, b = _pair(x, y)
    if a.size < 2:
        raise ValueError("spearman needs at least two observations")
    ra = rankdata(a) - (a.size + 1) / 2.0
    rb = rankdata(b) - (b.size + 1) / 2.0
    denom = math.sqrt(float(np.dot(ra, ra)) * float(np.dot(rb, rb)))
    if denom == 0.0:
        return math.nan
    return float(np.dot(ra, rb)) / denom


def kendall(x, y) -> float:
    """Kendall's tau-b; ``nan`` if either side is entirely tied."""
    a, b = _pair(x, y)
    n = a.size
    if n < 2:
        raise ValueError("kendall needs at least two observations")
    iu, ju = np.triu_indices(n, k=1)
    da = np.sign(a[iu] - a[ju])
    db = np.sign(b[iu] - b[ju])
    n0 = iu.size
    n1 = n0 - np.count_nonzero(da)
    n2 = n0 - np.count_nonzero(db)
    denom = math.sqrt(float(n0 - n1) * float(n0 - n2))
    if denom == 0.0:
        return math.nan
    return float(np.sum(da * db)) / denom


def _top_k(scores: np.ndarray, k: int) -> set[int]:
    # descending score, ascending index among ties
    order = np.lexsort((np.arange(scores.size), -scores))
    return set(order[:k].tolist())


def precision_at_k(pred_scores, true_scores, k: int) -> float:
    p, t = _pair(pred_scores, true_scores)
    if k <= 0:
        raise ValueError("k must be positive")
    if k > p.size:
        raise ValueError(f"k={k} exceeds the number of items ({p.size})")
    return len(_top_k(p, k) & _top_k(t, k)) / k


@dataclass
class EvalReport:
    mse: float
    mae: float
    spearman_rho: float
    kendall_tau: float
    p_at_k: dict[int, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        def clean(x):
            return None if isinstance(x, float) and math.isnan(x) else x

        return {
            "mse": self.mse,
            "mae": self.mae,
            "spearman_rho": clean(self.spearman_rho),
            "kendall_tau": clean(self.kendall_tau),
            "p_at_k": {str(k): clean(v) for k, v in sorted(self.p_at_k.items())},
        }

    def csv_header(self) -> str:
        return ",".join(["mse", "mae", "spearman_rho", "kendall_tau"] + [f"p@{k}" for k in sorted(self.p_at_k)])

    def csv_row(self) -> str:
        vals = [self.mse, self.mae, self.spearman_rho, self.kendall_tau] + [self.p_at_k[k] for k in sorted(self.p_at_k)]
        return ",".join("" if math.isnan(v) else repr(v) for v in vals)


def evaluate(
    preds: Sequence[float],
    targets: Sequence[float],
    queries: Sequence[int] | None = None,
    ks: Sequence[int] = (10,),
) -> EvalReport:
    """Metrics over a list of scored pairs.

    Correlations are computed over all pairs. ``p@k`` averages over query
    graphs (``queries[i]`` is the query of pair ``i``) that have at least
    ``k`` candidates; a ``k`` no query can support is reported as ``nan``.
    """
    p, t = _pair(preds, targets)
    report = EvalReport(mse(p, t), mae(p, t), spearman(p, t), kendall(p, t))
    if queries is not None:
        q = np.asarray(queries)
        for k in ks:
            vals = []
            for query in np.unique(q):
                sel = q == query
                if sel.sum() >= k:
                    vals.append(precision_at_k(p[sel], t[sel], k))
            report.p_at_k[int(k)] = float(np.mean(vals)) if vals else math.nan
    return report
