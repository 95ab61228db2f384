import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import naive_kendall, naive_spearman

from g2r.metrics import EvalReport, evaluate, kendall, mae, mse, precision_at_k, spearman


def test_error_metric_examples():
    assert mse([0.2, 0.4], [0.2, 0.4]) == 0.0 and mae([0.2, 0.4], [0.2, 0.4]) == 0.0
    assert mse([0], [1]) == 1.0 and mae([0], [1]) == 1.0
    assert mse([0, 1], [1, 1]) == 0.5 and mae([0, 1], [1, 1]) == 0.5
    with pytest.raises(ValueError, match="empty"):
        mse([], [])
    with pytest.raises(ValueError, match="length"):
        mae([1, 2], [1])


def test_rank_correlation_examples():
    v = [0.1, 0.5, 0.3, 0.9]
    assert spearman(v, v) == pytest.approx(1.0, abs=1e-15)
    assert spearman(v, [-x for x in v]) == pytest.approx(-1.0, abs=1e-15)
    assert kendall(v, [-x for x in v]) == pytest.approx(-1.0, abs=1e-15)
    assert spearman([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0, abs=1e-15)
    assert spearman([1, 2, 3], [1, 3, 2]) == pytest.approx(0.5, abs=1e-15)
    assert kendall(v, v) == pytest.approx(1.0, abs=1e-15)
    assert kendall([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0, abs=1e-15)
    assert kendall([1, 2, 3], [1, 3, 2]) == pytest.approx(1 / 3, abs=1e-15)


def test_rank_correlation_undefined_cases():
    assert math.isnan(spearman([1, 1, 1], [1, 2, 3]))
    assert math.isnan(kendall([1, 2, 3], [2, 2, 2]))
    with pytest.raises(ValueError):
        spearman([1], [1])
    with pytest.raises(ValueError):
        kendall([1], [2])


def test_precision_at_k_examples():
    assert precision_at_k([3, 2, 1, 0], [3, 2, 1, 0], 2) == 1.0
    assert precision_at_k([3, 2, 1, 0], [0, 1, 2, 3], 2) == 0.0
    assert precision_at_k([3, 2, 1, 0], [3, 1, 2, 0], 2) == 0.5
    # ties break towards the lower index
    assert precision_at_k([1, 1, 1, 1], [4, 3, 0, 0], 2) == 1.0
    with pytest.raises(ValueError, match="positive"):
        precision_at_k([1, 2], [1, 2], 0)
    with pytest.raises(ValueError, match="exceeds"):
        precision_at_k([1, 2], [1, 2], 3)


@pytest.mark.parametrize("ties", [False, True])
def test_correlations_match_naive_reference(ties):
    rng = np.random.default_rng(int(ties))
    for _ in range(100):
        n = int(rng.integers(2, 60))
        if ties:
            x, y = rng.integers(0, 5, size=n).astype(float), rng.integers(0, 5, size=n).astype(float)
        else:
            x, y = rng.normal(size=n), rng.normal(size=n)
        for fast, slow in ((spearman, naive_spearman), (kendall, naive_kendall)):
            a, b = fast(x, y), slow(list(x), list(y))
            assert (math.isnan(a) and math.isnan(b)) or abs(a - b) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.integers(-1000, 1000), min_size=3, max_size=30),
    st.integers(0, 2**31),
    st.sampled_from(["exp", "cube", "affine"]),
)
def test_precision_at_k_monotone_invariance(pred, seed, kind):
    fn = {"exp": lambda v: np.exp(v / 50.0), "cube": lambda v: v**3, "affine": lambda v: 3.0 * v + 1.0}[kind]
    # values on a 0.1 grid stay distinct under each transform in floating point
    pred = np.array(pred) / 10.0
    true = np.random.default_rng(seed).normal(size=pred.size)
    k = 1 + seed % pred.size
    base = precision_at_k(pred, true, k)
    assert precision_at_k(fn(pred), true, k) == base
    assert precision_at_k(pred, fn(true), k) == base


def test_evaluate_report():
    preds = [0.9, 0.8, 0.1, 0.7, 0.6, 0.2]
    targets = [1.0, 0.5, 0.2, 0.9, 0.4, 0.3]
    queries = [0, 0, 0, 1, 1, 1]
    r = evaluate(preds, targets, queries, ks=(2, 5))
    assert r.mse == mse(preds, targets) and r.spearman_rho == spearman(preds, targets)
    expected = np.mean([precision_at_k(preds[:3], targets[:3], 2), precision_at_k(preds[3:], targets[3:], 2)])
    assert r.p_at_k[2] == expected
    assert math.isnan(r.p_at_k[5])
    doc = r.to_json()
    assert doc["p_at_k"]["5"] is None and doc["p_at_k"]["2"] == expected
    assert r.csv_header() == "mse,mae,spearman_rho,kendall_tau,p@2,p@5"
    assert r.csv_row().count(",") == 5 and r.csv_row().endswith(",")


def test_report_ranges():
    rng = np.random.default_rng(3)
    for _ in range(20):
        p, t = rng.uniform(size=40), rng.uniform(size=40)
        r = evaluate(p, t, rng.integers(0, 4, size=40), ks=(3,))
        assert isinstance(r, EvalReport)
        assert -1 <= r.spearman_rho <= 1 and -1 <= r.kendall_tau <= 1
        assert 0 <= r.p_at_k[3] <= 1 and r.mse >= 0 and r.mae >= 0
