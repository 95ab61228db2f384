import json
import subprocess
import sys

import numpy as np
import pytest

from g2r.cli import run
from g2r.encoder import encode, load_regions
from g2r.graph import Dataset, generate_er, load_dataset, save_dataset
from g2r.oracle import load_pairs
from g2r.trainer import load_checkpoint, predict_pairs, prepare_graphs

CONFIG = """\
# desk-scale smoke configuration
batch_size = 16
iters_per_epoch = 5
warmup_epochs = 1
validate_every = 1
patience = 3
max_epochs = 4
k = 3
d = 8
D = 8
out = 4
n_paths = 2
path_len = 3
score_hidden = 8
"""


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen -> oracle -> train on a 50-graph dataset; returns the work dir."""
    d = tmp_path_factory.mktemp("pipeline")
    assert run(["gen", "--n-graphs", "50", "--n-min", "4", "--n-max", "8", "--seed", "3", "--out", str(d / "d.jsonl")]) == 0
    assert run(["oracle", "--dataset", str(d / "d.jsonl"), "--pairs", "random:120", "--seed", "3", "--threads", "1", "--out", str(d / "l.jsonl")]) == 0
    (d / "train.cfg").write_text(CONFIG)
    assert run([
        "train", "--dataset", str(d / "d.jsonl"), "--labels", str(d / "l.jsonl"), "--config", str(d / "train.cfg"),
        "--loss", "dual_uncertainty", "--seed", "3", "--out", str(d / "m.json"),
    ]) == 0
    return d


def test_gen_is_byte_deterministic(tmp_path):
    a, b, c = tmp_path / "a.jsonl", tmp_path / "b.jsonl", tmp_path / "c.jsonl"
    assert run(["gen", "--n-graphs", "10", "--seed", "1", "--out", str(a)]) == 0
    assert run(["gen", "--n-graphs", "10", "--seed", "1", "--out", str(b)]) == 0
    assert run(["gen", "--n-graphs", "10", "--seed", "2", "--out", str(c)]) == 0
    assert a.read_bytes() == b.read_bytes() != c.read_bytes()
    ds = load_dataset(a)
    assert len(ds.graphs) == 10 and all(5 <= g.num_nodes <= 50 for g in ds.graphs)


def test_oracle_on_identical_graphs(tmp_path, capsys):
    g = generate_er(7, 0.4, seed=0)
    save_dataset(Dataset([g] * 4), tmp_path / "same.jsonl")
    assert run(["oracle", "--dataset", str(tmp_path / "same.jsonl"), "--threads", "1", "--out", str(tmp_path / "l.jsonl")]) == 0
    pairs = load_pairs(tmp_path / "l.jsonl", [g] * 4)
    assert len(pairs) == 6
    assert all(p.ged == 0 and p.nmcs_target == 1.0 and p.nged_target == 1.0 for p in pairs)
    assert "bound violations 0" in capsys.readouterr().out


def test_oracle_pool_matches_single_process(tmp_path):
    assert run(["gen", "--n-graphs", "8", "--n-max", "8", "--seed", "5", "--out", str(tmp_path / "d.jsonl")]) == 0
    for threads in ("1", "2"):
        assert run(["oracle", "--dataset", str(tmp_path / "d.jsonl"), "--threads", threads, "--out", str(tmp_path / f"l{threads}.jsonl")]) == 0
    assert (tmp_path / "l1.jsonl").read_bytes() == (tmp_path / "l2.jsonl").read_bytes()


def test_pipeline_eval_emits_report(pipeline, capsys):
    d = pipeline
    assert (d / "m.json.history.csv").read_text().startswith("epoch,train_loss,val_loss,theta_mcs,theta_ged")
    for metric in ("mcs", "ged"):
        capsys.readouterr()
        assert run([
            "eval", "--dataset", str(d / "d.jsonl"), "--labels", str(d / "l.jsonl"), "--checkpoint", str(d / "m.json"),
            "--metric", metric, "--k", "1", "3", "--csv", str(d / "report.csv"),
        ]) == 0
        lines = capsys.readouterr().out.splitlines()
        doc = json.loads(lines[0])
        assert doc["metric"] == metric and doc["split"] == "test" and doc["pairs"] == 24
        assert set(doc) >= {"mse", "mae", "spearman_rho", "kendall_tau", "p_at_k"}
        assert set(doc["p_at_k"]) == {"1", "3"}
        assert lines[1].count(",") == 5
    rows = (d / "report.csv").read_text().splitlines()
    assert rows[0] == "mse,mae,spearman_rho,kendall_tau,p@1,p@3" and len(rows) == 3


def test_encode_then_predict_matches_direct_scoring(pipeline, capsys):
    d = pipeline
    assert run(["encode", "--dataset", str(d / "d.jsonl"), "--checkpoint", str(d / "m.json"), "--out", str(d / "r.jsonl")]) == 0
    (d / "q.jsonl").write_text("".join(json.dumps({"a": a, "b": b}) + "\n" for a, b in [(0, 1), (5, 5), (49, 2)]))
    assert run(["predict", "--regions", str(d / "r.jsonl"), "--checkpoint", str(d / "m.json"), "--pairs", str(d / "q.jsonl"), "--out", str(d / "p.jsonl")]) == 0
    got = [json.loads(line) for line in (d / "p.jsonl").read_text().splitlines()]

    ds = load_dataset(d / "d.jsonl")
    ck = load_checkpoint(d / "m.json")
    prepared = prepare_graphs(ds, ck.encoder_config, ck.seed)
    direct = predict_pairs(ck.params, ck.encoder_config, prepared, [(0, 1), (5, 5), (49, 2)])
    for i, row in enumerate(got):
        assert row["mcs"] == float(direct["mcs"][i]) and row["ged"] == float(direct["ged"][i])

    cached = load_regions(d / "r.jsonl")
    fresh = encode(ds.graphs[7], ck.params.encoder, ck.encoder_config, cached[7].assign)
    assert np.array_equal(fresh.region, cached[7].region.region)

    capsys.readouterr()
    assert run(["rank", "--regions", str(d / "r.jsonl"), "--checkpoint", str(d / "m.json"), "--query", "0", "--by", "ged", "--top", "5"]) == 0
    ranked = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert len(ranked) == 5 and all(r["id"] != 0 for r in ranked)
    assert [r["ged"] for r in ranked] == sorted((r["ged"] for r in ranked), reverse=True)


def test_training_is_reproducible_from_cli(pipeline, tmp_path):
    d = pipeline
    assert run([
        "train", "--dataset", str(d / "d.jsonl"), "--labels", str(d / "l.jsonl"), "--config", str(d / "train.cfg"),
        "--loss", "dual_uncertainty", "--seed", "3", "--out", str(tmp_path / "m.json"),
    ]) == 0
    assert (tmp_path / "m.json").read_bytes() == (d / "m.json").read_bytes()


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["frobnicate"],
        ["gen", "--seed", "1"],
        ["gen", "--n-graphs", "3", "--out", "x", "--bogus"],
        ["eval", "--dataset", "d", "--labels", "l", "--checkpoint", "c", "--metric", "nmi"],
    ],
)
def test_usage_errors_exit_1(argv, capsys):
    assert run(argv) == 1
    assert "usage:" in capsys.readouterr().err


def test_runtime_errors_exit_2(tmp_path, pipeline, capsys):
    assert run(["oracle", "--dataset", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path / "l.jsonl")]) == 2
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"nodes": 3, "edges": [[0, 0]]}\n')
    assert run(["oracle", "--dataset", str(bad), "--out", str(tmp_path / "l.jsonl")]) == 2
    (tmp_path / "trunc.json").write_text((pipeline / "m.json").read_text()[:100])
    assert run(["encode", "--dataset", str(pipeline / "d.jsonl"), "--checkpoint", str(tmp_path / "trunc.json"), "--out", str(tmp_path / "r.jsonl")]) == 2
    assert "cannot parse" in capsys.readouterr().err


def test_console_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "g2r.cli", "gen", "--n-graphs", "2", "--seed", "0", "--out", str(tmp_path / "d.jsonl")],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0 and "wrote 2 graphs" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "g2r.cli", "nope"], capture_output=True, text=True)
    assert proc.returncode == 1 and "usage:" in proc.stderr
