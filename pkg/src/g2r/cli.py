"""Command-line pipeline: gen, oracle, encode, train, eval, predict, rank.

Exit status is 0 on success, 1 on a usage error and 2 on a runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from itertools import combinations
from pathlib import Path

import numpy as np

from g2r.encoder import CachedRegion, EncoderConfig, encode_many, load_regions, save_regions
from g2r.graph import Dataset, GraphError, generate_er, load_dataset, save_dataset
from g2r.inference import ScoreConfig
from g2r.metrics import evaluate
from g2r.oracle import OracleError, OracleTimeout, label_pair, load_pairs, save_pairs
from g2r.rng import stream
from g2r.tensor import TensorError
from g2r.trainer import (
    TrainConfig,
    TrainingError,
    load_checkpoint,
    load_config,
    predict_pairs,
    prepare_graphs,
    save_checkpoint,
    save_history,
    split_pairs,
    train,
)

log = logging.getLogger("g2r")

COMMANDS = ("gen", "oracle", "encode", "train", "eval", "predict", "rank")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# --- gen -----------------------------------------------------------------------


def cmd_gen(args) -> int:
    if args.n_graphs < 1:
        raise UsageError("--n-graphs must be >= 1")
    if not 1 <= args.n_min <= args.n_max:
        raise UsageError("need 1 <= --n-min <= --n-max")
    if not 0.0 < args.p_min <= args.p_max <= 1.0:
        raise UsageError("need 0 < --p-min <= --p-max <= 1")
    graphs = []
    for i in range(args.n_graphs):
        rng = stream(args.seed, "gen", i)
        n = int(rng.integers(args.n_min, args.n_max + 1))
        p = float(rng.uniform(args.p_min, args.p_max))
        graphs.append(generate_er(n, p, seed=int(rng.integers(0, 2**62))))
    save_dataset(Dataset(graphs), args.out)
    print(f"wrote {len(graphs)} graphs to {args.out}")
    return 0


# --- oracle ----------------------------------------------------------------------


def _parse_pair_spec(spec: str, n: int, seed: int) -> list[tuple[int, int]]:
    everything = list(combinations(range(n), 2))
    if spec == "all":
        return everything
    if spec.startswith("random:"):
        try:
            m = int(spec[len("random:"):])
        except ValueError:
            raise UsageError(f"bad --pairs value {spec!r}") from None
        if m < 1:
            raise UsageError("--pairs random:<m> needs m >= 1")
        if m > len(everything):
            raise UsageError(f"--pairs asks for {m} pairs but the dataset only has {len(everything)}")
        chosen = stream(seed, "pairs").choice(len(everything), size=m, replace=False)
        return [everything[i] for i in sorted(chosen.tolist())]
    raise UsageError(f"--pairs must be 'all' or 'random:<m>', got {spec!r}")


_WORKER_GRAPHS = None


def _init_worker(graphs) -> None:
    global _WORKER_GRAPHS
    _WORKER_GRAPHS = graphs


def _label_job(job):
    a, b, budget = job
    ga, gb = _WORKER_GRAPHS[a], _WORKER_GRAPHS[b]
    try:
        return label_pair(a, b, ga, gb, timeout=budget)
    except OracleTimeout:
        return None


def cmd_oracle(args) -> int:
    ds = load_dataset(args.dataset)
    if len(ds) < 2:
        raise UsageError("the dataset needs at least two graphs")
    pairs = _parse_pair_spec(args.pairs, len(ds), args.seed)
    jobs = [(a, b, args.budget) for a, b in pairs]
    threads = args.threads or os.cpu_count() or 1
    if threads == 1:
        _init_worker(ds.graphs)
        results = [_label_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(threads, initializer=_init_worker, initargs=(ds.graphs,)) as pool:
            results = list(pool.map(_label_job, jobs, chunksize=max(1, len(jobs) // (threads * 8))))
    labelled = [r[0] for r in results if r is not None]
    violations = sum(1 for r in results if r is not None and not r[1])
    skipped = sum(1 for r in results if r is None)
    save_pairs(labelled, args.out)
    print(f"labelled {len(labelled)} pairs, skipped {skipped} over budget, bound violations {violations}")
    return 0 if violations == 0 else 2


# --- encode --------------------------------------------------------------------


def _encoder_for(ds: Dataset, enc_cfg: EncoderConfig) -> EncoderConfig:
    if ds.num_labels > enc_cfg.label_vocab:
        return dataclasses.replace(enc_cfg, label_vocab=ds.num_labels)
    return enc_cfg


def cmd_encode(args) -> int:
    ds = load_dataset(args.dataset)
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.encoder_config
    if ds.num_labels > cfg.label_vocab:
        raise UsageError(f"dataset has {ds.num_labels} labels, checkpoint encoder knows {cfg.label_vocab}")
    prepared = prepare_graphs(ds, cfg, ckpt.seed)
    regions = encode_many(prepared, ckpt.params.encoder, cfg)
    save_regions(args.out, [CachedRegion(i, r, p.assign) for i, (r, p) in enumerate(zip(regions, prepared))])
    print(f"encoded {len(regions)} graphs to {args.out}")
    return 0


# --- train ------------------------------------------------------------------------


def cmd_train(args) -> int:
    ds = load_dataset(args.dataset)
    pairs = load_pairs(args.labels, ds.graphs)
    if args.config:
        cfg, enc_cfg, score_cfg = load_config(args.config)
    else:
        cfg, enc_cfg, score_cfg = TrainConfig(), EncoderConfig(), ScoreConfig()
    overrides = {}
    if args.loss:
        overrides["loss_mode"] = args.loss
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.max_epochs is not None:
        overrides["max_epochs"] = args.max_epochs
    cfg = dataclasses.replace(cfg, **overrides)
    enc_cfg = _encoder_for(ds, enc_cfg)
    result = train(ds, pairs, cfg, enc_cfg, score_cfg)
    save_checkpoint(args.out, result.params, enc_cfg, score_cfg, cfg.loss_mode, cfg.seed)
    history = args.history or f"{args.out}.history.csv"
    save_history(result.history, history)
    print(
        f"trained {len(result.history)} epochs ({result.iterations} iterations), "
        f"best validation loss {result.best_val_loss:.6g} at epoch {result.best_epoch}; "
        f"checkpoint {args.out}, history {history}"
    )
    return 0


# --- eval --------------------------------------------------------------------------


def cmd_eval(args) -> int:
    ds = load_dataset(args.dataset)
    pairs = load_pairs(args.labels, ds.graphs)
    ckpt = load_checkpoint(args.checkpoint)
    if args.split == "test":
        pairs = [pairs[i] for i in split_pairs(len(pairs), ckpt.seed).test]
    if not pairs:
        raise UsageError("no labelled pairs to evaluate")
    cfg = ckpt.encoder_config
    prepared = prepare_graphs(ds, cfg, ckpt.seed)
    preds = predict_pairs(ckpt.params, cfg, prepared, [(p.graph_a_id, p.graph_b_id) for p in pairs], (args.metric,))
    pred = preds[args.metric]
    target = np.array([p.nmcs_target if args.metric == "mcs" else p.nged_target for p in pairs])
    report = evaluate(pred, target)
    # each pair ranks its partner from both ends
    qa = [p.graph_a_id for p in pairs] + [p.graph_b_id for p in pairs]
    ranking = evaluate(np.concatenate([pred, pred]), np.concatenate([target, target]), queries=qa, ks=args.k)
    report.p_at_k = ranking.p_at_k
    doc = report.to_json()
    doc.update(metric=args.metric, split=args.split, pairs=len(pairs))
    print(json.dumps(doc))
    print(report.csv_row())
    if args.csv:
        new = not Path(args.csv).exists()
        with open(args.csv, "a") as fh:
            if new:
                fh.write(report.csv_header() + "\n")
            fh.write(report.csv_row() + "\n")
    return 0


# --- predict / rank ------------------------------------------------------------


def _load_scoring(args):
    ckpt = load_checkpoint(args.checkpoint)
    entries = load_regions(args.regions)
    if not entries:
        raise UsageError(f"{args.regions} holds no regions")
    shape = entries[0].region.region.shape
    if shape != (ckpt.encoder_config.k, ckpt.encoder_config.out):
        raise UsageError(f"region shape {shape} does not match the checkpoint (k={ckpt.encoder_config.k}, out={ckpt.encoder_config.out})")
    return ckpt, [e.region for e in entries]


def _read_pair_list(path, n: int) -> list[tuple[int, int]]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                a, b = int(obj["a"]), int(obj["b"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}: line {lineno}: expected an object with integer 'a' and 'b' ({exc})") from None
            if not (0 <= a < n and 0 <= b < n):
                raise ValueError(f"{path}: line {lineno}: graph id out of range [0, {n})")
            out.append((a, b))
    return out


def cmd_predict(args) -> int:
    ckpt, regions = _load_scoring(args)
    pairs = _read_pair_list(args.pairs, len(regions))
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        if pairs:
            scores = predict_pairs(ckpt.params, ckpt.encoder_config, [], pairs, regions=regions)
            for i, (a, b) in enumerate(pairs):
                out.write(json.dumps({"a": a, "b": b, "mcs": float(scores["mcs"][i]), "ged": float(scores["ged"][i])}) + "\n")
    finally:
        if args.out:
            out.close()
    return 0


def cmd_rank(args) -> int:
    ckpt, regions = _load_scoring(args)
    if not 0 <= args.query < len(regions):
        raise UsageError(f"--query must be in [0, {len(regions)})")
    corpus = [i for i in range(len(regions)) if i != args.query]
    if not corpus:
        raise UsageError("the corpus is empty")
    scores = predict_pairs(
        ckpt.params, ckpt.encoder_config, [], [(args.query, c) for c in corpus], (args.by,), regions=regions
    )[args.by]
    order = np.lexsort((np.array(corpus), -scores))
    if args.top is not None:
        order = order[: args.top]
    for i in order:
        print(json.dumps({"id": corpus[i], args.by: float(scores[i])}))
    return 0


# --- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="g2r", description="Graph similarity with multi-scale graph regions.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("gen", help="generate a dataset of connected ER graphs")
    p.add_argument("--n-graphs", type=int, required=True)
    p.add_argument("--n-min", type=int, default=5)
    p.add_argument("--n-max", type=int, default=50)
    p.add_argument("--p-min", type=float, default=0.1)
    p.add_argument("--p-max", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("oracle", help="label graph pairs with exact MCS and GED")
    p.add_argument("--dataset", required=True)
    p.add_argument("--pairs", default="all", help="'all' or 'random:<m>'")
    p.add_argument("--budget", type=float, default=None, help="per-pair time limit in seconds")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None, help="worker processes (default: all cores)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("encode", help="precompute graph regions with a trained encoder")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("train", help="train a model on labelled pairs")
    p.add_argument("--dataset", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--config", default=None, help="flat 'key = value' config file")
    p.add_argument("--loss", choices=("mcs", "ged", "dual", "dual_uncertainty"), default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--history", default=None, help="history CSV (default: <out>.history.csv)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint against oracle labels")
    p.add_argument("--dataset", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--metric", choices=("mcs", "ged"), required=True)
    p.add_argument("--split", choices=("all", "test"), default="test")
    p.add_argument("--k", type=int, nargs="+", default=[10])
    p.add_argument("--csv", default=None, help="append the CSV row to this file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="score pairs from a region cache")
    p.add_argument("--regions", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pairs", required=True, help="JSON-lines with 'a' and 'b'")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("rank", help="rank a corpus against one query graph")
    p.add_argument("--regions", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--query", type=int, required=True)
    p.add_argument("--by", choices=("mcs", "ged"), default="mcs")
    p.add_argument("--top", type=int, default=None)
    p.set_defaults(func=cmd_rank)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"g2r {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError, GraphError, OracleError, TensorError, TrainingError) as exc:
        print(f"g2r {args.command}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
