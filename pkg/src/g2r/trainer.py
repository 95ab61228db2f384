"""Losses, Adam, the minibatch training loop with early stopping, and
checkpoint / config / history files."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from g2r import tensor as T
from g2r.encoder import (
    EncoderConfig,
    EncoderParams,
    GraphBatch,
    GraphRegion,
    PreparedGraph,
    encode_batch,
    encode_many,
    sample_sinks,
)
from g2r.graph import Dataset
from g2r.inference import ScoreConfig, ScoreParams, score_pairs
from g2r.oracle import LabeledPair
from g2r.rng import stream

log = logging.getLogger(__name__)

LOSS_MODES = ("mcs", "ged", "dual", "dual_uncertainty")
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# --- losses -------------------------------------------------------------------


def mse_loss(preds, targets) -> T.Tensor:
    preds = preds if isinstance(preds, T.Tensor) else T.tensor(np.asarray(preds, dtype=np.float64))
    targets = np.asarray(targets.data if isinstance(targets, T.Tensor) else targets, dtype=np.float64)
    if preds.shape != targets.shape:
        raise ValueError(f"mse_loss: {preds.shape} predictions vs {targets.shape} targets")
    if targets.size == 0:
        raise ValueError("mse_loss: empty input")
    diff = T.sub(preds, T.tensor(targets))
    return T.mean_all(T.mul(diff, diff))


def dual_loss(l_mcs, l_ged) -> T.Tensor:
    return T.add(l_mcs, l_ged)


def uncertainty_loss(l_mcs, l_ged, theta_mcs, theta_ged) -> T.Tensor:
    """``sum_t 0.5 * (exp(-theta_t) * L_t + theta_t)``."""
    total = None
    for loss, theta in ((l_mcs, theta_mcs), (l_ged, theta_ged)):
        loss = loss if isinstance(loss, T.Tensor) else T.tensor(loss)
        theta = theta if isinstance(theta, T.Tensor) else T.tensor(theta)
        term = T.scale(T.add(T.mul(T.exp_neg(theta), loss), theta), 0.5)
        total = term if total is None else T.add(total, term)
    return total


# --- optimiser ------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, shapes: Sequence[tuple[int, ...]]) -> AdamState:
        return cls([np.zeros(s) for s in shapes], [np.zeros(s) for s in shapes], 0)


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> list[np.ndarray]:
    """One bias-corrected Adam update; advances ``state`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("adam_step: parameter, gradient and state lists differ in length")
    state.t += 1
    t = state.t
    new = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"adam_step: parameter {i} has shape {p.shape}, gradient {g.shape}")
        state.m[i] = beta1 * state.m[i] + (1 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1 - beta2) * g * g
        m_hat = state.m[i] / (1 - beta1**t)
        v_hat = state.v[i] / (1 - beta2**t)
        new.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
    return new


# --- model ----------------------------------------------------------------------


@dataclass
class ModelParams:
    encoder: EncoderParams
    scores: ScoreParams
    theta_mcs: T.Tensor
    theta_ged: T.Tensor

    @classmethod
    def init(cls, enc_cfg: EncoderConfig, score_cfg: ScoreConfig, seed: int) -> ModelParams:
        rng = stream(seed, "init")
        encoder = EncoderParams.init(enc_cfg, rng)
        scores = ScoreParams.init(enc_cfg.k, enc_cfg.out, score_cfg, rng)
        return cls(encoder, scores, T.parameter(0.0), T.parameter(0.0))

    def named(self) -> list[tuple[str, T.Tensor]]:
        items = [(f"encoder.{n}", t) for n, t in self.encoder.named()]
        items += [(f"scores.{n}", t) for n, t in self.scores.named()]
        items += [("theta_mcs", self.theta_mcs), ("theta_ged", self.theta_ged)]
        return items

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.named()}

    @classmethod
    def from_arrays(cls, enc_cfg: EncoderConfig, score_cfg: ScoreConfig, arrays: dict[str, np.ndarray]) -> ModelParams:
        enc = {n[len("encoder."):]: a for n, a in arrays.items() if n.startswith("encoder.")}
        sc = {n[len("scores."):]: a for n, a in arrays.items() if n.startswith("scores.")}
        for name in ("theta_mcs", "theta_ged"):
            if name not in arrays:
                raise ValueError(f"missing parameter {name}")
        return cls(
            EncoderParams.from_named(enc_cfg, enc),
            ScoreParams.from_named(enc_cfg.k, enc_cfg.out, score_cfg, sc),
            T.parameter(np.asarray(arrays["theta_mcs"], dtype=np.float64)),
            T.parameter(np.asarray(arrays["theta_ged"], dtype=np.float64)),
        )


def prepare_graphs(dataset: Dataset, enc_cfg: EncoderConfig, seed: int) -> list[PreparedGraph]:
    """Per-graph constant inputs; sink values come from the seed's ``sinks`` stream."""
    return [
        PreparedGraph.build(g, sample_sinks(g.num_nodes, enc_cfg.n_paths, seed, i), enc_cfg)
        for i, g in enumerate(dataset.graphs)
    ]


def _sizes(prepared: Sequence[PreparedGraph], score_cfg: ScoreConfig) -> np.ndarray:
    if score_cfg.size_metric == "nodes":
        return np.array([p.num_nodes for p in prepared], dtype=np.float64)
    return np.array([p.size for p in prepared], dtype=np.float64)


def _tasks(loss_mode: str) -> tuple[str, ...]:
    return {"mcs": ("mcs",), "ged": ("ged",)}.get(loss_mode, ("mcs", "ged"))


def batch_loss(
    params: ModelParams,
    enc_cfg: EncoderConfig,
    prepared: Sequence[PreparedGraph],
    pairs: Sequence[LabeledPair],
    loss_mode: str,
) -> tuple[T.Tensor, dict[str, T.Tensor]]:
    """Loss for a list of pairs, encoding each distinct graph once."""
    ids = sorted({p.graph_a_id for p in pairs} | {p.graph_b_id for p in pairs})
    local = {g: i for i, g in enumerate(ids)}
    graphs = [prepared[g] for g in ids]
    batch = GraphBatch.build(graphs, enc_cfg)
    regions = encode_batch(batch, params.encoder, enc_cfg)
    ia = [local[p.graph_a_id] for p in pairs]
    ib = [local[p.graph_b_id] for p in pairs]
    want = _tasks(loss_mode)
    scores = score_pairs(regions, _sizes(graphs, params.scores.cfg), ia, ib, params.scores, enc_cfg.k, want)
    losses = {}
    if "mcs" in want:
        losses["mcs"] = mse_loss(scores["mcs"], [p.nmcs_target for p in pairs])
    if "ged" in want:
        losses["ged"] = mse_loss(scores["ged"], [p.nged_target for p in pairs])
    if loss_mode in ("mcs", "ged"):
        total = losses[loss_mode]
    elif loss_mode == "dual":
        total = dual_loss(losses["mcs"], losses["ged"])
    elif loss_mode == "dual_uncertainty":
        total = uncertainty_loss(losses["mcs"], losses["ged"], params.theta_mcs, params.theta_ged)
    else:
        raise ValueError(f"unknown loss mode {loss_mode!r}")
    return total, losses


def predict_pairs(
    params: ModelParams,
    enc_cfg: EncoderConfig,
    prepared: Sequence[PreparedGraph],
    pairs: Sequence[tuple[int, int]],
    want: tuple[str, ...] = ("mcs", "ged"),
    regions: Sequence[GraphRegion] | None = None,
) -> dict[str, np.ndarray]:
    """Scores for ``(a, b)`` graph-id pairs without recording gradients."""
    if regions is None:
        regions = encode_many(list(prepared), params.encoder, enc_cfg)
    stacked = T.tensor(np.concatenate([r.region for r in regions], axis=0))
    sizes = [r.size if params.scores.cfg.size_metric == "nodes_plus_edges" else r.num_nodes for r in regions]
    ia = [a for a, _ in pairs]
    ib = [b for _, b in pairs]
    out = score_pairs(stacked, sizes, ia, ib, params.scores, enc_cfg.k, want)
    return {t: v.data.copy() for t, v in out.items()}


# --- configuration ------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 128
    iters_per_epoch: int = 100
    warmup_epochs: int = 50
    validate_every: int = 20
    patience: int = 50
    max_wall_clock: float = 8 * 3600.0
    max_epochs: int | None = None
    loss_mode: str = "dual_uncertainty"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        for name in ("lr", "batch_size", "iters_per_epoch", "validate_every", "patience", "max_wall_clock"):
            if getattr(self, name) <= 0:
                raise ValueError(f"TrainConfig.{name} must be positive")
        if self.warmup_epochs < 0:
            raise ValueError("TrainConfig.warmup_epochs must be >= 0")
        if self.max_epochs is not None and self.max_epochs < 1:
            raise ValueError("TrainConfig.max_epochs must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if raw.lower() == "none":
        return None
    if isinstance(default, int) or default is None:
        try:
            return int(raw)
        except ValueError:
            if default is None:
                raise
            raise ValueError(f"expected an integer, got {raw!r}") from None
    if isinstance(default, float):
        return float(raw)
    return raw


def load_config(path: str | Path) -> tuple[TrainConfig, EncoderConfig, ScoreConfig]:
    """Read a flat ``key = value`` file covering train, encoder and score fields.

    Score fields may be prefixed ``score_`` (``score_hidden``) to avoid
    ambiguity; ``#`` starts a comment.
    """
    targets = {
        "train": {f.name: f for f in fields(TrainConfig)},
        "encoder": {f.name: f for f in fields(EncoderConfig)},
        "score": {f.name: f for f in fields(ScoreConfig)},
    }
    defaults = {"train": TrainConfig(), "encoder": EncoderConfig(), "score": ScoreConfig()}
    values: dict[str, dict] = {"train": {}, "encoder": {}, "score": {}}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}: line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        group = None
        if key.startswith("score_") and key[len("score_"):] in targets["score"]:
            group, key = "score", key[len("score_"):]
        else:
            for g in ("train", "encoder", "score"):
                if key in targets[g]:
                    group = g
                    break
        if group is None:
            raise ValueError(f"{path}: line {lineno}: unknown key {key!r}")
        try:
            values[group][key] = _parse_value(raw, getattr(defaults[group], key))
        except ValueError as exc:
            raise ValueError(f"{path}: line {lineno}: {key}: {exc}") from None
    return TrainConfig(**values["train"]), EncoderConfig(**values["encoder"]), ScoreConfig(**values["score"])


# --- training loop --------------------------------------------------------------


@dataclass
class Split:
    train: list[int]
    val: list[int]
    test: list[int]


def split_pairs(n: int, seed: int) -> Split:
    """4:1 train/test, then 20% of train held out for validation."""
    order = stream(seed, "split").permutation(n).tolist()
    n_test = n // 5
    test, rest = order[:n_test], order[n_test:]
    n_val = len(rest) // 5
    split = Split(sorted(rest[n_val:]), sorted(rest[:n_val]), sorted(test))
    if not split.train or not split.val or not split.test:
        raise TrainingError(f"{n} labelled pairs are too few to split into train/validation/test")
    return split


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float | None
    theta_mcs: float
    theta_ged: float


@dataclass
class TrainResult:
    params: ModelParams
    history: list[EpochRecord]
    split: Split
    best_val_loss: float
    best_epoch: int
    iterations: int
    stopped_early: bool = False
    val_losses: list[tuple[int, float]] = field(default_factory=list)


def validation_loss(
    params: ModelParams,
    enc_cfg: EncoderConfig,
    prepared: Sequence[PreparedGraph],
    pairs: Sequence[LabeledPair],
    loss_mode: str,
) -> float:
    """Sum of the per-task MSEs the loss mode trains on."""
    want = _tasks(loss_mode)
    preds = predict_pairs(params, enc_cfg, prepared, [(p.graph_a_id, p.graph_b_id) for p in pairs], want)
    total = 0.0
    if "mcs" in want:
        total += float(np.mean((preds["mcs"] - np.array([p.nmcs_target for p in pairs])) ** 2))
    if "ged" in want:
        total += float(np.mean((preds["ged"] - np.array([p.nged_target for p in pairs])) ** 2))
    return total


def train(
    dataset: Dataset,
    pairs: Sequence[LabeledPair],
    cfg: TrainConfig,
    enc_cfg: EncoderConfig,
    score_cfg: ScoreConfig,
    prepared: Sequence[PreparedGraph] | None = None,
) -> TrainResult:
    """Minibatch Adam training with warm-up, periodic validation and early stopping.

    Validation runs at epochs ``warmup_epochs + m * validate_every`` and at the
    final epoch. Training stops after ``patience`` validations without
    improvement, after ``max_epochs``, or when the wall clock runs out. The
    returned parameters are those of the best validation.
    """
    start = time.monotonic()
    split = split_pairs(len(pairs), cfg.seed)
    if prepared is None:
        prepared = prepare_graphs(dataset, enc_cfg, cfg.seed)
    params = ModelParams.init(enc_cfg, score_cfg, cfg.seed)
    named = params.named()
    tensors = [t for _, t in named]
    state = AdamState.zeros([t.shape for t in tensors])
    batches = stream(cfg.seed, "batches")
    train_pairs = [pairs[i] for i in split.train]
    val_pairs = [pairs[i] for i in split.val]

    history: list[EpochRecord] = []
    val_losses: list[tuple[int, float]] = []
    best_val = math.inf
    best_arrays = params.arrays()
    best_epoch = 0
    stale = 0
    iterations = 0
    stopped_early = False
    epoch = 0
    while True:
        epoch += 1
        running = 0.0
        for it in range(cfg.iters_per_epoch):
            chosen = batches.integers(0, len(train_pairs), size=cfg.batch_size)
            batch = [train_pairs[i] for i in chosen]
            try:
                with T.Tape() as tape:
                    loss, _ = batch_loss(params, enc_cfg, prepared, batch, cfg.loss_mode)
                grads = tape.gradient(loss, tensors)
                updated = adam_step([t.data for t in tensors], grads, state, lr=cfg.lr)
                for t, value in zip(tensors, updated):
                    t.assign(value)
            except T.TensorError as exc:
                raise TrainingError(f"non-finite value at epoch {epoch}, iteration {it}: {exc}") from exc
            running += loss.item()
            iterations += 1
        train_loss = running / cfg.iters_per_epoch
        elapsed = time.monotonic() - start
        last = (cfg.max_epochs is not None and epoch >= cfg.max_epochs) or elapsed >= cfg.max_wall_clock
        scheduled = epoch >= cfg.warmup_epochs and (epoch - cfg.warmup_epochs) % cfg.validate_every == 0
        val = None
        if scheduled or last:
            val = validation_loss(params, enc_cfg, prepared, val_pairs, cfg.loss_mode)
            val_losses.append((epoch, val))
            if val < best_val:
                best_val, best_epoch, best_arrays, stale = val, epoch, params.arrays(), 0
            else:
                stale += 1
            log.info("epoch %d train %.6g val %.6g (best %.6g @ %d)", epoch, train_loss, val, best_val, best_epoch)
        history.append(
            EpochRecord(epoch, train_loss, val, params.theta_mcs.item(), params.theta_ged.item())
        )
        if stale >= cfg.patience:
            stopped_early = True
            break
        if last:
            break

    best = ModelParams.from_arrays(enc_cfg, score_cfg, best_arrays)
    return TrainResult(best, history, split, best_val, best_epoch, iterations, stopped_early, val_losses)


# --- files ------------------------------------------------------------------------


def save_history(history: Sequence[EpochRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss", "theta_mcs", "theta_ged"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), "" if r.val_loss is None else repr(r.val_loss), repr(r.theta_mcs), repr(r.theta_ged)])


@dataclass
class Checkpoint:
    params: ModelParams
    encoder_config: EncoderConfig
    score_config: ScoreConfig
    loss_mode: str
    seed: int


def save_checkpoint(
    path: str | Path,
    params: ModelParams,
    enc_cfg: EncoderConfig,
    score_cfg: ScoreConfig,
    loss_mode: str,
    seed: int,
) -> None:
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "encoder_config": enc_cfg.to_dict(),
        "score_config": score_cfg.to_dict(),
        "loss_mode": loss_mode,
        "seed": seed,
        "params": {n: {"shape": list(a.shape), "values": a.reshape(-1).tolist()} for n, a in params.arrays().items()},
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path, expected: EncoderConfig | None = None) -> Checkpoint:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: cannot parse checkpoint: line {exc.lineno} col {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict) or doc.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format version {doc.get('format_version') if isinstance(doc, dict) else None!r}")
    try:
        enc_cfg = EncoderConfig.from_dict(doc["encoder_config"])
        score_cfg = ScoreConfig.from_dict(doc["score_config"])
        if expected is not None and expected != enc_cfg:
            diffs = [f.name for f in fields(EncoderConfig) if getattr(expected, f.name) != getattr(enc_cfg, f.name)]
            raise CheckpointError(f"{path}: encoder config mismatch in {diffs}")
        arrays = {
            n: np.asarray(v["values"], dtype=np.float64).reshape(v["shape"]) for n, v in doc["params"].items()
        }
        params = ModelParams.from_arrays(enc_cfg, score_cfg, arrays)
        return Checkpoint(params, enc_cfg, score_cfg, doc["loss_mode"], int(doc["seed"]))
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid checkpoint: {exc}") from None


def copy_params(params: ModelParams) -> ModelParams:
    return copy.deepcopy(params)
