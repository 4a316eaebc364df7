"""Loss, optimizer, leave-one-subject-out splits, training and ensembling."""

from __future__ import annotations

import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np

from .encoder import EncoderConfig
from .convlstm import CycleConfig
from .seeding import substream
from .segnet import SegModel, attach_lstms, build_model, canonical_variant, forward_sequence, predict_maps
from .tensorcore import ShapeError, Tape, Tensor, custom_op

log = logging.getLogger(__name__)

BCE_EPS = 1e-7


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, last_finite_epoch: int):
        super().__init__(message)
        self.last_finite_epoch = last_finite_epoch


# ---------------------------------------------------------------------------
# Loss and optimizer
# ---------------------------------------------------------------------------

def bce_loss(pred: Tensor, truth, eps: float = BCE_EPS) -> Tensor:
    """Mean binary cross-entropy; ``pred`` is clamped to ``[eps, 1 - eps]``."""
    y = np.asarray(truth, dtype=pred.dtype)
    if y.shape != pred.shape:
        if y.size == pred.data.size:
            y = y.reshape(pred.shape)
        else:
            raise ShapeError(f"bce_loss: prediction {pred.shape} vs truth {np.shape(truth)}")
    p = pred.data
    pc = np.clip(p, eps, 1.0 - eps)
    n = p.size
    value = -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)).sum() / n
    inside = (p >= eps) & (p <= 1.0 - eps)

    def vjp(g):
        return ((g / n) * inside * ((1.0 - y) / (1.0 - pc) - y / pc),)

    return custom_op(np.asarray(value, dtype=pred.dtype), (pred,), vjp)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]) -> Mapping[str, Tensor]:
    """One bias-corrected Adam update, applied in place to ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {params[name].shape}")
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.data.dtype, copy=False)
    return params


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return total


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

@dataclass
class FoldSpec:
    test_subject: str
    train_cycles: list[str]
    val_cycles: list[str]
    test_cycles: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def loo_split(dataset: Mapping[str, Sequence[str]], seed: int, val_fraction: float = 0.2) -> list[FoldSpec]:
    """One fold per subject; the rest split into train/validation by whole cycle."""
    if len(dataset) < 2:
        raise ValueError(f"leave-one-out needs at least 2 subjects, got {len(dataset)}")
    for subj, cycles in dataset.items():
        if len(cycles) == 0:
            raise ValueError(f"subject {subj!r} has no cycles")
    folds = []
    for k, test in enumerate(dataset):
        rest = [c for subj, cycles in dataset.items() if subj != test for c in cycles]
        order = substream(seed, "split", k).permutation(len(rest))
        n_val = _round_half_up(val_fraction * len(rest))
        if n_val == 0:
            warnings.warn(f"fold {test!r}: only {len(rest)} cycles available, validation set is empty", stacklevel=2)
        val = [rest[i] for i in sorted(order[:n_val])]
        train = [rest[i] for i in sorted(order[n_val:])]
        folds.append(FoldSpec(test, train, val, list(dataset[test])))
    return folds


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    variant: str = "multi-level"
    cnn_epochs: int = 8
    rnn_epochs: int = 6
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    patience: int = 10
    clip_norm: float = 5.0
    encoder_preset: str = "desk"
    units_per_stage: int | None = None
    width: int | None = None
    passes: int = 2
    frames: int = 25
    freeze_encoder: bool = False

    def __post_init__(self):
        self.variant = canonical_variant(self.variant)
        for name in ("cnn_epochs", "rnn_epochs", "patience", "passes", "frames"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0 or self.clip_norm <= 0:
            raise ValueError("learning_rate and clip_norm must be positive")

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def encoder(self) -> EncoderConfig:
        base = EncoderConfig.preset(self.encoder_preset)
        return EncoderConfig(
            units_per_stage=self.units_per_stage or base.units_per_stage,
            width=self.width or base.width,
        )

    @property
    def cycle(self) -> CycleConfig:
        return CycleConfig(frames=self.frames, passes=self.passes)


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    def add(self, stage: str, epoch: int, split: str, loss: float) -> None:
        self.records.append({"stage": stage, "epoch": epoch, "split": split, "loss": loss, "timestamp": time.time()})

    def losses(self, stage: str, split: str) -> list[float]:
        return [r["loss"] for r in self.records if r["stage"] == stage and r["split"] == split]

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r) + "\n")


def _mean_loss(model: SegModel, ids: Sequence[str], data: Mapping) -> float:
    losses = [float(bce_loss(forward_sequence(model, data[c]), data[c].masks[:, None]).data) for c in ids]
    return float(np.mean(losses)) if losses else float("nan")


def _snapshot(model: SegModel) -> list[np.ndarray]:
    return [t.data.copy() for _, t in model.named_tensors()]


def _restore(model: SegModel, snap: list[np.ndarray]) -> None:
    for (_, t), arr in zip(model.named_tensors(), snap):
        t.data = arr


def fit(
    model: SegModel,
    train_ids: Sequence[str],
    val_ids: Sequence[str],
    data: Mapping,
    epochs: int,
    cfg: TrainConfig,
    rng: np.random.Generator,
    train_log: TrainLog,
    stage: str,
    trainable: set[str] | None = None,
) -> SegModel:
    """Adam on per-cycle BCE; keeps the parameters with the best selection loss.

    Selection uses validation loss, or training loss when there is no
    validation set. Stops after ``cfg.patience`` epochs without improvement.
    """
    params = {n: t for n, t in model.named_tensors() if trainable is None or n in trainable}
    for n, t in model.named_tensors():
        t.requires_grad = n in params
    adam = AdamState(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    select_ids = list(val_ids) if val_ids else list(train_ids)
    split = "val" if val_ids else "train"
    best = _mean_loss(model, select_ids, data)
    train_log.add(stage, 0, split, best)
    best_snap, stale, last_finite = _snapshot(model), 0, 0
    for epoch in range(1, epochs + 1):
        running = []
        for idx in rng.permutation(len(train_ids)):
            seq = data[train_ids[idx]]
            with Tape() as tape:
                loss = bce_loss(forward_sequence(model, seq), seq.masks[:, None])
                value = float(loss.data)
                if not math.isfinite(value):
                    raise TrainingDiverged(f"{stage}: non-finite loss in epoch {epoch}", last_finite)
                tape.backward(loss, params.values())
            grads = {n: t.grad for n, t in params.items()}
            try:
                clip_by_global_norm(grads, cfg.clip_norm)
                adam_step(adam, params, grads)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"{stage}: epoch {epoch}: {exc}", last_finite) from None
            running.append(value)
        train_log.add(stage, epoch, "train", float(np.mean(running)))
        score = _mean_loss(model, val_ids, data) if val_ids else float(np.mean(running))
        if val_ids:
            train_log.add(stage, epoch, "val", score)
        if not math.isfinite(score):
            raise TrainingDiverged(f"{stage}: non-finite {split} loss in epoch {epoch}", last_finite)
        last_finite = epoch
        log.info("%s epoch %d: train %.4f %s %.4f", stage, epoch, np.mean(running), split, score)
        if score < best:
            best, best_snap, stale = score, _snapshot(model), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    _restore(model, best_snap)
    return model


def train_model(
    cfg: TrainConfig,
    fold: FoldSpec,
    data: Mapping,
    init: SegModel | None = None,
    train_log: TrainLog | None = None,
) -> tuple[SegModel, TrainLog]:
    """Two-stage training for ``cfg.variant``.

    Stage A trains encoder and decoder as the per-frame CNN. For recurrent
    variants stage B starts from the stage-A weights (or ``init``, when
    given), adds the ConvLSTM blocks and trains end to end.
    """
    missing = [c for c in list(fold.train_cycles) + list(fold.val_cycles) if c not in data]
    if missing:
        raise KeyError(f"fold cycles missing from data: {missing[:5]}{'...' if len(missing) > 5 else ''}")
    train_log = train_log or TrainLog()
    if init is None:
        base = build_model("cnn", cfg.encoder, input_size=_input_size(data, fold), cycle=cfg.cycle, seed=cfg.seed,
                           rng=substream(cfg.seed, "init", "cnn"))
        base = fit(base, fold.train_cycles, fold.val_cycles, data, cfg.cnn_epochs, cfg,
                   substream(cfg.seed, "order", "cnn"), train_log, "cnn")
    else:
        base = init
    if cfg.variant == "cnn":
        return base, train_log
    model = base.copy()
    model.lstm_quarter = model.lstm_half = None
    attach_lstms(model, cfg.variant, substream(cfg.seed, "init", cfg.variant))
    trainable = None
    if cfg.freeze_encoder:
        trainable = {n for n, _ in model.named_tensors() if not n.startswith("encoder.")}
    model = fit(model, fold.train_cycles, fold.val_cycles, data, cfg.rnn_epochs, cfg,
                substream(cfg.seed, "order", cfg.variant), train_log, cfg.variant, trainable)
    return model, train_log


def _input_size(data: Mapping, fold: FoldSpec) -> tuple[int, int]:
    first = data[(fold.train_cycles or fold.val_cycles)[0]]
    return tuple(first.shape)


# ---------------------------------------------------------------------------
# Ensembles
# ---------------------------------------------------------------------------

def ensemble_probability(models: Sequence[SegModel], cycle, expected: int = 5) -> np.ndarray:
    if not models:
        raise ValueError("ensemble needs at least one model")
    if len(models) != expected:
        warnings.warn(f"ensemble of {len(models)} models, expected {expected}", stacklevel=2)
    variants = {m.variant for m in models}
    if len(variants) != 1:
        raise ValueError(f"ensemble members disagree on variant: {sorted(variants)}")
    total = None
    for m in models:
        p = predict_maps(m, cycle).astype(np.float64)
        total = p if total is None else total + p
    return total / len(models)


def threshold_mean(maps: Sequence[np.ndarray], threshold: float = 0.5) -> np.ndarray:
    """Foreground where the mean of ``maps`` is strictly above ``threshold``."""
    mean = np.mean(np.asarray(maps, dtype=np.float64), axis=0)
    return (mean > threshold).astype(np.uint8)


def ensemble_predict(models: Sequence[SegModel], cycle, expected: int = 5, threshold: float = 0.5) -> np.ndarray:
    """Average the members' probability maps; foreground where mean > threshold.

    A mean of exactly ``threshold`` counts as background.
    """
    return (ensemble_probability(models, cycle, expected) > threshold).astype(np.uint8)
