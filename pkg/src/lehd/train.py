"""Supervised training on sampled partial solutions, and self-improved labels."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import LabeledInstance, TrainingSample, batch, epoch_rng, sample_partial
from .model import (LehdModel, ModelConfig, cvrp_action_mask, decoder_logits,
                    encode_features, held_context, tsp_action_mask)
from .optim import AdamState, NonFiniteGradient, adam_step


class DataCorruption(ValueError):
    pass


class TrainingAborted(RuntimeError):
    def __init__(self, msg, last_checkpoint=None):
        self.last_checkpoint = last_checkpoint
        super().__init__(msg)


# --------------------------------------------------------------------------- loss

def _tsp_log_probs(model: LehdModel, samples: Sequence[TrainingSample]):
    B, w = len(samples), samples[0].size
    H = encode_features(model, np.stack([s.features for s in samples]))
    ctx = held_context(model, H) if model.config.arch == "held" else None
    dest = slice(w - 1, w)
    picked = []
    for t in range(w - 2):
        m = w - 2 - t
        if m == 1:
            continue  # a single available node has probability 1: zero loss, zero gradient
        u = decoder_logits(model, H, dest, slice(t, t + 1), slice(t + 1, w - 1),
                           tsp_action_mask(B, m), context=ctx)
        picked.append(T.pick(T.log_softmax(u), np.full(B, 2)))
    return picked, w - 2


def _cvrp_log_probs(model: LehdModel, samples: Sequence[TrainingSample]):
    B, N = len(samples), samples[0].size
    H = encode_features(model, np.stack([s.features for s in samples]))
    dem = np.stack([s.demands for s in samples]).astype(np.int64)
    cap = np.array([s.capacity for s in samples], dtype=np.int64)
    load = np.array([s.partial.start_load for s in samples], dtype=np.int64)
    targets = np.stack([s.targets for s in samples])
    dest = slice(0, 1)
    picked = []
    for t in range(N - 2):
        rem = cap - load
        mask = cvrp_action_mask(rem, dem[:, t + 2:], np.zeros(B, dtype=bool))
        y = targets[:, t]
        if mask[np.arange(B), y].any():
            b = int(np.flatnonzero(mask[np.arange(B), y])[0])
            raise DataCorruption(f"sample {b}: step {t} target action {int(y[b])} is not available")
        u = decoder_logits(model, H, dest, slice(t + 1, t + 2), slice(t + 2, N), mask, rem / cap)
        picked.append(T.pick(T.log_softmax(u), y))
        d = dem[:, t + 2]
        load = np.where(y == 5, d, load + d)
    return picked, N - 2


def batch_loss(model: LehdModel, samples: Sequence[TrainingSample]) -> T.Tensor:
    """Mean teacher-forced cross-entropy over steps and samples (one size only)."""
    if not samples:
        raise ValueError("empty batch")
    if len({s.size for s in samples}) != 1:
        raise ValueError("batch_loss needs samples of one size")
    kind = samples[0].partial.kind
    if kind != model.config.problem:
        raise ValueError(f"model is for {model.config.problem}, samples are {kind}")
    if kind == "tsp":
        picked, steps = _tsp_log_probs(model, samples)
    else:
        picked, steps = _cvrp_log_probs(model, samples)
    if not picked:
        return T.tensor(0.0)
    total = picked[0] if len(picked) == 1 else T.concat(picked, axis=-1)
    return T.scale(T.sum(total), -1.0 / (len(samples) * steps))


def step_loss(sample: TrainingSample, model: LehdModel) -> T.Tensor:
    return batch_loss(model, [sample])


# --------------------------------------------------------------------------- training loop

@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 256
    lr: float = 1e-4
    decay: float = 0.97
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


CVRP_DECAY = 0.9  # default per-epoch decay for CVRP models

CONFIG_KEYS = sorted({f.name for f in fields(TrainConfig)} | set(ModelConfig.__dataclass_fields__)
                     | {"init"})


def load_config(path) -> tuple[ModelConfig, TrainConfig, dict]:
    """Read a JSON config file holding model and training keys side by side."""
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    unknown = sorted(set(raw) - set(CONFIG_KEYS))
    if unknown:
        raise ValueError(f"{path}: unknown config keys {unknown}")
    mcfg, tcfg = ModelConfig.from_dict(raw), TrainConfig.from_dict(raw)
    if mcfg.problem == "cvrp" and "decay" not in raw:
        tcfg.decay = CVRP_DECAY
    return mcfg, tcfg, raw


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr * cfg.decay ** epoch


@dataclass
class TrainResult:
    model: LehdModel
    checkpoints: list
    losses: list


METRIC_COLUMNS = ("epoch", "mean_loss", "lr", "wall_seconds")


def train(dataset: Sequence[LabeledInstance], model: LehdModel, cfg: TrainConfig, out_dir,
          log: Callable[[str], None] | None = None) -> TrainResult:
    """Train ``model`` in place; writes ``epoch_XXX.ckpt`` and ``metrics.csv``."""
    if not dataset:
        raise ValueError("training needs a non-empty dataset")
    log = log or (lambda msg: None)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.csv"
    with open(metrics_path, "w", newline="") as fh:
        csv.writer(fh).writerow(METRIC_COLUMNS)
    state = AdamState(lr=cfg.lr)
    checkpoints, losses = [], []
    last_good = None
    t0 = time.monotonic()
    for epoch in range(cfg.epochs):
        state.lr = lr_at(cfg, epoch)
        samples = [sample_partial(item, epoch_rng(cfg.seed, epoch, i)) for i, item in enumerate(dataset)]
        batches = batch(samples, cfg.batch_size)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(batches))
        total, count = 0.0, 0
        for bi in order:
            b = batches[bi]
            model.zero_grad()
            with T.Tape():
                loss = batch_loss(model, b)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingAborted(f"epoch {epoch + 1}: non-finite loss", last_good)
            if loss._tape is not None:
                T.backward(loss)
            try:
                adam_step(model.params, state)
            except NonFiniteGradient as e:
                raise TrainingAborted(f"epoch {epoch + 1}: {e}", last_good) from e
            total += value * len(b)
            count += len(b)
        mean_loss = total / count
        losses.append(mean_loss)
        ckpt = out / f"epoch_{epoch + 1:03d}.ckpt"
        model.save(ckpt, epoch=epoch + 1, lr=state.lr, mean_loss=mean_loss, seed=cfg.seed,
                   train_config=asdict(cfg))
        checkpoints.append(ckpt)
        last_good = ckpt
        wall = time.monotonic() - t0
        with open(metrics_path, "a", newline="") as fh:
            csv.writer(fh).writerow([epoch + 1, repr(mean_loss), repr(state.lr), f"{wall:.3f}"])
        log(f"epoch {epoch + 1}/{cfg.epochs} loss {mean_loss:.5f} lr {state.lr:.3g} ({wall:.0f}s)")
    return TrainResult(model, checkpoints, losses)


# --------------------------------------------------------------------------- self-improvement

def self_improve(instances: Sequence, model: LehdModel, rrc_iters: int, seed: int = 0,
                 log: Callable[[str], None] | None = None) -> list[LabeledInstance]:
    """Greedy construction followed by ``rrc_iters`` re-construction steps; the
    results become labels with source ``self_improved``."""
    from .infer import solve_many

    sols = solve_many(instances, model, iters=rrc_iters, seed=seed, log=log)
    return [LabeledInstance(inst, sol, "self_improved") for inst, (sol, _cost) in zip(instances, sols)]
