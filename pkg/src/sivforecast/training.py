"""Mini-batch Adam training with early stopping, plus the resampling baselines."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import model as M
from . import nn
from .transform import DataError, WindowSet


class TrainingAborted(FloatingPointError):
    def __init__(self, epoch: int, batch: int, log: TrainLog | None = None):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.log = log


@dataclass
class TrainConfig:
    lr: float = 0.01
    weight_decay: float = 1e-7
    batch_size: int = 64
    min_epochs: int = 50
    patience: int | None = 10  # None: never stop early
    max_epochs: int = 200
    seed: int = 0
    update_matching: bool = True

    def __post_init__(self):
        if self.lr <= 0 or self.weight_decay < 0 or self.batch_size < 1:
            raise ValueError(f"invalid training config: {self}")
        if self.min_epochs < 0 or self.max_epochs < 1:
            raise ValueError(f"invalid epoch bounds: {self}")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be positive or None")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    updates: int


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = math.inf
    checkpoint: str | None = None
    phase: str = "train"

    @property
    def updates(self) -> int:
        return self.records[-1].updates if self.records else 0

    def write(self, path: str | Path) -> None:
        with Path(path).open("w") as fh:
            for r in self.records:
                fh.write(json.dumps({**asdict(r), "phase": self.phase}) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> TrainLog:
        log = cls()
        for line in Path(path).read_text().splitlines():
            rec = json.loads(line)
            log.phase = rec.pop("phase", "train")
            log.records.append(EpochRecord(**rec))
        if log.records:
            best = min(log.records, key=lambda r: (r.val_loss, r.epoch))
            log.best_epoch, log.best_val = best.epoch, best.val_loss
        return log


def batches_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def evaluate_loss(m: M.LinkedModel, ws: WindowSet, batch_size: int = 512) -> float:
    """Full-horizon MSE over ``ws`` in scaled units."""
    preds = M.predict(m, ws.inputs, batch_size)
    return float(np.mean((preds - ws.labels) ** 2))


def train(m: M.LinkedModel, train_ws: WindowSet, val_ws: WindowSet, cfg: TrainConfig,
          phase: str = "train", adam: nn.AdamState | None = None,
          updates_offset: int = 0) -> tuple[M.LinkedModel, TrainLog]:
    """Train ``m`` in place and restore the parameters with the lowest validation loss."""
    if len(train_ws) == 0:
        raise DataError("empty training set")
    if len(val_ws) == 0:
        raise DataError("empty validation set")
    params = m.parameters()
    adam = adam or nn.AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    log = TrainLog(phase=phase)
    best = m.snapshot()
    updates = updates_offset
    n = len(train_ws)
    X, Y = train_ws.inputs, train_ws.labels
    for epoch in range(cfg.max_epochs):
        rng = np.random.default_rng([cfg.seed, epoch, _phase_id(phase)])
        order = rng.permutation(n)
        total = 0.0
        for b, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            m.zero_grad()
            with ad.Tape():
                preds = M.forward(m, X[idx, :, 0], X[idx, :, 1:]).preds
                loss = ad.mse(preds, ad.DArray(Y[idx]))
                value = float(loss.data)
                if not math.isfinite(value):
                    raise TrainingAborted(epoch, b, log)
                ad.backward(loss)
            nn.adam_step(adam, params)
            updates += 1
            total += value * len(idx)
        val = evaluate_loss(m, val_ws)
        if not math.isfinite(val):
            raise TrainingAborted(epoch, -1, log)
        log.records.append(EpochRecord(epoch, total / n, val, updates))
        if val < log.best_val:
            log.best_val, log.best_epoch = val, epoch
            best = m.snapshot()
        if (cfg.patience is not None and epoch + 1 >= cfg.min_epochs
                and epoch - log.best_epoch >= cfg.patience):
            break
    m.load(best)
    return m, log


def _phase_id(phase: str) -> int:
    return {"train": 0, "siv": 1, "full": 2}.get(phase, 3)


# --------------------------------------------------------- update matching

def match_updates(reference_updates: int, phase_batches: list[int],
                  cfg: TrainConfig, phase_min_epochs: list[int] | None = None) -> list[int]:
    """Minimum epochs per phase so a baseline's minimum update count equals the reference's.

    ``phase_batches`` holds batches per epoch for each phase. Phases keep
    their relative share of the original minimum.
    """
    if not cfg.update_matching:
        return list(phase_min_epochs or [cfg.min_epochs] * len(phase_batches))
    mins = phase_min_epochs or [cfg.min_epochs] * len(phase_batches)
    planned = sum(e * b for e, b in zip(mins, phase_batches))
    if planned == 0:
        return list(mins)
    factor = reference_updates / planned
    out = [max(1, round(e * factor)) for e in mins]
    # put the rounding remainder on the last phase
    rest = reference_updates - sum(e * b for e, b in zip(out[:-1], phase_batches[:-1]))
    out[-1] = max(1, round(rest / phase_batches[-1]))
    return out


# -------------------------------------------------------------- resampling

def _siv_subset(ws: WindowSet) -> WindowSet:
    sub = ws.with_siv_window()
    return sub


def train_siv_initialize(m: M.LinkedModel, train_ws: WindowSet, val_ws: WindowSet,
                         cfg: TrainConfig, reference_updates: int | None = None
                         ) -> tuple[M.LinkedModel, list[TrainLog]]:
    """Train on SIV windows only, then on every window."""
    return _two_phase(m, train_ws, val_ws, cfg, siv_first=True,
                      reference_updates=reference_updates)


def train_siv_finetune(m: M.LinkedModel, train_ws: WindowSet, val_ws: WindowSet,
                       cfg: TrainConfig, reference_updates: int | None = None
                       ) -> tuple[M.LinkedModel, list[TrainLog]]:
    """Train on every window, then fine-tune on SIV windows only."""
    return _two_phase(m, train_ws, val_ws, cfg, siv_first=False,
                      reference_updates=reference_updates)


def _two_phase(m, train_ws, val_ws, cfg, siv_first, reference_updates):
    sub_train = _siv_subset(train_ws)
    if len(sub_train) == 0:
        raise DataError("no training window contains a nonzero SIV")
    sub_val = _siv_subset(val_ws)
    if len(sub_val) == 0:
        sub_val = val_ws
    phases = [("siv", sub_train, sub_val), ("full", train_ws, val_ws)]
    if not siv_first:
        phases.reverse()
    mins = [cfg.min_epochs, cfg.min_epochs]
    if reference_updates is not None:
        nb = [batches_per_epoch(len(p[1]), cfg.batch_size) for p in phases]
        mins = match_updates(reference_updates, nb, cfg, mins)
    logs = []
    updates = 0
    for (name, tr, va), min_e in zip(phases, mins):
        pcfg = replace(cfg, min_epochs=min_e, max_epochs=max(cfg.max_epochs, min_e))
        m, log = train(m, tr, va, pcfg, phase=name, updates_offset=updates)
        updates = log.updates
        logs.append(log)
    return m, logs
