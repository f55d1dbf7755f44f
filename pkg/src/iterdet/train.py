"""Training loop for the history-aware detector."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Sequence

import numpy as np

from . import detector as det
from . import nn
from .iterative import make_training_example

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 2
    lr: float = 1e-3
    lr_milestones: tuple = (14, 18)  # epochs after which lr is multiplied by lr_gamma
    lr_gamma: float = 0.1
    history_jitter: float = 0.05  # relative noise on history boxes, see make_training_example
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.lr_milestones, list):
            object.__setattr__(self, "lr_milestones", tuple(self.lr_milestones))
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0 or not self.lr_gamma > 0:
            raise ValueError(f"invalid training schedule {self}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for the 0-based ``epoch``."""
        return self.lr * self.lr_gamma ** sum(1 for m in self.lr_milestones if epoch >= m)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainState:
    params: det.DetectorParams
    optimizer: nn.OptimizerState
    rng: np.random.Generator
    epoch: int = 0  # completed epochs


def new_state(det_config: det.DetectorConfig, train_config: TrainConfig) -> TrainState:
    rng = np.random.default_rng(train_config.seed)
    params = det.init_params(det_config, rng)
    return TrainState(params, nn.OptimizerState(lr=train_config.lr), rng)


def make_batch(scenes: Sequence, rng: np.random.Generator, history_jitter: float = 0.0):
    images, hists, targets = [], [], []
    for scene in scenes:
        image, history, new = make_training_example(scene, rng, history_jitter=history_jitter)
        images.append(image)
        hists.append(history.as_float()[None])
        targets.append(new)
    return np.stack(images), np.stack(hists), targets


def train_step(state: TrainState, scenes: Sequence, det_config: det.DetectorConfig,
               history_jitter: float = 0.0) -> float:
    images, hists, targets = make_batch(scenes, state.rng, history_jitter)
    loss, grads = det.batch_loss_and_grads(images, hists, targets, state.params, det_config)
    nn.adam_step(state.params.tensors(), grads, state.optimizer)
    return loss


def run_epoch(state: TrainState, scenes: Sequence, det_config: det.DetectorConfig,
              batch_size: int, history_jitter: float = 0.0) -> float:
    """One shuffled pass; returns the mean batch loss."""
    order = state.rng.permutation(len(scenes))
    losses = []
    for start in range(0, len(order), batch_size):
        batch = [scenes[i] for i in order[start:start + batch_size]]
        loss = train_step(state, batch, det_config, history_jitter)
        if not math.isfinite(loss):
            raise nn.NonFiniteError(f"loss diverged at epoch {state.epoch + 1}")
        losses.append(loss)
    state.epoch += 1
    return float(np.mean(losses)) if losses else 0.0


def train(state: TrainState, scenes: Sequence, det_config: det.DetectorConfig,
          train_config: TrainConfig,
          on_epoch: Callable[[int, float], None] | None = None) -> list[float]:
    """Train until ``train_config.epochs`` epochs are complete (resumes from ``state.epoch``)."""
    if not scenes:
        raise ValueError("no training scenes")
    losses = []
    while state.epoch < train_config.epochs:
        state.optimizer.lr = train_config.lr_at(state.epoch)
        loss = run_epoch(state, scenes, det_config, train_config.batch_size,
                         train_config.history_jitter)
        losses.append(loss)
        log.info("epoch %d loss %.5f", state.epoch, loss)
        if on_epoch is not None:
            on_epoch(state.epoch, loss)
    return losses


def save_state(path, state: TrainState, det_config: det.DetectorConfig,
               train_config: TrainConfig | None = None) -> None:
    header = {"detector": det_config.to_dict()}
    if train_config is not None:
        header["train"] = train_config.to_dict()
    extra = {"epoch": state.epoch, "rng": state.rng.bit_generator.state}
    nn.save_checkpoint(path, state.params.tensors(), header, state.optimizer, extra)


def load_state(path) -> tuple[TrainState, det.DetectorConfig, dict]:
    """Restore parameters, optimizer and RNG so training resumes bit-exactly."""
    tensors, header, opt, extra = nn.load_checkpoint(path)
    if "detector" not in header:
        raise ValueError(f"{path}: checkpoint header has no detector config")
    det_config = det.DetectorConfig.from_dict(header["detector"])
    params = det.params_from_tensors(det_config, tensors)
    rng = np.random.default_rng()
    if "rng" in extra:
        rng.bit_generator.state = extra["rng"]
    state = TrainState(params, opt or nn.OptimizerState(), rng, int(extra.get("epoch", 0)))
    return state, det_config, header
