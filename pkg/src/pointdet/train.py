"""SGD training loop with deterministic data order and resumable state.

The optimizer is plain momentum SGD with weight decay; the learning rate
starts at ``lr`` and drops by 10x at 2/3 and 8/9 of the schedule.  Batches
are drawn from a per-epoch permutation derived from the seed, and optimizer
state (momentum buffers, iteration counter) rides along in the checkpoint,
so an interrupted run resumed from its last checkpoint finishes bit-for-bit
identical to an uninterrupted one.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .data import image_to_input
from .model import HeadConfig, Model, compute_losses
from .autodiff import backward

logger = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainingDiverged",
    "SgdMomentum",
    "Trainer",
    "train_run",
    "CHECKPOINT_NAME",
    "LOSS_LOG_NAME",
]

CHECKPOINT_NAME = "checkpoint.bin"
LOSS_LOG_NAME = "loss_log.jsonl"
OPT_PREFIX = "opt.momentum."
META_ITER = "meta.iteration"


class TrainingDiverged(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 3600
    batch_size: int = 2
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    checkpoint_every: int = 1200
    seed: int = 0

    def __post_init__(self) -> None:
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    def lr_at(self, iteration: int) -> float:
        """Step schedule: 10x decays at 2/3 and 8/9 of the run."""
        frac = iteration / self.iterations
        if frac >= 8.0 / 9.0:
            return self.lr * 0.01
        if frac >= 2.0 / 3.0:
            return self.lr * 0.1
        return self.lr


class SgdMomentum:
    """Momentum SGD over the model's named parameters."""

    def __init__(self, model: Model, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.velocity = {name: np.zeros_like(p.data) for name, p in model.params.items()}

    def step(self, lr: float, grad_scale: float = 1.0) -> None:
        for name, p in self.model.params.items():
            if p.grad is None:
                continue
            g = p.grad * grad_scale + self.cfg.weight_decay * p.data
            v = self.velocity[name]
            v *= self.cfg.momentum
            v += g
            p.data = p.data - lr * v


class Trainer:
    """Owns the model, optimizer state, and the data order."""

    def __init__(self, model: Model, train_items, cfg: TrainConfig):
        if not train_items:
            raise ValueError("training split is empty")
        self.model = model
        self.items = train_items  # list of (image_id, GtScene, uint8 image)
        self.cfg = cfg
        self.optimizer = SgdMomentum(model, cfg)
        self.iteration = 0
        self._inputs = [image_to_input(img) for _, _, img in train_items]

    def _batch_indices(self, iteration: int) -> list[int]:
        n = len(self.items)
        b = self.cfg.batch_size
        start = iteration * b
        epoch = start // n
        perm = np.random.default_rng([self.cfg.seed, 7, epoch]).permutation(n)
        return [int(perm[(start + k) % n]) for k in range(b)]

    def run_iteration(self) -> dict:
        """One optimizer step over a batch; returns the loss components."""
        cfg = self.cfg
        self.model.zero_grad()
        merged: dict[str, float] = {}
        for idx in self._batch_indices(self.iteration):
            _, scene, _ = self.items[idx]
            forwards = self.model.forward(self._inputs[idx])
            breakdown = compute_losses(self.model, forwards, scene)
            if not math.isfinite(breakdown.components["total"]):
                raise TrainingDiverged(
                    f"non-finite loss at iteration {self.iteration}: "
                    f"{breakdown.components}"
                )
            backward(breakdown.total)
            for key, value in breakdown.components.items():
                merged[key] = merged.get(key, 0.0) + value / cfg.batch_size
        lr = cfg.lr_at(self.iteration)
        self.optimizer.step(lr, grad_scale=1.0 / cfg.batch_size)
        self.iteration += 1
        merged["iteration"] = self.iteration
        merged["lr"] = lr
        return merged

    # ------------------------------------------------------------- state i/o
    def state_tensors(self) -> dict[str, np.ndarray]:
        tensors = self.model.state_arrays()
        for name, v in self.optimizer.velocity.items():
            tensors[OPT_PREFIX + name] = v.copy()
        tensors[META_ITER] = np.array([self.iteration], dtype=np.float64)
        return tensors

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        self.model.load_state({k: v for k, v in tensors.items() if k in self.model.params})
        for name in self.optimizer.velocity:
            key = OPT_PREFIX + name
            if key in tensors:
                self.optimizer.velocity[name] = tensors[key].copy()
        if META_ITER in tensors:
            self.iteration = int(tensors[META_ITER][0])


def train_run(
    model: Model,
    train_items,
    cfg: TrainConfig,
    out_dir,
    resume: bool = False,
) -> Path:
    """Train to completion, logging per-iteration losses as JSON lines.

    Writes ``checkpoint.bin`` (parameters + optimizer state) under
    ``out_dir`` every ``checkpoint_every`` iterations and at the end, and
    appends one JSON object per iteration to ``loss_log.jsonl``.  With
    ``resume`` the trainer restarts from the saved iteration counter.
    Returns the final checkpoint path.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / CHECKPOINT_NAME
    log_path = out / LOSS_LOG_NAME
    trainer = Trainer(model, train_items, cfg)
    if resume:
        if not ckpt_path.is_file():
            raise FileNotFoundError(f"cannot resume: {ckpt_path} does not exist")
        trainer.load_state_tensors(ckpt.load_tensors(ckpt_path))
        logger.info("resumed from %s at iteration %d", ckpt_path, trainer.iteration)
    mode = "a" if resume else "w"
    with open(log_path, mode, encoding="ascii") as log:
        while trainer.iteration < cfg.iterations:
            row = trainer.run_iteration()
            log.write(json.dumps(row, sort_keys=True) + "\n")
            if (
                trainer.iteration % cfg.checkpoint_every == 0
                or trainer.iteration == cfg.iterations
            ):
                ckpt.save_tensors(ckpt_path, trainer.state_tensors())
    ckpt.save_tensors(ckpt_path, trainer.state_tensors())
    return ckpt_path
