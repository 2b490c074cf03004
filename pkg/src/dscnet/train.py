"""End-to-end optimization: SGD with momentum and weight decay.

The update per named parameter is

    v     <- momentum * v + grad + weight_decay * param
    param <- param - lr * v

with weight decay applied to convolution weights and recurrent matrices but
not biases.  Training iterates single-image steps over a seed-shuffled
order, cycling when the dataset is exhausted, optionally flipping each
drawn sample horizontally with probability one half.  Given the same seed,
dataset and config, two runs produce bit-identical parameters and logs.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .dsc import DscConfig
from .loss import supervised_losses
from .network import (NetworkConfig, NetworkParams, forward, init_network,
                      save_checkpoint)
from .rng import RandomStream
from .tensor import NumericalFault, Tape
from .data import Sample, hflip


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; earlier checkpoints stay on disk."""

    def __init__(self, iteration: int, last_checkpoint: str | None):
        self.iteration = iteration
        self.last_checkpoint = last_checkpoint
        where = last_checkpoint or "no checkpoint written yet"
        super().__init__(
            f"non-finite loss at iteration {iteration}; last good checkpoint: {where}")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    iterations: int = 2000
    seed: int = 0
    flip_augment: bool = True
    checkpoint_every: int = 500
    variant: str = "dsc"
    stage_channels: tuple = (8, 16, 32, 64)
    mlif_channels: int = 16
    dsc: DscConfig = field(default_factory=DscConfig)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")

    def network_config(self) -> NetworkConfig:
        common = dict(stage_channels=tuple(self.stage_channels),
                      mlif_channels=self.mlif_channels)
        if self.variant == "basic":
            return NetworkConfig(use_dsc=False, **common)
        if self.variant not in ("context", "dsc"):
            raise ValueError(f"unknown variant '{self.variant}'")
        dsc = DscConfig(rounds=self.dsc.rounds,
                        share_attention=self.dsc.share_attention,
                        attention_enabled=(self.variant == "dsc"
                                           and self.dsc.attention_enabled))
        return NetworkConfig(use_dsc=True, dsc=dsc, **common)


class OptState:
    """Per-parameter velocity buffers, mirroring the parameter names."""

    def __init__(self, params: NetworkParams):
        self.velocity = {name: np.zeros_like(t.data) for name, t in params.named_parameters()}


def _decays(name: str) -> bool:
    return not name.endswith(".bias")


def sgd_step(params: NetworkParams, state: OptState, cfg: TrainConfig) -> None:
    """Apply one momentum update from the gradients stored on the parameters."""
    for name, t in params.named_parameters():
        if t.grad is None:
            raise RuntimeError(f"sgd_step: parameter '{name}' has no gradient")
        v = state.velocity[name]
        v *= cfg.momentum
        v += t.grad
        if cfg.weight_decay and _decays(name):
            v += cfg.weight_decay * t.data
        t.data -= cfg.lr * v


def write_log_csv(rows: list[dict], path) -> None:
    if not rows:
        return
    keys = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for r in rows:
            w.writerow([r[k] if k == "iteration" else f"{r[k]:.8f}" for k in keys])


def train(dataset: list[Sample], cfg: TrainConfig, out_dir: str | None = None,
          dtype=np.float32):
    """Optimize a fresh network on the dataset; returns (params, log_rows).

    When out_dir is given, periodic checkpoints, a final checkpoint and the
    training log CSV are written there.  A non-finite loss aborts with
    :class:`TrainingDiverged`; checkpoints written so far are retained.
    """
    if not dataset:
        raise ValueError("training needs a non-empty dataset")
    root = RandomStream(cfg.seed)
    params = init_network(cfg.network_config(), root.child(0), dtype)
    state = OptState(params)
    order_rng = root.child(1)
    flip_rng = root.child(2)

    order = list(range(len(dataset)))
    order_rng.shuffle(order)

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    last_checkpoint = None
    rows: list[dict] = []

    def flush(with_final: bool) -> None:
        if not out_dir:
            return
        write_log_csv(rows, os.path.join(out_dir, "train_log.csv"))
        if with_final:
            save_checkpoint(params, os.path.join(out_dir, "checkpoint_final.bin"))

    for it in range(1, cfg.iterations + 1):
        sample = dataset[order[(it - 1) % len(order)]]
        if cfg.flip_augment and flip_rng.uniform() < 0.5:
            sample = hflip(sample)

        params.zero_grads()
        tape = Tape()
        try:
            outputs = forward(sample.image, params, tape)
            per_map = supervised_losses(outputs, sample.mask, tape)
        except NumericalFault:
            flush(with_final=False)
            raise TrainingDiverged(it, last_checkpoint) from None
        total = sum(l1 + l2 for _, l1, l2 in per_map)

        row = {"iteration": it, "total_loss": total,
               "l1": sum(l1 for _, l1, _ in per_map),
               "l2": sum(l2 for _, _, l2 in per_map)}
        for name, l1, l2 in per_map:
            row[f"loss_{name}"] = l1 + l2
        rows.append(row)

        if not np.isfinite(total):
            flush(with_final=False)
            raise TrainingDiverged(it, last_checkpoint)

        tape.backward()
        sgd_step(params, state, cfg)

        if out_dir and cfg.checkpoint_every > 0 and it % cfg.checkpoint_every == 0:
            last_checkpoint = os.path.join(out_dir, f"checkpoint_{it:06d}.bin")
            save_checkpoint(params, last_checkpoint)

    flush(with_final=True)
    return params, rows
