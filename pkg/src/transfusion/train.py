"""Adam training loop with best-on-validation selection and checkpointing."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from .model import TransFusionModel, build, forward, l1_loss, model_from_bytes, model_to_bytes
from .tensor import NumericError, backward, concat, no_grad


class OptimizerError(RuntimeError):
    """A gradient was non-finite; the step was aborted."""


@dataclass
class TrainConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps_adam: float = 1e-8
    max_epochs: int = 200
    batch_size: int = 32
    seed: int = 0
    early_stop_patience: int | None = None
    grad_clip: float | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("max_epochs and batch_size must be >= 1")


@dataclass
class EpochStats:
    epoch: int
    train_l1: float
    val_mae: float
    val_mse: float
    is_best: bool


@dataclass
class TrainState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    best_val_mae: float = math.inf
    best_epoch: int = -1
    best_params: dict | None = None
    log: list[EpochStats] = field(default_factory=list)


def protocol_snapshot() -> dict:
    """The training protocol defaults, frozen for the config snapshot test."""
    cfg = TrainConfig()
    return {
        "split_ratios": [8, 1, 1],
        "batch_size": cfg.batch_size,
        "lr": cfg.lr,
        "max_epochs": cfg.max_epochs,
        "optimizer": "adam",
        "betas": list(cfg.betas),
        "eps_adam": cfg.eps_adam,
        "selection": "best_val_mae",
    }


def adam_step(named_params: dict, state: TrainState, cfg: TrainConfig) -> None:
    """One Adam update over all parameters, reading each tensor's .grad.

    m <- b1*m + (1-b1)*g ; v <- b2*v + (1-b2)*g^2 ;
    p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps).
    """
    b1, b2 = cfg.betas
    for name, p in named_params.items():
        if p.grad is None:
            raise OptimizerError(f"parameter {name!r} has no gradient")
        if not np.isfinite(p.grad).all():
            raise OptimizerError(f"non-finite gradient in parameter {name!r}")
    if cfg.grad_clip is not None:
        norm = math.sqrt(sum(float((p.grad**2).sum()) for p in named_params.values()))
        if norm > cfg.grad_clip:
            scale = cfg.grad_clip / norm
            for p in named_params.values():
                p.grad *= scale
    state.t += 1
    t = state.t
    for name, p in named_params.items():
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p.data -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps_adam)


def _subset_mae_mse(model: TransFusionModel, subset: D.Subset, batch_size: int) -> tuple[float, float]:
    abs_err = 0.0
    sq_err = 0.0
    n = 0
    with no_grad():
        for xw, xv, y in D.batches(subset, batch_size):
            for i in range(len(y)):
                pred = forward(model, xw[i], xv[i]).item()
                abs_err += abs(pred - float(y[i]))
                sq_err += (pred - float(y[i])) ** 2
            n += len(y)
    return abs_err / n, sq_err / n


def fit(
    model: TransFusionModel,
    train_set: D.Subset,
    val_set: D.Subset,
    cfg: TrainConfig,
    checkpoint_path=None,
    on_epoch_end=None,
) -> tuple[TransFusionModel, TrainState]:
    """Train with Adam on L1 loss; return the best-on-validation snapshot.

    A checkpoint file, when requested, is rewritten whenever validation MAE
    strictly improves, so an interrupted run still leaves the last best model
    on disk. ``on_epoch_end(epoch, stats)`` is an optional hook.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise D.DataError("train and validation subsets must be nonempty")
    state = TrainState()
    params = model.named_parameters()
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            epoch_losses = []
            for batch_idx, (xw, xv, y) in enumerate(
                D.batches(train_set, cfg.batch_size, shuffle_seed=cfg.seed, epoch=epoch)
            ):
                preds = [forward(model, xw[i], xv[i]) for i in range(len(y))]
                loss = l1_loss(concat(preds, axis=0), y)
                loss_val = loss.item()
                if not math.isfinite(loss_val):
                    raise NumericError(f"loss is not finite at epoch {epoch}, batch {batch_idx}")
                backward(loss)
                adam_step(params, state, cfg)
                model.zero_grads()
                epoch_losses.append(loss_val)
            val_mae, val_mse = _subset_mae_mse(model, val_set, cfg.batch_size)
            is_best = val_mae < state.best_val_mae
            if is_best:
                state.best_val_mae = val_mae
                state.best_epoch = epoch
                state.best_params = model.state_copy()
                if checkpoint_path is not None:
                    save_checkpoint(model, checkpoint_path)
            stats = EpochStats(epoch, float(np.mean(epoch_losses)), val_mae, val_mse, is_best)
            state.log.append(stats)
            if on_epoch_end is not None:
                on_epoch_end(epoch, stats)
            if (
                cfg.early_stop_patience is not None
                and epoch - state.best_epoch >= cfg.early_stop_patience
            ):
                break
    finally:
        model.zero_grads()
    best = build(model.cfg)
    best.load_state(state.best_params)
    return best, state


def write_epoch_log(state: TrainState, path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,train_l1,val_mae,val_mse,is_best\n")
        for s in state.log:
            fh.write(f"{s.epoch},{s.train_l1:.10g},{s.val_mae:.10g},{s.val_mse:.10g},{int(s.is_best)}\n")


def save_checkpoint(model: TransFusionModel, path) -> None:
    """Write the model (config + parameters) as a TFCK checkpoint file."""
    blob = model_to_bytes(model)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path) -> TransFusionModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
