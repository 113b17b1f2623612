"""AdamW, the epoch loop, and evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .config import LossWeights, OptimConfig
from .data import CrowdScene, augment
from .losses import Target, batch_loss
from .metrics import MetricsReport, evaluate_metrics
from .nn import BatchNorm2d, Module

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(named_params, state: AdamWState, cfg: OptimConfig) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Decay is applied to the parameter before the adaptive step, as
    ``theta <- theta - lr * wd * theta``. Parameters without a gradient are
    only decayed.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in named_params:
        if cfg.weight_decay:
            p.data = p.data - (cfg.lr * cfg.weight_decay) * p.data
        g = p.grad
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        v = state.v[name] = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        p.data = (p.data - cfg.lr * update).astype(p.dtype)


@dataclass
class EpochLog:
    epoch: int
    loss: float
    mae: float

    def line(self) -> str:
        return f"epoch={self.epoch} loss={self.loss:.6f} mae={self.mae:.4f}"


def stack_batch(scenes: list[CrowdScene], dtype) -> tuple[T.Tensor, list[Target]]:
    images = np.stack([s.image for s in scenes]).astype(dtype)
    return T.Tensor(images), [Target.from_points(s.points) for s in scenes]


def train(model: Module, scenes: list[CrowdScene], loss: LossWeights, cfg: OptimConfig,
          out_dir: str | Path | None = None,
          on_epoch: Callable[[EpochLog], None] | None = None) -> list[EpochLog]:
    """Seeded shuffle, crop + flip, forward, loss, backward, AdamW; one log entry per epoch.

    The logged MAE is over the augmented training crops seen in that epoch.
    """
    if not scenes:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    state = AdamWState()
    params = list(model.named_parameters())
    dtype = params[0][1].dtype
    log: list[EpochLog] = []
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(scenes))
        losses, errors = [], []
        for start in range(0, len(order), cfg.batch_size):
            batch = [augment(scenes[i], cfg.crop, rng) for i in order[start:start + cfg.batch_size]]
            images, targets = stack_batch(batch, dtype)
            try:
                pred = model(images)
                report = batch_loss(pred, targets, loss)
            except T.NonFiniteError as exc:
                raise TrainingDivergedError(f"epoch {epoch}: non-finite forward pass") from exc
            value = float(report.total.data)
            if not np.isfinite(value):
                raise TrainingDivergedError(f"epoch {epoch}: loss is {value}")
            model.zero_grad()
            report.total.backward()
            adamw_step(params, state, cfg)
            counts = pred.data.reshape(len(batch), -1).sum(axis=1)
            errors.extend(np.abs(counts - [t.count for t in targets]).tolist())
            losses.append(value * len(batch))
        entry = EpochLog(epoch, float(np.sum(losses) / len(scenes)), float(np.mean(errors)))
        log.append(entry)
        logger.info(entry.line())
        if on_epoch is not None:
            on_epoch(entry)
        if out_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(Path(out_dir) / f"checkpoint_epoch{epoch:04d}.bin", model.state_dict())
    model.zero_grad()
    if log:
        recalibrate_batch_norm(model, scenes, cfg.batch_size)
    return log


def _batch_norms(module: Module):
    if isinstance(module, BatchNorm2d):
        yield module
    for _, child in module.children():
        yield from _batch_norms(child)


def recalibrate_batch_norm(model: Module, scenes: list[CrowdScene], batch_size: int = 4) -> None:
    """Replace running statistics with averages over the un-augmented scenes.

    The exponential running average lags the weights while they move quickly,
    so inference-mode outputs drift from training-mode ones. One extra
    forward pass under the final weights fixes that.
    """
    bns = list(_batch_norms(model))
    if not bns:
        return
    saved = [b.momentum for b in bns]
    dtype = model.parameters()[0].dtype
    groups: dict[tuple[int, int], list[CrowdScene]] = {}
    for s in scenes:
        groups.setdefault(s.hw, []).append(s)
    was_training = model.training
    model.train()
    seen = 0
    with T.no_grad():
        for group in groups.values():
            for start in range(0, len(group), batch_size):
                seen += 1
                for b in bns:
                    b.momentum = 1.0 / seen
                model(T.Tensor(np.stack([s.image for s in group[start:start + batch_size]]).astype(dtype)))
    for b, mom in zip(bns, saved):
        b.momentum = mom
    model.train(was_training)


def predict_counts(model: Module, scenes: list[CrowdScene]) -> np.ndarray:
    was_training = model.training
    model.eval()
    dtype = model.parameters()[0].dtype
    counts = []
    with T.no_grad():
        for s in scenes:
            pred = model(T.Tensor(s.image[None].astype(dtype)))
            counts.append(float(pred.data.sum()))
    model.train(was_training)
    return np.array(counts)


def evaluate(model: Module, scenes: list[CrowdScene]) -> MetricsReport:
    """Whole-image evaluation, no augmentation, batch-norm in inference mode."""
    if not scenes:
        raise ValueError("evaluation set is empty")
    return evaluate_metrics(predict_counts(model, scenes), [s.count for s in scenes])
