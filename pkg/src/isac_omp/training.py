"""Mini-batch training of the transformer and its cascade."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tape, adam_step, backward
from .scenario import EchoSample, ScenarioConfig, draw_sample

log = logging.getLogger(__name__)

__all__ = ["TrainResult", "is_heldout", "train_indices", "heldout_indices", "default_lr_scale", "sample_loss", "evaluate_loss", "train"]


def is_heldout(index: int) -> bool:
    """10% held-out split by index partition."""
    return index % 10 == 9


def train_indices(start: int = 0):
    i = start
    while True:
        if not is_heldout(i):
            yield i
        i += 1


def heldout_indices(n: int, start: int = 0) -> list[int]:
    return [start + 10 * k + 9 for k in range(n)]


@dataclass
class TrainResult:
    steps: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    heldout_loss: list = field(default_factory=list)

    def rows(self):
        return list(zip(self.steps, self.train_loss, self.heldout_loss))


def default_lr_scale(params, factor: float = 1e-2) -> dict:
    """Slow down the grid-value multipliers ``lam_V1_*``.

    They scale whole grids (hundreds of metres for range), so a step the
    size of the base learning rate would shift every estimate by far more
    than a grid cell.
    """
    return {p.name: factor for p in params if p.name.rsplit(".", 1)[-1].startswith("lam_V1_")}


def sample_loss(model, sample: EchoSample, record: bool = True):
    """Scalar training loss of one sample; returns ``(loss_value, grads)``."""
    with Tape() as tape:
        loss = model.loss(sample)
        if not record:
            return float(loss.data), None
        grads = backward(tape, loss)
    return float(loss.data), grads


def evaluate_loss(model, samples) -> float:
    return float(np.mean([float(ad._data(model.loss(s))) for s in samples]))


def train(
    model,
    config: ScenarioConfig,
    steps: int,
    batch: int,
    lr: float,
    heldout: list[EchoSample],
    eval_every: int = 100,
    callback: Callable | None = None,
    start_index: int = 0,
    clip: float | None = None,
    cosine: bool = False,
    keep_best: bool = False,
    lr_scale: dict | None = None,
) -> TrainResult:
    """Adam on the model's ``loss(sample)``, gradients averaged over the batch.

    Training samples stream from the non-held-out indices of ``config``'s
    master seed, so a run is reproducible from ``(config, steps, batch)``.
    ``clip`` bounds the global gradient norm, ``cosine`` anneals the learning
    rate to zero, and ``keep_best`` restores the parameters of the evaluation
    with the lowest held-out loss. ``lr_scale`` maps parameter names to
    learning-rate multipliers; by default :func:`default_lr_scale` is used.
    """
    params = model.params()
    state = AdamState(lr=lr, lr_scale=default_lr_scale(params) if lr_scale is None else dict(lr_scale))
    best = (float("inf"), None)
    stream = train_indices(start_index)
    result = TrainResult()
    result.steps.append(0)
    result.train_loss.append(float("nan"))
    result.heldout_loss.append(evaluate_loss(model, heldout))
    log.info("step 0 heldout %.5f", result.heldout_loss[-1])
    if keep_best:
        best = (result.heldout_loss[-1], [p.value.copy() for p in params])
    running = []
    for step in range(1, steps + 1):
        for p in params:
            p.zero_grad()
        acc: dict[str, np.ndarray] = {}
        losses = []
        for _ in range(batch):
            s = draw_sample(config, next(stream))
            val, grads = sample_loss(model, s)
            losses.append(val)
            for k, g in grads.items():
                acc[k] = acc[k] + g if k in acc else g.copy()
        for k in acc:
            acc[k] /= batch
        if clip is not None:
            norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in acc.values())))
            if norm > clip:
                for k in acc:
                    acc[k] *= clip / norm
        if cosine:
            state.lr = 0.5 * lr * (1.0 + np.cos(np.pi * (step - 1) / steps))
        adam_step(params, acc, state)
        running.append(float(np.mean(losses)))
        if step % eval_every == 0 or step == steps:
            result.steps.append(step)
            result.train_loss.append(float(np.mean(running)))
            result.heldout_loss.append(evaluate_loss(model, heldout))
            running = []
            log.info("step %d train %.5f heldout %.5f", step, result.train_loss[-1], result.heldout_loss[-1])
            if keep_best and result.heldout_loss[-1] < best[0]:
                best = (result.heldout_loss[-1], [p.value.copy() for p in params])
            if callback is not None:
                callback(step, result)
    if keep_best and best[1] is not None:
        for p, v in zip(params, best[1]):
            p.value[...] = v
    return result
