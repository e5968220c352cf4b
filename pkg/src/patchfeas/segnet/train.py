"""Seeded SGD training of the segmentation network."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..archspec import NetworkSpec, propagate_shapes
from .data import NUM_CLASSES, ShapesDataset
from .engine import ModelParams, Network, init_params, softmax_ce_loss

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 8
    seed: int = 0


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)


def pixel_accuracy(net: Network, data: ShapesDataset) -> float:
    if len(data) == 0:
        return float("nan")
    pred = net.predict(data.images)
    return float((pred == data.labels).mean())


def train(spec: NetworkSpec, data: ShapesDataset, val: ShapesDataset | None = None,
          cfg: TrainConfig = TrainConfig(), params: ModelParams | None = None,
          progress=None) -> tuple[ModelParams, History]:
    """SGD with momentum on the mean per-pixel cross-entropy.

    Deterministic for a given seed: initialisation and the per-epoch batch
    order both come from generators derived from ``cfg.seed``.
    """
    if len(data) == 0:
        raise ValueError("empty training set")
    shapes = propagate_shapes(spec).shapes
    if shapes[-1][0] != NUM_CLASSES:
        raise ValueError(f"network must end in {NUM_CLASSES} logit channels")
    params = params.copy() if params is not None else init_params(spec, cfg.seed)
    net = Network(params)
    velocity = [np.zeros_like(t.data) for t in params.tensors()]
    order_rng = np.random.default_rng([cfg.seed, 1])
    history = History()
    n = len(data)
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(n)
        total, batches = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            x = data.images[idx]
            logits, tape = net.forward(x)
            loss, dlogits = softmax_ce_loss(logits, data.labels[idx])
            if not np.isfinite(loss):
                raise DivergenceError(f"loss became {loss} in epoch {epoch + 1}, batch {batches}")
            _, grads = net.backward(tape, dlogits, need_input=False)
            for (w, b), (dw, db) in zip(params.layers, grads):
                w.grad[...] = dw
                b.grad[...] = db
            for t, v in zip(params.tensors(), velocity):
                v *= cfg.momentum
                v += t.grad
                t.data -= np.asarray(cfg.lr * v, dtype=t.data.dtype)
            total += loss
            batches += 1
        history.train_loss.append(total / batches)
        if val is not None and len(val):
            history.val_accuracy.append(pixel_accuracy(net, val))
            log.info("epoch %d loss %.4f val_acc %.4f", epoch + 1, history.train_loss[-1], history.val_accuracy[-1])
        else:
            log.info("epoch %d loss %.4f", epoch + 1, history.train_loss[-1])
        if progress is not None:
            progress(epoch + 1, history)
    return params, history
