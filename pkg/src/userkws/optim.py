"""Adam, a plateau learning-rate scheduler and a loss-based early stopper."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Parameter, warn_frozen


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param, **hyper):
        return cls(np.zeros_like(param.data), np.zeros_like(param.data), **hyper)


def adam_step(param: Parameter, state: AdamState) -> Parameter:
    """Apply one bias-corrected Adam update to ``param`` in place.

    A frozen parameter is left untouched (a ``FrozenParameterWarning`` is
    emitted). A missing gradient counts as zero. With ``param.row_mask`` set,
    moments and values change only on those rows.
    """
    if not param.trainable:
        warn_frozen(param)
        return param
    g = param.grad if param.grad is not None else np.zeros_like(param.data)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    if param.row_mask is None:
        state.m *= b1
        state.m += (1.0 - b1) * g
        state.v *= b2
        state.v += (1.0 - b2) * g * g
        param.data -= (state.lr * (state.m / c1) / (np.sqrt(state.v / c2) + state.eps)).astype(param.data.dtype)
    else:
        rows = param.row_mask
        gr = g[rows]
        state.m[rows] = b1 * state.m[rows] + (1.0 - b1) * gr
        state.v[rows] = b2 * state.v[rows] + (1.0 - b2) * gr * gr
        step = state.lr * (state.m[rows] / c1) / (np.sqrt(state.v[rows] / c2) + state.eps)
        param.data[rows] -= step.astype(param.data.dtype)
    return param


class Adam:
    """Adam over a list of parameters; state lives in each parameter's slot."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self._lr = lr
        for p in self.params:
            p.state = AdamState.for_param(p, lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    @property
    def lr(self):
        return self._lr

    @lr.setter
    def lr(self, value):
        self._lr = value
        for p in self.params:
            p.state.lr = value

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p in self.params:
            if p.trainable:
                adam_step(p, p.state)


@dataclass
class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without
    improvement of the monitored loss; never go below ``min_lr``."""

    lr: float
    factor: float = 0.5
    patience: int = 3
    min_lr: float = 1e-6
    best: float = math.inf
    bad_epochs: int = 0

    def step(self, loss: float) -> float:
        if loss < self.best:
            self.best = loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.min_lr, min(self.lr, self.lr * self.factor))
                self.bad_epochs = 0
        return self.lr


@dataclass
class EarlyStopping:
    """Loss-based early stopping: stop once ``patience`` consecutive epochs fail
    to improve on the best loss seen so far."""

    patience: int
    best: float = math.inf
    best_epoch: int = -1
    bad_epochs: int = 0
    history: list = field(default_factory=list)

    def update(self, epoch: int, loss: float) -> bool:
        """Record ``loss`` for ``epoch``; returns True if it is a new best."""
        self.history.append(loss)
        if loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = loss, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience
