"""SGD with momentum/weight decay and learning-rate schedules."""

import math
from dataclasses import dataclass, field

import numpy as np

from plmlab.errors import DomainError


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    velocity: list = field(default_factory=list)

    def __post_init__(self):
        if self.lr < 0:
            raise DomainError("learning rate must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise DomainError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise DomainError("weight decay must be nonnegative")


def sgd_step(state, params, grads):
    """In-place update ``v = m*v + g + wd*p; p -= lr*v`` for each parameter.

    ``params`` are Tensors (their ``.data`` is updated); ``grads`` are arrays
    or ``None`` (treated as zero).
    """
    if not state.velocity:
        state.velocity = [np.zeros_like(p.data) for p in params]
    for p, g, v in zip(params, grads, state.velocity):
        d = p.data * state.weight_decay if state.weight_decay else np.zeros_like(p.data)
        if g is not None:
            d = d + g
        v *= state.momentum
        v += d
        p.data -= state.lr * v
    return params


class SGD:
    def __init__(self, params, lr, momentum=0.0, weight_decay=0.0):
        self.params = list(params)
        self.state = OptimizerState(lr, momentum, weight_decay)

    @property
    def lr(self):
        return self.state.lr

    @lr.setter
    def lr(self, value):
        self.state.lr = value

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        sgd_step(self.state, self.params, [p.grad for p in self.params])


def lr_schedule(kind, epoch, total_epochs, lr0, milestones=(), factor=10.0):
    """Learning rate for ``epoch`` (0-based).

    ``cosine`` anneals ``lr0 * 0.5 * (1 + cos(pi * epoch / total))``;
    ``step`` divides by ``factor`` once for every milestone already reached.
    ``constant`` returns ``lr0``.
    """
    if not 0 <= epoch < total_epochs:
        raise DomainError(f"epoch {epoch} outside [0, {total_epochs})")
    if kind == "cosine":
        return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))
    if kind == "step":
        passed = sum(1 for m in milestones if epoch >= m)
        return lr0 / factor ** passed
    if kind == "constant":
        return lr0
    raise DomainError(f"unknown schedule {kind!r}")
