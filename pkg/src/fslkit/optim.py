"""Gradient-descent optimizers operating in place on parameter tensors.

Each optimizer owns per-parameter auxiliary buffers shaped like the
parameters themselves and a step counter that advances by one per
:meth:`step` call.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .errors import StateError


class Adam:
    """Bias-corrected adaptive-moment estimation.

    Weight decay enters as an additive ``weight_decay * param`` term on the
    gradient before the moment updates. Defaults: ``lr=1e-4``,
    ``betas=(0.9, 0.999)``, ``eps=1e-8``, ``weight_decay=5e-4``.
    """

    def __init__(
        self,
        params: list[Tensor],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 5e-4,
    ):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                raise StateError("parameter has no gradient; run backward first")
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


class SGD:
    """Momentum stochastic gradient descent: ``v = mu*v + g``,
    ``param -= lr*v``. Defaults: ``lr=2e-4``, ``momentum=0.9``."""

    def __init__(
        self,
        params: list[Tensor],
        lr: float = 2e-4,
        momentum: float = 0.9,
        weight_decay: float = 0.0,
    ):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def step(self) -> None:
        self.step_count += 1
        for p, vel in zip(self.params, self._velocity):
            if p.grad is None:
                raise StateError("parameter has no gradient; run backward first")
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            vel *= self.momentum
            vel += g
            p.data -= self.lr * vel
