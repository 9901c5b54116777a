"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor


@dataclass
class GradCheckResult:
    """Outcome of checking one parameter tensor."""

    name: str
    max_rel_error: float
    tolerance: float
    passed: bool

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"{self.name}: max_rel_error={self.max_rel_error:.3e} [{status}]"


def finite_diff_gradcheck(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    names: Sequence[str] | None = None,
    rtol: float = 1e-4,
    step: float = 1e-4,
) -> list[GradCheckResult]:
    """Compare analytic gradients of ``fn`` against central differences.

    ``fn`` is a deterministic zero-argument callable that rebuilds its
    computation from ``params`` and returns a scalar tensor. For each
    element the probe step is ``step * max(1, |value|)`` and the relative
    error is ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    Returns one :class:`GradCheckResult` per parameter.
    """
    if names is None:
        names = [f"param{i}" for i in range(len(params))]
    if len(names) != len(params):
        raise ValueError("names must match params in length")

    for p in params:
        p.zero_grad()
    loss = fn()
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ValueError("fn must return a scalar tensor")
    loss.backward()
    analytic = [p.grad.copy() for p in params]

    results = []
    for p, a, name in zip(params, analytic, names):
        numeric = np.empty_like(p.data)
        flat_data = p.data.reshape(-1)
        flat_num = numeric.reshape(-1)
        for i in range(flat_data.size):
            orig = flat_data[i]
            h = step * max(1.0, abs(orig))
            flat_data[i] = orig + h
            f_plus = fn().item()
            flat_data[i] = orig - h
            f_minus = fn().item()
            flat_data[i] = orig
            flat_num[i] = (f_plus - f_minus) / (2.0 * h)
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(numeric)))
        rel = np.abs(a - numeric) / denom
        max_rel = float(rel.max()) if rel.size else 0.0
        results.append(GradCheckResult(name, max_rel, rtol, max_rel < rtol))
    return results
