"""Finite-difference verification of analytic gradients.

Central differences in 64-bit are the reference: for parameter element v,
numeric = (f(v+h) - f(v-h)) / 2h. The reported figure is the worst relative
error max |analytic - numeric| / max(1e-8, |analytic| + |numeric|) over all
checked elements. Large errors are returned, not raised.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


def gradient_check(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    step: float = 1e-5,
    subsample: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Compare analytic gradients of `fn()` against central differences.

    `fn` must rebuild the forward pass from scratch on every call and return
    a scalar Tensor. `tensors` are the leaves to check (parameters and any
    requires_grad inputs). With `subsample` set, at most that many elements
    per tensor are probed, chosen by a seeded generator; otherwise every
    element is probed.
    """
    for t in tensors:
        if t.dtype != np.float64:
            raise ValueError("gradient_check requires 64-bit tensors")
        t.zero_grad()

    loss = fn()
    loss.backward()
    analytic = [None if t.grad is None else t.grad.copy() for t in tensors]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, grad in zip(tensors, analytic):
        if grad is None:
            continue
        flat = t.data.reshape(-1)
        gflat = grad.reshape(-1)
        n = flat.size
        if subsample is not None and subsample < n:
            indices = rng.choice(n, size=subsample, replace=False)
        else:
            indices = range(n)
        for i in indices:
            saved = flat[i]
            flat[i] = saved + step
            f_plus = fn().item()
            flat[i] = saved - step
            f_minus = fn().item()
            flat[i] = saved
            numeric = (f_plus - f_minus) / (2.0 * step)
            worst = max(worst, relative_error(float(gflat[i]), numeric))
    return worst
