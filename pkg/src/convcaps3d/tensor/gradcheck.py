from __future__ import annotations

from typing import Callable

import numpy as np

from .core import Tensor, backward, no_grad


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Largest relative error between backprop and central differences.

    The error per entry is ``|a - d| / max(|a|, |d|, 1e-8)``. ``x`` must be
    float64 and is perturbed in place, so ``f`` may close over other tensors
    that share it (e.g. a network parameter). With ``max_entries`` only a
    random subset of entries is probed.
    """
    if x.dtype != np.float64:
        raise TypeError("grad_check needs a float64 tensor")
    x.requires_grad = True
    saved_grad, x.grad = x.grad, None
    backward(f(x))
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = saved_grad

    flat = x.data.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and max_entries < flat.size:
        idx = np.sort(np.random.default_rng(seed).choice(flat.size, max_entries, replace=False))
    worst = 0.0
    a_flat = analytic.reshape(-1)
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(x).data)
            flat[i] = orig - eps
            lo = float(f(x).data)
            flat[i] = orig
            numeric = (hi - lo) / (2 * eps)
            a = float(a_flat[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
