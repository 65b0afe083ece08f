"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from lbnet.engine.tensor import Tensor, backward, no_grad
from lbnet.errors import UsageError


def check_gradients(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
                    coords: Optional[int] = None, seed: int = 0) -> float:
    """Compare ``d f / d x`` from :func:`backward` with central differences.

    ``f`` must return a scalar tensor.  It may read ``x`` through its argument
    or through a closure (e.g. when ``x`` is a model parameter); ``x.data`` is
    perturbed in place and restored afterwards.

    Args:
        f: scalar-valued differentiable function.
        x: the tensor to differentiate with respect to.
        h: finite-difference step.
        coords: probe only this many randomly chosen coordinates (all when None).
        seed: RNG seed for coordinate sampling.

    Returns:
        ``max |analytic - numeric| / max(1, |analytic|)`` over probed coordinates.
    """
    saved_flag, saved_grad = x.requires_grad, x.grad
    x.requires_grad, x.grad = True, None
    try:
        out = f(x)
        if out.data.size != 1:
            raise UsageError(f"check_gradients needs a scalar function, got shape {out.shape}")
        backward(out)
        analytic = np.zeros(x.shape) if x.grad is None else x.grad.copy()
    finally:
        x.requires_grad, x.grad = saved_flag, saved_grad

    flat = x.data.reshape(-1)
    if coords is None or coords >= flat.size:
        probe = np.arange(flat.size)
    else:
        probe = np.random.default_rng(seed).choice(flat.size, size=coords, replace=False)
    analytic = analytic.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in probe:
            orig = flat[i]
            flat[i] = orig + h
            fp = f(x).item()
            flat[i] = orig - h
            fm = f(x).item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(analytic[i])))
    return worst
