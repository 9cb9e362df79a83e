"""Central-difference verification of analytic gradients.

Runs any closure that maps a set of parameters to a scalar loss twice per
probe coordinate and compares against the tape's gradient. Used at float64
where central differences resolve ~1e-10 relative error, far below the 1e-5
acceptance threshold.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Parameter, backward, zero_grads


def grad_check(
    loss_fn: Callable[[], "object"],
    params: Sequence[Parameter],
    h: float = 1e-5,
    max_coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
    zero_floor: float = 1e-8,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Per coordinate: |analytic - fd| / max(|analytic|, |fd|, 1e-12), except
    that coordinates where both magnitudes fall below `zero_floor` count as
    zero error (a vanishing gradient is pure FD rounding noise; a constant
    closure therefore reports 0). `loss_fn` must re-run the forward pass
    from the current parameter values and return the scalar loss tensor.
    `max_coords_per_param` probes a random coordinate subset of big tensors.
    FD values that come back non-finite count as errors of +inf.
    """
    zero_grads(params)
    loss = loss_fn()
    backward(loss)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = range(n)
        gflat = g.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            hi = float(loss_fn().data)
            flat[i] = orig - h
            lo = float(loss_fn().data)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * h)
            a = float(gflat[i])
            if not np.isfinite(numeric):
                return float("inf")
            if max(abs(a), abs(numeric)) < zero_floor:
                continue
            err = abs(numeric - a) / max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, err)
    return worst


def finite_difference_check(
    loss_fn: Callable[[], "object"],
    params: Sequence[Parameter],
    h: float = 1e-6,
    max_coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max absolute analytic-vs-central-difference gap (see grad_check)."""
    zero_grads(params)
    loss = loss_fn()
    backward(loss)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = range(n)
        gflat = g.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            hi = float(loss_fn().data)
            flat[i] = orig - h
            lo = float(loss_fn().data)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * h)
            worst = max(worst, abs(numeric - float(gflat[i])))
    return worst
