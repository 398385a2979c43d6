from typing import Callable, Sequence

import numpy as np

from src.nn.layers import ParamBlock


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def grad_check(
    closure: Callable[[bool], float],
    params: Sequence[ParamBlock],
    epsilon: float = 1e-6,
) -> float:
    """
    Compare analytic gradients against central differences, scalar by scalar.

    `closure(compute_grads)` must return the scalar loss and, when
    `compute_grads` is True, accumulate dL/dparam into each block's `grad`.
    Returns the worst relative error; grads are left zeroed.
    """
    for p in params:
        p.zero_grad()
    closure(True)
    analytic = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.value.reshape(-1)
        a_flat = a.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + epsilon
            plus = closure(False)
            flat[k] = orig - epsilon
            minus = closure(False)
            flat[k] = orig
            numeric = (plus - minus) / (2.0 * epsilon)
            worst = max(worst, relative_error(float(a_flat[k]), numeric))
    for p in params:
        p.zero_grad()
    return worst
