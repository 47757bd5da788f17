"""Central finite-difference gradient checking."""
from __future__ import annotations

import numpy as np

from .autograd import Tape, backward


_STENCILS = {
    2: ((1, 0.5), (-1, -0.5)),
    4: ((2, -1 / 12), (1, 8 / 12), (-1, -8 / 12), (-2, 1 / 12)),
}


def finite_difference_check(f, params, step=1e-5, samples_per_param=8, rng=None, floor=1e-6,
                            order=2):
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` takes no arguments and returns a scalar :class:`Tensor` computed from
    ``params``.  Up to ``samples_per_param`` coordinates of each parameter are
    probed.  Returns the largest relative discrepancy, using
    ``max(|analytic|, |numeric|, floor)`` as the denominator.  The floor keeps
    structurally zero gradients (e.g. attention key biases, which softmax
    ignores) from turning round-off in the difference quotient into a large
    ratio.  ``order=4`` uses the five-point stencil, which tolerates a larger
    step and so suffers less round-off.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if order not in _STENCILS:
        raise ValueError("order must be 2 or 4")
    rng = np.random.default_rng(0) if rng is None else rng
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    backward(tape, loss)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= samples_per_param else rng.choice(n, samples_per_param, replace=False)
        for i in coords:
            orig = flat[i]
            numeric = 0.0
            for k, w in _STENCILS[order]:
                flat[i] = orig + k * step
                numeric += w * float(f().data)
            flat[i] = orig
            numeric /= step
            a = float(grad.reshape(-1)[i])
            denom = max(abs(a), abs(numeric), floor)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
