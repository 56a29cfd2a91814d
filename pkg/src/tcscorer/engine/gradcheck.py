"""Central-difference gradient checking against the tape."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, mul, sum_all


def finite_diff_check(op, input_tensor, h=1e-3, seed=0):
    """Max relative error between tape and numeric gradients of op(x).

    Non-scalar outputs are reduced to a scalar with a fixed seeded random
    projection rather than a plain sum: several ops (softmax, batch norm)
    have constant output sums, which would make the analytic gradient
    identically zero and the check meaningless.

    The numeric side perturbs one element at a time with central
    differences at step ``h``. The returned error is the largest absolute
    deviation between the two gradients scaled by the largest analytic
    component: ``max|analytic - numeric| / max(max|analytic|, 1e-6)``.
    """
    x = Tensor(input_tensor.data.copy() if isinstance(input_tensor, Tensor)
               else input_tensor, requires_grad=True)

    probe_out = op(x)
    if probe_out.size == 1:
        projection = None
    else:
        # Magnitudes bounded away from zero, and a draw that cannot
        # coincide with a standard-normal test input (batch norm has a
        # null direction along the input itself, which would collapse the
        # error scale).
        prng = np.random.default_rng(seed + 0x9E3779B9)
        projection = (
            prng.uniform(0.5, 1.5, size=probe_out.shape)
            * prng.choice([-1.0, 1.0], size=probe_out.shape)
        ).astype(np.float32)

    def scalarize(out):
        if projection is None:
            return out
        return sum_all(mul(out, Tensor(projection)))

    loss = scalarize(probe_out)
    loss.backward()
    analytic = x.grad.astype(np.float64).ravel()

    def f(values):
        result = op(Tensor(values)).data.astype(np.float64)
        if projection is None:
            return float(result)
        # float64 accumulation so the difference quotient is not drowned
        # by summation rounding; the op itself still ran in float32.
        return float((result * projection).sum())

    flat = x.data.ravel()
    numeric = np.empty_like(analytic)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(x.data)
        flat[i] = orig - h
        lo = f(x.data)
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * h)

    scale = max(float(np.abs(analytic).max()), 1e-6)
    return float(np.max(np.abs(analytic - numeric)) / scale)
