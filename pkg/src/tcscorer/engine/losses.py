"""Loss functions, built from the tape primitives so gradients come free.

All losses reduce by mean over the batch and clamp probabilities at 1e-7
before taking logs.
"""

from __future__ import annotations

import numpy as np

from ..errors import NonFiniteError, ShapeError
from .tensor import (
    Tensor,
    add,
    as_tensor,
    log_clamped,
    mean_all,
    mul,
    neg,
    pick_rows,
    rsub,
    softmax,
    sub,
)

LOG_FLOOR = 1e-7


def _check_finite(name, arr):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{name}: input contains non-finite values")


def _target_indices(targets, n_classes, n_rows):
    """Accept class indices or exact one-hot rows."""
    t = np.asarray(targets)
    if t.ndim == 2:
        if t.shape != (n_rows, n_classes):
            raise ShapeError(
                f"cross_entropy: one-hot targets of shape {t.shape} for "
                f"{n_rows} rows of {n_classes} classes"
            )
        idx = t.argmax(axis=1)
        if not np.array_equal(
            np.eye(n_classes, dtype=t.dtype)[idx].astype(np.float64),
            t.astype(np.float64),
        ):
            raise ShapeError("cross_entropy: 2-d targets must be exact one-hot rows")
        return idx
    idx = t.astype(np.int64)
    if idx.shape != (n_rows,):
        raise ShapeError(
            f"cross_entropy: target vector of shape {idx.shape} for {n_rows} rows"
        )
    if idx.min() < 0 or idx.max() >= n_classes:
        raise ShapeError(
            f"cross_entropy: target indices outside [0, {n_classes - 1}]"
        )
    return idx


def categorical_cross_entropy(logits, targets):
    """Mean cross-entropy of softmax(logits) against class indices."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(
            f"cross_entropy: expected (N, K) logits, got {logits.data.shape}"
        )
    _check_finite("cross_entropy", logits.data)
    n, k = logits.data.shape
    idx = _target_indices(targets, k, n)
    probs = softmax(logits, axis=1)
    picked = pick_rows(probs, idx)
    return neg(mean_all(log_clamped(picked, LOG_FLOOR)))


def binary_cross_entropy(probs, targets):
    """Mean BCE of probabilities in [0, 1] against 0/1 targets."""
    probs = as_tensor(probs)
    _check_finite("binary_cross_entropy", probs.data)
    t = np.broadcast_to(
        np.asarray(targets, dtype=np.float32), probs.data.shape
    ).copy()
    if ((t != 0) & (t != 1)).any():
        raise ShapeError("binary_cross_entropy: targets must be 0 or 1")
    pos = mul(Tensor(t), log_clamped(probs, LOG_FLOOR))
    negt = mul(Tensor(1.0 - t), log_clamped(rsub(1.0, probs), LOG_FLOOR))
    return neg(mean_all(add(pos, negt)))


def mean_squared_error(pred, target):
    pred = as_tensor(pred)
    target = as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise ShapeError(
            f"mean_squared_error: shapes {pred.data.shape} and "
            f"{target.data.shape} differ"
        )
    _check_finite("mean_squared_error", pred.data)
    _check_finite("mean_squared_error", target.data)
    d = sub(pred, target)
    return mean_all(mul(d, d))
