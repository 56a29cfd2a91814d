"""Batch normalization and spectral weight normalization."""

from __future__ import annotations

import warnings

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor, _accumulate, _node, as_tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
SN_EPS = 1e-12


def batch_norm(x, gamma, beta, running_mean, running_var, train):
    """Per-channel batch normalization over (N, H, W) of an NCHW tensor.

    In train mode the batch statistics are used and the running buffers are
    updated in place as ``running = 0.9 * running + 0.1 * batch`` (population
    variance). In eval mode the running buffers are used and left untouched.
    ``running_mean``/``running_var`` are plain float32 arrays, not tape nodes.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise ShapeError(f"batch_norm: expected NCHW input, got {x.data.shape}")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(
            f"batch_norm: input {x.data.shape} with gamma {gamma.data.shape} "
            f"and beta {beta.data.shape}"
        )

    xd = x.data
    m = xd.shape[0] * xd.shape[2] * xd.shape[3]
    if train:
        mean = (np.einsum("nchw->c", xd) / np.float32(m)).astype(np.float32)
        # Population variance in one fused pass; clamp the E[x^2] - mean^2
        # cancellation so float32 noise cannot go negative.
        sq = np.einsum("nchw,nchw->c", xd, xd) / np.float32(m)
        var = np.maximum(sq - mean * mean, np.float32(0))
        running_mean *= BN_MOMENTUM
        running_mean += (1.0 - BN_MOMENTUM) * mean
        running_var *= BN_MOMENTUM
        running_var += (1.0 - BN_MOMENTUM) * var
    else:
        mean = running_mean
        var = running_var

    inv_std = (1.0 / np.sqrt(var + np.float32(BN_EPS))).astype(np.float32)

    if train:
        # Keep xhat for backward; build the output in place on one buffer.
        xhat = xd - mean[None, :, None, None]
        xhat *= inv_std[None, :, None, None]
        out = xhat * gamma.data[None, :, None, None]
        out += beta.data[None, :, None, None]
    else:
        xhat = None
        scale = gamma.data * inv_std
        out = xd * scale[None, :, None, None]
        out += (beta.data - mean * scale)[None, :, None, None]

    mean_snapshot = None if train else np.array(mean, dtype=np.float32)

    def backward(gy, x=x, gamma=gamma, beta=beta, xhat=xhat, inv_std=inv_std,
                 mean_snapshot=mean_snapshot, train=train, m=m):
        need_sums = train and x.requires_grad
        if xhat is None and (gamma.requires_grad or need_sums):
            # Eval mode does not keep xhat; rebuild it from the snapshot.
            xhat = x.data - mean_snapshot[None, :, None, None]
            xhat *= inv_std[None, :, None, None]
        gysum = gyx = None
        if beta.requires_grad or need_sums:
            gysum = np.einsum("nchw->c", gy)
        if gamma.requires_grad or need_sums:
            gyx = np.einsum("nchw,nchw->c", gy, xhat)
        if beta.requires_grad:
            _accumulate(beta, gysum.astype(np.float32))
        if gamma.requires_grad:
            _accumulate(gamma, gyx.astype(np.float32))
        if x.requires_grad:
            if train:
                # gx = gamma*inv/m * (m*gy - sum(gy) - xhat*sum(gy*xhat)),
                # the usual collapsed form of backprop through batch stats.
                gx = gy * np.float32(m)
                gx -= gysum[None, :, None, None]
                gx -= xhat * gyx[None, :, None, None]
                gx *= (gamma.data * inv_std / np.float32(m))[None, :, None, None]
            else:
                gx = gy * (gamma.data * inv_std)[None, :, None, None]
            _accumulate(x, gx.astype(np.float32, copy=False))

    return _node(out, (x, gamma, beta), backward)


class SpectralState:
    """Persistent left singular vector estimate for one weight matrix."""

    def __init__(self, u, n_power_iterations=1):
        self.u = np.asarray(u, dtype=np.float32)
        if self.u.ndim != 1:
            raise ShapeError(f"SpectralState: u must be a vector, got {self.u.shape}")
        self.n_power_iterations = int(n_power_iterations)
        nrm = float(np.linalg.norm(self.u))
        if nrm > 0:
            self.u /= nrm

    @classmethod
    def for_weight(cls, weight_shape, rng, n_power_iterations=1):
        u = rng.standard_normal(weight_shape[0]).astype(np.float32)
        return cls(u, n_power_iterations)

    @classmethod
    def attached(cls, u_array, n_power_iterations=1):
        """Wrap an existing unit vector without copying, so power-iteration
        updates persist into that array (e.g. a checkpointed buffer)."""
        state = cls.__new__(cls)
        state.u = u_array
        state.n_power_iterations = int(n_power_iterations)
        return state


def _l2_normalize(v, eps=SN_EPS):
    return v / (np.linalg.norm(v) + eps)


def spectral_normalize(w, state, update=True):
    """Divide ``w`` by its estimated top singular value.

    The weight is reshaped to (out_channels, rest) and the estimate is run
    with ``state.n_power_iterations`` power iterations starting from the
    persisted ``state.u``; when ``update`` is set the refreshed ``u`` is
    written back in place. Gradients treat the singular vectors as constants
    (the standard estimator), so d(sigma)/dw = outer(u, v).
    """
    w = as_tensor(w)
    out_ch = w.data.shape[0]
    if state.u.shape[0] != out_ch:
        raise ShapeError(
            f"spectral_normalize: weight shape {w.data.shape} with "
            f"u of shape {state.u.shape}"
        )
    w2 = w.data.reshape(out_ch, -1)
    u = state.u
    v = None
    for _ in range(max(1, state.n_power_iterations)):
        v = _l2_normalize(w2.T @ u)
        u = _l2_normalize(w2 @ v)
    # A zero weight collapses u to zero; keep the previous unit vector then.
    if update and np.linalg.norm(u) > 0.5:
        state.u[...] = u
    sigma = float(u @ (w2 @ v))
    if sigma < SN_EPS:
        warnings.warn(
            "spectral_normalize: singular value estimate is numerically zero; "
            "clamping",
            RuntimeWarning,
        )
        sigma = SN_EPS
    inv_sigma = np.float32(1.0 / sigma)
    out = w.data * inv_sigma

    def backward(gy, w=w, u=u.copy(), v=v.copy(), inv_sigma=inv_sigma):
        if w.requires_grad:
            # d(w/sigma) = g/sigma - (sum(g*w)/sigma^2) * dsigma/dw
            coeff = np.float32((gy * w.data).sum()) * inv_sigma * inv_sigma
            gsig = np.outer(u, v).reshape(w.data.shape)
            _accumulate(w, gy * inv_sigma - coeff * gsig)

    return _node(out, (w,), backward)


def spectral_sigma(w_data, u0, iterations):
    """Power-iteration estimate of the top singular value (no tape)."""
    w2 = np.asarray(w_data, dtype=np.float32).reshape(w_data.shape[0], -1)
    u = _l2_normalize(np.asarray(u0, dtype=np.float32))
    v = None
    for _ in range(iterations):
        v = _l2_normalize(w2.T @ u)
        u = _l2_normalize(w2 @ v)
    return float(u @ (w2 @ v))
