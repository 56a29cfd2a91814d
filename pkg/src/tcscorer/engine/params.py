"""Named parameter storage and the Adam update."""

from __future__ import annotations

import numpy as np

from ..errors import MissingGradientError, ShapeError
from .tensor import Tensor


class ParamStore:
    """Dot-path named tensors plus per-parameter Adam state.

    Non-trainable entries (running statistics, spectral u vectors) live in
    the same namespace so checkpoints capture everything a forward pass
    needs.
    """

    def __init__(self):
        self._tensors = {}
        self._adam_m = {}
        self._adam_v = {}
        self._adam_t = {}

    def add(self, name, data, trainable=True):
        if name in self._tensors:
            raise KeyError(f"parameter {name!r} already registered")
        t = Tensor(data, requires_grad=trainable)
        self._tensors[name] = t
        return t

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def names(self):
        return list(self._tensors.keys())

    def trainable_names(self):
        return [n for n, t in self._tensors.items() if t.requires_grad]

    def items(self):
        return self._tensors.items()

    def zero_grad(self):
        for t in self._tensors.values():
            t.grad = None

    def adam_state(self, name):
        """(m, v, step) for one parameter; zeros before the first step."""
        t = self._tensors[name]
        if name not in self._adam_m:
            self._adam_m[name] = np.zeros_like(t.data)
            self._adam_v[name] = np.zeros_like(t.data)
            self._adam_t[name] = 0
        return self._adam_m[name], self._adam_v[name], self._adam_t[name]

    def copy(self):
        out = ParamStore()
        for name, t in self._tensors.items():
            out.add(name, t.data.copy(), trainable=t.requires_grad)
        for name in self._adam_m:
            out._adam_m[name] = self._adam_m[name].copy()
            out._adam_v[name] = self._adam_v[name].copy()
            out._adam_t[name] = self._adam_t[name]
        return out

    def subset(self, names):
        out = ParamStore()
        for name in names:
            t = self._tensors[name]
            out.add(name, t.data.copy(), trainable=t.requires_grad)
            if name in self._adam_m:
                out._adam_m[name] = self._adam_m[name].copy()
                out._adam_v[name] = self._adam_v[name].copy()
                out._adam_t[name] = self._adam_t[name]
        return out

    def load_arrays(self, arrays):
        """Overwrite parameter data from a name -> array mapping."""
        for name, arr in arrays.items():
            if name not in self._tensors:
                raise KeyError(f"unknown parameter {name!r} in checkpoint")
            t = self._tensors[name]
            arr = np.asarray(arr, dtype=np.float32)
            if arr.shape != t.data.shape:
                raise ShapeError(
                    f"parameter {name!r}: stored shape {arr.shape} does not "
                    f"match expected {t.data.shape}"
                )
            t.data[...] = arr


def adam_step(store, lr=1e-4, beta1=0.5, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam over every trainable parameter in the store.

    Gradients must be populated for all trainable parameters; they are
    cleared after the update.
    """
    for name in store.trainable_names():
        t = store[name]
        if t.grad is None:
            raise MissingGradientError(
                f"adam_step: parameter {name!r} has no gradient"
            )
        m, v, step = store.adam_state(name)
        step += 1
        store._adam_t[name] = step
        g = t.grad
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        mhat = m / (1.0 - beta1**step)
        vhat = v / (1.0 - beta2**step)
        t.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(np.float32)
        t.grad = None
