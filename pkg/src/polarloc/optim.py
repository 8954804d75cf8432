"""Adam optimizer over a named parameter store."""

from __future__ import annotations

import numpy as np


class ParameterStore:
    """Ordered name -> Tensor map of trainable parameters."""

    def __init__(self, named_tensors):
        self._params = dict(named_tensors)
        for name, t in self._params.items():
            if not t.requires_grad:
                raise ValueError(f"parameter {name!r} does not require grad")

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def __getitem__(self, name):
        return self._params[name]

    def __len__(self):
        return len(self._params)


class AdamState:
    """First/second moment estimates plus hyperparameters.

    step counts completed updates; m and v are allocated per parameter
    with matching shapes.
    """

    def __init__(self, store, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError("lr must be positive")
        if not (0.0 < beta1 < 1.0 and 0.0 < beta2 < 1.0):
            raise ValueError("betas must lie in (0, 1)")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {name: np.zeros_like(t.data) for name, t in store.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in store.items()}


def adam_step(store, grads, state):
    """One Adam update with bias correction, in place on the parameters.

    ``grads`` maps tensor ids (as produced by ``autodiff.backward``) to
    gradient arrays and must cover every parameter in the store.
    """
    missing = [name for name, t in store.items() if grads.get(t.tid) is None]
    if missing:
        raise ValueError(f"gradients missing for parameters: {missing}")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    for name, p in store.items():
        g = grads[p.tid]
        if g.shape != p.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter {name!r} {p.data.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / bias1
        vhat = v / bias2
        p.data -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype)
