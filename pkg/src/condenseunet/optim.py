"""Adam with bias correction."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, step: int,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One in-place Adam update; ``step`` is the 1-based count including this update."""
    if grad.shape != param.shape or m.shape != param.shape or v.shape != param.shape:
        raise ValueError(f"shape mismatch: param {param.shape}, grad {grad.shape}, moments {m.shape}/{v.shape}")
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    param -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype, copy=False)


class Adam:
    """Adam over a named parameter dict ``{name: Parameter}``.

    Moment buffers are keyed by parameter name so they serialize alongside
    the weights.
    """

    def __init__(self, named_params, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = OrderedDict(named_params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = OrderedDict((k, np.zeros_like(p.data)) for k, p in self.params.items())
        self.v = OrderedDict((k, np.zeros_like(p.data)) for k, p in self.params.items())

    def step(self) -> None:
        self.t += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            adam_step(p.data, p.grad.astype(p.data.dtype, copy=False), self.m[name], self.v[name],
                      self.t, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def mask_moments(self, name: str, mask: np.ndarray) -> None:
        """Clear moment history at pruned positions so they cannot push weights."""
        self.m[name] *= mask
        self.v[name] *= mask

    def state(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        out["adam.t"] = np.array([self.t], dtype=np.int64)
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state(self, state: dict) -> None:
        self.t = int(state["adam.t"][0])
        for k, p in self.params.items():
            m, v = state[f"adam.m.{k}"], state[f"adam.v.{k}"]
            if m.shape != p.shape or v.shape != p.shape:
                raise ValueError(f"moment shape mismatch for {k}")
            self.m[k] = np.array(m)
            self.v[k] = np.array(v)
