from __future__ import annotations

from collections import OrderedDict

import numpy as np

from ..tensor import ShapeError, Tensor


class Adam:
    """Adam with bias correction.

    m <- b1*m + (1-b1)*g ; v <- b2*v + (1-b2)*g^2
    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)

    Parameters are held by name so state can be checkpointed.  Parameters
    whose ``grad`` is None are skipped for that step, but ``t`` still advances.
    """

    def __init__(self, named_params, lr: float = 1e-4, betas: tuple = (0.9, 0.999), eps: float = 1e-8):
        if not lr >= 0:
            raise ValueError(f"learning rate must be non-negative, got {lr}")
        b1, b2 = betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ValueError(f"betas must lie in [0, 1), got {betas}")
        self.params: "OrderedDict[str, Tensor]" = OrderedDict(named_params)
        self.lr, self.beta1, self.beta2, self.eps = lr, b1, b2, eps
        self.t = 0
        self.m = OrderedDict((k, np.zeros_like(p.data)) for k, p in self.params.items())
        self.v = OrderedDict((k, np.zeros_like(p.data)) for k, p in self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[name], self.v[name]
            if m.shape != p.shape or g.shape != p.shape:
                raise ShapeError(f"optimizer state for {name!r} has shape {m.shape}, parameter {p.shape}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            m_hat = m / bc1
            v_hat = v / bc2
            p.data = (p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype, copy=False)

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": OrderedDict((k, a.copy()) for k, a in self.m.items()),
            "v": OrderedDict((k, a.copy()) for k, a in self.v.items()),
        }

    def load_state_dict(self, state: dict) -> None:
        for key in ("m", "v"):
            for name, array in state[key].items():
                if name not in self.params:
                    continue
                if array.shape != self.params[name].shape:
                    raise ShapeError(f"optimizer {key} for {name!r}: {array.shape} vs parameter {self.params[name].shape}")
                getattr(self, key)[name] = np.array(array, dtype=self.params[name].dtype)
        self.t = int(state["t"])


def adam_step(optimizer: Adam) -> None:
    optimizer.step()
