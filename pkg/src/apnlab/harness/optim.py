from __future__ import annotations

import numpy as np

from ..tensor import Tensor


class Adam:
    """Adam with bias correction; state is exposed for checkpointing."""

    def __init__(self, params: list[tuple[str, Tensor]], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad.astype(p.dtype, copy=False)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype, copy=False)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {"opt.step": np.array([self.step_count], dtype=np.int64)}
        for name in self.m:
            state[f"opt.m.{name}"] = self.m[name]
            state[f"opt.v.{name}"] = self.v[name]
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.step_count = int(state["opt.step"][0])
        for name in self.m:
            self.m[name] = np.array(state[f"opt.m.{name}"], dtype=self.m[name].dtype)
            self.v[name] = np.array(state[f"opt.v.{name}"], dtype=self.v[name].dtype)
