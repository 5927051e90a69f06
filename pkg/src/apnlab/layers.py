"""Parameter containers and the small set of layers the encoders need."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import rng
from . import tensor as T
from .tensor import Tensor


class Module:
    """Ordered registry of parameters, buffers and child modules."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = name
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name in self._params:
            yield prefix + name, getattr(self, name)
        for name, mod in self._modules.items():
            yield from mod.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, mod in self._modules.items():
            yield from mod.named_buffers(f"{prefix}{name}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = [k for k in list(own) + list(bufs) if k not in state]
        if strict and missing:
            raise KeyError(f"missing keys in state: {missing}")
        for name, p in own.items():
            if name in state:
                value = np.asarray(state[name])
                if value.shape != p.shape:
                    raise T.ShapeError(f"{name}: checkpoint shape {value.shape} != parameter shape {p.shape}")
                p.data = value.astype(p.dtype).copy()
        for name in bufs:
            if name in state:
                self._set_buffer(name, np.asarray(state[name]).copy())

    def _set_buffer(self, dotted: str, value: np.ndarray) -> None:
        *path, leaf = dotted.split(".")
        mod = self
        for part in path:
            mod = mod._modules[part]
        object.__setattr__(mod, leaf, value.astype(getattr(mod, leaf).dtype))

    def modules(self) -> Iterator[Module]:
        yield self
        for mod in self._modules.values():
            yield from mod.modules()

    def train(self, mode: bool = True) -> Module:
        for mod in self.modules():
            object.__setattr__(mod, "training", mode)
        return self

    def eval(self) -> Module:
        return self.train(False)

    def freeze(self) -> Module:
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def to(self, dtype) -> Module:
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        for name, buf in list(self.named_buffers()):
            self._set_buffer(name, buf.astype(dtype))
        return self

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def _uniform(seed: int, name: str, shape: tuple[int, ...], bound: float) -> np.ndarray:
    return rng.stream(seed, "init", name).uniform(-bound, bound, size=shape)


class Conv2d(Module):
    """3x3-style convolution; kernels drawn fan-in-scaled uniform, zero bias."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, *, stride: int = 1, padding: int = 0,
                 seed: int = 0, name: str = "conv"):
        super().__init__()
        fan_in = in_ch * kernel * kernel
        bound = np.sqrt(6.0 / fan_in)
        self.weight = Tensor(_uniform(seed, f"{name}.weight", (out_ch, in_ch, kernel, kernel), bound), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True)
        self.stride = stride
        self.padding = padding
        self.kernel = kernel

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, *, seed: int = 0, name: str = "linear", gain: float = 6.0):
        super().__init__()
        bound = np.sqrt(gain / in_dim)
        self.weight = Tensor(_uniform(seed, f"{name}.weight", (in_dim, out_dim), bound), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class LayerNorm(Module):
    """Per-sample normalization over (C, H, W); no statistics shared across samples."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.scale = Tensor(np.ones((1, channels, 1, 1)), requires_grad=True)
        self.shift = Tensor(np.zeros((1, channels, 1, 1)), requires_grad=True)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=(1, 2, 3), keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=(1, 2, 3), keepdims=True)
        return xc / T.sqrt(var + self.eps) * self.scale + self.shift


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.scale = Tensor(np.ones((1, channels, 1, 1)), requires_grad=True)
        self.shift = Tensor(np.zeros((1, channels, 1, 1)), requires_grad=True)
        self.register_buffer("running_mean", np.zeros((1, channels, 1, 1)))
        self.register_buffer("running_var", np.ones((1, channels, 1, 1)))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        if not self.training:
            xn = (x - Tensor(self.running_mean.astype(x.dtype))) / Tensor(np.sqrt(self.running_var + self.eps).astype(x.dtype))
            return xn * self.scale + self.shift
        mu = x.mean(axis=(0, 2, 3), keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        m = self.momentum
        object.__setattr__(self, "running_mean", (1 - m) * self.running_mean + m * mu.data)
        object.__setattr__(self, "running_var", (1 - m) * self.running_var + m * var.data)
        return xc / T.sqrt(var + self.eps) * self.scale + self.shift


class Identity(Module):
    def forward(self, x: Tensor) -> Tensor:
        return x


class MLP(Module):
    """Single-hidden-layer perceptron with ReLU."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, *, seed: int = 0, name: str = "mlp"):
        super().__init__()
        self.fc1 = Linear(in_dim, hidden, seed=seed, name=f"{name}.fc1")
        self.fc2 = Linear(hidden, out_dim, seed=seed, name=f"{name}.fc2", gain=3.0)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).relu())
