"""Small module system: parameter/buffer registries and the standard layers."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator, Optional

import numpy as np

from . import functional as F
from .tensor import Tensor


_FORWARD_HOOKS: list = []


def add_forward_hook(fn) -> None:
    """Register ``fn(module, output)``, called after every module forward."""
    _FORWARD_HOOKS.append(fn)


def remove_forward_hook(fn) -> None:
    _FORWARD_HOOKS.remove(fn)


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, dtype=None, name: str = ""):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int, dtype=np.float64) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Module:
    """Base class.  Parameters, buffers (plain ndarrays) and child modules are
    discovered from instance attributes in definition order; lists of modules
    are supported through ``ModuleList``."""

    def __init__(self):
        self.training = True
        self._buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        out = self.forward(*args, **kwargs)
        for hook in _FORWARD_HOOKS:
            hook(self, out)
        return out

    # -- registries ------------------------------------------------------------
    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value

    def children(self) -> Iterator[tuple]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def named_modules(self, prefix: str = "") -> Iterator[tuple]:
        yield prefix, self
        for name, child in self.children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield (f"{prefix}.{name}" if prefix else name), value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}.{name}" if prefix else name)

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple]:
        for name, value in self._buffers.items():
            yield (f"{prefix}.{name}" if prefix else name), value
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}.{name}" if prefix else name)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    # -- modes -----------------------------------------------------------------
    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        for _, m in self.named_modules():
            for k, v in m._buffers.items():
                if v.dtype.kind == "f":
                    m._buffers[k] = v.astype(dtype)
        return self

    # -- state -----------------------------------------------------------------
    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.data
        for name, b in self.named_buffers():
            state[name] = b
        return state

    def load_state_dict(self, state: dict) -> None:
        expected = self.state_dict()
        missing = [k for k in expected if k not in state]
        unexpected = [k for k in state if k not in expected]
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in self.named_parameters():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=state[name].dtype)
        for prefix, m in self.named_modules():
            for k in list(m._buffers):
                key = f"{prefix}.{k}" if prefix else k
                if state[key].shape != m._buffers[k].shape:
                    raise ValueError(f"{key}: shape {state[key].shape} != {m._buffers[k].shape}")
                m._buffers[k] = np.array(state[key], dtype=state[key].dtype)
            m._after_load()

    def _after_load(self) -> None:
        """Hook for modules that cache derived state from buffers."""


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items: list = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, i: int) -> Module:
        return self._items[i]


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1,
                 padding: int = 0, groups: int = 1, bias: bool = False,
                 rng: Optional[np.random.Generator] = None, dtype=np.float64):
        super().__init__()
        if in_channels % groups or out_channels % groups:
            raise F.ShapeError(
                f"groups={groups} must divide in_channels={in_channels} and out_channels={out_channels}")
        rng = rng if rng is not None else np.random.default_rng()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding, self.groups = kernel_size, stride, padding, groups
        shape = (out_channels, in_channels // groups, kernel_size, kernel_size)
        self.weight = Parameter(he_normal(rng, shape, shape[1] * kernel_size ** 2, dtype))
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class ConvTranspose2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1,
                 padding: int = 0, output_padding: int = 0, bias: bool = True,
                 rng: Optional[np.random.Generator] = None, dtype=np.float64):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride = kernel_size, stride
        self.padding, self.output_padding = padding, output_padding
        shape = (in_channels, out_channels, kernel_size, kernel_size)
        self.weight = Parameter(he_normal(rng, shape, out_channels * kernel_size ** 2, dtype))
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding, self.output_padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5, dtype=np.float64):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))
        self.register_buffer("batches_tracked", np.zeros(1, dtype=np.int64))

    def forward(self, x: Tensor) -> Tensor:
        if self.training:
            out = F.batchnorm2d(x, self.gamma, self.beta, self._buffers["running_mean"],
                                self._buffers["running_var"], True, self.momentum, self.eps)
            self._buffers["batches_tracked"] += 1
            return out
        if self._buffers["batches_tracked"][0] == 0:
            raise ValueError("eval-mode batchnorm called before any running statistics were collected")
        return F.batchnorm2d(x, self.gamma, self.beta, self._buffers["running_mean"],
                             self._buffers["running_var"], False, self.momentum, self.eps)
