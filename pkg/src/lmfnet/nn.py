"""Parameter containers and the small set of layers the network is built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import DataError
from .tensor import Tensor

PARAM_KINDS = ("weight", "bias", "norm_scale", "norm_shift")


class Parameter(Tensor):
    """A trainable leaf tensor.

    ``name`` is filled in from the module path by :meth:`Module.named_parameters`;
    ``kind`` drives weight-decay selection in the optimiser.
    """

    __slots__ = ("name", "kind")

    def __init__(self, data, kind: str = "weight", dtype=None):
        if kind not in PARAM_KINDS:
            raise ValueError(f"unknown parameter kind {kind!r}")
        super().__init__(np.array(data, dtype=dtype or np.float32), requires_grad=True)
        self.name = ""
        self.kind = kind


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def kaiming_normal(rng: np.random.Generator, shape, fan: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan), size=shape)


class Module:
    """Base class: tracks child modules and parameters through attributes."""

    def __init__(self):
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _members(self):
        for key, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield key, value

    def children(self) -> Iterator["Module"]:
        for _, value in self._members():
            if isinstance(value, Module):
                yield value

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self.children():
            yield from child.modules()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in self._members():
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                value.name = path
                yield path, value
            else:
                yield from value.named_parameters(path + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def set_dropout_rng(self, rng: np.random.Generator | None) -> None:
        for m in self.modules():
            if isinstance(m, Dropout):
                m.rng = rng

    def to(self, dtype) -> "Module":
        """Cast every parameter in place to ``dtype``."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise DataError(f"state mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise DataError(f"{name}: checkpoint shape {arr.shape} vs model {p.shape}")
            p.data = np.array(arr, dtype=p.dtype)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = list(modules)

    def _members(self):
        for i, m in enumerate(self._items):
            yield str(i), m

    def __getitem__(self, i):
        return self._items[i]

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def append(self, m: Module) -> None:
        self._items.append(m)


class Linear(Module):
    """Affine map over the last axis; weight stored as (d_in, d_out)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.weight = Parameter(trunc_normal(rng, (d_in, d_out)), "weight")
        self.bias = Parameter(np.zeros(d_out), "bias") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.scale = Parameter(np.ones(dim), "norm_scale")
        self.shift = Parameter(np.zeros(dim), "norm_shift")

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.scale, self.shift, self.eps)


class Conv2d(Module):
    """2-D convolution, Kaiming-normal (fan-out) initialised."""

    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=0, groups=1, bias=True):
        super().__init__()
        kh, kw = T._pair(kernel)
        self.stride, self.padding, self.groups = stride, padding, groups
        fan_out = kh * kw * c_out // groups
        self.weight = Parameter(kaiming_normal(rng, (c_out, c_in // groups, kh, kw), fan_out), "weight")
        self.bias = Parameter(np.zeros(c_out), "bias") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class GroupedConv3d(Module):
    """Depthwise 3-D convolution (groups = channels), shape preserving."""

    def __init__(self, channels: int, kernel, rng):
        super().__init__()
        kd, kh, kw = T._triple(kernel)
        if min(kd, kh, kw) < 1 or not (kd % 2 and kh % 2 and kw % 2):
            raise ValueError(f"grouped conv3d kernel extents must be odd, got {(kd, kh, kw)}")
        self.padding = (kd // 2, kh // 2, kw // 2)
        self.weight = Parameter(kaiming_normal(rng, (channels, 1, kd, kh, kw), kd * kh * kw), "weight")
        self.bias = Parameter(np.zeros(channels), "bias")

    def forward(self, x: Tensor) -> Tensor:
        return T.grouped_conv3d(x, self.weight, self.bias, self.padding)


class Dropout(Module):
    def __init__(self, rate: float):
        super().__init__()
        self.rate = rate
        self.rng: np.random.Generator | None = None

    def forward(self, x: Tensor) -> Tensor:
        return T.dropout(x, self.rate, self.rng, self.training and self.rate > 0)
