"""Parameter containers: ``Module``, ``Linear`` and a two-layer ``MLP``."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Holds parameters and child modules as attributes.

    Parameter names follow attribute paths (``enc.0.attn.q.weight``) and are
    enumerated in attribute-definition order, which keeps checkpoints and
    optimizer state stable across runs.
    """

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            value = ModuleList(value)
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data.copy()) for k, p in self.named_parameters())

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for k, p in own.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)


class ModuleList(Module):
    def __init__(self, modules):
        super().__init__()
        self._items = []
        for i, m in enumerate(modules):
            self._children[str(i)] = m
            self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def parameter_count(module: Module) -> int:
    return int(sum(p.size for p in module.parameters()))


class Linear(Module):
    """y = x W + b, with W stored as (in, out)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True,
                 zero: bool = False, dtype=np.float64):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        bound = 1.0 / np.sqrt(max(n_in, 1))
        w = np.zeros((n_in, n_out)) if zero else rng.uniform(-bound, bound, size=(n_in, n_out))
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        if bias:
            b = np.zeros(n_out) if zero else rng.uniform(-bound, bound, size=n_out)
            self.bias = Tensor(b.astype(dtype), requires_grad=True)
        else:
            self.bias = None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise ValueError(f"Linear expects width {self.n_in}, got {x.shape[-1]}")
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y


class MLP(Module):
    """Two linear layers with an activation between them."""

    def __init__(self, n_in: int, n_hidden: int, n_out: int, rng: np.random.Generator,
                 activation: str = "silu", zero_last: bool = False, dtype=np.float64):
        super().__init__()
        self.fc1 = Linear(n_in, n_hidden, rng, dtype=dtype)
        self.fc2 = Linear(n_hidden, n_out, rng, zero=zero_last, dtype=dtype)
        self.act = T.ACTIVATIONS[activation]

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.act(self.fc1(x)))


class LayerNorm(Module):
    """Per-row standardisation over channels with a learned scale and shift."""

    def __init__(self, channels: int, eps: float = 1e-5, dtype=np.float64):
        super().__init__()
        self.eps = eps
        self.weight = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        xc = x - T.mean(x, axis=1, keepdims=True)
        var = T.mean(xc * xc, axis=1, keepdims=True)
        return xc / T.sqrt(var + self.eps) * self.weight + self.bias
