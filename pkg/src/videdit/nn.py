"""Parameter containers and learned layers built on the tensor engine."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    limit = 1.0 / np.sqrt(max(1, fan_in))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Module:
    """Minimal container: parameters are Tensor attributes with requires_grad."""

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


class Linear(Module):
    """y = x @ W + b with fan-in scaled uniform init (or zeros)."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 dtype=np.float32, zero_init: bool = False, bias: bool = True):
        if zero_init:
            w = np.zeros((in_dim, out_dim), dtype=dtype)
        else:
            w = fan_in_uniform(rng, (in_dim, out_dim), in_dim, dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = T.add(y, self.bias)
        return y


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, rng: np.random.Generator,
                 dtype=np.float32, stride: int = 1, padding: str = "same",
                 zero_init: bool = False):
        fan_in = k * k * in_ch
        if zero_init:
            w = np.zeros((k, k, in_ch, out_ch), dtype=dtype)
        else:
            w = fan_in_uniform(rng, (k, k, in_ch, out_ch), fan_in, dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.conv2d(x, self.weight, self.stride, self.padding), self.bias)


class Conv3d(Module):
    def __init__(self, in_ch: int, out_ch: int, k, rng: np.random.Generator,
                 dtype=np.float32, stride=1, padding: str = "same"):
        if isinstance(k, int):
            k = (k, k, k)
        fan_in = int(np.prod(k)) * in_ch
        w = fan_in_uniform(rng, tuple(k) + (in_ch, out_ch), fan_in, dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.conv3d(x, self.weight, self.stride, self.padding), self.bias)

    def center_slice_2d(self, x: Tensor) -> Tensor:
        """Apply only the temporally-central 2-d slice of the 3-d kernel.

        Used to run a shared spatio-temporal conv frame-by-frame (temporal
        kernel forced to 1) so the decoder can re-encode single frames with
        the same weights.
        """
        kt = self.weight.data.shape[0]
        w2 = T.getitem(self.weight, kt // 2)
        return T.add(T.conv2d(x, w2, self.stride, self.padding), self.bias)
