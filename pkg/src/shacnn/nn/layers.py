"""Parameterised layers built on the functional primitives."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Parameter, Tensor


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    # values are rounded through float32 so extracted float32 weights match the init exactly
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32).astype(np.float64)


class Module:
    """Minimal container: subclasses list their parameters and buffers by name."""

    def parameters(self) -> Iterator[tuple[str, Parameter]]:
        return iter(())

    def buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(())


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str):
        self.n_in, self.n_out, self.name = n_in, n_out, name
        self.weight = Parameter(kaiming_uniform(rng, (n_in, n_out), n_in), name=f"{name}.weight")
        self.bias = Parameter(np.zeros(n_out), name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return F.dense(x, self.weight, self.bias)

    def parameters(self):
        yield self.weight.name, self.weight
        yield self.bias.name, self.bias

    def macs(self, batch: int = 1) -> int:
        return batch * self.n_in * self.n_out

    def __repr__(self):
        return f"Dense({self.n_in}->{self.n_out}, {self.name})"


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, name: str,
                 stride: int = 1, padding: int = 0):
        self.c_in, self.c_out, self.kernel = c_in, c_out, kernel
        self.stride, self.padding, self.name = stride, padding, name
        fan_in = c_in * kernel * kernel
        self.weight = Parameter(kaiming_uniform(rng, (c_out, c_in, kernel, kernel), fan_in),
                                name=f"{name}.weight")
        self.bias = Parameter(np.zeros(c_out), name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def output_shape(self, shape: tuple[int, int, int]) -> tuple[int, int, int]:
        _, h, w = shape
        return (
            self.c_out,
            F.conv_output_size(h, self.kernel, self.stride, self.padding),
            F.conv_output_size(w, self.kernel, self.stride, self.padding),
        )

    def parameters(self):
        yield self.weight.name, self.weight
        yield self.bias.name, self.bias

    def __repr__(self):
        return (f"Conv2d({self.c_in}->{self.c_out}, k={self.kernel}, s={self.stride}, "
                f"p={self.padding}, {self.name})")


class BatchNorm(Module):
    def __init__(self, channels: int, name: str, momentum: float = 0.1, eps: float = 1e-5):
        self.name, self.momentum, self.eps = name, momentum, eps
        self.gamma = Parameter(np.ones(channels), name=f"{name}.gamma")
        self.beta = Parameter(np.zeros(channels), name=f"{name}.beta")
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        # frozen layers keep their statistics fixed as well
        training = training and not self.gamma.frozen
        return F.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            training, self.momentum, self.eps)

    def parameters(self):
        yield self.gamma.name, self.gamma
        yield self.beta.name, self.beta

    def buffers(self):
        yield f"{self.name}.running_mean", self.running_mean
        yield f"{self.name}.running_var", self.running_var
