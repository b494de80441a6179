"""Small module system on top of :mod:`infodrop.tensor`.

Modules own named parameter tensors and optional buffers (batchnorm
running statistics).  A forward call takes a :class:`ForwardContext` that
carries the mode flags and the random stream, and collects the per-layer
outputs of every noise layer that fires during the pass.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import BatchNormState, Rng, Tensor


@dataclass
class ForwardContext:
    """Mode flags and bookkeeping for a single forward pass.

    ``training`` selects batchnorm batch statistics; ``stochastic`` turns the
    multiplicative noise on.  They are independent: stochastic evaluation
    runs batchnorm in eval mode with noise enabled.
    """

    training: bool = False
    stochastic: bool = False
    rng: Rng | None = None
    layer_outputs: list = field(default_factory=list)
    capture: dict = field(default_factory=dict)

    def noise_rng(self) -> Rng:
        if self.rng is None:
            raise ValueError("stochastic forward pass needs an Rng")
        return self.rng


class Module:
    name: str = ""

    def children(self) -> Iterator[tuple[str, "Module"]]:
        return iter(())

    def own_parameters(self) -> dict[str, Tensor]:
        return {}

    def own_buffers(self) -> dict[str, np.ndarray]:
        return {}

    def load_own_buffers(self, values: dict[str, np.ndarray]) -> None:
        pass

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + k: v for k, v in self.own_parameters().items()}
        for cname, child in self.children():
            out.update(child.parameters(f"{prefix}{cname}."))
        return out

    def buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {prefix + k: v for k, v in self.own_buffers().items()}
        for cname, child in self.children():
            out.update(child.buffers(f"{prefix}{cname}."))
        return out

    def load_buffers(self, values: dict[str, np.ndarray], prefix: str = "") -> None:
        mine = {k[len(prefix):]: v for k, v in values.items() if k.startswith(prefix) and "." not in k[len(prefix):]}
        if mine:
            self.load_own_buffers(mine)
        for cname, child in self.children():
            child.load_buffers(values, f"{prefix}{cname}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def __call__(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        return self.forward(x, ctx)

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        raise NotImplementedError


def he_normal(shape, fan_in: int, rng: Rng) -> Tensor:
    return Tensor(rng.normal(shape) * math.sqrt(2.0 / fan_in), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: Rng, bias: bool = True, init_scale: float = 1.0):
        self.weight = Tensor(he_normal((n_in, n_out), n_in, rng).data * init_scale, requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True) if bias else None

    def own_parameters(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def forward(self, x, ctx):
        if x.ndim != 2:
            x = T.flatten(x)
        y = T.matmul(x, self.weight)
        return T.add_bias(y, self.bias, axis=1) if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: Rng, stride: int = 1, pad: str = "same",
                 bias: bool = True, init_scale: float = 1.0):
        self.kernel = Tensor(he_normal((c_out, c_in, k, k), c_in * k * k, rng).data * init_scale, requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True) if bias else None
        self.stride = stride
        self.pad = pad

    def own_parameters(self):
        p = {"kernel": self.kernel}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def forward(self, x, ctx):
        y = T.conv2d(x, self.kernel, stride=self.stride, pad=self.pad)
        return T.add_bias(y, self.bias, axis=1) if self.bias is not None else y


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.9):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta_shift = Tensor(np.zeros(channels), requires_grad=True)
        self.state = BatchNormState(channels, momentum)

    def own_parameters(self):
        return {"gamma": self.gamma, "beta_shift": self.beta_shift}

    def own_buffers(self):
        return {"running_mean": self.state.running_mean, "running_var": self.state.running_var}

    def load_own_buffers(self, values):
        self.state.running_mean = np.array(values["running_mean"], dtype=np.float64)
        self.state.running_var = np.array(values["running_var"], dtype=np.float64)

    def forward(self, x, ctx):
        return T.batchnorm(x, self.gamma, self.beta_shift, self.state, ctx.training)


ACTIVATIONS = {"relu": T.relu, "softplus": T.softplus}


class Activation(Module):
    def __init__(self, kind: str):
        if kind not in ACTIVATIONS:
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind

    def forward(self, x, ctx):
        return ACTIVATIONS[self.kind](x)


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def children(self):
        return ((str(i), m) for i, m in enumerate(self.layers))

    def forward(self, x, ctx):
        for layer in self.layers:
            x = layer(x, ctx)
        return x


class GlobalAvgPool(Module):
    def forward(self, x, ctx):
        return T.global_avg_pool(x)


class Flatten(Module):
    def forward(self, x, ctx):
        return T.flatten(x)


class Capture(Module):
    """Identity that stores its input in ``ctx.capture[key]``."""

    def __init__(self, key: str):
        self.key = key

    def forward(self, x, ctx):
        ctx.capture[self.key] = x
        return x


class BinaryDropout(Module):
    """Classic dropout: keep with probability 1-p, rescale by 1/(1-p)."""

    def __init__(self, p: float = 0.5):
        if not 0 <= p < 1:
            raise ValueError("drop probability must be in [0, 1)")
        self.p = p

    def forward(self, x, ctx):
        if not ctx.stochastic or self.p == 0:
            return x
        keep = ctx.noise_rng().uniform(x.shape) >= self.p
        return T.mask_mul(x, keep / (1.0 - self.p))


def conv_block(c_in: int, c_out: int, k: int, activation: str, rng: Rng, stride: int = 1,
               pad: str = "same", momentum: float = 0.9) -> Sequential:
    """conv -> batchnorm -> activation; no conv bias, the batchnorm shift replaces it."""
    return Sequential(Conv2d(c_in, c_out, k, rng, stride=stride, pad=pad, bias=False), BatchNorm(c_out, momentum), Activation(activation))


def dense_block(n_in: int, n_out: int, activation: str, rng: Rng, momentum: float = 0.9) -> Sequential:
    """linear -> batchnorm -> activation; no linear bias, the batchnorm shift replaces it."""
    return Sequential(Linear(n_in, n_out, rng, bias=False), BatchNorm(n_out, momentum), Activation(activation))
