"""The Information Dropout layer and its per-unit KL penalties.

The layer computes a deterministic branch f(x) and a noise-scale branch
g(x) from the same input, squashes g into (0, alpha_max) and returns

    z = f(x) * exp(alpha(x) * xi),   xi ~ N(0, 1)

so that log z given x is N(log f(x), alpha(x)^2).  The KL divergence of
that conditional to the prior has a closed form for both priors handled
here:

* ReLU / improper log-uniform prior  q(z) = q0 delta_0(z) + c / z
      KL = -log alpha - 0.5 log(2 pi e) - log c     if f(x) != 0
      KL = -log q0                                  if f(x) == 0
* Softplus / log-normal prior  log z ~ N(mu, sigma^2)
      KL = log(sigma / alpha) + (alpha^2 + (log f - mu)^2) / (2 sigma^2) - 1/2
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DegenerateBatchError, DomainError
from .nn import ForwardContext, Module, conv_block, dense_block, Conv2d, Linear
from .tensor import Rng, Tensor

HALF_LOG_2PI_E = 0.5 * math.log(2 * math.pi * math.e)
Z_EPS = 1e-12
DEFAULT_ALPHA_MAX = 0.7
# sigmoid(+-30) keeps alpha strictly inside (0, alpha_max) in float64
G_CLIP = 30.0


@dataclass(frozen=True)
class PriorSpec:
    kind: str = "log_uniform"
    q0: float = 0.1
    log_c: float = 0.0
    mu: float = 0.0
    sigma: float = 1.0

    def __post_init__(self):
        if self.kind not in ("log_uniform", "log_normal"):
            raise ConfigError(f"unknown prior kind {self.kind!r}")
        if not 0.0 <= self.q0 <= 1.0:
            raise ConfigError(f"q0 must lie in [0, 1], got {self.q0}")
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")

    @classmethod
    def for_activation(cls, activation: str, **kw) -> "PriorSpec":
        return cls(kind="log_uniform" if activation == "relu" else "log_normal", **kw)

    @property
    def relu_constant(self) -> float:
        """Additive constant of the ReLU cost, -0.5 log(2 pi e) - log c."""
        return -HALF_LOG_2PI_E - self.log_c


@dataclass
class LayerOutput:
    z: Tensor
    kl_per_unit: Tensor
    alpha: Tensor
    f: Tensor
    layer: "InfoDropout | None" = None


# ---------------------------------------------------------------- scalar closed forms


def kl_relu_unit(alpha: float, f_val: float, prior: PriorSpec, z_eps: float = Z_EPS) -> float:
    if prior.kind != "log_uniform":
        raise ConfigError("kl_relu_unit needs a log-uniform prior")
    if abs(f_val) <= z_eps:
        if prior.q0 == 0:
            raise DegenerateBatchError("zero activation has infinite cost under a prior with q0 = 0")
        return -math.log(prior.q0)
    if alpha <= 0:
        raise DomainError(f"alpha must be positive, got {alpha}")
    return -math.log(alpha) + prior.relu_constant


def kl_softplus_unit(alpha: float, f_val: float, prior: PriorSpec) -> float:
    if prior.kind != "log_normal":
        raise ConfigError("kl_softplus_unit needs a log-normal prior")
    if f_val <= 0:
        raise DomainError(f"softplus activation must be positive, got {f_val}")
    if alpha <= 0:
        raise DomainError(f"alpha must be positive, got {alpha}")
    s = prior.sigma
    d = math.log(f_val) - prior.mu
    return math.log(s / alpha) + (alpha * alpha + d * d) / (2 * s * s) - 0.5


# ---------------------------------------------------------------- tensor forms


def kl_relu(alpha: Tensor, f: Tensor, prior: PriorSpec, z_eps: float = Z_EPS) -> Tensor:
    """Elementwise ReLU-prior cost; the zero branch is a gradient-free constant."""
    zero = np.abs(f.data) <= z_eps
    if prior.q0 == 0 and zero.any():
        raise DegenerateBatchError("zero activation has infinite cost under a prior with q0 = 0")
    zero_cost = -math.log(prior.q0) if prior.q0 > 0 else 0.0
    active = T.add_scalar(T.scale(T.log(alpha), -1.0), prior.relu_constant)
    return T.where(~zero, active, Tensor(np.full(f.shape, zero_cost)))


def kl_softplus(alpha: Tensor, f: Tensor, mu: Tensor, log_sigma: Tensor) -> Tensor:
    """Elementwise normal-to-normal KL in log space, with trainable scalar mu, log sigma."""
    if np.any(f.data <= 0):
        raise DomainError("softplus activations must be strictly positive")
    shape = f.shape
    ls = T.expand(log_sigma, shape)
    inv_var = T.exp(T.scale(ls, -2.0))
    dev = T.sub(T.log(f), T.expand(mu, shape))
    quad = T.mul(T.add(T.square(alpha), T.square(dev)), inv_var)
    return T.add_scalar(T.add(T.sub(ls, T.log(alpha)), T.scale(quad, 0.5)), -0.5)


# ---------------------------------------------------------------- the layer


class InfoDropout(Module):
    """Information Dropout over the output of ``f_branch``.

    ``alpha_branch`` maps the same input to logits g(x) with the shape of
    f(x); alpha = alpha_max * sigmoid(g).  For the log-normal prior the
    prior location mu and log-scale are trainable scalars of the layer.
    """

    def __init__(self, f_branch: Module, alpha_branch: Module, activation: str,
                 prior: PriorSpec | None = None, alpha_max: float = DEFAULT_ALPHA_MAX,
                 train_prior: bool = True):
        if activation not in ("relu", "softplus"):
            raise ConfigError(f"unknown activation {activation!r}")
        if not alpha_max > 0:
            raise ConfigError("alpha_max must be positive")
        self.f_branch = f_branch
        self.alpha_branch = alpha_branch
        self.activation = activation
        self.prior = prior or PriorSpec.for_activation(activation)
        expected = "log_uniform" if activation == "relu" else "log_normal"
        if self.prior.kind != expected:
            raise ConfigError(f"{activation} activations need a {expected} prior")
        self.alpha_max = alpha_max
        self.mu = Tensor(self.prior.mu, requires_grad=train_prior)
        self.log_sigma = Tensor(math.log(self.prior.sigma), requires_grad=train_prior)

    def children(self):
        return iter((("f", self.f_branch), ("g", self.alpha_branch)))

    def own_parameters(self):
        if self.activation == "softplus" and self.mu.requires_grad:
            return {"prior_mu": self.mu, "prior_log_sigma": self.log_sigma}
        return {}

    def current_prior(self) -> PriorSpec:
        if self.activation == "relu":
            return self.prior
        return PriorSpec("log_normal", mu=float(self.mu.data), sigma=float(np.exp(self.log_sigma.data)))

    def alpha_from_logits(self, g: Tensor) -> Tensor:
        return T.scale(T.sigmoid(T.clip(g, -G_CLIP, G_CLIP)), self.alpha_max)

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        return info_dropout_forward(self, x, ctx).z

    @classmethod
    def dense(cls, n_in: int, n_out: int, activation: str, rng: Rng, **kw) -> "InfoDropout":
        momentum = kw.pop("momentum", 0.9)
        return cls(dense_block(n_in, n_out, activation, rng, momentum), Linear(n_in, n_out, rng, init_scale=0.1),
                   activation, **kw)

    @classmethod
    def conv(cls, c_in: int, c_out: int, k: int, activation: str, rng: Rng, stride: int = 1, **kw) -> "InfoDropout":
        momentum = kw.pop("momentum", 0.9)
        return cls(conv_block(c_in, c_out, k, activation, rng, stride=stride, momentum=momentum),
                   Conv2d(c_in, c_out, k, rng, stride=stride, init_scale=0.1), activation, **kw)


def alpha_forward(layer: InfoDropout, x: Tensor, ctx: ForwardContext | None = None) -> Tensor:
    """alpha(x) = alpha_max * sigmoid(g(x)), elementwise in (0, alpha_max)."""
    ctx = ctx or ForwardContext()
    return layer.alpha_from_logits(layer.alpha_branch(x, ctx))


def info_dropout_forward(layer: InfoDropout, x: Tensor, ctx: ForwardContext) -> LayerOutput:
    """Run the layer, append its :class:`LayerOutput` to ``ctx`` and return it."""
    f = layer.f_branch(x, ctx)
    g = layer.alpha_branch(x, ctx)
    if g.shape != f.shape:
        raise ConfigError(f"alpha branch shape {g.shape} differs from f branch shape {f.shape}")
    alpha = layer.alpha_from_logits(g)
    if ctx.stochastic:
        xi = T.sample_standard_normal(f.shape, ctx.noise_rng())
        z = T.mul(f, T.exp(T.mul(alpha, xi)))
    else:
        z = f
    if layer.activation == "relu":
        kl = kl_relu(alpha, f, layer.prior)
    else:
        kl = kl_softplus(alpha, f, layer.mu, layer.log_sigma)
    out = LayerOutput(z=z, kl_per_unit=kl, alpha=alpha, f=f, layer=layer)
    ctx.layer_outputs.append(out)
    return out


def layer_kl(out: LayerOutput) -> tuple[Tensor, np.ndarray | None]:
    """Mean over the batch of the summed per-unit KL.

    For conv-shaped outputs [b, c, h, w] also returns the [h, w] map of the
    KL summed over channels and averaged over the batch.
    """
    kl = out.kl_per_unit
    b = kl.shape[0]
    per_sample = T.sum(kl, axis=tuple(range(1, kl.ndim))) if kl.ndim > 1 else kl
    scalar = T.scale(T.sum(per_sample), 1.0 / b)
    spatial = kl.data.sum(axis=1).mean(axis=0) if kl.ndim == 4 else None
    return scalar, spatial
