"""Empirical Information Bottleneck objectives.

    loss = task_nll + (beta / n_train) * sum over noise layers of KL

with softmax cross-entropy for classification and a Bernoulli decoder
for reconstruction.  With ``beta = 1`` and ``n_train = 1`` the
reconstruction objective is the usual negative ELBO of a VAE.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DomainError
from .tensor import Tensor


@dataclass(frozen=True)
class IBLossConfig:
    beta: float = 1.0
    n_train: int = 1
    task: str = "classification"
    decoder_likelihood: str = "bernoulli"

    def __post_init__(self):
        if not self.beta >= 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if int(self.n_train) < 1:
            raise ConfigError(f"n_train must be >= 1, got {self.n_train}")
        if self.task not in ("classification", "reconstruction"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.decoder_likelihood != "bernoulli":
            raise ConfigError("only the Bernoulli decoder is supported")

    @property
    def kl_weight(self) -> float:
        return self.beta / self.n_train


def total_kl(kl_scalars: Sequence[Tensor]) -> Tensor:
    return T.sum_scalars(kl_scalars)


def _regularized(nll: Tensor, kl_scalars: Sequence[Tensor], cfg: IBLossConfig) -> Tensor:
    if not kl_scalars:
        return nll
    return T.add(nll, T.scale(total_kl(kl_scalars), cfg.kl_weight))


def ib_classification_loss(logits: Tensor, labels, kl_scalars: Sequence[Tensor], cfg: IBLossConfig) -> Tensor:
    if cfg.task != "classification":
        raise ConfigError("ib_classification_loss needs task='classification'")
    return _regularized(T.softmax_cross_entropy(logits, labels), kl_scalars, cfg)


def binarize(target: np.ndarray) -> np.ndarray:
    return (np.asarray(target) >= 0.5).astype(np.float64)


def ib_loss(outputs: Tensor, targets, kl_scalars: Sequence[Tensor], cfg: IBLossConfig) -> Tensor:
    """Task-dispatching IB objective (classification or reconstruction)."""
    if cfg.task == "classification":
        return ib_classification_loss(outputs, targets, kl_scalars, cfg)
    return _regularized(T.bernoulli_nll(outputs, binarize(_checked_pixels(targets))), kl_scalars, cfg)


def _checked_pixels(target) -> np.ndarray:
    t = np.asarray(target, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise DomainError("reconstruction targets must lie in [0, 1]")
    return t


def vae_elbo_loss(recon_logits: Tensor, target, kl_scalars: Sequence[Tensor], cfg: IBLossConfig) -> Tensor:
    """Bernoulli-decoder VAE objective: reconstruction NLL plus the weighted KL."""
    if cfg.task != "reconstruction":
        raise ConfigError("vae_elbo_loss needs task='reconstruction'")
    nll = T.bernoulli_nll(recon_logits, binarize(_checked_pixels(target)))
    return _regularized(nll, kl_scalars, cfg)


def negative_elbo(recon_logits: Tensor, target, kl_scalars: Sequence[Tensor]) -> float:
    """Unscaled per-sample negative ELBO (NLL + full KL), in nats."""
    nll = T.bernoulli_nll(recon_logits, binarize(_checked_pixels(target)))
    return float(nll.data) + float(sum(float(k.data) for k in kl_scalars))
