"""Variational autoencoder whose latent layer is an Information Dropout layer.

With beta = 1 and no dataset-size scaling the reconstruction IB loss is
the negative ELBO of a VAE with a Bernoulli decoder, so this module reuses
the same layers, losses and optimizers as the classifiers.
"""
from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import DatasetSpec, _build
from .data import LabeledDataset, batch_iter
from .errors import ConfigError
from .layers import InfoDropout, layer_kl
from .losses import IBLossConfig, negative_elbo, vae_elbo_loss
from .nn import Activation, ForwardContext, Linear, Module, Sequential
from .optim import Adam
from .tensor import Rng, Tensor, backward

log = logging.getLogger(__name__)

VAE_METRICS_HEADER = ["epoch", "split", "reconstruction_nll", "kl_mean", "total_loss", "negative_elbo"]


@dataclass
class VAEConfig:
    hidden_units: int = 256
    latent_units: int = 32
    beta: float = 1.0
    alpha_max: float = 0.7
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 100
    seed: int = 0
    dataset: DatasetSpec = field(default_factory=DatasetSpec)

    def __post_init__(self):
        if isinstance(self.dataset, dict):
            self.dataset = _build(DatasetSpec, self.dataset, "dataset.")
        if not self.beta >= 0:
            raise ConfigError("beta must be ≥ 0")
        for key in ("hidden_units", "latent_units", "epochs", "batch_size"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be ≥ 1")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)


def vae_config_from_dict(raw: dict) -> VAEConfig:
    return _build(VAEConfig, raw)


def parse_vae_config(path: str | os.PathLike) -> VAEConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return vae_config_from_dict(raw)


class InfoDropoutVAE(Module):
    """Encoder MLP -> softplus Information Dropout latent -> decoder MLP -> pixel logits."""

    def __init__(self, n_pixels: int, cfg: VAEConfig, rng: Rng):
        h, k = cfg.hidden_units, cfg.latent_units
        self.n_pixels = n_pixels
        self.encoder = Sequential(Linear(n_pixels, h, rng.child(0)), Activation("softplus"))
        self.latent = InfoDropout(Sequential(Linear(h, k, rng.child(1)), Activation("softplus")),
                                  Linear(h, k, rng.child(2), init_scale=0.1), "softplus", alpha_max=cfg.alpha_max)
        self.decoder = Sequential(Linear(k, h, rng.child(3)), Activation("softplus"), Linear(h, n_pixels, rng.child(4)))

    def children(self):
        return iter((("encoder", self.encoder), ("latent", self.latent), ("decoder", self.decoder)))

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        return self.decoder(self.latent(self.encoder(x, ctx), ctx), ctx)


def vae_step_loss(model: InfoDropoutVAE, x: np.ndarray, cfg: IBLossConfig, rng: Rng):
    """One stochastic forward pass; returns (loss tensor, logits, kl scalars)."""
    flat = x.reshape(len(x), -1)
    ctx = ForwardContext(training=True, stochastic=True, rng=rng)
    logits = model(Tensor(flat), ctx)
    kls = [layer_kl(o)[0] for o in ctx.layer_outputs]
    return vae_elbo_loss(logits, flat, kls, cfg), logits, kls


def train_vae(cfg: VAEConfig, train_ds: LabeledDataset, test_ds: LabeledDataset | None = None,
              run_dir: str | os.PathLike | None = None) -> tuple[InfoDropoutVAE, list[dict]]:
    """Train with Adam on the beta-weighted negative ELBO; returns the model and per-epoch rows."""
    rng = Rng(cfg.seed)
    model = InfoDropoutVAE(int(np.prod(train_ds.image_shape)), cfg, rng.child(0))
    params = model.parameters()
    opt = Adam(params, cfg.lr)
    lcfg = IBLossConfig(beta=cfg.beta, n_train=1, task="reconstruction")
    rows: list[dict] = []
    for epoch in range(cfg.epochs):
        tot = nll = kl = elbo = 0.0
        n = 0
        for bi, (x, _, _) in enumerate(batch_iter(train_ds, min(cfg.batch_size, len(train_ds)), cfg.seed, epoch)):
            loss, logits, kls = vae_step_loss(model, x, lcfg, rng.child(1, epoch, bi))
            opt.step(backward(loss, params))
            b = len(x)
            k = sum(float(t.data) for t in kls)
            e = negative_elbo(logits, x.reshape(b, -1), kls)
            tot, kl, elbo, nll, n = tot + float(loss.data) * b, kl + k * b, elbo + e * b, nll + (e - k) * b, n + b
        rows.append({"epoch": epoch, "split": "train", "reconstruction_nll": nll / n, "kl_mean": kl / n,
                     "total_loss": tot / n, "negative_elbo": elbo / n})
        if test_ds is not None:
            rows.append({"epoch": epoch, "split": "test", **evaluate_vae(model, test_ds, lcfg, Rng(cfg.seed, (7,)))})
        log.info("vae epoch %d negative elbo %.3f", epoch, rows[-1]["negative_elbo"])
    if run_dir is not None:
        out = Path(run_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "vae_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
        with open(out / "vae_metrics.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, VAE_METRICS_HEADER)
            w.writeheader()
            w.writerows(rows)
    return model, rows


def evaluate_vae(model: InfoDropoutVAE, ds: LabeledDataset, lcfg: IBLossConfig, rng: Rng,
                 batch_size: int = 500) -> dict:
    """Single-sample negative ELBO estimate over ``ds`` (noise on, no parameter updates)."""
    tot = nll = kl = elbo = 0.0
    n = 0
    for bi, (x, _, _) in enumerate(batch_iter(ds, min(batch_size, len(ds)))):
        b = len(x)
        flat = x.reshape(b, -1)
        ctx = ForwardContext(training=False, stochastic=True, rng=rng.child(bi))
        logits = model(Tensor(flat), ctx)
        kls = [layer_kl(o)[0] for o in ctx.layer_outputs]
        k = sum(float(t.data) for t in kls)
        e = negative_elbo(logits, flat, kls)
        tot += float(vae_elbo_loss(logits, flat, kls, lcfg).data) * b
        kl, elbo, nll, n = kl + k * b, elbo + e * b, nll + (e - k) * b, n + b
    return {"reconstruction_nll": nll / n, "kl_mean": kl / n, "total_loss": tot / n, "negative_elbo": elbo / n}
