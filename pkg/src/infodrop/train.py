"""Training loop, evaluation modes, nuisance probing and exports."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import TrainingConfig, config_from_dict, write_config
from .data import LabeledDataset, batch_iter, load_cifar10_bin, load_dataset, load_mnist, make_cluttered, make_occluded
from .errors import CheckpointError, DataError, DomainError, NonFiniteError, TopologyError, TrainingDivergedError
from .layers import layer_kl
from .losses import IBLossConfig, ib_classification_loss
from .metrics import CovarianceSummary, gaussian_total_correlation
from .models import Network, build_network
from .nn import ForwardContext, Linear, Activation, Sequential
from .optim import SGD, Adam
from .tensor import Rng, Tensor, backward

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "split", "cross_entropy", "kl_mean", "total_loss", "error_rate", "alpha_mean",
                  "tc_estimate", "lr"]


@dataclass
class MetricsRow:
    epoch: int
    split: str
    lr: float
    cross_entropy: float
    kl_mean: float
    total_loss: float
    error_rate: float
    alpha_mean: float
    tc_estimate: float | None = None

    def as_csv(self) -> list:
        return [self.epoch, self.split, repr(self.cross_entropy), repr(self.kl_mean), repr(self.total_loss),
                repr(self.error_rate), repr(self.alpha_mean),
                "" if self.tc_estimate is None else repr(self.tc_estimate), repr(self.lr)]


@dataclass
class RunResult:
    run_dir: Path
    network: Network
    config: TrainingConfig
    rows: list[MetricsRow] = field(default_factory=list)

    def last(self, split: str) -> MetricsRow:
        return [r for r in self.rows if r.split == split][-1]


# ---------------------------------------------------------------- datasets


def load_datasets(cfg: TrainingConfig) -> tuple[LabeledDataset, LabeledDataset]:
    """Resolve ``cfg.dataset`` into (train, test) datasets."""
    spec = cfg.dataset
    rng = Rng(spec.seed)
    if spec.name == "idrp":
        if not spec.train_path or not spec.test_path:
            raise DataError("dataset 'idrp' needs train_path and test_path")
        train, test = load_dataset(spec.train_path), load_dataset(spec.test_path)
    elif spec.name == "mnist":
        train, test = load_mnist(spec.root, "train"), load_mnist(spec.root, "test")
    elif spec.name == "cifar10":
        train, test = load_cifar10_bin(spec.root, "train"), load_cifar10_bin(spec.root, "test")
    elif spec.name == "cluttered":
        n_tr = spec.train_size or 50000
        n_te = spec.test_size or 10000
        train = make_cluttered(load_mnist(spec.root, "train"), n_tr, rng.child(0), spec.canvas, spec.n_distractors)
        test = make_cluttered(load_mnist(spec.root, "test"), n_te, rng.child(1), spec.canvas, spec.n_distractors)
    elif spec.name == "occluded":
        cifar_tr, cifar_te = load_cifar10_bin(spec.root, "train"), load_cifar10_bin(spec.root, "test")
        mn_tr, mn_te = load_mnist(spec.root, "train"), load_mnist(spec.root, "test")
        train = make_occluded(cifar_tr, mn_tr, spec.train_size or len(cifar_tr), rng.child(0))
        test = make_occluded(cifar_te, mn_te, spec.test_size or len(cifar_te), rng.child(1))
    else:
        raise DataError(f"unknown dataset {spec.name!r}")
    if spec.train_size and len(train) > spec.train_size:
        train = train.subset(np.arange(spec.train_size))
    if spec.test_size and len(test) > spec.test_size:
        test = test.subset(np.arange(spec.test_size))
    return train, test


# ---------------------------------------------------------------- forward helpers


def forward_pass(net: Network, x: np.ndarray, *, training: bool, stochastic: bool, rng: Rng | None):
    ctx = ForwardContext(training=training, stochastic=stochastic, rng=rng)
    logits = net(Tensor(x), ctx)
    return logits, ctx


def _alpha_stats(ctx: ForwardContext) -> tuple[float, int, float]:
    s, n, mx = 0.0, 0, 0.0
    for o in ctx.layer_outputs:
        s += float(o.alpha.data.sum())
        n += o.alpha.size
        mx = max(mx, float(o.alpha.data.max()))
    return s, n, mx


def _kl_terms(ctx: ForwardContext) -> list[Tensor]:
    return [layer_kl(o)[0] for o in ctx.layer_outputs]


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path: str | os.PathLike, net: Network, cfg: TrainingConfig, **meta) -> Path:
    arrays = {f"param::{k}": v.data for k, v in net.parameters().items()}
    arrays.update({f"buffer::{k}": v for k, v in net.buffers().items()})
    info = {"config": cfg.to_dict(), "input_shape": list(net.input_shape), **meta}
    arrays["meta"] = np.array(json.dumps(info, sort_keys=True))
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path: str | os.PathLike) -> tuple[Network, TrainingConfig, dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        cfg = config_from_dict(meta["config"])
        net = build_network(cfg, tuple(meta["input_shape"]), Rng(cfg.seed).child(0), meta.get("n_classes", 10))
        params = net.parameters()
        for k, p in params.items():
            key = f"param::{k}"
            if key not in z.files or z[key].shape != p.shape:
                raise CheckpointError(f"checkpoint {path} does not match the network at {k}")
            p.assign(z[key])
        net.load_buffers({k[len("buffer::"):]: z[k] for k in z.files if k.startswith("buffer::")})
    return net, cfg, meta


def _check_input(net: Network, ds: LabeledDataset) -> None:
    if tuple(ds.image_shape) != net.input_shape and net.kind == "mlp":
        raise CheckpointError(f"network expects inputs {net.input_shape}, dataset has {ds.image_shape}")
    if ds.image_shape[0] != net.input_shape[0]:
        raise CheckpointError(f"network expects {net.input_shape[0]} channels, dataset has {ds.image_shape[0]}")


# ---------------------------------------------------------------- evaluation


def evaluate_split(net: Network, ds: LabeledDataset, cfg: TrainingConfig, n_train: int,
                   batch_size: int = 256) -> MetricsRow:
    """Deterministic-mode CE / KL / error over ``ds`` (noise off, batchnorm eval)."""
    lcfg = IBLossConfig(beta=cfg.beta, n_train=n_train)
    n = len(ds)
    ce = kl = err = 0.0
    a_sum, a_n = 0.0, 0
    for x, y, _ in batch_iter(ds, min(batch_size, n)):
        logits, ctx = forward_pass(net, x, training=False, stochastic=False, rng=None)
        ce += float(T.softmax_cross_entropy(logits, y).data) * len(y)
        kl += sum(float(k.data) for k in _kl_terms(ctx)) * len(y)
        err += float((logits.data.argmax(axis=1) != y).sum())
        s, c, _ = _alpha_stats(ctx)
        a_sum, a_n = a_sum + s, a_n + c
    ce, kl = ce / n, kl / n
    return MetricsRow(0, "test", 0.0, ce, kl, ce + lcfg.kl_weight * kl, err / n, a_sum / a_n if a_n else 0.0)


def predict_proba(net: Network, images: np.ndarray, mode: str, n_samples: int = 1, seed: int = 0,
                  batch_size: int = 256) -> np.ndarray:
    """Class probabilities; stochastic mode averages ``n_samples`` noise draws."""
    if mode not in ("deterministic", "stochastic", "det", "stoch"):
        raise ValueError(f"unknown mode {mode!r}")
    stochastic = mode in ("stochastic", "stoch")
    rng = Rng(seed)
    probs = np.zeros((len(images), 10))
    for start in range(0, len(images), batch_size):
        x = images[start:start + batch_size]
        acc = None
        draws = n_samples if stochastic else 1
        for s in range(draws):
            logits, _ = forward_pass(net, x, training=False, stochastic=stochastic, rng=rng.child(start, s))
            p = T.softmax_array(logits.data)
            acc = p if acc is None else acc + p
        probs[start:start + len(x)] = acc / draws
    return probs


def evaluate(checkpoint, dataset: LabeledDataset, mode: str = "deterministic", n_samples: int = 1,
             seed: int = 0) -> float:
    """Error rate of a checkpoint (path or Network) on ``dataset``."""
    net = load_checkpoint(checkpoint)[0] if isinstance(checkpoint, (str, os.PathLike)) else checkpoint
    _check_input(net, dataset)
    probs = predict_proba(net, dataset.images, mode, n_samples, seed)
    return float((probs.argmax(axis=1) != dataset.labels).mean())


# ---------------------------------------------------------------- training


def train(cfg: TrainingConfig, train_ds: LabeledDataset, test_ds: LabeledDataset | None = None,
          run_dir: str | os.PathLike | None = None, compute_tc: bool = False) -> RunResult:
    """Minimize the empirical IB Lagrangian with SGD + momentum.

    Writes ``config.json``, ``metrics.csv`` and checkpoints (before every
    learning-rate drop and at the end) into ``run_dir`` when given.
    Batches of a single example are skipped (batchnorm needs two).
    """
    rng = Rng(cfg.seed)
    net = build_network(cfg, train_ds.image_shape, rng.child(0), train_ds.n_classes)
    params = net.parameters()
    opt = SGD(params, cfg.base_lr, cfg.momentum)
    n_train = len(train_ds)
    lcfg = IBLossConfig(beta=cfg.beta, n_train=n_train)
    stochastic = cfg.dropout_kind != "none"
    out_dir = Path(run_dir) if run_dir is not None else None
    writer = None
    if out_dir is not None:
        write_config(cfg, out_dir)
        fh = open(out_dir / "metrics.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
    result = RunResult(out_dir, net, cfg)
    try:
        for epoch in range(cfg.epochs):
            lr = cfg.lr_at(epoch)
            opt.lr = lr
            ce = kl = tot = err = 0.0
            a_sum, a_n, seen = 0.0, 0, 0
            for bi, (x, y, _) in enumerate(batch_iter(train_ds, min(cfg.batch_size, n_train), cfg.seed, epoch)):
                if len(y) < 2:
                    continue
                try:
                    logits, ctx = forward_pass(net, x, training=True, stochastic=stochastic,
                                               rng=rng.child(1, epoch, bi))
                    kls = _kl_terms(ctx)
                    loss = ib_classification_loss(logits, y, kls, lcfg)
                except (NonFiniteError, DomainError) as exc:
                    _record_abort(out_dir, epoch, bi, str(exc))
                    raise TrainingDivergedError(epoch, bi, str(exc)) from exc
                if not math.isfinite(float(loss.data)):
                    _record_abort(out_dir, epoch, bi, "loss")
                    raise TrainingDivergedError(epoch, bi)
                grads = backward(loss, params)
                opt.step(grads)
                b = len(y)
                batch_ce = float(T.softmax_cross_entropy(logits, y).data)
                batch_kl = sum(float(k.data) for k in kls)
                ce += batch_ce * b
                kl += batch_kl * b
                tot += (batch_ce + lcfg.kl_weight * batch_kl) * b
                err += float((logits.data.argmax(axis=1) != y).sum())
                s, c, _ = _alpha_stats(ctx)
                a_sum, a_n, seen = a_sum + s, a_n + c, seen + b
            row = MetricsRow(epoch, "train", lr, ce / seen, kl / seen, tot / seen, err / seen,
                             a_sum / a_n if a_n else 0.0)
            result.rows.append(row)
            rows = [row]
            if test_ds is not None:
                trow = evaluate_split(net, test_ds, cfg, n_train)
                trow.epoch, trow.lr = epoch, lr
                if compute_tc:
                    trow.tc_estimate = representation_tc(net, test_ds, Rng(cfg.seed).child(2, epoch))
                result.rows.append(trow)
                rows.append(trow)
            log.info("epoch %d lr %.4g train err %.4f ce %.4f kl %.3f", epoch, lr, row.error_rate,
                     row.cross_entropy, row.kl_mean)
            if writer is not None:
                for r in rows:
                    writer.writerow(r.as_csv())
                fh.flush()
                if epoch + 1 in cfg.lr_drop_epochs or epoch + 1 == cfg.epochs:
                    name = "final.npz" if epoch + 1 == cfg.epochs else f"epoch{epoch + 1:04d}.npz"
                    save_checkpoint(out_dir / name, net, cfg, n_train=n_train, epoch=epoch,
                                    n_classes=train_ds.n_classes)
    finally:
        if writer is not None:
            fh.close()
    return result


def _record_abort(out_dir: Path | None, epoch: int, batch: int, message: str) -> None:
    if out_dir is not None:
        (out_dir / "abort.json").write_text(json.dumps({"epoch": epoch, "batch": batch, "error": message}))


def read_metrics(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- representations


def representation(net: Network, images: np.ndarray, position: int | None = None, stochastic: bool = True,
                   seed: int = 0, batch_size: int = 256) -> np.ndarray:
    """Output of a dropout position (default: the last), batchnorm in eval mode."""
    if net.n_dropout == 0:
        raise TopologyError("network has no dropout positions")
    key = f"dropout{net.n_dropout - 1 if position is None else position}"
    rng = Rng(seed)
    parts = []
    for start in range(0, len(images), batch_size):
        _, ctx = forward_pass(net, images[start:start + batch_size], training=False, stochastic=stochastic,
                              rng=rng.child(start))
        parts.append(ctx.capture[key].data)
    return np.concatenate(parts)


def representation_tc(net: Network, ds: LabeledDataset, rng: Rng | None = None, stochastic: bool = True,
                      max_images: int = 2000) -> float:
    """Gaussian total correlation of the log-activations of the last dropout position.

    Conv representations are treated as vectors over channels, with every
    (image, location) pair as one sample; MLP representations use units.
    """
    seed = 0 if rng is None else int(rng.integers(2**31))
    z = representation(net, ds.images[:max_images], stochastic=stochastic, seed=seed)
    if np.any(z <= 0):
        raise TopologyError("total correlation of log-activations needs strictly positive (softplus) units")
    logz = np.log(z)
    if logz.ndim == 4:
        logz = logz.transpose(0, 2, 3, 1).reshape(-1, logz.shape[1])
    return gaussian_total_correlation(CovarianceSummary.from_samples(logz))


# ---------------------------------------------------------------- nuisance probe


@dataclass
class ProbeConfig:
    hidden: int = 256
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 128
    test_fraction: float = 0.2
    seed: int = 0
    shuffle_labels: bool = False


def train_probe(features: np.ndarray, labels: np.ndarray, cfg: ProbeConfig, n_classes: int = 10) -> float:
    """Fit a 2-layer ReLU MLP on standardized features; return held-out error."""
    x = np.asarray(features, dtype=np.float64).reshape(len(features), -1)
    y = np.asarray(labels, dtype=np.int64)
    rng = Rng(cfg.seed)
    order = rng.child(0).permutation(len(y))
    if cfg.shuffle_labels:
        y = y[rng.child(1).permutation(len(y))]
    n_test = max(1, int(round(cfg.test_fraction * len(y))))
    te, tr = order[:n_test], order[n_test:]
    mu, sd = x[tr].mean(axis=0), x[tr].std(axis=0) + 1e-8
    x = (x - mu) / sd
    probe = Sequential(Linear(x.shape[1], cfg.hidden, rng.child(2)), Activation("relu"),
                       Linear(cfg.hidden, n_classes, rng.child(3)))
    params = probe.parameters()
    opt = Adam(params, cfg.lr)
    ds = LabeledDataset(x[tr][:, None, None, :], y[tr], n_classes=n_classes)
    ctx = ForwardContext()
    for epoch in range(cfg.epochs):
        for xb, yb, _ in batch_iter(ds, min(cfg.batch_size, len(ds)), cfg.seed, epoch):
            loss = T.softmax_cross_entropy(probe(Tensor(xb.reshape(len(yb), -1)), ctx), yb)
            opt.step(backward(loss, params))
    pred = probe(Tensor(x[te]), ctx).data.argmax(axis=1)
    return float((pred != y[te]).mean())


def probe_nuisance(checkpoint, dataset: LabeledDataset, probe_cfg: ProbeConfig | None = None) -> float:
    """Error of a fresh probe predicting the nuisance label from the noisy representation."""
    if dataset.nuisance_labels is None:
        raise DataError("dataset has no nuisance labels")
    probe_cfg = probe_cfg or ProbeConfig()
    net = load_checkpoint(checkpoint)[0] if isinstance(checkpoint, (str, os.PathLike)) else checkpoint
    _check_input(net, dataset)
    z = representation(net, dataset.images, stochastic=True, seed=probe_cfg.seed)
    return train_probe(z, dataset.nuisance_labels, probe_cfg)


# ---------------------------------------------------------------- KL heatmaps


def kl_spatial_maps(net: Network, image: np.ndarray) -> list[np.ndarray]:
    """Per-location KL (summed over channels) for each Information Dropout layer."""
    _, ctx = forward_pass(net, image[None], training=False, stochastic=False, rng=None)
    return [layer_kl(o)[1] for o in ctx.layer_outputs]


def write_pgm(path: str | os.PathLike, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while raw[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    pos += 1
    if tokens[0] != "P5" or tokens[3] != "255":
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)


def normalize_map(m: np.ndarray) -> np.ndarray:
    lo, hi = float(m.min()), float(m.max())
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.zeros(m.shape, dtype=np.uint8)
    return np.round(255.0 * (m - lo) / (hi - lo)).astype(np.uint8)


def export_kl_heatmaps(checkpoint, images: np.ndarray, out_dir: str | os.PathLike) -> list[Path]:
    """One PGM (plus a ``.txt`` with the raw min/max) per image and Information Dropout layer."""
    net = load_checkpoint(checkpoint)[0] if isinstance(checkpoint, (str, os.PathLike)) else checkpoint
    if not net.is_conv:
        raise TopologyError("KL heatmaps need convolutional Information Dropout layers")
    if not net.info_layers():
        raise TopologyError("network has no Information Dropout layers")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(np.asarray(images, dtype=np.float64)):
        for j, m in enumerate(kl_spatial_maps(net, img)):
            p = out / f"image{i:03d}_layer{j}.pgm"
            write_pgm(p, normalize_map(m))
            p.with_suffix(".txt").write_text(f"min {float(m.min())!r}\nmax {float(m.max())!r}\n")
            paths.append(p)
    return paths
