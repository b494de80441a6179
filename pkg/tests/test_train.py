import json
import math

import numpy as np
import pytest

from infodrop.config import TrainingConfig
from infodrop.data import LabeledDataset, load_mnist
from infodrop.errors import CheckpointError, DataError, TopologyError, TrainingDivergedError
from infodrop.models import build_network
from infodrop.nn import BatchNorm
from infodrop.train import (
    METRICS_HEADER,
    ProbeConfig,
    evaluate,
    export_kl_heatmaps,
    load_checkpoint,
    normalize_map,
    probe_nuisance,
    read_metrics,
    read_pgm,
    representation_tc,
    train,
    train_probe,
)
from infodrop.tensor import Rng


@pytest.fixture(scope="module")
def mnist(data_root):
    return load_mnist(data_root, "train"), load_mnist(data_root, "test")


def small_cfg(**kw):
    base = dict(hidden_units=32, epochs=3, lr_drop_epochs=[2], batch_size=50, base_lr=0.05,
                activation="softplus", beta=1.0)
    base.update(kw)
    return TrainingConfig(**base)


def flatten_alpha(net, value):
    """Zero every noise-scale branch and put ``value`` in its bias."""
    for layer in net.info_layers():
        for name, p in layer.alpha_branch.parameters().items():
            p.assign(np.full(p.shape, value) if name.endswith("bias") else np.zeros(p.shape))


# ---------------------------------------------------------------- training loop


def test_overfit_thirty_samples(mnist):
    ds = mnist[0].subset(np.arange(30))
    cfg = TrainingConfig(beta=0.0, dropout_kind="none", epochs=200, batch_size=30)
    res = train(cfg, ds)
    assert res.last("train").error_rate == 0.0
    assert evaluate(res.network, ds) == 0.0


def test_lr_schedule_recorded(mnist, tmp_path):
    ds = mnist[0].subset(np.arange(40))
    cfg = TrainingConfig(hidden_units=8, epochs=32, lr_drop_epochs=[30], batch_size=20, dropout_kind="none")
    train(cfg, ds, run_dir=tmp_path)
    rows = read_metrics(tmp_path / "metrics.csv")
    lr = {int(r["epoch"]): float(r["lr"]) for r in rows}
    assert lr[29] == 0.07
    assert lr[30] == pytest.approx(0.007, rel=1e-12)
    assert (tmp_path / "epoch0030.npz").exists() and (tmp_path / "final.npz").exists()


def test_metrics_deterministic(mnist, tmp_path):
    train_ds, test_ds = mnist[0].subset(np.arange(200)), mnist[1].subset(np.arange(100))
    cfg = small_cfg()
    train(cfg, train_ds, test_ds, tmp_path / "a")
    train(cfg, train_ds, test_ds, tmp_path / "b")
    a, b = (tmp_path / "a" / "metrics.csv").read_bytes(), (tmp_path / "b" / "metrics.csv").read_bytes()
    assert a == b
    assert a.decode().splitlines()[0] == ",".join(METRICS_HEADER)


@pytest.mark.parametrize("activation", ["softplus", "relu"])
def test_logged_loss_consistency_and_alpha_bound(mnist, tmp_path, activation):
    train_ds, test_ds = mnist[0].subset(np.arange(200)), mnist[1].subset(np.arange(100))
    cfg = small_cfg(activation=activation, beta=3.0)
    train(cfg, train_ds, test_ds, tmp_path)
    for r in read_metrics(tmp_path / "metrics.csv"):
        ce, kl, total = float(r["cross_entropy"]), float(r["kl_mean"]), float(r["total_loss"])
        assert abs(ce + cfg.beta / len(train_ds) * kl - total) <= 1e-9
        assert 0 < float(r["alpha_mean"]) < 0.7
    # the final checkpoint reproduces the logged test row
    net, _, meta = load_checkpoint(tmp_path / "final.npz")
    last = [r for r in read_metrics(tmp_path / "metrics.csv") if r["split"] == "test"][-1]
    assert meta["n_train"] == len(train_ds)
    assert evaluate(net, test_ds) == pytest.approx(float(last["error_rate"]), abs=1e-12)


def test_config_written(mnist, tmp_path):
    cfg = small_cfg(epochs=1, lr_drop_epochs=[])
    train(cfg, mnist[0].subset(np.arange(60)), run_dir=tmp_path)
    assert json.loads((tmp_path / "config.json").read_text()) == cfg.to_dict()


def test_divergence_recorded(mnist, tmp_path):
    cfg = small_cfg(base_lr=1e12, momentum=0.0, epochs=5, lr_drop_epochs=[])
    with pytest.raises(TrainingDivergedError) as info:
        train(cfg, mnist[0].subset(np.arange(200)), run_dir=tmp_path)
    abort = json.loads((tmp_path / "abort.json").read_text())
    assert (abort["epoch"], abort["batch"]) == (info.value.epoch, info.value.batch)


# ---------------------------------------------------------------- evaluation


@pytest.fixture(scope="module")
def trained(mnist, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    train(small_cfg(epochs=2, lr_drop_epochs=[]), mnist[0].subset(np.arange(300)), run_dir=out)
    return out / "final.npz"


def test_deterministic_eval_repeatable(trained, mnist):
    test_ds = mnist[1].subset(np.arange(200))
    assert evaluate(trained, test_ds, "deterministic") == evaluate(trained, test_ds, "deterministic")


def test_stochastic_eval_reproducible(trained, mnist):
    test_ds = mnist[1].subset(np.arange(200))
    a = evaluate(trained, test_ds, "stochastic", n_samples=1, seed=4)
    assert a == evaluate(trained, test_ds, "stochastic", n_samples=1, seed=4)


def test_no_noise_limit_modes_agree(trained, mnist):
    net = load_checkpoint(trained)[0]
    flatten_alpha(net, -1e6)
    test_ds = mnist[1].subset(np.arange(200))
    assert evaluate(net, test_ds, "stochastic", n_samples=3) == evaluate(net, test_ds, "deterministic")


def test_eval_shape_mismatch(trained):
    ds = LabeledDataset(np.zeros((2, 1, 20, 20)), [0, 1])
    with pytest.raises(CheckpointError):
        evaluate(trained, ds)


def test_tc_needs_positive_units(mnist):
    ds = mnist[1].subset(np.arange(50))
    relu = build_network(small_cfg(activation="relu"), (1, 28, 28), Rng(0))
    with pytest.raises(TopologyError):
        representation_tc(relu, ds, stochastic=False)
    soft = build_network(small_cfg(), (1, 28, 28), Rng(0))
    assert representation_tc(soft, ds) >= 0


# ---------------------------------------------------------------- nuisance probe


@pytest.fixture(scope="module")
def digit_nuisance(mnist):
    ds = mnist[0].subset(np.arange(2500))
    return LabeledDataset(ds.images, ds.labels, nuisance_labels=ds.labels)


def test_probe_shuffled_labels_at_chance(digit_nuisance):
    net = build_network(small_cfg(hidden_units=64), (1, 28, 28), Rng(0))
    err = probe_nuisance(net, digit_nuisance, ProbeConfig(epochs=10, shuffle_labels=True))
    assert abs(err - 0.9) <= 0.05


def test_probe_raw_input_below_chance(digit_nuisance):
    err = train_probe(digit_nuisance.images, digit_nuisance.nuisance_labels, ProbeConfig(epochs=10))
    assert err < 0.3


def test_probe_needs_nuisance_labels(mnist):
    net = build_network(small_cfg(), (1, 28, 28), Rng(0))
    with pytest.raises(DataError):
        probe_nuisance(net, mnist[1].subset(np.arange(10)))


# ---------------------------------------------------------------- heatmaps


def conv_net(activation="softplus", seed=0):
    cfg = TrainingConfig(network="all_cnn_96", filter_fraction=0.125, activation=activation, seed=seed)
    return build_network(cfg, (1, 96, 96), Rng(seed).child(0))


def test_heatmap_sizes_and_format(tmp_path):
    img = np.random.default_rng(0).uniform(size=(2, 1, 96, 96))
    paths = export_kl_heatmaps(conv_net(), img, tmp_path)
    assert len(paths) == 8
    sizes = [read_pgm(p).shape for p in paths[:4]]
    assert sizes == [(48, 48), (24, 24), (12, 12), (6, 6)]
    raw = paths[0].read_bytes()
    assert raw.startswith(b"P5\n48 48\n255\n") and len(raw) == len(b"P5\n48 48\n255\n") + 48 * 48


def test_heatmaps_bit_identical(tmp_path):
    img = np.random.default_rng(1).uniform(size=(1, 1, 96, 96))
    a = export_kl_heatmaps(conv_net(seed=3), img, tmp_path / "a")
    b = export_kl_heatmaps(conv_net(seed=3), img, tmp_path / "b")
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]


def test_constant_alpha_gives_flat_heatmap(tmp_path):
    net = conv_net("relu")
    flatten_alpha(net, 0.3)
    # pin every f branch to a positive constant so the ReLU cost is -log(alpha) + C everywhere
    for layer in net.info_layers():
        bn = [m for m in layer.f_branch.modules() if isinstance(m, BatchNorm)][0]
        bn.gamma.assign(np.zeros(bn.gamma.shape))
        bn.beta_shift.assign(np.ones(bn.beta_shift.shape))
    paths = export_kl_heatmaps(net, np.random.default_rng(2).uniform(size=(1, 1, 96, 96)), tmp_path)
    for p in paths:
        px = read_pgm(p)
        assert np.all(px == px.flat[0])


def test_normalize_constant_map():
    assert np.all(normalize_map(np.full((3, 4), math.pi)) == 0)
    assert normalize_map(np.array([[0.0, 1.0]])).tolist() == [[0, 255]]


def test_heatmaps_reject_mlp(tmp_path):
    net = build_network(small_cfg(), (1, 28, 28), Rng(0))
    with pytest.raises(TopologyError):
        export_kl_heatmaps(net, np.zeros((1, 1, 28, 28)), tmp_path)
