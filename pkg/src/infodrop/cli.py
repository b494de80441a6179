"""Command-line entry point: ``infodrop <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import parse_config
from .data import LabeledDataset, load_cifar10_bin, load_dataset, load_mnist, make_cluttered, make_occluded, \
    save_dataset
from .errors import InfoDropError
from .tensor import Rng

log = logging.getLogger("infodrop")


def _dataset_for(checkpoint_cfg, path: str | None) -> LabeledDataset:
    if path:
        return load_dataset(path)
    from .train import load_datasets

    return load_datasets(checkpoint_cfg)[1]


def cmd_train(args) -> int:
    from .train import load_datasets, train

    run_dir = Path(args.run_dir or Path(args.config).with_suffix(""))
    cfg = parse_config(args.config, run_dir)
    train_ds, test_ds = load_datasets(cfg)
    result = train(cfg, train_ds, test_ds, run_dir, compute_tc=args.tc)
    last = result.last("test")
    print(json.dumps({"run_dir": str(run_dir), "test_error": last.error_rate, "test_cross_entropy": last.cross_entropy}))
    return 0


def cmd_eval(args) -> int:
    from .train import evaluate, load_checkpoint

    net, cfg, _ = load_checkpoint(args.checkpoint)
    ds = _dataset_for(cfg, args.dataset)
    err = evaluate(net, ds, "stochastic" if args.mode == "stoch" else "deterministic", args.samples, args.seed)
    print(json.dumps({"mode": args.mode, "samples": args.samples, "error_rate": err}))
    return 0


def cmd_probe(args) -> int:
    from .train import ProbeConfig, probe_nuisance

    ds = load_dataset(args.dataset)
    cfg = ProbeConfig(epochs=args.epochs, seed=args.seed, shuffle_labels=args.shuffle_labels)
    print(json.dumps({"nuisance_error": probe_nuisance(args.checkpoint, ds, cfg)}))
    return 0


def cmd_heatmaps(args) -> int:
    from .train import export_kl_heatmaps

    images = load_dataset(args.images).images[: args.limit]
    paths = export_kl_heatmaps(args.checkpoint, images, args.out)
    print(json.dumps({"written": [str(p) for p in paths]}))
    return 0


def cmd_vae(args) -> int:
    from .train import load_datasets
    from .vae import parse_vae_config, train_vae
    from .config import TrainingConfig

    cfg = parse_vae_config(args.config)
    train_ds, test_ds = load_datasets(TrainingConfig(dataset=cfg.dataset))
    run_dir = Path(args.run_dir or Path(args.config).with_suffix(""))
    _, rows = train_vae(cfg, train_ds, test_ds, run_dir)
    print(json.dumps(rows[-1]))
    return 0


def cmd_tc(args) -> int:
    from .train import load_checkpoint, representation_tc

    net, cfg, _ = load_checkpoint(args.checkpoint)
    ds = _dataset_for(cfg, args.dataset)
    tc = representation_tc(net, ds, Rng(args.seed), stochastic=not args.deterministic)
    print(json.dumps({"total_correlation": tc}))
    return 0


def cmd_verify(args) -> int:
    from .verify import report_json, run_verification_suite

    report = run_verification_suite(args.seed)
    text = report_json(report)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0 if all(e["pass"] for e in report) else 1


def cmd_make_dataset(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = Rng(args.seed)
    mn_tr, mn_te = load_mnist(args.root, "train"), load_mnist(args.root, "test")
    if args.kind == "cluttered":
        train = make_cluttered(mn_tr, args.n_train, rng.child(0), args.canvas, args.n_distractors)
        test = make_cluttered(mn_te, args.n_test, rng.child(1), args.canvas, args.n_distractors)
    else:
        train = make_occluded(load_cifar10_bin(args.root, "train"), mn_tr, args.n_train, rng.child(0))
        test = make_occluded(load_cifar10_bin(args.root, "test"), mn_te, args.n_test, rng.child(1))
    save_dataset(out / "train.idrp", train)
    save_dataset(out / "test.idrp", test)
    print(json.dumps({"train": str(out / "train.idrp"), "test": str(out / "test.idrp"),
                      "shape": list(train.image_shape)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="infodrop", description="Information Dropout training and analysis tools.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train a classifier from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--run-dir", help="output directory (default: config path without suffix)")
    s.add_argument("--tc", action="store_true", help="log the test-set total correlation every epoch")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="error rate of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--mode", choices=("det", "stoch"), default="det")
    s.add_argument("--samples", type=int, default=1)
    s.add_argument("--dataset", help="IDRP dataset file (default: the run's test split)")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("probe", help="nuisance-probe error from the noisy representation")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", required=True, help="IDRP dataset file with nuisance labels")
    s.add_argument("--epochs", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--shuffle-labels", action="store_true")
    s.set_defaults(fn=cmd_probe)

    s = sub.add_parser("heatmaps", help="per-location KL heatmaps as PGM files")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--images", required=True, help="IDRP dataset file")
    s.add_argument("--limit", type=int, default=4)
    s.add_argument("--out", default="heatmaps")
    s.set_defaults(fn=cmd_heatmaps)

    s = sub.add_parser("vae", help="train the Information Dropout VAE")
    s.add_argument("--config", required=True)
    s.add_argument("--run-dir")
    s.set_defaults(fn=cmd_vae)

    s = sub.add_parser("tc", help="Gaussian total correlation of the final dropout layer")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", help="IDRP dataset file (default: the run's test split)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--deterministic", action="store_true", help="disable the noise")
    s.set_defaults(fn=cmd_tc)

    s = sub.add_parser("verify", help="run the oracle checks and print a JSON report")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_verify)

    s = sub.add_parser("make-dataset", help="generate a nuisance dataset as IDRP files")
    s.add_argument("kind", choices=("cluttered", "occluded"))
    s.add_argument("--out", required=True)
    s.add_argument("--root", help="raw data directory (default: $INFODROP_DATA_DIR)")
    s.add_argument("--n-train", type=int, default=50000)
    s.add_argument("--n-test", type=int, default=10000)
    s.add_argument("--canvas", type=int, default=96)
    s.add_argument("--n-distractors", type=int, default=21)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_make_dataset)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.fn(args)
    except InfoDropError as exc:
        print(f"infodrop {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
