"""
Cluttered MNIST: where does the network pay for information?
============================================================

Each image places one digit on a larger canvas among 8x8 crops of other
digits.  A small all-convolutional network with Information Dropout
learns to let information through only around the digit; the per-location
KL cost, summed over channels, makes this visible as a heatmap.

We also measure the Gaussian total correlation of the last noisy
representation for two values of ``beta``.
"""
import tempfile
from pathlib import Path

import numpy as np

from infodrop.config import TrainingConfig
from infodrop.tensor import Rng
from infodrop.train import export_kl_heatmaps, load_datasets, read_pgm, representation_tc, train


def config(beta):
    return TrainingConfig(network="all_cnn_96", filter_fraction=0.125, activation="softplus", beta=beta,
                          epochs=8, lr_drop_epochs=[], base_lr=0.05, batch_size=32,
                          dataset={"name": "cluttered", "canvas": 48, "n_distractors": 8,
                                   "train_size": 2000, "test_size": 300})


out = Path(tempfile.mkdtemp(prefix="cluttered_"))
train_ds, test_ds = load_datasets(config(0.01))
print("images:", train_ds.images.shape, "first digit (source, row, col):", train_ds.meta["placements"][0]["digit"])

runs = {}
for beta in (0.01, 1.0):
    runs[beta] = train(config(beta), train_ds, test_ds, out / f"beta{beta}")
    tc = representation_tc(runs[beta].network, test_ds, Rng(0))
    print(f"beta={beta}: test error {runs[beta].last('test').error_rate:.3f}, total correlation {tc:.3f}")

# %%
# One PGM per image and Information Dropout layer, 0 = cheapest location
paths = export_kl_heatmaps(out / "beta0.01" / "final.npz", test_ds.images[:2], out / "maps")
for p in paths:
    img = read_pgm(p)
    row, col = np.unravel_index(img.argmax(), img.shape)
    print(f"{p.name}: {img.shape[0]}x{img.shape[1]}, most expensive location at ({row}, {col})")
