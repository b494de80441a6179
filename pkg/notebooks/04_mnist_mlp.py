"""
Training an MLP with Information Dropout on MNIST
=================================================

Reads the MNIST IDX files from ``$INFODROP_DATA_DIR`` (or ``.../mnist``).
Three fully connected softplus layers, each an Information Dropout layer,
trained with SGD + momentum on cross-entropy plus the scaled KL cost.
We compare the trade-off weight ``beta`` = 1 against ``beta`` = 0 and
look at the noise the network chose to inject.

Set ``N_TRAIN`` lower for a quicker run.
"""
import tempfile

from infodrop.config import TrainingConfig
from infodrop.train import evaluate, load_checkpoint, load_datasets, read_metrics, train

N_TRAIN = 10000
out = tempfile.mkdtemp(prefix="mnist_mlp_")

results = {}
for beta in (1.0, 0.0):
    cfg = TrainingConfig(network="mlp", hidden_units=128, activation="softplus", beta=beta, epochs=10,
                         lr_drop_epochs=[7], dataset={"name": "mnist", "train_size": N_TRAIN})
    train_ds, test_ds = load_datasets(cfg)
    res = train(cfg, train_ds, test_ds, f"{out}/beta{beta}")
    results[beta] = res
    last = res.last("test")
    print(f"beta={beta}: test error {last.error_rate:.4f}, mean alpha {last.alpha_mean:.3f}, "
          f"KL per example {last.kl_mean:.1f} nats")

# %%
# metrics.csv holds one train and one test row per epoch
for row in read_metrics(f"{out}/beta1.0/metrics.csv")[-2:]:
    print(row)

# %%
# Noise on versus noise off at test time
net = load_checkpoint(f"{out}/beta1.0/final.npz")[0]
print("deterministic error:", evaluate(net, test_ds, "deterministic"))
print("stochastic error, 1 sample:", evaluate(net, test_ds, "stochastic", n_samples=1))
print("stochastic error, 10 samples:", evaluate(net, test_ds, "stochastic", n_samples=10))
