"""
A variational autoencoder with an Information Dropout latent
============================================================

With a reconstruction task, ``beta = 1`` and no division by the dataset
size, the Information Dropout objective is the usual negative evidence
lower bound.  The latent layer is a softplus Information Dropout layer,
so the posterior is log-normal and the prior is a trainable log-normal.
"""
from infodrop.config import TrainingConfig
from infodrop.train import load_datasets
from infodrop.vae import VAEConfig, train_vae
from infodrop.verify import vae_equivalence_check

print(vae_equivalence_check(0))

cfg = VAEConfig(hidden_units=256, latent_units=32, epochs=5)
train_ds, test_ds = load_datasets(TrainingConfig(dataset={"name": "mnist", "train_size": 4000}))
model, rows = train_vae(cfg, train_ds, test_ds)
for r in rows:
    if r["split"] == "test":
        print(f"epoch {r['epoch']}: -ELBO {r['negative_elbo']:.2f} nats "
              f"(reconstruction {r['reconstruction_nll']:.2f} + KL {r['kl_mean']:.2f})")
