"""
Finding unknown classes in synthetic data
=========================================

A small version of the whole flow: generate clustered data, train the
BiGAN on the known half, score the held-out stream, pick out the
unusual rows and count how many new groups they form.
"""
import numpy as np

from negmgan import bigan
from negmgan.data import SplitSpec, SyntheticSpec, build_splits, generate_synthetic, normalize
from negmgan.imeans import IMeans, IMeansConfig
from negmgan.metrics import f1_unknown
from negmgan.ucs import (ThresholdPolicy, baselines_from_losses, calibrate_threshold,
                         extract_unknown, reconstruction_loss, ucs_scores)

# 16 clusters in 121 dimensions, 200 rows each
fm = generate_synthetic(SyntheticSpec(per_cluster=200, seed=0))
known = [str(k) for k in range(8)]
unknown = ["12", "13", "14"]
train, test = build_splits(fm, SplitSpec(known, unknown, seed=0))
train, norm = normalize(train)
test = norm.apply(test)
print("train", train.data.shape, "test", test.data.shape)

# %%
# Train.  Batch norm in the discriminator is switched off here; with it
# the generator barely moves in a short run.
config = bigan.TrainConfig(epochs=60, step_size=5e-4, d_batch_norm=False, seed=0)
model, prior, history = bigan.train(train, config)
print("last epoch losses: D %.3f  G %.3f  E %.3f" % (history.d_loss[-1], history.g_loss[-1], history.e_loss[-1]))

# %%
# Reconstruction loss per known class gives the baselines.  The score of a
# row is its distance to the closest baseline.
train_loss = reconstruction_loss(model, train.data)
baselines = baselines_from_losses(train_loss, train.labels, train.class_names)
scores = ucs_scores(reconstruction_loss(model, test.data), baselines)
is_new = np.isin(test.labels, unknown)
print("median score, known rows:  ", np.median(scores[~is_new]).round(2))
print("median score, unknown rows:", np.median(scores[is_new]).round(2))

# %%
# Stream in batches of 250.  The first threshold comes from the training
# scores; later ones follow the running share of flagged rows.
policy = ThresholdPolicy(initial_threshold=calibrate_threshold(ucs_scores(train_loss, baselines)))
flagged = np.zeros(len(scores), bool)
for i, start in enumerate(range(0, len(scores), 250)):
    _, uc, thr, policy = extract_unknown(scores[start:start + 250], policy, i)
    flagged[start + uc] = True
print("F1 on unknown rows:", round(f1_unknown(flagged, is_new), 3))

# %%
# Count the new groups among the flagged rows, in latent space.
z_train = bigan.encode(model, train.data)
est = IMeans.from_labeled(z_train, train.labels, train.class_names, IMeansConfig(warmup_size=200))
delta, _ = est.feed(bigan.encode(model, test.data[flagged]))
print(f"new clusters: {delta} (true: {len(unknown)})")
