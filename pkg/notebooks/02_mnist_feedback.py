# %% [markdown]
# # Feedback on an MNIST autoencoder
#
# A 784-392-10-392-784 autoencoder, unrolled for two passes.  On the second
# pass the first decoder layer sends its previous output back to the first
# encoder layer, where it sets the gain of the gated units.  We train it next
# to an identical network without the feedback edge and compare.
#
# Expects the bundled digits in `data/mnist` (or `FG_MNIST_DIR`).  Takes a
# minute or so on one core.

# %%
import numpy as np

from fgrelu.data import NoiseSpec
from fgrelu.experiments import ExperimentConfig, histograms, load_data
from fgrelu.train import TrainConfig, evaluate, train

cfg = ExperimentConfig(preset="mnist_ae_10")
train_ds, test_ds = load_data(cfg)
plain, fb = cfg.variants()
print(len(train_ds), "train /", len(test_ds), "test images")
print("feedback edges:", [fb.edge_name(e) for e in fb.feedback_edges])

# %%
tc = TrainConfig(epochs=5, batch_size=128, lr=1e-3, eval_every=40)
runs = {name: train(spec, train_ds, test_ds, tc) for name, spec in
        (("no_feedback", plain), ("feedback", fb))}
for name, rec in runs.items():
    print(f"{name:12s}", " ".join(f"{l:.4f}" for l in rec.test_loss))

# %% [markdown]
# Both curves start at the same value.  The feedback weights begin at zero,
# so until they move the two networks compute the same thing.

# %%
print(runs["no_feedback"].test_loss[0] == runs["feedback"].test_loss[0])

# %% [markdown]
# Where do the learned gains sit?  The top bin holds the ceiling of 20.

# %%
res = evaluate(runs["feedback"].network, test_ds, collect_gates=True)
h = histograms(res.gates, fb.fg_params.max_gain)["E1"]["gain"]
total = sum(c for _, _, c in h)
for lo, hi, c in h:
    print(f"[{lo:5.1f}, {hi:5.1f})  {c / total:6.3f}  " + "#" * int(60 * c / total))

# %% [markdown]
# Gaussian noise on every hidden pre-activation, in every pass.

# %%
for sigma in (0.0, 1.0, 2.0, 3.0):
    row = []
    for name, rec in runs.items():
        losses = [evaluate(rec.network, test_ds, noise=NoiseSpec(sigma, k)).loss
                  for k in range(3)]
        row.append(f"{name} {np.mean(losses):.4f}")
    print(f"sigma={sigma}: " + "  ".join(row))
