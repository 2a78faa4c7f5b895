# %% [markdown]
# # Probing the bottleneck
#
# Instead of letting feedback choose the gains, we pin them.  Every unit of
# the bottleneck gets a reference gain, one unit at a time is swept across a
# range, and the reconstructions are tiled into an image.  A second probe
# dims the input and asks how far the second pass moves from the first.

# %%
from pathlib import Path

from fgrelu.experiments import ExperimentConfig, load_data, run_contrast_sweep, run_gain_probe
from fgrelu.train import TrainConfig, train

out = Path("notebook_out")
cfg = ExperimentConfig(preset="mnist_ae_10", feedback="comprehensive", out=str(out),
                       probe_layer="E2", probe_units=[0, 1, 2], probe_images=[0, 1],
                       probe_gains=[0, 2, 4, 6, 8, 10], dump_images=2,
                       train=TrainConfig(epochs=3, batch_size=128))
data = load_data(cfg)
_, fb = cfg.variants()
net = train(fb, *data, cfg.train).network

# %%
probe = run_gain_probe(cfg, data, net)
print(probe["reconstructions"].shape)
print(sorted(p.name for p in out.glob("recon_probe_*")))

# %% [markdown]
# The two passes differ least at full contrast.  As the image fades the
# feedback has more to make up for.

# %%
table = run_contrast_sweep(cfg, data, net)
for row in table.rows:
    print(f"contrast {row['contrast']:.1f}: {row['mean_abs_pass_diff']:.5f}")
