# %% [markdown]
# # The feedback-gated ReLU
#
# A gated unit rectifies its feedforward drive and then multiplies it by a
# gain that depends on a second, top-down input.  This notebook evaluates the
# activation on a grid and looks at the two places where its derivative is
# not smooth.

# %%
import numpy as np

from fgrelu.activation import FgReluParams, beta, fg_relu, fg_relu_grads, gain

p = FgReluParams(beta_max=0.95, eta=5.0)
print("largest reachable gain:", p.max_gain)

# %% [markdown]
# The gain climbs along `1 / (1 - slope * mu_d)` until feedback reaches
# `eta`, then stays flat.  Negative feedback is not clamped, so it pushes the
# gain below one.

# %%
mu_d = np.array([-10.0, -2.5, 0.0, 2.5, 4.9, 5.0, 50.0])
for d, b, g in zip(mu_d, beta(mu_d, p), gain(mu_d, p)):
    print(f"mu_d={d:6.1f}  beta={b:7.3f}  gain={g:7.3f}")

# %% [markdown]
# With no feedback the unit is a plain ReLU.

# %%
mu_s = np.linspace(-2, 2, 9)
assert np.array_equal(fg_relu(mu_s, 0.0, p), np.maximum(0.0, mu_s))
print(np.c_[mu_s, fg_relu(mu_s, 2.5, p), fg_relu(mu_s, 10.0, p)])

# %% [markdown]
# Gradients.  Once feedback saturates, the gain stops responding to it, so
# the feedback derivative drops to zero.  Training has no way to pull a
# saturated unit back down through this path.

# %%
for d in (0.0, 2.5, 4.99, 5.0, 8.0):
    ds, dd = fg_relu_grads(1.0, d, p)
    print(f"mu_d={d:5.2f}  df/dmu_s={float(ds):8.4f}  df/dmu_d={float(dd):8.4f}")

# %% [markdown]
# A quick comparison against central differences away from both kinks.

# %%
rng = np.random.default_rng(0)
s = rng.uniform(0.1, 3, 200)
d = rng.uniform(-3, 4.5, 200)
h = 1e-6
num_s = (fg_relu(s + h, d, p) - fg_relu(s - h, d, p)) / (2 * h)
num_d = (fg_relu(s, d + h, p) - fg_relu(s, d - h, p)) / (2 * h)
ds, dd = fg_relu_grads(s, d, p)
print("max abs gap:", np.abs(num_s - ds).max(), np.abs(num_d - dd).max())
