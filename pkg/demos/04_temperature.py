# %% [markdown]
# # Softmax temperature
#
# Sketch scores live in [-1, 1], on a different scale than `q.k / sqrt(d)`.
# A single temperature fitted by minimizing KL against exact attention brings
# the two distributions together.

# %%
from h1bkv import CacheConfig
from h1bkv.attention import calibrate_tau, synthetic_items

items = synthetic_items(seed=0, n=64, tokens=32, d=64)
for b in (64, 128, 256, 512):
    res = calibrate_tau(items, CacheConfig(1, 1, 64, sketch_bits=b))
    print(f"b={b:3d}  tau {res.tau:.3f}  KL {res.kl:.4f}  (tau=1: {res.kl_at_one:.4f})")
