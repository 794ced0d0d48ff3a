# %% [markdown]
# # Cache bytes
#
# Per token and head, the reference cache stores keys and values as FP16.
# The hybrid cache stores a `b`-bit key sketch and a 4-bit value vector.

# %%
import numpy as np

from h1bkv import CacheConfig, H1BCache, compression_report

shape = dict(n_layers=32, n_heads=32, head_dim=128)
ref = CacheConfig.preset("reference", **shape)
for name in ("reference", "key-only", "h1bkv"):
    cfg = CacheConfig.preset(name, **shape, sketch_bits=256)
    rep = compression_report(ref, cfg, 8192)
    print(f"{name:10s} {rep['b']['total_mb']:10.1f} MB  x{rep['ratio']:.1f}")

# %% [markdown]
# A real cache counts the same bytes as the closed form.

# %%
cfg = CacheConfig(n_layers=2, n_heads=4, head_dim=64, sketch_bits=256)
cache = H1BCache(cfg)
g = np.random.default_rng(0)
for _ in range(10):
    for layer in range(2):
        cache.append_heads(layer, g.normal(size=(4, 64)), g.normal(size=(4, 64)))
print(cache.token_count, cache.byte_size(), cfg.size_for(10))
