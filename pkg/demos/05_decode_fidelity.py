# %% [markdown]
# # Decoding with the hybrid cache
#
# A small byte-level GPT with seeded weights decodes greedily with a reference
# cache. The same trajectory is replayed through a hybrid cache and the
# next-token distributions are compared step by step.

# %%
from h1bkv import toymodel

weights = toymodel.init_weights(toymodel.ModelConfig())
prompt = toymodel.encode_text("The quick brown fox jumps over the lazy dog. ")
ref = weights.config.cache_config("reference")

for b in (64, 256, 512):
    rep = toymodel.decode_compare(weights, prompt, 32, ref, weights.config.cache_config("h1bkv", b))
    print(f"b={b:3d}  tau {rep.tau_b:.3f}  mean KL {rep.mean_kl:.4f}  top-1 {rep.agreement:.3f}  bytes {rep.bytes_b} vs {rep.bytes_a}")

# %% [markdown]
# The toy heads are only 16 wide, so a 512-bit sketch (64 bytes) is bigger
# than the 32-byte FP16 key it replaces. Savings need `b < 16 * head_dim`.
#
# Generated bytes are not meaningful text; the weights are random. Only the
# agreement between backends matters here.

# %%
tokens, _ = toymodel.greedy_decode(weights, prompt, 16)
bytes(tokens)
