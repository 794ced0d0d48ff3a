# %% [markdown]
# # 4-bit values
#
# Values keep their magnitude, so they get an affine 4-bit code instead of a
# sketch: 16 levels spanning the vector's range, plus a scale and zero point.

# %%
import numpy as np

from h1bkv import quant

v = np.random.default_rng(2).uniform(-3, 3, 64)
q = quant.quantize(v)
print("scale", q.scale, "zero point", q.zero_point, "bytes", q.nbytes)

# %% [markdown]
# Every element lands within half a step of the original.

# %%
err = np.abs(quant.dequantize(q) - v)
print(f"max error {err.max():.4f}  half step {q.step / 2:.4f}")

# %% [markdown]
# Constant vectors are flagged and come back exactly.

# %%
c = np.full(8, 0.7)
qc = quant.quantize(c)
print(qc.degenerate, quant.dequantize(qc))
