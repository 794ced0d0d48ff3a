# %% [markdown]
# # Sign sketches and the arccos law
#
# A key is stored as the signs of `b` random Gaussian projections. Two sketches
# agree on a bit with probability `1 - angle/pi`, so the normalized Hamming
# score estimates `1 - (2/pi) * arccos(cos)`.

# %%
import numpy as np

from h1bkv import sketch as sk

m = sk.build_matrix(seed=0, b=256, d=64)
m.rows, m.cols

# %% [markdown]
# Sketch a vector and a slightly perturbed copy. Scaling a vector does not
# change its sketch, only its direction matters.

# %%
g = np.random.default_rng(0)
v = g.normal(size=64)
w = v + 0.3 * g.normal(size=64)
sv, sw = sk.sketch(m, v), sk.sketch(m, w)
print("bytes per sketch:", sv.nbytes)
print("same sketch after scaling:", sk.sketch(m, 5 * v) == sv)

cos = v @ w / np.linalg.norm(v) / np.linalg.norm(w)
print(f"cosine {cos:.3f}  score {sk.hamming_score(sv, sw):.3f}  expected {sk.expected_score(cos):.3f}")

# %% [markdown]
# Over many fresh matrices the mean score follows the law closely.

# %%
for p in sk.estimate_similarity_curve(256, [-0.9, -0.5, 0.0, 0.5, 0.9], trials=2000, seed=1):
    print(f"cos {p.cosine:+.1f}  empirical {p.empirical:+.4f}  law {p.theoretical:+.4f}  |err| {p.abs_error:.4f}")
