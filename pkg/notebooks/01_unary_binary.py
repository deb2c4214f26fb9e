"""
Unary and binary terms of 2D self-attention
===========================================

Walk through the split of one attention layer's output into the part each
query takes from its own location (unary) and the part it gathers from all
other locations (binary), then through the LESA gate that mixes a local
convolution with the binary term.
"""

# %%
import numpy as np

from lesa import AttentionConfig, AttentionLayer, attention_forward, decompose_attention
from lesa.lesa import LesaConfig, LesaLayer, lesa_components, lesa_weight_stats
from lesa.tensor import no_grad

rng = np.random.default_rng(0)

# %% [markdown]
# A small layer on a 5x5 grid, 16 channels, 4 heads, relative position
# embeddings on. The decomposition sums back to the full output.

# %%
layer = AttentionLayer(AttentionConfig(16, 16, 16, 5, 5, heads=4), rng=rng)
x = rng.standard_normal((2, 16, 5, 5))
with no_grad():
    full = attention_forward(x, layer)
    unary, binary, stats = decompose_attention(x, layer)
print("max |unary + binary - full|:", np.abs(unary.data + binary.data - full.data).max())
print(f"softmax weight on the own location: {100 * stats.unary_weight:.2f}%")
print(f"uniform attention would give:        {100 / 25:.2f}%")

# %% [markdown]
# Removing the unary term at evaluation time. "drop" keeps the softmax
# denominator, so the output is exactly the binary term; "renorm"
# re-normalizes over the remaining 24 locations.

# %%
layer.ablation = "drop"
with no_grad():
    dropped = layer(x).data
layer.ablation = "renorm"
with no_grad():
    renormed = layer(x).data
layer.ablation = None
print("drop == binary:", np.array_equal(dropped, binary.data))
print("renorm differs from drop by", np.abs(renormed - dropped).max())

# %% [markdown]
# LESA replaces the unary term with a grouped 3x3 convolution followed by a
# 1x1 convolution, and mixes in the binary term with a learned gate omega.
# The reported split is 1/(1+omega) against omega/(1+omega).

# %%
lesa_layer = LesaLayer(LesaConfig(16, 16, 5, 5, heads=4), rng=rng)
with no_grad():
    m, b, omega = lesa_components(x, lesa_layer)
u, bw = lesa_weight_stats(omega)
print(f"omega range [{omega.data.min():.3f}, {omega.data.max():.3f}]")
print(f"unary {100 * u:.2f}%  binary {100 * bw:.2f}%")
print("omega = 0.5 everywhere gives", [round(100 * v, 2) for v in lesa_weight_stats(np.full(4, 0.5))])
