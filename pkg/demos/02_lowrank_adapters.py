"""
Low-rank adapters: zero start, stacking, merging
================================================
"""

import numpy as np

from lomoe import tensor as T
from lomoe.lora import LoraLinear, lora_forward, merge_to_dense

rng = T.Rng(1)
layer = LoraLinear(T.Tensor(rng.normal((12, 16))), name="demo")
x = T.Tensor(rng.normal((5, 16)))
base = lora_forward(layer, x).data

# B starts at zero, so a new adapter is invisible until it is trained.
layer.add_adapter(rng.spawn(1), rank=4)
print("fresh adapter changes output:", not np.array_equal(lora_forward(layer, x).data, base))

# Pretend training happened, freeze, and stack a second adapter on top.
a1 = layer.adapters[0]
a1.B.data = 0.1 * rng.normal(a1.B.shape).astype(np.float32)
layer.freeze_all()
layer.add_adapter(rng.spawn(2), rank=4)
layer.adapters[1].B.data = 0.1 * rng.normal(a1.B.shape).astype(np.float32)

for upto in (0, 1, 2):
    stacked = lora_forward(layer, x, active_upto=upto).data
    dense = x.data @ merge_to_dense(layer, upto).data.T
    print(f"upto={upto}: stacked vs merged mean abs diff {np.abs(stacked - dense).mean():.2e}")
