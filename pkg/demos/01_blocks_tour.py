"""A quick look at the three splice blocks on a random feature map.

Run: python3 demos/01_blocks_tour.py
"""
import numpy as np

from scconvdet.blocks import (
    BlockConfig, BlockKind, CRUConfig, SEConfig, SRUConfig,
    block_param_count, cru_forward, init_cru_params, init_se_params,
    init_sru_params, se_forward, sru_forward,
)
from scconvdet.tensor import Tensor

rng = np.random.default_rng(0)
C = 16
x = Tensor(rng.normal(size=(2, C, 8, 8)))

# SRU: group-norm scales decide which channels count as informative
sru = SRUConfig(groups=4)
p = init_sru_params(C, sru)
p["gn.gamma"].data = rng.uniform(0.1, 2.0, C)
y, aux = sru_forward(x, sru, p, return_aux=True)
print("SRU gated weights:", np.round(aux["gated"], 3))
print("informative channels:", np.flatnonzero(aux["informative"]))
print("output shape", y.shape)

# CRU: split, cheap transforms, then softmax fusion of the two paths
cru = CRUConfig()
y, aux = cru_forward(x, cru, init_cru_params(C, cru, rng), return_aux=True)
print("CRU beta1 + beta2 (first sample):", (aux["beta1"] + aux["beta2"])[0].ravel()[:4])

# SE: squeeze, bottleneck, per-channel gates
se = SEConfig()
y, aux = se_forward(x, se, init_se_params(C, se, rng), return_aux=True)
print("SE gates in (0,1):", aux["gates"].min() > 0, aux["gates"].max() < 1)

for kind in BlockKind:
    print(f"{kind.value:>7}: {block_param_count(kind, 64, BlockConfig(kind)):6d} params at C=64")
