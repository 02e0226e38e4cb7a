"""
Mutual attention between two modalities
=======================================

Position and channel attention maps built from a pre-fused feature and each
single-modal feature, plus the full per-stage fusion block.
"""

import torch

from gldmnet.fusion import DualMutualFusion, channel_attention, moment_normalize, position_attention

torch.manual_seed(0)

# signed inverse square root: large products are damped, signs survive
x = torch.tensor([4.0, -9.0, 0.0, 1e4])
print("moment_normalize", moment_normalize(x))

# three C×H×W features: RGB, depth and a pre-fused map
f_rgb, f_d, f_pre = (torch.randn(1, 8, 4, 4) for _ in range(3))

pos = position_attention(f_rgb, f_d, f_pre)
print("position maps (N×N):", tuple(pos["ms_rgb"].shape), "refined:", tuple(pos["p_fu"].shape))

ch = channel_attention(f_rgb, f_d, f_pre)
print("channel maps (C×C):", tuple(ch["mc_rgb"].shape), "refined:", tuple(ch["c_fu"].shape))

# the fused map is symmetric in the two modalities
swapped = position_attention(f_d, f_rgb, f_pre)
print("symmetric:", torch.allclose(pos["ms_fu"], swapped["ms_fu"]))

# a whole stage: 256-channel encoder features reduced to 64 and fused
stage = DualMutualFusion(256, 64, mode="parallel").eval()
with torch.no_grad():
    out = stage(torch.randn(1, 256, 16, 16), torch.randn(1, 256, 16, 16))
print("fused stage:", tuple(out.shape))

for mode in ("serial", "pmf-only", "cmf-only", "concat-only"):
    n = sum(p.numel() for p in DualMutualFusion(256, 64, mode).parameters())
    print(f"{mode:12s} {n} parameters")
