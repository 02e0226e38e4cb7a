"""
The full network, stage by stage
================================

Builds the default model (two ResNet-50 encoders, four fusion stages and the
transformer decoder), prints where the parameters live and the shapes that
flow through one forward pass, then lists the ablation variants.
"""

import torch

from gldmnet import build
from gldmnet.model import count_parameters

torch.manual_seed(0)
model = build().eval()

for name in ("rgb_encoder", "depth_encoder", "fusion", "decoder"):
    print(f"{name:14s} {count_parameters(getattr(model, name)):>11,d}")
print(f"{'total':14s} {count_parameters(model):>11,d}")

rgb = torch.randn(1, 3, 256, 256)
depth = torch.randn(1, 3, 256, 256)
with torch.no_grad():
    feats = model.rgb_encoder(rgb)
    print("encoder stages", [tuple(f.shape[1:]) for f in feats])
    fused = model.fused_stages(rgb, depth)
    print("fused stages  ", [tuple(f.shape[1:]) for f in fused])
    out = model(rgb, depth)
    print("saliency maps ", [tuple(m.shape[1:]) for m in out.maps])
    # only the finest head is used as the prediction
    print("predict       ", tuple(model.predict(rgb, depth).shape))

for key, value in [("fusion__mode", "serial"), ("fusion__mode", "concat-only"),
                   ("decoder__transformer", "pvtv1"), ("decoder__transformer", "off")]:
    print(f"{key}={value}: {count_parameters(build(**{key: value})):,d}")
