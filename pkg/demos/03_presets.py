"""The five architectures: layout, size and a forward pass."""

import numpy as np

from leanpn import PointCloud, build_preset, count_params
from leanpn.networks import PRESETS, Network, spec_to_text

for name in PRESETS:
    spec = build_preset(name, "desk")
    ops = " ".join(st.op[:4] for st in spec.stages)
    print(f"{name:9s} {count_params(spec):>9,} params   {ops}")

# a spec is plain data and serialises to YAML
print()
print(spec_to_text(build_preset("lpn", "desk")))

# forward a random cloud through the deep variant
rng = np.random.default_rng(1)
pos = rng.normal(size=(512, 3))
pos /= np.linalg.norm(pos, axis=1).max()
cloud = PointCloud(pos, pos.copy(), np.zeros(512, dtype=int))

net = Network(build_preset("deep_lpn", "desk"))
logits, rec = net.forward(cloud)
print("logits:", logits.shape, "retained bytes:", net.ledger.current - net.param_bytes)
net.backward(np.zeros_like(logits), rec)
print("after backward:", net.ledger.current - net.param_bytes)
