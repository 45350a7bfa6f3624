"""The lean grouping block next to the conventional one.

Both compute the same neighbourhood max-pool; the lean one keeps only the flat
inputs and the argmax between forward and backward.
"""

import numpy as np

from leanpn import geometry, layers
from leanpn.layers import SlpParams
from leanpn.memledger import MemoryLedger

rng = np.random.default_rng(0)
N, D, K = 1024, 64, 32

pos = rng.uniform(-1, 1, (N, 3))
feat = rng.normal(size=(N, D))
nbr = geometry.ball_query(pos, pos, np.arange(N), 0.5, K)
print("mean neighbours found:", (nbr.valid - 1).mean())

pf, ps = SlpParams.init(rng, D, D), SlpParams.init(rng, 3, D)

# same parameters, two executions
lean_led, ref_led = MemoryLedger(), MemoryLedger()
y_lean, ctx_lean = layers.lean_group_forward(feat, pos, nbr, pf, ps, ledger=lean_led)
y_ref, ctx_ref = layers.reference_group_forward(feat, pos, nbr, pf, ps, ledger=ref_led)
print("max |lean - reference|:", np.abs(y_lean - y_ref).max())

# what each one holds on to until backward
print("lean keeps:", sorted(ctx_lean.retained), ctx_lean.by_kind)
print("reference keeps:", sorted(ctx_ref.retained), ctx_ref.by_kind)
print("activation ratio: %.1fx" % (ctx_ref.by_kind["activation"] / ctx_lean.by_kind["activation"]))

# backward: gradients agree too
g = rng.normal(size=y_lean.shape)
gx_lean, _ = layers.lean_group_backward(g, ctx_lean, pf, ps)
lean_grad = pf.grad_w.copy()
pf.zero_grad()
ps.zero_grad()
gx_ref, _ = layers.reference_group_backward(g, ctx_ref, pf, ps)
print("max |grad_x diff|:", np.abs(gx_lean - gx_ref).max())
print("max |grad_W diff|:", np.abs(lean_grad - pf.grad_w).max())

# the grouped tensor only exists while the lean block runs
print("lean scratch high-water (bytes):", lean_led.replay(("scratch",))[1])
print("ledgers empty after backward:", lean_led.current, ref_led.current)
