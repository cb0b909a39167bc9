"""
Verifying analytic gradients against finite differences
=======================================================

Every block has a traced counterpart on a reverse-mode tape.  The checker
compares the tape's gradient with central finite differences coordinate by
coordinate and reports the worst relative error.
"""

import numpy as np

from mvt2 import autodiff as ad
from mvt2.model import init_mdta_block, init_rep_dw_block, init_sdta_block

rng = np.random.default_rng(0)

# a scalar loss: weighted sum of the block output
x = rng.standard_normal((1, 8, 4, 4))
loss_w = ad._as_var(rng.standard_normal(x.shape))

for label, init, traced in (
    ("repdw", init_rep_dw_block, ad.rep_dw_block),
    ("sdta", init_sdta_block, ad.sdta_block),
    ("mdta", init_mdta_block, ad.mdta_block),
):
    block = init(rng, 8, 2, dtype=np.float64)

    def f(v, traced=traced, block=block):
        return ad.vsum(ad.mul(traced(v, block), loss_w))

    err = ad.check_gradient(f, x, eps=1e-5)
    print(f"{label:6} worst relative error {err:.2e}")

# gradients also flow to parameters, not just inputs
spec_x = ad.Var(x)
block = init_sdta_block(rng, 8, 2, dtype=np.float64)
loss = ad.vsum(ad.sdta_block(spec_x, block))
ad.backward(loss)
print("input gradient shape:", spec_x.grad.shape)
print("input gradient finite:", bool(np.all(np.isfinite(spec_x.grad))))

# the checker refuses silly step sizes instead of returning noise
try:
    ad.check_gradient(lambda v: ad.vsum(v), x, eps=1.0)
except ValueError as exc:
    print("eps guard:", exc)
