"""
Folding a multi-branch block into one convolution
=================================================

A training-form unit runs three parallel branches (3x3, 1x1, identity),
each followed by its own batch norm, and sums them.  At deployment the
whole thing collapses into a single 3x3 convolution with identical
outputs.  This script does the collapse one step at a time.
"""

import numpy as np

from mvt2.fusion import (
    fold_bn,
    fuse,
    identity_to_conv,
    pad_1x1_to_3x3,
    random_rep_branch_spec,
    rep_branch_forward,
    train_param_count,
)
from mvt2.tensor import conv2d

rng = np.random.default_rng(0)

# a depthwise unit over 8 channels with all three branches present
spec = random_rep_branch_spec(8, 8, kernel_size=3, groups=8, rng=rng)
print("branches: 3x3 main, 1x1 scale, identity")

# step 1: batch norm is an affine map per channel, so it folds into the
# convolution that feeds it -- rescale the kernel, shift the bias
folded_main = fold_bn(spec.main, spec.main_bn)
print("main kernel before/after fold:",
      float(spec.main.kernel[0, 0, 1, 1]), "->", float(folded_main.kernel[0, 0, 1, 1]))

# step 2: a 1x1 kernel is a 3x3 kernel that is zero off-center
folded_scale = pad_1x1_to_3x3(fold_bn(spec.scale, spec.scale_bn))
print("padded scale kernel shape:", folded_scale.kernel.shape)

# step 3: the identity branch is a convolution too -- a one-hot kernel
eye = identity_to_conv(8, groups=8)
x = rng.standard_normal((1, 8, 5, 5)).astype(np.float32)
print("identity-as-conv max deviation:", float(np.max(np.abs(conv2d(x, eye) - x))))

# step 4: convolution is linear in its weights, so summing the branches
# means summing their kernels and biases
fused = fuse(spec)
train_out = rep_branch_forward(x, spec)
fused_out = conv2d(x, fused)
print("train vs fused max abs diff:", float(np.max(np.abs(train_out - fused_out))))

# the fused form is also smaller: batch norm statistics and the extra
# branches are gone
before = train_param_count(spec)
after = fused.kernel.size + fused.bias.size
print(f"parameters {before} -> {after}")
