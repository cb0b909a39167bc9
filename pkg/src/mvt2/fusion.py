"""Structural reparameterization: collapse a multi-branch block into one conv.

A train-form branch group runs up to three parallel paths, each ending in
batch norm: a k by k convolution (k in {1, 3}), an optional 1 by 1 "scale"
convolution, and an optional identity path.  At deployment the group is
replaced by a single convolution that computes the same function: fold
each BN into its convolution, lift 1 by 1 and identity kernels onto the
3 by 3 grid, and sum kernels and biases.

All fusion arithmetic runs in float64 and is cast back to the branch's
own dtype, so a float32 branch loses at most one rounding step per
weight.  Functions here are pure over immutable inputs and safe to call
concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import BNSpec, ConvSpec, batchnorm_infer, conv2d


def fold_bn(conv: ConvSpec, bn: BNSpec) -> ConvSpec:
    """Fold inference-mode batch norm into the preceding convolution.

    Per output channel o with scale s_o = gamma_o / sqrt(var_o + eps):
    W'_o = W_o * s_o and b'_o = beta_o + (b_o - mean_o) * s_o, so that
    conv2d(x, folded) == batchnorm_infer(conv2d(x, conv), bn).
    """
    if bn.channels != conv.out_channels:
        raise ValueError(
            f"batch-norm has {bn.channels} channels, conv emits {conv.out_channels}"
        )
    dtype = conv.dtype
    w = conv.kernel.astype(np.float64)
    b = conv.bias.astype(np.float64)
    scale = bn.gamma.astype(np.float64) / np.sqrt(
        bn.running_var.astype(np.float64) + float(bn.epsilon)
    )
    w_f = w * scale[:, None, None, None]
    b_f = bn.beta.astype(np.float64) + (b - bn.running_mean.astype(np.float64)) * scale
    return ConvSpec(
        w_f.astype(dtype), b_f.astype(dtype),
        stride=conv.stride, padding=conv.padding, groups=conv.groups,
    )


def pad_1x1_to_3x3(conv: ConvSpec) -> ConvSpec:
    """Embed a 1 by 1 kernel at the center of a zero 3 by 3 kernel.

    Padding grows by 1 so the output grid is unchanged at any stride.
    """
    if conv.kernel_size != (1, 1):
        raise ValueError(f"expected a 1x1 kernel, got {conv.kernel_size}")
    oc, icg = conv.kernel.shape[:2]
    k = np.zeros((oc, icg, 3, 3), dtype=conv.dtype)
    k[:, :, 1, 1] = conv.kernel[:, :, 0, 0]
    return ConvSpec(
        k, conv.bias.copy(),
        stride=conv.stride, padding=conv.padding + 1, groups=conv.groups,
    )


def identity_to_conv(channels: int, groups: int, dtype=np.float32) -> ConvSpec:
    """A 3 by 3 stride-1 convolution whose action is the identity map.

    Center tap 1 on each channel's own input slot within its group,
    zero elsewhere.  Only meaningful at stride 1 with matching channel
    counts, which is the only place an identity branch is legal.
    """
    if channels < 1 or groups < 1 or channels % groups != 0:
        raise ValueError(f"channels {channels} not divisible by groups {groups}")
    input_dim = channels // groups
    kernel = np.zeros((channels, input_dim, 3, 3), dtype=dtype)
    for i in range(channels):
        kernel[i, i % input_dim, 1, 1] = 1.0
    return ConvSpec(kernel, np.zeros(channels, dtype=dtype),
                    stride=1, padding=1, groups=groups)


@dataclass
class RepBranchSpec:
    """Train-form parallel branches: main conv + BN, optional 1x1 conv + BN,
    optional identity BN.

    The scale branch must produce the same output grid as the main
    branch, which pins its padding to main.padding - (main_k - 1) // 2.
    The identity branch is legal only at stride 1 with equal channel
    counts and a grid-preserving main padding.
    """

    main: ConvSpec
    main_bn: BNSpec
    scale: Optional[ConvSpec] = None
    scale_bn: Optional[BNSpec] = None
    identity_bn: Optional[BNSpec] = None

    def __post_init__(self):
        m = self.main
        kh, kw = m.kernel_size
        if kh != kw or kh not in (1, 3):
            raise ValueError(f"main kernel must be 1x1 or 3x3, got {m.kernel_size}")
        if self.main_bn.channels != m.out_channels:
            raise ValueError("main batch-norm channel count mismatch")
        if (self.scale is None) != (self.scale_bn is None):
            raise ValueError("scale conv and scale batch-norm must come together")
        if self.scale is not None:
            s = self.scale
            if s.kernel_size != (1, 1):
                raise ValueError(f"scale branch must be 1x1, got {s.kernel_size}")
            if s.stride != m.stride or s.groups != m.groups:
                raise ValueError("scale branch must share stride and groups with main")
            if s.in_channels != m.in_channels or s.out_channels != m.out_channels:
                raise ValueError("scale branch must share channel counts with main")
            if s.padding != m.padding - (kh - 1) // 2:
                raise ValueError(
                    f"scale padding {s.padding} does not align output grids "
                    f"(need {m.padding - (kh - 1) // 2})"
                )
            if self.scale_bn.channels != m.out_channels:
                raise ValueError("scale batch-norm channel count mismatch")
        if self.identity_bn is not None:
            if m.stride != 1:
                raise ValueError("identity branch requires stride 1")
            if m.in_channels != m.out_channels:
                raise ValueError("identity branch requires equal channel counts")
            if m.padding != kh // 2:
                raise ValueError("identity branch requires grid-preserving main padding")
            if self.identity_bn.channels != m.out_channels:
                raise ValueError("identity batch-norm channel count mismatch")

    @property
    def in_channels(self) -> int:
        return self.main.in_channels

    @property
    def out_channels(self) -> int:
        return self.main.out_channels

    @property
    def stride(self) -> int:
        return self.main.stride

    @property
    def groups(self) -> int:
        return self.main.groups

    @property
    def dtype(self):
        return self.main.dtype

    def astype(self, dtype) -> "RepBranchSpec":
        return RepBranchSpec(
            self.main.astype(dtype), self.main_bn.astype(dtype),
            None if self.scale is None else self.scale.astype(dtype),
            None if self.scale_bn is None else self.scale_bn.astype(dtype),
            None if self.identity_bn is None else self.identity_bn.astype(dtype),
        )


def rep_branch_forward(x: np.ndarray, spec: RepBranchSpec) -> np.ndarray:
    """Train-form forward: sum of per-branch BN'd outputs."""
    out = batchnorm_infer(conv2d(x, spec.main), spec.main_bn)
    if spec.scale is not None:
        out = out + batchnorm_infer(conv2d(x, spec.scale), spec.scale_bn)
    if spec.identity_bn is not None:
        out = out + batchnorm_infer(x, spec.identity_bn)
    return out


def fuse(spec: RepBranchSpec) -> ConvSpec:
    """Collapse the branch group into one convolution.

    When the main kernel is 3x3, the scale and identity kernels are
    lifted onto the 3x3 grid.  A 1x1 main with an identity branch is
    lifted to 3x3 as well; a 1x1 main with only a scale branch stays
    1x1.
    """
    folded = [fold_bn(spec.main, spec.main_bn)]
    if spec.scale is not None:
        folded.append(fold_bn(spec.scale, spec.scale_bn))
    if spec.identity_bn is not None:
        ident = identity_to_conv(spec.out_channels, spec.groups, dtype=spec.dtype)
        folded.append(fold_bn(ident, spec.identity_bn))

    k = spec.main.kernel_size[0]
    target_3x3 = k == 3 or spec.identity_bn is not None
    if target_3x3:
        folded = [pad_1x1_to_3x3(c) if c.kernel_size == (1, 1) else c for c in folded]

    base = folded[0]
    if len(folded) == 1:
        return base
    kernel = base.kernel.astype(np.float64)
    bias = base.bias.astype(np.float64)
    for c in folded[1:]:
        kernel = kernel + c.kernel.astype(np.float64)
        bias = bias + c.bias.astype(np.float64)
    return ConvSpec(
        kernel.astype(spec.dtype), bias.astype(spec.dtype),
        stride=base.stride, padding=base.padding, groups=base.groups,
    )


def verify_equivalence(
    spec: RepBranchSpec,
    samples: int = 100,
    tol: float = 1e-4,
    input_hw: int = 7,
    batch: int = 2,
    seed: int = 0,
) -> dict:
    """Evaluate train-form vs. fused-form on random inputs.

    Returns {"max_abs_diff": float, "pass": bool} with pass iff
    max_abs_diff <= tol.
    """
    if samples < 1:
        raise ValueError("samples must be at least 1")
    fused = fuse(spec)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(samples):
        x = rng.standard_normal(
            (batch, spec.in_channels, input_hw, input_hw)
        ).astype(spec.dtype)
        a = rep_branch_forward(x, spec)
        b = conv2d(x, fused)
        diff = float(np.max(np.abs(a.astype(np.float64) - b.astype(np.float64))))
        worst = max(worst, diff)
    return {"max_abs_diff": worst, "pass": worst <= tol}


def conv_param_count(conv: ConvSpec) -> int:
    return conv.kernel.size + conv.bias.size


def bn_param_count(bn: BNSpec) -> int:
    # gamma, beta, running mean, running var
    return 4 * bn.channels


def train_param_count(spec: RepBranchSpec) -> int:
    n = conv_param_count(spec.main) + bn_param_count(spec.main_bn)
    if spec.scale is not None:
        n += conv_param_count(spec.scale) + bn_param_count(spec.scale_bn)
    if spec.identity_bn is not None:
        n += bn_param_count(spec.identity_bn)
    return n


def random_rep_branch_spec(
    in_channels: int,
    out_channels: int,
    kernel_size: int = 3,
    stride: int = 1,
    groups: int = 1,
    with_scale: bool = True,
    with_identity: bool = True,
    dtype=np.float32,
    rng: Optional[np.random.Generator] = None,
) -> RepBranchSpec:
    """A randomized valid branch group, for tests and the CLI verifier.

    Batch-norm statistics are drawn near (0, 1) so folding stays well
    conditioned.  Identity is dropped automatically when illegal.
    """
    if rng is None:
        rng = np.random.default_rng(0)

    def rand_bn(c):
        return BNSpec(
            gamma=(rng.uniform(0.5, 1.5, c)).astype(dtype),
            beta=rng.normal(0.0, 0.1, c).astype(dtype),
            running_mean=rng.normal(0.0, 0.1, c).astype(dtype),
            running_var=rng.uniform(0.5, 1.5, c).astype(dtype),
        )

    padding = kernel_size // 2
    main = ConvSpec(
        rng.normal(0.0, 0.1, (out_channels, in_channels // groups,
                              kernel_size, kernel_size)).astype(dtype),
        rng.normal(0.0, 0.1, out_channels).astype(dtype),
        stride=stride, padding=padding, groups=groups,
    )
    scale = scale_bn = None
    if with_scale:
        scale = ConvSpec(
            rng.normal(0.0, 0.1, (out_channels, in_channels // groups, 1, 1)).astype(dtype),
            rng.normal(0.0, 0.1, out_channels).astype(dtype),
            stride=stride, padding=padding - (kernel_size - 1) // 2, groups=groups,
        )
        scale_bn = rand_bn(out_channels)
    identity_bn = None
    if with_identity and stride == 1 and in_channels == out_channels:
        identity_bn = rand_bn(out_channels)
    return RepBranchSpec(main, rand_bn(out_channels), scale, scale_bn, identity_bn)
