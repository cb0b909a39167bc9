"""Whole-network assembly: configuration, construction, inference, deploy
conversion, and the analytic parameter/MAC cost model.

The network is a three-stage pyramid.  A four-conv stride-16 stem feeds
stage 1; stages 1 and 2 stack depthwise-mixer blocks; single stride-2
embeddings sit between stages; stage 3 stacks transposed-attention
blocks; a global average pool and linear classifier finish the network.
At 224 input the stages run at 14, 7 and 4 pixels per side.

Initialization scheme (``build``): conv weights are drawn fan-in scaled,
std = gain / sqrt(in_channels_per_group * k * k), with gain 1 except on
residual-terminal convs (mixer branches, feed-forward project, attention
output projections) which use gain 0.2 to keep activations O(1) through
depth.  Conv biases start at zero.  Batch norms start at scale 1, shift
0, running mean drawn from N(0, 0.1^2) and running variance from
U(0.8, 1.25), except identity-branch batch norms whose variance is drawn
from U(20, 30) so the branch sum stays O(1) under the residual.  The
classifier weight is fan-in scaled with zero bias.  Everything is a pure
function of (config, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator, Optional, Union

import numpy as np

from .blocks import (
    QK_DIM,
    FFNBlock,
    MDTABlock,
    RepDWBlock,
    RepEmbedBlock,
    SDTABlock,
    deployed_ffn,
    deployed_rep_dw,
    deployed_rep_embed,
    deployed_sdta,
    ffn_forward,
    mdta_block_forward,
    rep_dw_block_forward,
    rep_embed_forward,
    sdta_block_forward,
)
from .fusion import RepBranchSpec
from .tensor import (
    BNSpec,
    ConvSpec,
    as_nchw,
    conv_output_hw,
    gelu,
    global_avg_pool,
    linear,
)

ATTENTION_KINDS = ("sdta", "mdta")

# Init gain on convs that terminate a residual branch.
RESIDUAL_DAMP = 0.2
# Running-variance range for identity-branch batch norms (see module docstring).
IDENTITY_VAR_RANGE = (20.0, 30.0)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters for one variant."""

    depths: tuple[int, int, int]
    dims: tuple[int, int, int]
    ffn_ratio: int = 2
    num_classes: int = 1000
    input_resolution: int = 224
    attention: str = "sdta"

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.depths) != 3 or len(self.dims) != 3:
            raise ValueError("depths and dims must each have three entries")
        if min(self.depths) < 1 or min(self.dims) < 1:
            raise ValueError("depths and dims must be positive")
        if self.dims[0] % 8 != 0:
            raise ValueError(f"dims[0] must be divisible by 8, got {self.dims[0]}")
        if self.dims[2] % 4 != 0:
            raise ValueError(
                f"dims[2] must be divisible by 4 for the attention split, got {self.dims[2]}"
            )
        if self.ffn_ratio < 1:
            raise ValueError("ffn_ratio must be at least 1")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if self.input_resolution < 16 or self.input_resolution % 16 != 0:
            raise ValueError("input_resolution must be a positive multiple of 16")
        if self.attention not in ATTENTION_KINDS:
            raise ValueError(f"attention must be one of {ATTENTION_KINDS}")

    @property
    def stem_channels(self) -> tuple[int, int, int, int]:
        d = self.dims[0]
        return (d // 8, d // 4, d // 2, d)


VARIANTS = {
    "s1": ModelConfig(depths=(3, 8, 5), dims=(128, 224, 320)),
    "s2": ModelConfig(depths=(3, 9, 5), dims=(128, 224, 448)),
    "s3": ModelConfig(depths=(4, 9, 6), dims=(128, 384, 448)),
}


def stage_resolutions(config: ModelConfig) -> tuple[int, int, int]:
    """Feature-map side length at entry to each stage."""
    h = config.input_resolution
    for _ in range(4):
        h, _ = conv_output_hw(h, h, 3, 3, 2, 1)
    r1 = h
    r2, _ = conv_output_hw(r1, r1, 3, 3, 2, 1)
    r3, _ = conv_output_hw(r2, r2, 3, 3, 2, 1)
    return (r1, r2, r3)


@dataclass
class Model:
    """A built network.  Immutable once constructed; forwards are pure."""

    config: ModelConfig
    stem: list[RepEmbedBlock]
    stage1: list[RepDWBlock]
    down12: RepEmbedBlock
    stage2: list[RepDWBlock]
    down23: RepEmbedBlock
    stage3: list  # SDTABlock or MDTABlock
    head_weight: np.ndarray
    head_bias: np.ndarray
    mode: str = "train"

    @property
    def dtype(self):
        return self.head_weight.dtype


def _conv(rng, in_c: int, out_c: int, k: int, stride: int, padding: int,
          groups: int, dtype, gain: float = 1.0) -> ConvSpec:
    fan_in = (in_c // groups) * k * k
    std = gain / np.sqrt(fan_in)
    kernel = (rng.standard_normal((out_c, in_c // groups, k, k)) * std).astype(dtype)
    return ConvSpec(kernel, np.zeros(out_c, dtype=dtype),
                    stride=stride, padding=padding, groups=groups)


def _bn(rng, c: int, dtype, var_range=(0.8, 1.25)) -> BNSpec:
    return BNSpec(
        gamma=np.ones(c, dtype=dtype),
        beta=np.zeros(c, dtype=dtype),
        running_mean=(rng.standard_normal(c) * 0.1).astype(dtype),
        running_var=rng.uniform(var_range[0], var_range[1], c).astype(dtype),
    )


def init_rep_embed(rng, in_c: int, out_c: int, stride: int, dtype=np.float32) -> RepEmbedBlock:
    branch = RepBranchSpec(
        main=_conv(rng, in_c, out_c, 3, stride, 1, 1, dtype),
        main_bn=_bn(rng, out_c, dtype),
        scale=_conv(rng, in_c, out_c, 1, stride, 0, 1, dtype),
        scale_bn=_bn(rng, out_c, dtype),
        identity_bn=None,
    )
    return RepEmbedBlock(branch)


def init_dw_mixer(rng, c: int, dtype=np.float32) -> RepBranchSpec:
    return RepBranchSpec(
        main=_conv(rng, c, c, 3, 1, 1, c, dtype, gain=RESIDUAL_DAMP),
        main_bn=_bn(rng, c, dtype),
        scale=_conv(rng, c, c, 1, 1, 0, c, dtype, gain=RESIDUAL_DAMP),
        scale_bn=_bn(rng, c, dtype),
        identity_bn=_bn(rng, c, dtype, var_range=IDENTITY_VAR_RANGE),
    )


def init_ffn(rng, c: int, ratio: int, dtype=np.float32) -> FFNBlock:
    return FFNBlock(
        expand=_conv(rng, c, ratio * c, 1, 1, 0, 1, dtype),
        expand_bn=_bn(rng, ratio * c, dtype),
        project=_conv(rng, ratio * c, c, 1, 1, 0, 1, dtype, gain=RESIDUAL_DAMP),
        project_bn=_bn(rng, c, dtype),
    )


def init_rep_dw_block(rng, c: int, ratio: int, dtype=np.float32) -> RepDWBlock:
    return RepDWBlock(mixer=init_dw_mixer(rng, c, dtype),
                      ffn=init_ffn(rng, c, ratio, dtype))


def init_sdta_block(rng, c: int, ratio: int, dtype=np.float32) -> SDTABlock:
    return SDTABlock(
        pre_mixer=init_dw_mixer(rng, c, dtype),
        proj_p=_conv(rng, c, c + 2 * QK_DIM, 1, 1, 0, 1, dtype),
        proj_p_bn=_bn(rng, c + 2 * QK_DIM, dtype),
        proj_o=_conv(rng, c, c, 1, 1, 0, 1, dtype, gain=RESIDUAL_DAMP),
        proj_o_bn=_bn(rng, c, dtype),
        ffn=init_ffn(rng, c, ratio, dtype),
    )


def init_mdta_block(rng, c: int, ratio: int, dtype=np.float32) -> MDTABlock:
    return MDTABlock(
        qkv=_conv(rng, c, 3 * c, 1, 1, 0, 1, dtype),
        qkv_bn=_bn(rng, 3 * c, dtype),
        dw=_conv(rng, 3 * c, 3 * c, 3, 1, 1, 3 * c, dtype),
        dw_bn=_bn(rng, 3 * c, dtype),
        proj=_conv(rng, c, c, 1, 1, 0, 1, dtype, gain=RESIDUAL_DAMP),
        proj_bn=_bn(rng, c, dtype),
        ffn=init_ffn(rng, c, ratio, dtype),
    )


def build(config: ModelConfig, seed: int, dtype=np.float32) -> Model:
    """Construct a train-form model; deterministic in (config, seed)."""
    rng = np.random.default_rng(seed)
    d1, d2, d3 = config.dims
    r = config.ffn_ratio

    stem = []
    chans = (3,) + config.stem_channels
    for i in range(4):
        stem.append(init_rep_embed(rng, chans[i], chans[i + 1], 2, dtype))

    stage1 = [init_rep_dw_block(rng, d1, r, dtype) for _ in range(config.depths[0])]
    down12 = init_rep_embed(rng, d1, d2, 2, dtype)
    stage2 = [init_rep_dw_block(rng, d2, r, dtype) for _ in range(config.depths[1])]
    down23 = init_rep_embed(rng, d2, d3, 2, dtype)
    if config.attention == "sdta":
        stage3 = [init_sdta_block(rng, d3, r, dtype) for _ in range(config.depths[2])]
    else:
        stage3 = [init_mdta_block(rng, d3, r, dtype) for _ in range(config.depths[2])]

    head_weight = (rng.standard_normal((config.num_classes, d3))
                   / np.sqrt(d3)).astype(dtype)
    head_bias = np.zeros(config.num_classes, dtype=dtype)
    return Model(config, stem, stage1, down12, stage2, down23, stage3,
                 head_weight, head_bias, mode="train")


def forward(model: Model, x: np.ndarray) -> np.ndarray:
    """Run the network; returns an (N, num_classes) score matrix."""
    x = as_nchw(x)
    if x.shape[1] != 3:
        raise ValueError(f"input must have 3 channels, got {x.shape[1]}")
    if x.shape[2] % 16 != 0 or x.shape[3] % 16 != 0:
        raise ValueError(
            f"input spatial extents must be multiples of 16, got {x.shape[2]}x{x.shape[3]}"
        )
    if x.dtype != model.dtype:
        raise ValueError(f"input dtype {x.dtype} does not match model dtype {model.dtype}")
    mode = model.mode
    for i, emb in enumerate(model.stem):
        x = rep_embed_forward(emb, x, mode)
        if i < len(model.stem) - 1:
            x = gelu(x)
    for blk in model.stage1:
        x = rep_dw_block_forward(blk, x, mode)
    x = rep_embed_forward(model.down12, x, mode)
    for blk in model.stage2:
        x = rep_dw_block_forward(blk, x, mode)
    x = rep_embed_forward(model.down23, x, mode)
    for blk in model.stage3:
        if model.config.attention == "sdta":
            x = sdta_block_forward(blk, x, mode)
        else:
            x = mdta_block_forward(blk, x)
    return linear(global_avg_pool(x), model.head_weight, model.head_bias)


def deploy(model: Model) -> Model:
    """Fuse every branch group and fold every batch norm; returns a new model."""
    if model.mode == "deploy":
        raise ValueError("model is already in deploy form")
    if model.config.attention != "sdta":
        raise ValueError("the ablation attention variant has no deploy form")
    return replace(
        model,
        stem=[deployed_rep_embed(b) for b in model.stem],
        stage1=[deployed_rep_dw(b) for b in model.stage1],
        down12=deployed_rep_embed(model.down12),
        stage2=[deployed_rep_dw(b) for b in model.stage2],
        down23=deployed_rep_embed(model.down23),
        stage3=[deployed_sdta(b) for b in model.stage3],
        mode="deploy",
    )


@dataclass
class CostEntry:
    name: str
    params: int
    macs: int


@dataclass
class CostReport:
    """Per-layer and total parameter and multiply-accumulate counts.

    Parameters are counted as stored tensor elements: a train-form batch
    norm contributes scale, shift and both running statistics; deploy
    form carries no batch norms.  MACs follow k^2 * C_in * C_out * H_out
    * W_out / groups per conv, features_in * features_out per linear,
    and explicit matrix-product counts for the attention contractions;
    a train-form batch norm costs one multiply-add per element.
    Elementwise activations, residual additions, softmax and pooling are
    not counted.
    """

    entries: list[CostEntry] = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(e.params for e in self.entries)

    @property
    def total_macs(self) -> int:
        return sum(e.macs for e in self.entries)

    def subtotal(self, prefix: str) -> tuple[int, int]:
        p = sum(e.params for e in self.entries if e.name.startswith(prefix))
        m = sum(e.macs for e in self.entries if e.name.startswith(prefix))
        return p, m

    def matching(self, suffix: str) -> list[CostEntry]:
        return [e for e in self.entries if e.name.endswith(suffix)]


def conv_cost(spec: ConvSpec, out_hw: int) -> tuple[int, int]:
    params = spec.kernel.size + spec.bias.size
    macs = spec.kernel.size * out_hw
    return params, macs


def bn_cost(c: int, hw: int) -> tuple[int, int]:
    return 4 * c, c * hw


def _convbn_cost(spec: ConvSpec, out_hw: int, mode: str) -> tuple[int, int]:
    p, m = conv_cost(spec, out_hw)
    if mode == "train":
        pb, mb = bn_cost(spec.out_channels, out_hw)
        p, m = p + pb, m + mb
    return p, m


def _branch_cost(spec: RepBranchSpec, in_res: int, mode: str) -> tuple[int, int, int]:
    """Returns (params, macs, out_res) for a multi-branch group."""
    k = spec.main.kernel_size[0]
    out_res, _ = conv_output_hw(in_res, in_res, k, k,
                                spec.main.stride, spec.main.padding)
    hw = out_res * out_res
    if mode == "deploy":
        fk = 3 if (k == 3 or spec.identity_bn is not None) else 1
        per_group_in = spec.main.in_channels // spec.main.groups
        params = spec.out_channels * per_group_in * fk * fk + spec.out_channels
        macs = spec.out_channels * per_group_in * fk * fk * hw
        return params, macs, out_res
    p, m = conv_cost(spec.main, hw)
    pb, mb = bn_cost(spec.out_channels, hw)
    p, m = p + pb, m + mb
    if spec.scale is not None:
        ps, ms = conv_cost(spec.scale, hw)
        p, m = p + ps + pb, m + ms + mb
    if spec.identity_bn is not None:
        p, m = p + pb, m + mb
    return p, m, out_res


def _ffn_entries(name: str, ffn: FFNBlock, res: int, mode: str) -> Iterator[CostEntry]:
    hw = res * res
    p1, m1 = _convbn_cost(ffn.expand, hw, mode)
    p2, m2 = _convbn_cost(ffn.project, hw, mode)
    yield CostEntry(f"{name}.ffn", p1 + p2, m1 + m2)


def count(model_or_config: Union[Model, ModelConfig],
          mode: Optional[str] = None) -> CostReport:
    """Analytic cost report; per-image, input-resolution-dependent.

    Accepts a built model (defaulting to its own mode) or a config
    (defaulting to deploy form).  The ablation attention variant is
    countable in deploy form even though it only executes in train form.
    """
    if isinstance(model_or_config, Model):
        model = model_or_config
        mode = mode or model.mode
    else:
        model = build(model_or_config, seed=0)
        mode = mode or "deploy"
    if mode not in ("train", "deploy"):
        raise ValueError(f"mode must be train or deploy, got {mode!r}")
    config = model.config
    report = CostReport()
    res = config.input_resolution

    for i, emb in enumerate(model.stem):
        p, m, res = _branch_cost(emb.branch, res, mode)
        report.entries.append(CostEntry(f"stem.{i}", p, m))

    def add_dw_stage(name, blocks, res):
        for i, blk in enumerate(blocks):
            p, m, _ = _branch_cost(blk.mixer, res, mode)
            report.entries.append(CostEntry(f"{name}.{i}.mixer", p, m))
            report.entries.extend(_ffn_entries(f"{name}.{i}", blk.ffn, res, mode))

    add_dw_stage("stage1", model.stage1, res)
    p, m, res = _branch_cost(model.down12.branch, res, mode)
    report.entries.append(CostEntry("down12", p, m))
    add_dw_stage("stage2", model.stage2, res)
    p, m, res = _branch_cost(model.down23.branch, res, mode)
    report.entries.append(CostEntry("down23", p, m))

    hw = res * res
    c = config.dims[2]
    for i, blk in enumerate(model.stage3):
        name = f"stage3.{i}"
        if config.attention == "sdta":
            p, m, _ = _branch_cost(blk.pre_mixer, res, mode)
            report.entries.append(CostEntry(f"{name}.mixer", p, m))
            p, m = _convbn_cost(blk.proj_p, hw, mode)
            report.entries.append(CostEntry(f"{name}.proj_p", p, m))
            report.entries.append(CostEntry(f"{name}.attn_qk", 0, QK_DIM * hw * hw))
            report.entries.append(CostEntry(f"{name}.attn_av", 0, (c // 4) * hw * hw))
            p, m = _convbn_cost(blk.proj_o, hw, mode)
            report.entries.append(CostEntry(f"{name}.proj_o", p, m))
        else:
            p, m = _convbn_cost(blk.qkv, hw, mode)
            report.entries.append(CostEntry(f"{name}.qkv", p, m))
            p, m = _convbn_cost(blk.dw, hw, mode)
            report.entries.append(CostEntry(f"{name}.dw", p, m))
            report.entries.append(CostEntry(f"{name}.attn_qk", 0, c * c * hw))
            report.entries.append(CostEntry(f"{name}.attn_av", 0, c * c * hw))
            p, m = _convbn_cost(blk.proj, hw, mode)
            report.entries.append(CostEntry(f"{name}.proj", p, m))
        report.entries.extend(_ffn_entries(name, blk.ffn, res, mode))

    head_params = model.head_weight.size + model.head_bias.size
    head_macs = model.head_weight.size
    report.entries.append(CostEntry("head", head_params, head_macs))
    return report


def _branch_tensors(prefix: str, spec: RepBranchSpec):
    yield f"{prefix}.main.kernel", spec.main.kernel
    yield f"{prefix}.main.bias", spec.main.bias
    yield from _bn_tensors(f"{prefix}.main_bn", spec.main_bn)
    if spec.scale is not None:
        yield f"{prefix}.scale.kernel", spec.scale.kernel
        yield f"{prefix}.scale.bias", spec.scale.bias
        yield from _bn_tensors(f"{prefix}.scale_bn", spec.scale_bn)
    if spec.identity_bn is not None:
        yield from _bn_tensors(f"{prefix}.identity_bn", spec.identity_bn)


def _bn_tensors(prefix: str, bn: BNSpec):
    yield f"{prefix}.gamma", bn.gamma
    yield f"{prefix}.beta", bn.beta
    yield f"{prefix}.mean", bn.running_mean
    yield f"{prefix}.var", bn.running_var


def _conv_tensors(prefix: str, spec: ConvSpec):
    yield f"{prefix}.kernel", spec.kernel
    yield f"{prefix}.bias", spec.bias


def _ffn_tensors(prefix: str, ffn: FFNBlock, mode: str):
    if mode == "deploy":
        yield from _conv_tensors(f"{prefix}.expand_fused", ffn.deploy_expand)
        yield from _conv_tensors(f"{prefix}.project_fused", ffn.deploy_project)
        return
    yield from _conv_tensors(f"{prefix}.expand", ffn.expand)
    yield from _bn_tensors(f"{prefix}.expand_bn", ffn.expand_bn)
    yield from _conv_tensors(f"{prefix}.project", ffn.project)
    yield from _bn_tensors(f"{prefix}.project_bn", ffn.project_bn)


def named_tensors(model: Model):
    """Yield (name, array) pairs for the tensors the model's mode executes,
    in a stable order.  The arrays are the live model arrays."""
    mode = model.mode
    for i, emb in enumerate(model.stem):
        if mode == "deploy":
            yield from _conv_tensors(f"stem.{i}.fused", emb.deploy)
        else:
            yield from _branch_tensors(f"stem.{i}", emb.branch)

    def dw_stage(name, blocks):
        for i, blk in enumerate(blocks):
            if mode == "deploy":
                yield from _conv_tensors(f"{name}.{i}.mixer_fused", blk.deploy_mixer)
            else:
                yield from _branch_tensors(f"{name}.{i}.mixer", blk.mixer)
            yield from _ffn_tensors(f"{name}.{i}", blk.ffn, mode)

    yield from dw_stage("stage1", model.stage1)
    if mode == "deploy":
        yield from _conv_tensors("down12.fused", model.down12.deploy)
    else:
        yield from _branch_tensors("down12", model.down12.branch)
    yield from dw_stage("stage2", model.stage2)
    if mode == "deploy":
        yield from _conv_tensors("down23.fused", model.down23.deploy)
    else:
        yield from _branch_tensors("down23", model.down23.branch)

    for i, blk in enumerate(model.stage3):
        name = f"stage3.{i}"
        if model.config.attention == "sdta":
            if mode == "deploy":
                yield from _conv_tensors(f"{name}.mixer_fused", blk.deploy_mixer)
                yield from _conv_tensors(f"{name}.proj_p_fused", blk.deploy_proj_p)
                yield from _conv_tensors(f"{name}.proj_o_fused", blk.deploy_proj_o)
            else:
                yield from _branch_tensors(f"{name}.mixer", blk.pre_mixer)
                yield from _conv_tensors(f"{name}.proj_p", blk.proj_p)
                yield from _bn_tensors(f"{name}.proj_p_bn", blk.proj_p_bn)
                yield from _conv_tensors(f"{name}.proj_o", blk.proj_o)
                yield from _bn_tensors(f"{name}.proj_o_bn", blk.proj_o_bn)
        else:
            yield from _conv_tensors(f"{name}.qkv", blk.qkv)
            yield from _bn_tensors(f"{name}.qkv_bn", blk.qkv_bn)
            yield from _conv_tensors(f"{name}.dw", blk.dw)
            yield from _bn_tensors(f"{name}.dw_bn", blk.dw_bn)
            yield from _conv_tensors(f"{name}.proj", blk.proj)
            yield from _bn_tensors(f"{name}.proj_bn", blk.proj_bn)
        yield from _ffn_tensors(name, blk.ffn, mode)

    yield "head.weight", model.head_weight
    yield "head.bias", model.head_bias


def fusable_branches(model: Model):
    """Yield (name, RepBranchSpec) for every unit deploy() folds to one conv.

    Plain conv+BN pairs (FFN layers, attention projections) ride along as
    single-branch specs so one verifier covers everything fusion touches.
    Nothing is yielded for the ablation attention blocks because they are
    never deployed.
    """
    def wrap(conv: ConvSpec, bn: BNSpec) -> RepBranchSpec:
        return RepBranchSpec(main=conv, main_bn=bn)

    def ffn_units(prefix: str, ffn: FFNBlock):
        yield f"{prefix}.ffn.expand", wrap(ffn.expand, ffn.expand_bn)
        yield f"{prefix}.ffn.project", wrap(ffn.project, ffn.project_bn)

    for i, block in enumerate(model.stem):
        yield f"stem.{i}", block.branch
    for stage_name, stage in (("stage1", model.stage1), ("stage2", model.stage2)):
        for i, block in enumerate(stage):
            yield f"{stage_name}.{i}.mixer", block.mixer
            yield from ffn_units(f"{stage_name}.{i}", block.ffn)
    yield "down12", model.down12.branch
    yield "down23", model.down23.branch
    if model.config.attention == "sdta":
        for i, block in enumerate(model.stage3):
            name = f"stage3.{i}"
            yield f"{name}.mixer", block.pre_mixer
            yield f"{name}.proj_p", wrap(block.proj_p, block.proj_p_bn)
            yield f"{name}.proj_o", wrap(block.proj_o, block.proj_o_bn)
            yield from ffn_units(name, block.ffn)
