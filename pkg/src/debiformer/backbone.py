"""Four-stage pyramid backbone built from the routing-attention blocks.

Input images are channels-last [H, W, 3].  An overlapped patch embedding
reduces to stride 4, then each later stage halves resolution and doubles
channels with a strided conv merge.  Every block is: depthwise-conv
positional term, pre-norm attention (deformable or routing-only per the
stage layout), pre-norm ConvFFN, all residual.  The head is global average
pool, layer norm, linear.

Parameter shapes, archive names, and initialization all derive from one
shape specification per module, so the static parameter count and the
materialized weights cannot drift apart.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import dbra as dbra_mod
from . import tensor as T
from .config import ModelConfig, StageConfig
from .dbra import (
    BraParams,
    ConfigError,
    ConvFfnParams,
    DbraParams,
    Getter,
    _build,
    _convffn,
    _convffn_from,
    _prefixed,
    bra_forward,
    bra_param_shapes,
    bra_params_from,
    convffn_shapes,
    dbra_forward,
    dbra_param_shapes,
    dbra_params_from,
    init_getter,
)
from .tensor import Tensor


@dataclass
class EmbedParams:
    conv1_w: Tensor
    conv1_b: Tensor
    ln_gamma: Tensor
    ln_beta: Tensor
    conv2_w: Tensor
    conv2_b: Tensor


@dataclass
class MergeParams:
    conv_w: Tensor
    conv_b: Tensor
    ln_gamma: Tensor
    ln_beta: Tensor


@dataclass
class BlockParams:
    kind: str  # "B" or "D"
    pe_dw: Tensor
    pe_b: Tensor
    ln1_gamma: Tensor
    ln1_beta: Tensor
    attn: Union[DbraParams, BraParams]
    ln2_gamma: Tensor
    ln2_beta: Tensor
    mlp: ConvFfnParams


@dataclass
class HeadParams:
    ln_gamma: Tensor
    ln_beta: Tensor
    w: Tensor
    b: Tensor


@dataclass
class BackboneParams:
    embed: EmbedParams
    merges: list[MergeParams]          # before stages 2, 3, 4
    stages: list[list[BlockParams]]
    head: HeadParams


# ---------------------------------------------------------------------------
# Shape specifications


def embed_shapes(C1: int):
    mid = C1 // 2
    return [
        ("conv1.w", (3, 3, 3, mid), "trunc_normal"),
        ("conv1.b", (mid,), "zeros"),
        ("ln.gamma", (mid,), "ones"),
        ("ln.beta", (mid,), "zeros"),
        ("conv2.w", (3, 3, mid, C1), "trunc_normal"),
        ("conv2.b", (C1,), "zeros"),
    ]


def merge_shapes(C_in: int):
    return [
        ("conv.w", (3, 3, C_in, 2 * C_in), "trunc_normal"),
        ("conv.b", (2 * C_in,), "zeros"),
        ("ln.gamma", (2 * C_in,), "ones"),
        ("ln.beta", (2 * C_in,), "zeros"),
    ]


def block_shapes(stage: StageConfig, kind: str, H: int, W: int):
    C = stage.C
    out = [
        ("pe.dw", (3, 3, C), "trunc_normal"),
        ("pe.b", (C,), "zeros"),
        ("ln1.gamma", (C,), "ones"),
        ("ln1.beta", (C,), "zeros"),
    ]
    cfg = stage.dbra_config()
    if kind == "D":
        out += [(f"dbra.{n}", s, i) for n, s, i in dbra_param_shapes(cfg, H, W)]
    elif kind == "B":
        out += [(f"bra.{n}", s, i) for n, s, i in bra_param_shapes(cfg)]
    else:
        raise ConfigError(f"unknown block kind {kind!r}")
    out += [
        ("ln2.gamma", (C,), "ones"),
        ("ln2.beta", (C,), "zeros"),
    ]
    out += [(f"mlp.{n}", s, i) for n, s, i in convffn_shapes(C, stage.B_r)]
    return out


def head_shapes(C4: int, num_classes: int):
    return [
        ("ln.gamma", (C4,), "ones"),
        ("ln.beta", (C4,), "zeros"),
        ("w", (C4, num_classes), "trunc_normal"),
        ("b", (num_classes,), "zeros"),
    ]


def model_param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Every parameter of the model: (archive name, shape, init kind)."""
    out = [(f"embed.{n}", s, i) for n, s, i in embed_shapes(config.stages[0].C)]
    for si, stage in enumerate(config.stages):
        if si > 0:
            out += [
                (f"merge{si + 1}.{n}", s, i)
                for n, s, i in merge_shapes(config.stages[si - 1].C)
            ]
        H = config.stage_resolution(si)
        for bi, kind in enumerate(stage.layout):
            out += [
                (f"stage{si + 1}.block{bi}.{n}", s, i)
                for n, s, i in block_shapes(stage, kind, H, H)
            ]
    out += [(f"head.{n}", s, i) for n, s, i in head_shapes(config.stages[3].C, config.num_classes)]
    return out


# ---------------------------------------------------------------------------
# Parameter materialization


def build_params(config: ModelConfig, get: Getter) -> BackboneParams:
    e = _build(embed_shapes(config.stages[0].C), get, "embed.")
    embed = EmbedParams(
        conv1_w=e["conv1.w"], conv1_b=e["conv1.b"], ln_gamma=e["ln.gamma"],
        ln_beta=e["ln.beta"], conv2_w=e["conv2.w"], conv2_b=e["conv2.b"],
    )
    merges = []
    stages: list[list[BlockParams]] = []
    for si, stage in enumerate(config.stages):
        if si > 0:
            m = _build(merge_shapes(config.stages[si - 1].C), get, f"merge{si + 1}.")
            merges.append(
                MergeParams(conv_w=m["conv.w"], conv_b=m["conv.b"],
                            ln_gamma=m["ln.gamma"], ln_beta=m["ln.beta"])
            )
        H = config.stage_resolution(si)
        cfg = stage.dbra_config()
        blocks = []
        for bi, kind in enumerate(stage.layout):
            prefix = f"stage{si + 1}.block{bi}."
            b = _build(
                [
                    ("pe.dw", (3, 3, stage.C), "trunc_normal"),
                    ("pe.b", (stage.C,), "zeros"),
                    ("ln1.gamma", (stage.C,), "ones"),
                    ("ln1.beta", (stage.C,), "zeros"),
                    ("ln2.gamma", (stage.C,), "ones"),
                    ("ln2.beta", (stage.C,), "zeros"),
                ],
                get,
                prefix,
            )
            if kind == "D":
                attn = dbra_params_from(cfg, H, H, get, prefix + "dbra.")
            else:
                attn = bra_params_from(cfg, get, prefix + "bra.")
            mlp = _convffn_from(
                _build(_prefixed("mlp", convffn_shapes(stage.C, stage.B_r)), get, prefix), "mlp"
            )
            blocks.append(
                BlockParams(
                    kind=kind, pe_dw=b["pe.dw"], pe_b=b["pe.b"],
                    ln1_gamma=b["ln1.gamma"], ln1_beta=b["ln1.beta"], attn=attn,
                    ln2_gamma=b["ln2.gamma"], ln2_beta=b["ln2.beta"], mlp=mlp,
                )
            )
        stages.append(blocks)
    h = _build(head_shapes(config.stages[3].C, config.num_classes), get, "head.")
    head = HeadParams(ln_gamma=h["ln.gamma"], ln_beta=h["ln.beta"], w=h["w"], b=h["b"])
    return BackboneParams(embed=embed, merges=merges, stages=stages, head=head)


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> BackboneParams:
    return build_params(config, init_getter(seed, dtype=dtype))


def load_params(config: ModelConfig, arrays, dtype=None) -> BackboneParams:
    return build_params(config, dbra_mod.array_getter(arrays, dtype=dtype))


def named_params(params: BackboneParams):
    """(archive name, Tensor) pairs in the shape-spec order."""
    e = params.embed
    yield "embed.conv1.w", e.conv1_w
    yield "embed.conv1.b", e.conv1_b
    yield "embed.ln.gamma", e.ln_gamma
    yield "embed.ln.beta", e.ln_beta
    yield "embed.conv2.w", e.conv2_w
    yield "embed.conv2.b", e.conv2_b
    for si, blocks in enumerate(params.stages):
        if si > 0:
            m = params.merges[si - 1]
            yield f"merge{si + 1}.conv.w", m.conv_w
            yield f"merge{si + 1}.conv.b", m.conv_b
            yield f"merge{si + 1}.ln.gamma", m.ln_gamma
            yield f"merge{si + 1}.ln.beta", m.ln_beta
        for bi, b in enumerate(blocks):
            prefix = f"stage{si + 1}.block{bi}"
            yield f"{prefix}.pe.dw", b.pe_dw
            yield f"{prefix}.pe.b", b.pe_b
            yield f"{prefix}.ln1.gamma", b.ln1_gamma
            yield f"{prefix}.ln1.beta", b.ln1_beta
            kind_prefix = "dbra" if b.kind == "D" else "bra"
            yield from b.attn.named(f"{prefix}.{kind_prefix}")
            yield f"{prefix}.ln2.gamma", b.ln2_gamma
            yield f"{prefix}.ln2.beta", b.ln2_beta
            yield from b.mlp.named(f"{prefix}.mlp")
    yield "head.ln.gamma", params.head.ln_gamma
    yield "head.ln.beta", params.head.ln_beta
    yield "head.w", params.head.w
    yield "head.b", params.head.b


def params_to_arrays(params: BackboneParams) -> dict[str, np.ndarray]:
    return {name: t.data for name, t in named_params(params)}


# ---------------------------------------------------------------------------
# Forward


def patch_embed(img: Tensor, p: EmbedParams) -> Tensor:
    H, W, _ = img.shape
    if H % 4 or W % 4:
        raise ConfigError(f"input {H}x{W} must be divisible by 4 for patch embedding")
    h = T.conv2d(img, p.conv1_w, p.conv1_b, stride=2, pad=1)
    h = T.gelu(h)
    h = T.layer_norm(h, p.ln_gamma, p.ln_beta)
    return T.conv2d(h, p.conv2_w, p.conv2_b, stride=2, pad=1)


def patch_merge(x: Tensor, p: MergeParams) -> Tensor:
    H, W, _ = x.shape
    if H % 2 or W % 2:
        raise ConfigError(f"map {H}x{W} must be even for patch merging")
    h = T.conv2d(x, p.conv_w, p.conv_b, stride=2, pad=1)
    return T.layer_norm(h, p.ln_gamma, p.ln_beta)


def debiformer_block(
    x: Tensor, bp: BlockParams, cfg, k_bra: int, trace: Optional[dict] = None
) -> Tensor:
    """Positional depthwise conv, pre-norm attention, pre-norm ConvFFN."""
    H, W, C = x.shape
    with T.mac_scope("pe"):
        x = T.add(x, T.conv2d(x, bp.pe_dw, bp.pe_b, stride=1, pad=1, depthwise=True))
    a = T.layer_norm(x, bp.ln1_gamma, bp.ln1_beta)
    if bp.kind == "D":
        attn = dbra_forward(a, bp.attn, cfg, trace=trace)
    else:
        attn = bra_forward(a, bp.attn, cfg, k_bra, trace=trace)
    x = T.add(x, attn)
    f = T.layer_norm(x, bp.ln2_gamma, bp.ln2_beta)
    ffn = _convffn(T.reshape(f, (H * W, C)), bp.mlp, (H, W), "mlp")
    return T.add(x, T.reshape(ffn, (H, W, C)))


def backbone_forward(
    img: Tensor, config: ModelConfig, params: BackboneParams, trace: Optional[dict] = None
) -> Tensor:
    """[H, W, 3] image to [num_classes] logits."""
    H = img.shape[0]
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[1] != H:
        raise T.ShapeError(f"expected square [H, H, 3] image, got {img.shape}")
    if H != config.input_size:
        raise ConfigError(f"input {H} != configured input_size {config.input_size}")
    with T.mac_scope("embed"):
        x = patch_embed(img, params.embed)
    stage_traces = [] if trace is not None else None
    for si, stage in enumerate(config.stages):
        if si > 0:
            with T.mac_scope(f"merge{si + 1}"):
                x = patch_merge(x, params.merges[si - 1])
        cfg = stage.dbra_config()
        block_traces = []
        for bi, bp in enumerate(params.stages[si]):
            bt = {} if trace is not None else None
            with T.mac_scope(f"stage{si + 1}.block{bi}"):
                x = debiformer_block(x, bp, cfg, stage.k_bra, trace=bt)
            if bt is not None:
                bt["kind"] = bp.kind
                block_traces.append(bt)
        if stage_traces is not None:
            stage_traces.append(
                {"resolution": x.shape[0], "channels": x.shape[2], "blocks": block_traces}
            )
    pooled = T.mean(T.mean(x, axis=0), axis=0)  # [C]
    pooled = T.layer_norm(pooled, params.head.ln_gamma, params.head.ln_beta)
    with T.mac_scope("head"):
        logits = T.matmul(T.reshape(pooled, (1, x.shape[2])), params.head.w)
    logits = T.reshape(T.add(logits, params.head.b), (config.num_classes,))
    if trace is not None:
        trace["stages"] = stage_traces
        trace["logits"] = logits.data
    return logits
