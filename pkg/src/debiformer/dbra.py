"""Deformable bi-level routing attention.

The block refines a small grid of deformable "agent" tokens and then lets
every original token attend to them:

  1. Queries q = x W_q.  Per channel group, average-pool q to the grid
     resolution and predict bounded offsets from a reference grid.
  2. Sample the input at the offset points, giving agent tokens (one grid
     cell each, channel groups sampled at their own points).
  3. Project agents to bi-level queries and the full map to keys/values.
  4. Region-partition both sides, route each query region to its top-k key
     regions by descriptor affinity, and gather the routed tokens.
  5. Per-region multi-head attention over the gathered tokens, plus a
     depthwise local-context term sampled at the agent points; project,
     add the agent residual, then a grid-level ConvFFN (ratio D_r).
  6. Every original token attends to the refined agents with a continuous
     relative-position bias looked up at the actual displacement between
     pixel and sampling point; a per-head inner projection follows.
  7. Heads concatenate and project to the output map.

A `bra_forward` variant runs steps 3-5 with all tokens as queries and no
deformable machinery (the routing-attention-only block used in mixed
layouts).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Optional

import numpy as np

from . import deform, routing
from . import tensor as T
from .deform import OffsetNetParams
from .rng import Rng, derive_seed
from .tensor import Tensor


class ConfigError(ValueError):
    """Raised when a configuration is internally inconsistent or does not
    divide the tensor shapes it is applied to."""


@dataclass
class DbraConfig:
    """Structural hyperparameters of one attention block."""

    C: int                    # channels
    M: int                    # heads; head width d = C/M
    r: int                    # grid downsample ratio (agents sit on an H/r x W/r grid)
    G: int                    # offset groups (channel groups with their own points)
    S: int                    # region partition factor (S x S regions)
    k_route: int              # routed regions per query region
    D_r: int = 3              # agent-level ConvFFN expansion
    B_r: int = 3              # block-level ConvFFN expansion
    K: int = 3                # offset-net depthwise kernel size
    range_cells: float = 2.0  # offset bound, in grid cells

    def __post_init__(self):
        self.validate()

    @property
    def head_dim(self) -> int:
        return self.C // self.M

    @property
    def group_channels(self) -> int:
        return self.C // self.G

    @property
    def heads_per_group(self) -> int:
        return self.M // self.G

    def validate(self, H: Optional[int] = None, W: Optional[int] = None) -> None:
        c = self
        if min(c.C, c.M, c.r, c.G, c.S, c.k_route, c.D_r, c.B_r, c.K) < 1:
            raise ConfigError(f"all structural fields must be positive: {c}")
        if c.C % c.M:
            raise ConfigError(f"C={c.C} not divisible by heads M={c.M}")
        if c.C % c.G:
            raise ConfigError(f"C={c.C} not divisible by offset groups G={c.G}")
        if c.M % c.G:
            raise ConfigError(f"M={c.M} heads not divisible by G={c.G} groups")
        if c.k_route > c.S * c.S:
            raise ConfigError(f"k_route={c.k_route} exceeds region count S^2={c.S * c.S}")
        if c.K % 2 == 0:
            raise ConfigError(f"offset kernel K={c.K} must be odd")
        if H is not None and W is not None:
            if H % c.r or W % c.r:
                raise ConfigError(f"r={c.r} must divide H={H}, W={W}")
            H_G, W_G = H // c.r, W // c.r
            if H_G % c.S or W_G % c.S:
                raise ConfigError(f"S={c.S} must divide grid {H_G}x{W_G}")
            if H % c.S or W % c.S:
                raise ConfigError(f"S={c.S} must divide map {H}x{W}")


def toy_config() -> DbraConfig:
    """Smallest exercised configuration (8x8 map): used for gradient checks."""
    return DbraConfig(C=8, M=2, r=2, G=1, S=2, k_route=1, D_r=1, B_r=1, K=3)


@dataclass
class ConvFfnParams:
    """Token-wise two-layer GELU MLP with a 3x3 depthwise conv between."""

    w1: Tensor
    b1: Tensor
    dw: Tensor
    dwb: Tensor
    w2: Tensor
    b2: Tensor

    def named(self, prefix: str):
        yield f"{prefix}.w1", self.w1
        yield f"{prefix}.b1", self.b1
        yield f"{prefix}.dw", self.dw
        yield f"{prefix}.dwb", self.dwb
        yield f"{prefix}.w2", self.w2
        yield f"{prefix}.b2", self.b2


@dataclass
class DbraParams:
    # deformable level (queries from the input, keys/values from refined agents)
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo_bar: Tensor  # [M, d, d] per-head inner projection
    bo_bar: Tensor  # [M, d]
    wo: Tensor
    bo: Tensor
    # bi level (agent queries over routed regions)
    wq_hat: Tensor
    bq_hat: Tensor
    wk_hat: Tensor
    bk_hat: Tensor
    wv_hat: Tensor
    bv_hat: Tensor
    wo_prime: Tensor
    bo_prime: Tensor
    lce: Tensor     # [5, 5, C] depthwise local-context kernel
    lceb: Tensor
    offset: OffsetNetParams
    ln_mid_gamma: Tensor
    ln_mid_beta: Tensor
    mlp_inner: ConvFfnParams
    rpb: Tensor     # [M, 2H-1, 2W-1] continuous relative-position bias tables

    def named(self, prefix: str = "dbra"):
        for nm in (
            "wq", "bq", "wk", "bk", "wv", "bv", "wo_bar", "bo_bar", "wo", "bo",
            "wq_hat", "bq_hat", "wk_hat", "bk_hat", "wv_hat", "bv_hat",
            "wo_prime", "bo_prime", "lce", "lceb",
        ):
            yield f"{prefix}.{nm}", getattr(self, nm)
        yield from self.offset.named(f"{prefix}.offset")
        yield f"{prefix}.ln_mid.gamma", self.ln_mid_gamma
        yield f"{prefix}.ln_mid.beta", self.ln_mid_beta
        yield from self.mlp_inner.named(f"{prefix}.mlp_inner")
        yield f"{prefix}.rpb", self.rpb


@dataclass
class BraParams:
    """Routing-attention-only block: bi-level projections, LCE, output."""

    wq_hat: Tensor
    bq_hat: Tensor
    wk_hat: Tensor
    bk_hat: Tensor
    wv_hat: Tensor
    bv_hat: Tensor
    wo_prime: Tensor
    bo_prime: Tensor
    lce: Tensor
    lceb: Tensor

    def named(self, prefix: str = "bra"):
        for nm in (
            "wq_hat", "bq_hat", "wk_hat", "bk_hat", "wv_hat", "bv_hat",
            "wo_prime", "bo_prime", "lce", "lceb",
        ):
            yield f"{prefix}.{nm}", getattr(self, nm)


# ---------------------------------------------------------------------------
# Parameter shape specifications (single source of truth for init, load,
# archive naming, and parameter counting)


def convffn_shapes(C: int, ratio: int) -> list[tuple[str, tuple[int, ...], str]]:
    E = ratio * C
    return [
        ("w1", (C, E), "trunc_normal"),
        ("b1", (E,), "zeros"),
        ("dw", (3, 3, E), "trunc_normal"),
        ("dwb", (E,), "zeros"),
        ("w2", (E, C), "trunc_normal"),
        ("b2", (C,), "zeros"),
    ]


def _prefixed(prefix: str, shapes) -> list[tuple[str, tuple[int, ...], str]]:
    return [(f"{prefix}.{n}", s, i) for n, s, i in shapes]


def dbra_param_shapes(cfg: DbraConfig, H: int, W: int) -> list[tuple[str, tuple[int, ...], str]]:
    C, M = cfg.C, cfg.M
    d = cfg.head_dim
    out: list[tuple[str, tuple[int, ...], str]] = []
    for nm in ("wq", "wk", "wv"):
        out += [(nm, (C, C), "trunc_normal"), (f"b{nm[1:]}", (C,), "zeros")]
    out += [("wo_bar", (M, d, d), "trunc_normal"), ("bo_bar", (M, d), "zeros")]
    out += [("wo", (C, C), "trunc_normal"), ("bo", (C,), "zeros")]
    for nm in ("wq_hat", "wk_hat", "wv_hat"):
        out += [(nm, (C, C), "trunc_normal"), (f"b{nm[1:]}", (C,), "zeros")]
    out += [("wo_prime", (C, C), "trunc_normal"), ("bo_prime", (C,), "zeros")]
    out += [("lce", (5, 5, C), "trunc_normal"), ("lceb", (C,), "zeros")]
    out += _prefixed("offset", deform.offset_net_param_shapes(cfg.group_channels, cfg.K))
    out += [("ln_mid.gamma", (C,), "ones"), ("ln_mid.beta", (C,), "zeros")]
    out += _prefixed("mlp_inner", convffn_shapes(C, cfg.D_r))
    out += [("rpb", (M, 2 * H - 1, 2 * W - 1), "zeros")]
    return out


def bra_param_shapes(cfg: DbraConfig) -> list[tuple[str, tuple[int, ...], str]]:
    C = cfg.C
    out: list[tuple[str, tuple[int, ...], str]] = []
    for nm in ("wq_hat", "wk_hat", "wv_hat"):
        out += [(nm, (C, C), "trunc_normal"), (f"b{nm[1:]}", (C,), "zeros")]
    out += [("wo_prime", (C, C), "trunc_normal"), ("bo_prime", (C,), "zeros")]
    out += [("lce", (5, 5, C), "trunc_normal"), ("lceb", (C,), "zeros")]
    return out


Getter = Callable[[str, tuple[int, ...], str], Tensor]


def init_getter(seed: int, dtype=np.float32) -> Getter:
    """Fresh weights: truncated normal (std 0.02) for projections and conv
    kernels, ones for norm scales, zeros for biases, offsets, and position
    tables.  Each tensor draws from its own name-derived stream, so values
    do not depend on materialization order."""

    def get(name: str, shape: tuple[int, ...], kind: str) -> Tensor:
        if kind == "trunc_normal":
            data = Rng(derive_seed(seed, name)).trunc_normal(shape, std=0.02, dtype=dtype)
        elif kind == "zeros":
            data = np.zeros(shape, dtype=dtype)
        elif kind == "ones":
            data = np.ones(shape, dtype=dtype)
        else:
            raise ValueError(f"unknown init kind {kind!r}")
        return Tensor(data, name=name)

    return get


def randomize_getter(seed: int, std: float = 0.05, dtype=np.float64) -> Getter:
    """Every tensor gets nonzero truncated-normal values (norm scales offset
    from 1).  Used by gradient checks so normally-zero-initialized paths
    (offsets, position tables) still carry gradients."""

    def get(name: str, shape: tuple[int, ...], kind: str) -> Tensor:
        data = Rng(derive_seed(seed, name)).trunc_normal(shape, std=std, dtype=dtype)
        if kind == "ones":
            data = data + 1.0
        return Tensor(data, name=name)

    return get


def array_getter(arrays: Mapping[str, np.ndarray], dtype=None) -> Getter:
    """Materialize parameters from named arrays (e.g. a loaded archive),
    validating presence and shape."""

    def get(name: str, shape: tuple[int, ...], kind: str) -> Tensor:
        if name not in arrays:
            raise ConfigError(f"missing parameter {name!r} in weight archive")
        arr = arrays[name]
        if tuple(arr.shape) != tuple(shape):
            raise ConfigError(
                f"parameter {name!r} has shape {tuple(arr.shape)}, expected {tuple(shape)}"
            )
        if dtype is not None and arr.dtype != np.dtype(dtype):
            arr = arr.astype(dtype)
        return Tensor(arr, name=name)

    return get


def _build(shapes, get: Getter, prefix: str = "") -> dict[str, Tensor]:
    return {name: get(prefix + name, shape, init) for name, shape, init in shapes}


def _convffn_from(d: dict[str, Tensor], prefix: str) -> ConvFfnParams:
    return ConvFfnParams(
        w1=d[f"{prefix}.w1"], b1=d[f"{prefix}.b1"], dw=d[f"{prefix}.dw"],
        dwb=d[f"{prefix}.dwb"], w2=d[f"{prefix}.w2"], b2=d[f"{prefix}.b2"],
    )


def dbra_params_from(cfg: DbraConfig, H: int, W: int, get: Getter, prefix: str = "") -> DbraParams:
    d = _build(dbra_param_shapes(cfg, H, W), get, prefix)
    return DbraParams(
        wq=d["wq"], bq=d["bq"], wk=d["wk"], bk=d["bk"], wv=d["wv"], bv=d["bv"],
        wo_bar=d["wo_bar"], bo_bar=d["bo_bar"], wo=d["wo"], bo=d["bo"],
        wq_hat=d["wq_hat"], bq_hat=d["bq_hat"], wk_hat=d["wk_hat"], bk_hat=d["bk_hat"],
        wv_hat=d["wv_hat"], bv_hat=d["bv_hat"], wo_prime=d["wo_prime"], bo_prime=d["bo_prime"],
        lce=d["lce"], lceb=d["lceb"],
        offset=OffsetNetParams(
            dw=d["offset.dw"], dw_b=d["offset.dwb"], ln_gamma=d["offset.ln.gamma"],
            ln_beta=d["offset.ln.beta"], pw=d["offset.pw"], pw_b=d["offset.pwb"],
        ),
        ln_mid_gamma=d["ln_mid.gamma"], ln_mid_beta=d["ln_mid.beta"],
        mlp_inner=_convffn_from(d, "mlp_inner"),
        rpb=d["rpb"],
    )


def bra_params_from(cfg: DbraConfig, get: Getter, prefix: str = "") -> BraParams:
    d = _build(bra_param_shapes(cfg), get, prefix)
    return BraParams(
        wq_hat=d["wq_hat"], bq_hat=d["bq_hat"], wk_hat=d["wk_hat"], bk_hat=d["bk_hat"],
        wv_hat=d["wv_hat"], bv_hat=d["bv_hat"], wo_prime=d["wo_prime"],
        bo_prime=d["bo_prime"], lce=d["lce"], lceb=d["lceb"],
    )


# ---------------------------------------------------------------------------
# Forward


def _project(x: Tensor, w: Tensor, b: Tensor, scope: str) -> Tensor:
    with T.mac_scope(scope):
        y = T.matmul(x, w)
    return T.add(y, b)


def _split_heads(tokens: Tensor, M: int) -> Tensor:
    """[N, C] -> [M, N, d] with head-major channel blocks."""
    N, C = tokens.shape
    return T.permute(T.reshape(tokens, (N, M, C // M)), (1, 0, 2))


def _region_heads(tokens: Tensor, M: int) -> Tensor:
    """[R, T, C] -> [R, M, T, d]."""
    R, Ttok, C = tokens.shape
    return T.permute(T.reshape(tokens, (R, Ttok, M, C // M)), (0, 2, 1, 3))


def _region_attention(
    qr: Tensor, kg: Tensor, vg: Tensor, M: int, prefix: str
) -> tuple[Tensor, Tensor]:
    """Per-region multi-head attention: [R, Tq, C] x [R, Tkv, C] -> [R, Tq, C].

    Also returns the [R, M, Tq, Tkv] attention weights for tracing."""
    R, Tq, C = qr.shape
    d = C // M
    qh = _region_heads(qr, M)
    kh = _region_heads(kg, M)
    vh = _region_heads(vg, M)
    with T.mac_scope(f"{prefix}.qk"):
        logits = T.matmul(qh, T.permute(kh, (0, 1, 3, 2)))
    att = T.softmax_lastdim(T.mul(logits, 1.0 / math.sqrt(d)))
    with T.mac_scope(f"{prefix}.av"):
        out = T.matmul(att, vh)
    return T.reshape(T.permute(out, (0, 2, 1, 3)), (R, Tq, C)), att


def _avg_pool(x_map: Tensor, r: int) -> Tensor:
    """[H, W, C] -> [H/r, W/r, C] by non-overlapping window means."""
    H, W, C = x_map.shape
    t = T.reshape(x_map, (H // r, r, W // r, r, C))
    return T.mean(T.mean(t, axis=3), axis=1)


def _group_slices(tokens_map: Tensor, G: int):
    C = tokens_map.shape[-1]
    Cg = C // G
    return [T.slice_lastdim(tokens_map, g * Cg, (g + 1) * Cg) for g in range(G)]


def lce(v_map: Tensor, kernel: Tensor, bias: Tensor, pts_groups: Optional[list[Tensor]] = None) -> Tensor:
    """Depthwise 5x5 local-context term over the full-resolution value map.

    With `pts_groups` given (one normalized point set per channel group),
    the convolved map is sampled at those points, aligning the term with
    grid-resolution agent tokens; otherwise the full-resolution map is
    returned.
    """
    if kernel.shape[:2] != (5, 5):
        raise T.ShapeError(f"local-context kernel must be 5x5 depthwise, got {kernel.shape}")
    with T.mac_scope("lce"):
        conv = T.conv2d(v_map, kernel, bias, stride=1, pad=2, depthwise=True)
    if pts_groups is None:
        return conv
    G = len(pts_groups)
    parts = [
        deform.bilinear_sample(gslice, pts)
        for gslice, pts in zip(_group_slices(conv, G), pts_groups)
    ]
    return T.concat_lastdim(parts)


def dbra_forward(
    x: Tensor, p: DbraParams, cfg: DbraConfig, trace: Optional[dict] = None
) -> Tensor:
    H, W, C = x.shape
    cfg.validate(H, W)
    if C != cfg.C:
        raise ConfigError(f"input channels {C} != cfg.C {cfg.C}")
    M, G, S = cfg.M, cfg.G, cfg.S
    d = cfg.head_dim
    H_G, W_G = H // cfg.r, W // cfg.r
    N_s, HW = H_G * W_G, H * W
    if p.rpb.shape != (M, 2 * H - 1, 2 * W - 1):
        raise ConfigError(
            f"position-bias table {p.rpb.shape} does not fit {M} heads on a {H}x{W} map"
        )
    dtype = x.data.dtype
    x_flat = T.reshape(x, (HW, C))

    # step 1: queries and per-group sampling points
    q = _project(x_flat, p.wq, p.bq, "def.q_proj")
    pooled = _avg_pool(T.reshape(q, (H, W, C)), cfg.r)
    ref = deform.reference_grid(H_G, W_G).reshape(N_s, 2).astype(dtype)
    pts_groups: list[Tensor] = []
    for qg in _group_slices(pooled, G):
        delta = deform.offset_net(qg, p.offset, cfg.range_cells)
        pts_groups.append(T.add(T.reshape(delta, (N_s, 2)), T.Tensor(ref)))

    # step 2: agent tokens sampled from the input, one channel group per point set
    agents = T.concat_lastdim(
        [
            deform.bilinear_sample(gslice, pts)
            for gslice, pts in zip(_group_slices(x, G), pts_groups)
        ]
    )  # [N_s, C]

    # step 3: bi-level projections
    q_hat = _project(agents, p.wq_hat, p.bq_hat, "bi.q_proj")
    k_hat = _project(x_flat, p.wk_hat, p.bk_hat, "bi.k_proj")
    v_hat = _project(x_flat, p.wv_hat, p.bv_hat, "bi.v_proj")

    # step 4: routing between region descriptors, then gather
    qr = routing.region_partition(T.reshape(q_hat, (H_G, W_G, C)), S)
    kr = routing.region_partition(T.reshape(k_hat, (H, W, C)), S)
    vr = routing.region_partition(T.reshape(v_hat, (H, W, C)), S)
    adj = routing.adjacency(routing.region_average(qr), routing.region_average(kr))
    route = routing.topk_routing(adj, cfg.k_route)
    kg, vg = routing.gather_kv(kr, vr, route)

    # step 5: routed attention + sampled local context, project, agent residual
    attn, bi_att = _region_attention(qr, kg, vg, M, "bi")
    attn_tokens = T.reshape(routing.region_merge(attn, H_G, W_G), (N_s, C))
    lce_tokens = lce(T.reshape(v_hat, (H, W, C)), p.lce, p.lceb, pts_groups)
    refined = _project(T.add(attn_tokens, lce_tokens), p.wo_prime, p.bo_prime, "bi.out_proj")
    o_hat = T.add(agents, refined)
    o = T.add(o_hat, _convffn(
        T.layer_norm(o_hat, p.ln_mid_gamma, p.ln_mid_beta),
        p.mlp_inner, (H_G, W_G), "mlp_inner",
    ))

    # step 6: all tokens attend to the refined agents
    k_def = _project(o, p.wk, p.bk, "def.k_proj")
    v_def = _project(o, p.wv, p.bv, "def.v_proj")
    qh = _split_heads(q, M)       # [M, HW, d]
    kh = _split_heads(k_def, M)   # [M, N_s, d]
    vh = _split_heads(v_def, M)
    query_pts = deform.reference_grid(H, W).reshape(HW, 2)
    bias = _per_group_bias(p.rpb, query_pts, pts_groups, H, W, M, G)
    with T.mac_scope("def.qk"):
        logits = T.matmul(qh, T.permute(kh, (0, 2, 1)))
    att = T.softmax_lastdim(T.add(T.mul(logits, 1.0 / math.sqrt(d)), bias))
    with T.mac_scope("def.av"):
        heads = T.matmul(att, vh)  # [M, HW, d]
    with T.mac_scope("def.head_proj"):
        heads = T.matmul(heads, p.wo_bar)
    heads = T.add(heads, T.reshape(p.bo_bar, (M, 1, d)))

    # step 7: concatenate heads, output projection
    merged = T.reshape(T.permute(heads, (1, 0, 2)), (HW, C))
    out = _project(merged, p.wo, p.bo, "def.out_proj")

    if trace is not None:
        trace["deform_points"] = np.stack([t.data for t in pts_groups])
        trace["agent_tokens"] = agents.data
        trace["adjacency"] = adj.data
        trace["routing"] = route
        trace["bi_attention"] = bi_att.data
        trace["bi_attn_tokens"] = attn_tokens.data
        trace["refined_tokens"] = o.data
        trace["def_bias"] = bias.data
        trace["def_attention"] = att.data
    return T.reshape(out, (H, W, C))


def _convffn(tokens: Tensor, p: ConvFfnParams, grid: tuple[int, int], scope: str) -> Tensor:
    """w1 -> 3x3 depthwise over the token grid -> GELU -> w2."""
    N, C = tokens.shape
    H, W = grid
    E = p.w1.shape[1]
    with T.mac_scope(f"{scope}.w1"):
        h = T.matmul(tokens, p.w1)
    h = T.add(h, p.b1)
    with T.mac_scope(f"{scope}.dw"):
        h = T.conv2d(T.reshape(h, (H, W, E)), p.dw, p.dwb, stride=1, pad=1, depthwise=True)
    h = T.gelu(T.reshape(h, (N, E)))
    with T.mac_scope(f"{scope}.w2"):
        h = T.matmul(h, p.w2)
    return T.add(h, p.b2)


def _per_group_bias(
    rpb: Tensor, query_pts: np.ndarray, pts_groups: list[Tensor],
    H: int, W: int, M: int, G: int,
) -> Tensor:
    """Assemble [M, Nq, Nk] bias; heads of group g use that group's points."""
    hpg = M // G
    table_lastdim = T.permute(rpb, (1, 2, 0))  # [2H-1, 2W-1, M]
    parts = []
    for g, pts in enumerate(pts_groups):
        tbl = T.permute(T.slice_lastdim(table_lastdim, g * hpg, (g + 1) * hpg), (2, 0, 1))
        parts.append(T.permute(deform.deformable_rpb(tbl, query_pts, pts, H, W), (1, 2, 0)))
    return T.permute(T.concat_lastdim(parts), (2, 0, 1))


def bra_forward(
    x: Tensor, p: BraParams, cfg: DbraConfig, k: int, trace: Optional[dict] = None
) -> Tensor:
    """Routing attention with all tokens as queries (no deformable stage)."""
    H, W, C = x.shape
    if H % cfg.S or W % cfg.S:
        raise ConfigError(f"S={cfg.S} must divide map {H}x{W}")
    if not 1 <= k <= cfg.S * cfg.S:
        raise ConfigError(f"k={k} out of range for S^2={cfg.S * cfg.S} regions")
    HW = H * W
    x_flat = T.reshape(x, (HW, C))
    q_hat = _project(x_flat, p.wq_hat, p.bq_hat, "bi.q_proj")
    k_hat = _project(x_flat, p.wk_hat, p.bk_hat, "bi.k_proj")
    v_hat = _project(x_flat, p.wv_hat, p.bv_hat, "bi.v_proj")
    qr = routing.region_partition(T.reshape(q_hat, (H, W, C)), cfg.S)
    kr = routing.region_partition(T.reshape(k_hat, (H, W, C)), cfg.S)
    vr = routing.region_partition(T.reshape(v_hat, (H, W, C)), cfg.S)
    adj = routing.adjacency(routing.region_average(qr), routing.region_average(kr))
    route = routing.topk_routing(adj, k)
    kg, vg = routing.gather_kv(kr, vr, route)
    attn, bi_att = _region_attention(qr, kg, vg, cfg.M, "bi")
    attn_map = routing.region_merge(attn, H, W)
    local = lce(T.reshape(v_hat, (H, W, C)), p.lce, p.lceb, None)
    out = _project(
        T.reshape(T.add(attn_map, local), (HW, C)), p.wo_prime, p.bo_prime, "bi.out_proj"
    )
    if trace is not None:
        trace["routing"] = route
        trace["adjacency"] = adj.data
        trace["bi_attention"] = bi_att.data
        trace["bi_attn_map"] = attn_map.data
    return T.reshape(out, (H, W, C))
