"""Static cost accounting: parameter counts, FLOPs formulas, MAC models.

Two figures are reported for compute cost and they are NOT the same thing:

* ``formula`` figures come from the closed-form attention-cost expressions
  (`flops_def`, `flops_bi`).  Those expressions carry their own conventions:
  they omit the per-head inner projection, include a 4*N_s*C bilinear
  sampling charge that is not a matmul, and charge the region-adjacency
  product twice.  Costs the formulas ignore entirely (FFNs, convs, embed,
  head) are added as MACs x2.
* ``mac`` figures count every matmul/conv multiply-accumulate exactly once,
  matching the instrumented forward pass bit for bit.  This is the
  convention the headline per-model numbers follow.

The per-label MAC model in `block_macs` mirrors the forward-pass
instrumentation scopes, so analytic and measured counts can be compared
label by label, not just in total.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig, StageConfig
from .dbra import ConfigError


def _check_positive(**kw):
    for name, v in kw.items():
        if not isinstance(v, (int, np.integer)) or v <= 0:
            raise ValueError(f"{name} must be a positive integer, got {v!r}")


def flops_def(H: int, W: int, C: int, N_s: int, K: int) -> int:
    """Closed-form cost of the deformable level plus offset prediction.

    2HW*N_s*C (attention logits and values) + 2HW*C^2 (query and output
    projections) + 2*N_s*C^2 (key and value projections of the agents)
    + (K^2+6)*N_s*C (offset conv K^2, pointwise 2, bilinear sampling 4).
    """
    _check_positive(H=H, W=W, C=C, N_s=N_s, K=K)
    return 2 * H * W * N_s * C + 2 * H * W * C * C + 2 * N_s * C * C + (K * K + 6) * N_s * C


def flops_bi(H: int, W: int, C: int, N_s: int, S: int, k: int) -> int:
    """Closed-form cost of the routed bi-level attention over N_s queries.

    2HW*C^2 (key/value projections) + 2*N_s*C^2 (query/output projections)
    + 2*(S^2)^2*C (region adjacency, charged twice) + 2HW*k*(N_s/S^2)*C
    (attention over the k gathered regions).
    """
    _check_positive(H=H, W=W, C=C, N_s=N_s, S=S, k=k)
    if N_s % (S * S):
        raise ValueError(f"N_s={N_s} not divisible by S^2={S * S}")
    return (
        2 * H * W * C * C
        + 2 * N_s * C * C
        + 2 * (S * S) ** 2 * C
        + 2 * H * W * k * (N_s // (S * S)) * C
    )


def flops_bi_bound(H: int, W: int, C: int, N_s: int, k: int) -> float:
    """S-independent AM-GM lower bound on `flops_bi`.

    Splitting the routed-attention term in two and applying AM-GM to it and
    the adjacency term gives 3 * 2^(1/3) * C * (k*HW*N_s)^(2/3) regardless
    of the region count.  Documentation figure only, never used for
    accounting.
    """
    _check_positive(H=H, W=W, C=C, N_s=N_s, k=k)
    return 2 * H * W * C * C + 2 * N_s * C * C + 3 * 2 ** (1 / 3) * C * float(
        k * H * W * N_s
    ) ** (2 / 3)


# ---------------------------------------------------------------------------
# Exact MAC model, label-compatible with the forward instrumentation


def _convffn_macs(tokens: int, C: int, ratio: int, prefix: str) -> dict[str, int]:
    E = ratio * C
    return {
        f"{prefix}.w1": tokens * C * E,
        f"{prefix}.dw": tokens * 9 * E,
        f"{prefix}.w2": tokens * E * C,
    }


def attention_macs(stage: StageConfig, kind: str, H: int, W: int) -> dict[str, int]:
    """Per-scope MACs of one attention module (no pe, no block FFN)."""
    C, S = stage.C, stage.S
    HW = H * W
    region = HW // (S * S)
    out: dict[str, int] = {}
    if kind == "D":
        cfg = stage.dbra_config()
        N_s = (H // stage.r) * (W // stage.r)
        k = stage.k_dbra
        out["def.q_proj"] = HW * C * C
        out["offset.dw"] = N_s * stage.K * stage.K * C
        out["offset.pw"] = 2 * N_s * C
        out["bi.q_proj"] = N_s * C * C
        out["bi.k_proj"] = HW * C * C
        out["bi.v_proj"] = HW * C * C
        out["bi.adjacency"] = S ** 4 * C
        out["bi.qk"] = N_s * k * region * C
        out["bi.av"] = N_s * k * region * C
        out["bi.out_proj"] = N_s * C * C
        out["lce"] = 25 * HW * C
        out.update(_convffn_macs(N_s, C, stage.D_r, "mlp_inner"))
        out["def.k_proj"] = N_s * C * C
        out["def.v_proj"] = N_s * C * C
        out["def.qk"] = HW * N_s * C
        out["def.av"] = HW * N_s * C
        out["def.head_proj"] = HW * C * cfg.head_dim
        out["def.out_proj"] = HW * C * C
    elif kind == "B":
        k = stage.k_bra
        out["bi.q_proj"] = HW * C * C
        out["bi.k_proj"] = HW * C * C
        out["bi.v_proj"] = HW * C * C
        out["bi.adjacency"] = S ** 4 * C
        out["bi.qk"] = HW * k * region * C
        out["bi.av"] = HW * k * region * C
        out["bi.out_proj"] = HW * C * C
        out["lce"] = 25 * HW * C
    else:
        raise ConfigError(f"unknown block kind {kind!r}")
    return out


# labels covered by the closed-form expressions (everything else is "extra")
_DEF_FORMULA_LABELS = frozenset(
    {"def.q_proj", "def.k_proj", "def.v_proj", "def.out_proj", "def.qk", "def.av",
     "offset.dw", "offset.pw"}
)
_BI_FORMULA_LABELS = frozenset(
    {"bi.q_proj", "bi.k_proj", "bi.v_proj", "bi.out_proj", "bi.adjacency",
     "bi.qk", "bi.av"}
)


def block_macs(stage: StageConfig, kind: str, H: int, W: int) -> dict[str, int]:
    out = {"pe": 9 * H * W * stage.C}
    out.update(attention_macs(stage, kind, H, W))
    out.update(_convffn_macs(H * W, stage.C, stage.B_r, "mlp"))
    return out


def embed_macs(input_size: int, C1: int) -> int:
    h2, h4 = input_size // 2, input_size // 4
    return h2 * h2 * 9 * 3 * (C1 // 2) + h4 * h4 * 9 * (C1 // 2) * C1


def model_macs(config: ModelConfig) -> tuple[int, dict[str, int]]:
    """Total MACs and the per-scope dict the instrumented forward produces."""
    by: dict[str, int] = {"embed": embed_macs(config.input_size, config.stages[0].C)}
    for si, stage in enumerate(config.stages):
        H = config.stage_resolution(si)
        if si > 0:
            by[f"merge{si + 1}"] = H * H * 9 * config.stages[si - 1].C * stage.C
        for bi, kind in enumerate(stage.layout):
            for label, n in block_macs(stage, kind, H, H).items():
                by[f"stage{si + 1}.block{bi}.{label}"] = n
    by["head"] = config.stages[3].C * config.num_classes
    return sum(by.values()), by


# ---------------------------------------------------------------------------
# Parameters


def count_params(config: ModelConfig) -> int:
    from .backbone import model_param_shapes

    return sum(int(np.prod(s)) for _, s, _ in model_param_shapes(config))


def param_breakdown(config: ModelConfig) -> dict[str, int]:
    from .backbone import model_param_shapes

    out: dict[str, int] = {}
    for name, shape, _ in model_param_shapes(config):
        group = name.split(".", 1)[0]
        out[group] = out.get(group, 0) + int(np.prod(shape))
    return out


# ---------------------------------------------------------------------------
# Report


@dataclass
class StageFlops:
    stage: int
    H: int
    W: int
    C: int
    N_s: int
    S: int
    K: int
    k_dbra: int
    k_bra: int
    layout: str
    def_attn: int
    def_offset_sampling: int
    bi_proj: int
    bi_routing: int
    bi_attn: int
    formula_total: int
    mac_total: int
    macs: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["macs"] = dict(self.macs)
        return d


@dataclass
class FlopsReport:
    variant: str
    input_size: int
    stages: list[StageFlops]
    embed_macs: int
    merge_macs: dict[str, int]
    head_macs: int
    mac_flops: int          # every matmul/conv MAC once (headline convention)
    formula_attention: int  # sum of the closed-form attention expressions
    formula_covered_macs: int
    formula_flops: int      # formulas + 2x MACs of everything they omit
    params: int

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "input_size": self.input_size,
            "stages": [s.to_dict() for s in self.stages],
            "embed_macs": self.embed_macs,
            "merge_macs": dict(self.merge_macs),
            "head_macs": self.head_macs,
            "mac_flops": self.mac_flops,
            "formula_attention": self.formula_attention,
            "formula_covered_macs": self.formula_covered_macs,
            "formula_flops": self.formula_flops,
            "params": self.params,
        }


def model_flops(config: ModelConfig) -> FlopsReport:
    stages: list[StageFlops] = []
    merge_macs: dict[str, int] = {}
    covered = 0
    for si, stage in enumerate(config.stages):
        H = config.stage_resolution(si)
        if si > 0:
            merge_macs[f"merge{si + 1}"] = H * H * 9 * config.stages[si - 1].C * stage.C
        C, S = stage.C, stage.S
        N_s = (H // stage.r) * (H // stage.r)
        d_attn = d_off = b_proj = b_route = b_attn = 0
        stage_macs: dict[str, int] = {}
        stage_total = 0
        for bi, kind in enumerate(stage.layout):
            bm = block_macs(stage, kind, H, H)
            for label, n in bm.items():
                stage_macs[label] = stage_macs.get(label, 0) + n
            stage_total += sum(bm.values())
            if kind == "D":
                d_attn += 2 * H * H * N_s * C + 2 * H * H * C * C + 2 * N_s * C * C
                d_off += (stage.K * stage.K + 6) * N_s * C
                qn = N_s
                k = stage.k_dbra
            else:
                qn = H * H
                k = stage.k_bra
            b_proj += 2 * H * H * C * C + 2 * qn * C * C
            b_route += 2 * (S * S) ** 2 * C
            b_attn += 2 * H * H * k * (qn // (S * S)) * C
            covered += sum(n for l, n in bm.items()
                           if l in _DEF_FORMULA_LABELS or l in _BI_FORMULA_LABELS)
        formula_total = d_attn + d_off + b_proj + b_route + b_attn
        n_d = stage.layout.count("D")
        # exact relation between the formulas and the MAC model: the formulas
        # add 4*N_s*C sampling and an extra (S^2)^2*C per routed block, and
        # skip the per-head inner projection.
        covered_stage = sum(n for l, n in stage_macs.items()
                            if l in _DEF_FORMULA_LABELS or l in _BI_FORMULA_LABELS)
        expect = covered_stage + n_d * 4 * N_s * C + len(stage.layout) * (S * S) ** 2 * C
        assert formula_total == expect, (formula_total, expect)
        stages.append(
            StageFlops(
                stage=si + 1, H=H, W=H, C=C, N_s=N_s, S=S, K=stage.K,
                k_dbra=stage.k_dbra, k_bra=stage.k_bra, layout=stage.layout,
                def_attn=d_attn, def_offset_sampling=d_off, bi_proj=b_proj,
                bi_routing=b_route, bi_attn=b_attn, formula_total=formula_total,
                mac_total=stage_total, macs=stage_macs,
            )
        )
    e = embed_macs(config.input_size, config.stages[0].C)
    h = config.stages[3].C * config.num_classes
    mac_total = e + h + sum(merge_macs.values()) + sum(s.mac_total for s in stages)
    formula_attention = sum(s.formula_total for s in stages)
    report = FlopsReport(
        variant=config.variant, input_size=config.input_size, stages=stages,
        embed_macs=e, merge_macs=merge_macs, head_macs=h, mac_flops=mac_total,
        formula_attention=formula_attention, formula_covered_macs=covered,
        formula_flops=formula_attention + 2 * (mac_total - covered),
        params=count_params(config),
    )
    total_check, _ = model_macs(config)
    assert report.mac_flops == total_check
    return report


def format_flops_report(report: FlopsReport) -> str:
    rows = [("stage", "res", "C", "N_s", "S", "K", "k_D", "k_B", "layout",
             "formula", "macs")]
    for s in report.stages:
        rows.append((str(s.stage), str(s.H), str(s.C), str(s.N_s), str(s.S),
                     str(s.K), str(s.k_dbra), str(s.k_bra), s.layout,
                     f"{s.formula_total:,}", f"{s.mac_total:,}"))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows]
    lines.append("")
    lines.append(f"params                {report.params:,}")
    lines.append(f"embed/merge/head MACs {report.embed_macs:,} / "
                 f"{sum(report.merge_macs.values()):,} / {report.head_macs:,}")
    lines.append(f"mac_flops             {report.mac_flops:,}  "
                 f"({report.mac_flops / 1e9:.3f} G, one count per MAC)")
    lines.append(f"formula_flops         {report.formula_flops:,}  "
                 f"({report.formula_flops / 1e9:.3f} G, closed-form x2 convention)")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Routing statistics


def tokens_per_query(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Tokens attended per query at each stage, for both attention kinds."""
    dbra, bra = [], []
    for si, stage in enumerate(config.stages):
        H = config.stage_resolution(si)
        region = H * H // (stage.S * stage.S)
        dbra.append(stage.k_dbra * region)
        bra.append(stage.k_bra * region)
    return {"dbra": tuple(dbra), "bra": tuple(bra)}


def route_stats(config: ModelConfig, params, img) -> dict:
    """Run a forward pass and summarize which regions each query region picked."""
    from .backbone import backbone_forward

    trace: dict = {}
    backbone_forward(img, config, params, trace=trace)
    static = tokens_per_query(config)
    stages = []
    for si, st in enumerate(trace["stages"]):
        stage = config.stages[si]
        S2 = stage.S * stage.S
        blocks = []
        for bi, bt in enumerate(st["blocks"]):
            r = bt["routing"]
            counts = np.bincount(np.asarray(r.idx).ravel(), minlength=S2)
            k = stage.k_dbra if bt["kind"] == "D" else stage.k_bra
            blocks.append({
                "block": bi,
                "kind": bt["kind"],
                "S": stage.S,
                "k": k,
                "tokens_per_query": k * (st["resolution"] ** 2 // S2),
                "selection_counts": counts.tolist(),
                "idx": np.asarray(r.idx).tolist(),
            })
        stages.append({
            "stage": si + 1,
            "resolution": st["resolution"],
            "channels": st["channels"],
            "tokens_per_query_dbra": static["dbra"][si],
            "tokens_per_query_bra": static["bra"][si],
            "blocks": blocks,
        })
    return {"variant": config.variant, "input_size": config.input_size, "stages": stages}
