"""Runnable verification suites: gradcheck, oracle, invariants, flops.

Shared by the CLI (`verify` subcommand), the HTTP service (`/v1/verify`),
and the test suite, so "the checks the tests run" and "the checks a user
can run" are the same code.  Every check reports a numeric value against a
threshold; a crash inside one check is converted into a failed check
rather than aborting the suite.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import analysis, deform, routing, tensor as T
from . import dbra as dbra_mod
from .dbra import DbraConfig, DbraParams, dbra_params_from, init_getter, randomize_getter, toy_config
from .rng import Rng, derive_seed
from .tensor import Tensor

SUITES = ("gradcheck", "oracle", "invariants", "flops")


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "value": self.value,
            "threshold": self.threshold,
            "detail": self.detail,
        }


@dataclass
class SuiteResult:
    suite: str
    passed: bool
    seconds: float
    checks: list[CheckResult] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "suite": self.suite,
            "passed": self.passed,
            "seconds": self.seconds,
            "checks": [c.to_dict() for c in self.checks],
        }


def _rand(rng: Rng, shape, scale=1.0):
    n = int(np.prod(shape)) if shape else 1
    return ((rng.uniform(n) * 2.0 - 1.0) * scale).reshape(shape)


def _max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max()) if a.size else 0.0


# ---------------------------------------------------------------------------
# Reference computations (no shared code with the library forward paths)


def sample_loop_oracle(img: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Four-neighbor bilinear sampling written as the defining double sum."""
    H, W, C = img.shape
    out = np.zeros((len(pts), C), dtype=np.float64)
    for n, (py, px) in enumerate(pts):
        iy = (py + 1.0) / 2.0 * H - 0.5
        ix = (px + 1.0) / 2.0 * W - 0.5
        for a in range(H):
            ga = max(0.0, 1.0 - abs(iy - a))
            if ga == 0.0:
                continue
            for b in range(W):
                gb = max(0.0, 1.0 - abs(ix - b))
                if gb:
                    out[n] += ga * gb * img[a, b]
    return out


def dense_cross_attention(flat_kv: np.ndarray, queries: np.ndarray, p, M: int) -> np.ndarray:
    """Unrouted multi-head cross-attention using the bi-level projections."""
    C = flat_kv.shape[-1]
    d = C // M
    qh = queries @ p.wq_hat.data + p.bq_hat.data
    kh = flat_kv @ p.wk_hat.data + p.bk_hat.data
    vh = flat_kv @ p.wv_hat.data + p.bv_hat.data
    outs = []
    for m in range(M):
        sl = slice(m * d, (m + 1) * d)
        logits = qh[:, sl] @ kh[:, sl].T / np.sqrt(d)
        logits -= logits.max(axis=-1, keepdims=True)
        att = np.exp(logits)
        att /= att.sum(axis=-1, keepdims=True)
        outs.append(att @ vh[:, sl])
    return np.concatenate(outs, axis=1)


def permute_heads(p: DbraParams, cfg: DbraConfig, perm: np.ndarray) -> DbraParams:
    """Relabel deformable-level heads: permute head blocks of the q/k/v
    projections, the per-head inner projections and bias tables, the
    matching rows of the output projection, and (because the query channels
    also feed the offset network) the offset network's per-channel
    parameters by the induced within-group channel permutation.  Only
    within-group permutations are isomorphisms when G > 1."""
    d = cfg.head_dim
    col = np.concatenate([np.arange(m * d, (m + 1) * d) for m in perm])
    q = DbraParams(**{f: getattr(p, f) for f in p.__dataclass_fields__})
    q.wq = Tensor(p.wq.data[:, col].copy())
    q.bq = Tensor(p.bq.data[col].copy())
    q.wk = Tensor(p.wk.data[:, col].copy())
    q.bk = Tensor(p.bk.data[col].copy())
    q.wv = Tensor(p.wv.data[:, col].copy())
    q.bv = Tensor(p.bv.data[col].copy())
    q.wo_bar = Tensor(p.wo_bar.data[perm].copy())
    q.bo_bar = Tensor(p.bo_bar.data[perm].copy())
    q.rpb = Tensor(p.rpb.data[perm].copy())
    q.wo = Tensor(p.wo.data[col, :].copy())
    gcol = col[: cfg.group_channels]
    q.offset = deform.OffsetNetParams(
        dw=Tensor(p.offset.dw.data[:, :, gcol].copy()),
        dw_b=Tensor(p.offset.dw_b.data[gcol].copy()),
        ln_gamma=Tensor(p.offset.ln_gamma.data[gcol].copy()),
        ln_beta=Tensor(p.offset.ln_beta.data[gcol].copy()),
        pw=Tensor(p.offset.pw.data[gcol].copy()),
        pw_b=p.offset.pw_b,
    )
    return q


# ---------------------------------------------------------------------------
# Suites


def _run_checks(specs) -> list[CheckResult]:
    out = []
    for name, fn in specs:
        try:
            out.append(fn())
        except Exception as exc:  # a crashed check is a failed check
            out.append(CheckResult(name, False, float("nan"), 0.0,
                                   f"{type(exc).__name__}: {exc}"))
    return out


def suite_gradcheck(seed: int = 0) -> list[CheckResult]:
    """Tape gradients of a scalar loss over the full deformable block vs
    central finite differences, every parameter and the input, f64.

    Relative errors are floored at the finite-difference resolution limit
    eps*max(1,|loss|)/h / tol: components with gradients below that scale
    differ only by f64 roundoff in the difference quotient, which h=1e-5
    cannot resolve to 1e-4 relative accuracy for any implementation."""
    cfg = toy_config()
    H = W = 4
    prefix = "dbra."
    base = dbra_params_from(cfg, H, W, randomize_getter(seed), prefix=prefix)
    arrays = {name: t.data.copy() for name, t in base.named("dbra")}
    rs = Rng(derive_seed(seed, "gradcheck"))
    x0 = _rand(rs.for_name("x"), (H, W, cfg.C), scale=0.8)
    lw = _rand(rs.for_name("w"), (H, W, cfg.C))

    def build_loss(tensors: dict, xin: Tensor) -> Tensor:
        p = dbra_params_from(cfg, H, W, lambda n, s, i: tensors[n], prefix=prefix)
        out = dbra_mod.dbra_forward(xin, p, cfg)
        return T.tsum(T.mul(out, Tensor(lw)))

    tensors = {k: Tensor(v.copy(), requires_grad=True) for k, v in arrays.items()}
    xt = Tensor(x0.copy(), requires_grad=True)
    with T.Graph() as g:
        loss = build_loss(tensors, xt)
    g.backward(loss, wrt=list(tensors.values()) + [xt])

    def f_for(name):
        def f(x):
            trial = {k: Tensor(v.copy()) for k, v in arrays.items()}
            xin = Tensor(x0.copy())
            if name == "input":
                xin = Tensor(x.copy())
            else:
                trial[name] = Tensor(x.copy())
            p = dbra_params_from(cfg, H, W, lambda n, s, i: trial[n], prefix=prefix)
            out = dbra_mod.dbra_forward(xin, p, cfg)
            return float((out.data * lw).sum())
        return f

    h, tol = 1e-5, 1e-4
    floor = max(1e-8, np.finfo(np.float64).eps * max(1.0, abs(loss.item())) / h / tol)
    checks = []
    worst = 0.0
    for name, arr in list(arrays.items()) + [("input", x0)]:
        fd = T.finite_diff_grad(f_for(name), arr, h=h)
        grad = xt.grad if name == "input" else tensors[name].grad
        err = _max_rel_err(grad, fd, floor=floor)
        worst = max(worst, err)
        checks.append(CheckResult(f"gradcheck.{name}", err < tol, err, tol))
    checks.append(CheckResult("gradcheck.max_over_all", worst < tol, worst, tol,
                              f"h={h:g}, fd resolution floor {floor:.1e}"))
    return checks


def suite_oracle(seed: int = 0) -> list[CheckResult]:
    rs = Rng(derive_seed(seed, "oracle"))

    def sampler_random():
        img = _rand(rs.for_name("img"), (5, 7, 3))
        pts = _rand(rs.for_name("pts"), (1000, 2), scale=1.2)  # includes off-image
        got = deform.bilinear_sample(Tensor(img), Tensor(pts)).data
        err = float(np.abs(got - sample_loop_oracle(img, pts)).max())
        return CheckResult("oracle.sampler_1000_points", err < 1e-12, err, 1e-12)

    def sampler_centers():
        img = _rand(rs.for_name("cimg"), (4, 4, 2))
        centers = deform.reference_grid(4, 4).reshape(-1, 2)
        got = deform.bilinear_sample(Tensor(img), Tensor(centers)).data
        err = float(np.abs(got - img.reshape(-1, 2)).max())
        return CheckResult("oracle.sampler_exact_at_centers", err == 0.0, err, 0.0,
                           "cell centers of a power-of-two map hit pixels exactly")

    def dense():
        cfg = DbraConfig(C=8, M=2, r=2, G=1, S=2, k_route=4, D_r=1, B_r=1, K=3)
        p = dbra_params_from(cfg, 8, 8, init_getter(seed + 1, dtype=np.float64))
        p.lce = Tensor(np.zeros((5, 5, 8)))
        p.lceb = Tensor(np.zeros(8))
        x = _rand(rs.for_name("dense"), (8, 8, 8))
        trace: dict = {}
        dbra_mod.dbra_forward(Tensor(x), p, cfg, trace=trace)
        want = dense_cross_attention(x.reshape(-1, 8), trace["agent_tokens"], p, cfg.M)
        err = float(np.abs(trace["bi_attn_tokens"] - want).max())
        return CheckResult("oracle.full_routing_equals_dense", err < 1e-12, err, 1e-12,
                           "k_route=S^2, zero offsets/RPB/LCE")

    def dense_bra():
        cfg = DbraConfig(C=8, M=2, r=2, G=1, S=2, k_route=1, D_r=1, B_r=1, K=3)
        p = dbra_mod.bra_params_from(cfg, init_getter(seed + 2, dtype=np.float64))
        x = _rand(rs.for_name("bdense"), (8, 8, 8))
        trace: dict = {}
        dbra_mod.bra_forward(Tensor(x), p, cfg, k=4, trace=trace)
        flat = x.reshape(-1, 8)
        want = dense_cross_attention(flat, flat, p, cfg.M).reshape(8, 8, 8)
        err = float(np.abs(trace["bi_attn_map"] - want).max())
        return CheckResult("oracle.bra_full_routing_equals_dense", err < 1e-12, err, 1e-12)

    return _run_checks([
        ("oracle.sampler_1000_points", sampler_random),
        ("oracle.sampler_exact_at_centers", sampler_centers),
        ("oracle.full_routing_equals_dense", dense),
        ("oracle.bra_full_routing_equals_dense", dense_bra),
    ])


def suite_invariants(seed: int = 0) -> list[CheckResult]:
    rs = Rng(derive_seed(seed, "invariants"))

    def softmax_rows():
        x = _rand(rs.for_name("sm"), (17, 9), scale=4.0)
        s = T.softmax_lastdim(Tensor(x)).data
        err = float(np.abs(s.sum(axis=-1) - 1.0).max())
        return CheckResult("invariants.softmax_rows_sum_to_one", err < 1e-12, err, 1e-12)

    def partition_roundtrip():
        x = _rand(rs.for_name("part"), (8, 8, 5)).astype(np.float32)
        back = routing.region_merge(routing.region_partition(Tensor(x), 4), 8, 8).data
        same = np.array_equal(back, x)
        return CheckResult("invariants.partition_merge_bitwise", same,
                           0.0 if same else 1.0, 0.0)

    def topk_ties():
        a = np.zeros((3, 6))
        a[:, 1] = a[:, 4] = 1.0  # ties everywhere else
        i1 = T.topk_lastdim(Tensor(a), 4)[1]
        i2 = T.topk_lastdim(Tensor(a), 4)[1]
        ok = np.array_equal(i1, i2) and np.array_equal(i1[0], [1, 4, 0, 2])
        return CheckResult("invariants.topk_tie_determinism", ok, 0.0 if ok else 1.0, 0.0,
                           "stable order: equal scores resolve by ascending index")

    def routing_equivariance():
        a = _rand(rs.for_name("adj"), (9, 9))
        perm = np.argsort(_rand(rs.for_name("perm"), (9,)))
        inv = np.argsort(perm)
        base = routing.topk_routing(Tensor(a), 3).idx
        permuted = routing.topk_routing(Tensor(a[perm][:, perm]), 3).idx
        ok = np.array_equal(np.sort(permuted, axis=1), np.sort(inv[base[perm]], axis=1))
        return CheckResult("invariants.routing_permutation_equivariance", ok,
                           0.0 if ok else 1.0, 0.0)

    def zero_offset_identity():
        cfg = DbraConfig(C=8, M=2, r=1, G=1, S=2, k_route=1, D_r=1, B_r=1, K=3)
        p = dbra_params_from(cfg, 4, 4, init_getter(seed + 3, dtype=np.float64))
        x = _rand(rs.for_name("zo"), (4, 4, 8))
        trace: dict = {}
        dbra_mod.dbra_forward(Tensor(x), p, cfg, trace=trace)
        err = float(np.abs(trace["agent_tokens"] - x.reshape(-1, 8)).max())
        return CheckResult("invariants.zero_offset_r1_samples_tokens", err == 0.0, err, 0.0)

    def zero_offset_mean():
        # even r: a zero-offset grid point sits midway between pixel centers,
        # so the sample is the exact mean of the central 2x2 patch
        cfg = toy_config()  # r=2
        p = dbra_params_from(cfg, 8, 8, init_getter(seed + 4, dtype=np.float64))
        x = _rand(rs.for_name("zp"), (8, 8, 8))
        trace: dict = {}
        dbra_mod.dbra_forward(Tensor(x), p, cfg, trace=trace)
        blocks = x.reshape(4, 2, 4, 2, 8)
        want = blocks.mean(axis=(1, 3)).reshape(-1, 8)
        err = float(np.abs(trace["agent_tokens"] - want).max())
        return CheckResult("invariants.zero_offset_r2_mean_pooling", err < 1e-15, err, 1e-15)

    def head_perm():
        cfg = DbraConfig(C=8, M=4, r=2, G=1, S=2, k_route=2, D_r=1, B_r=1, K=3)
        p = dbra_params_from(cfg, 8, 8, init_getter(seed + 5, dtype=np.float64))
        p.offset.pw = Tensor(_rand(rs.for_name("hp"), (8, 2)))
        p.rpb = Tensor(_rand(rs.for_name("hp2"), (4, 15, 15)))
        x = _rand(rs.for_name("hpx"), (8, 8, 8))
        base = dbra_mod.dbra_forward(Tensor(x), p, cfg).data
        pp = permute_heads(p, cfg, np.array([2, 0, 3, 1]))
        moved = dbra_mod.dbra_forward(Tensor(x), pp, cfg).data
        err = float(np.abs(base - moved).max())
        return CheckResult("invariants.head_permutation_invariance", err < 1e-12, err, 1e-12)

    def forward_determinism():
        from .backbone import backbone_forward, init_params
        from .config import make_variant

        cfg = make_variant("toy")
        img = Tensor(_rand(rs.for_name("det"), (32, 32, 3)).astype(np.float32))
        a = backbone_forward(img, cfg, init_params(cfg, seed=seed)).data
        b = backbone_forward(img, cfg, init_params(cfg, seed=seed)).data
        same = np.array_equal(a, b)
        return CheckResult("invariants.forward_bitwise_determinism", same,
                           0.0 if same else 1.0, 0.0)

    return _run_checks([
        ("invariants.softmax_rows_sum_to_one", softmax_rows),
        ("invariants.partition_merge_bitwise", partition_roundtrip),
        ("invariants.topk_tie_determinism", topk_ties),
        ("invariants.routing_permutation_equivariance", routing_equivariance),
        ("invariants.zero_offset_r1_samples_tokens", zero_offset_identity),
        ("invariants.zero_offset_r2_mean_pooling", zero_offset_mean),
        ("invariants.head_permutation_invariance", head_perm),
        ("invariants.forward_bitwise_determinism", forward_determinism),
    ])


# the closed-form expressions relate to instrumented MACs by exact integer
# identities: they skip the per-head inner projection, add a 4*N_s*C bilinear
# sampling charge, and charge the adjacency product twice
def _def_formula_identity(cfg: DbraConfig, H: int, W: int, by_scope: dict) -> tuple[int, int]:
    N_s = (H // cfg.r) * (W // cfg.r)
    got = sum(n for label, n in by_scope.items()
              if label.split(".", 1)[0] in ("def", "offset") and not label.endswith("head_proj"))
    return analysis.flops_def(H, W, cfg.C, N_s, cfg.K), got + 4 * N_s * cfg.C


def _bi_formula_identity(cfg: DbraConfig, H: int, W: int, N_s: int, k: int, by_scope: dict):
    got = sum(n for label, n in by_scope.items() if label.startswith("bi."))
    return analysis.flops_bi(H, W, cfg.C, N_s, cfg.S, k), got + cfg.S ** 4 * cfg.C


def _draw_config(rng: Rng, S: int) -> tuple[DbraConfig, int, int]:
    """One random small config at region factor S, with every divisibility
    rule met by construction: H = S*r*a keeps the region grid and the agent
    grid compatible."""
    u = rng.uniform(8)

    def pick(opts, x):
        return opts[min(int(x * len(opts)), len(opts) - 1)]

    r = pick((1, 2), u[0])
    a = pick((1, 2), u[1]) if S * r <= 4 else 1
    H = S * r * a
    M = pick((1, 2, 4), u[2])
    C = M * pick((4, 8), u[3])
    G = pick([g for g in (1, 2, 4) if M % g == 0], u[4])
    k = 1 + min(int(u[5] * S * S), S * S - 1)
    cfg = DbraConfig(C=C, M=M, r=r, G=G, S=S, k_route=k,
                     D_r=pick((1, 2), u[6]), B_r=1, K=pick((3, 5), u[7]))
    cfg.validate(H, H)
    return cfg, H, H


def suite_flops(seed: int = 0) -> list[CheckResult]:
    rs = Rng(derive_seed(seed, "flops"))
    # one random config per region factor so routing terms are exercised
    configs = [_draw_config(rs.for_name(f"cfg{i}"), S=i + 1) for i in range(3)]
    checks = []
    for i, (cfg, H, W) in enumerate(configs):
        x = Tensor(_rand(rs.for_name(f"x{i}"), (H, W, cfg.C)))
        p = dbra_params_from(cfg, H, W, init_getter(seed + i, dtype=np.float64))
        with T.count_macs() as mc:
            dbra_mod.dbra_forward(x, p, cfg)
        want_def, got_def = _def_formula_identity(cfg, H, W, mc.by_scope)
        N_s = (H // cfg.r) * (W // cfg.r)
        want_bi, got_bi = _bi_formula_identity(cfg, H, W, N_s, cfg.k_route, mc.by_scope)
        checks.append(CheckResult(
            f"flops.def_formula_vs_instrumented_{i}", want_def == got_def,
            abs(want_def - got_def), 0.0, f"formula {want_def} MACs+sampling {got_def}"))
        checks.append(CheckResult(
            f"flops.bi_formula_vs_instrumented_{i}", want_bi == got_bi,
            abs(want_bi - got_bi), 0.0, f"formula {want_bi} MACs+adjacency {got_bi}"))

        bp = dbra_mod.bra_params_from(cfg, init_getter(seed + 10 + i, dtype=np.float64))
        with T.count_macs() as mb:
            dbra_mod.bra_forward(x, bp, cfg, k=cfg.k_route)
        want_bra, got_bra = _bi_formula_identity(cfg, H, W, H * W, cfg.k_route, mb.by_scope)
        checks.append(CheckResult(
            f"flops.bra_formula_vs_instrumented_{i}", want_bra == got_bra,
            abs(want_bra - got_bra), 0.0))

    def model_level():
        from .backbone import backbone_forward, init_params
        from .config import make_variant

        cfg = make_variant("toy")
        img = Tensor(_rand(rs.for_name("m"), (32, 32, 3)).astype(np.float32))
        with T.count_macs() as mc:
            backbone_forward(img, cfg, init_params(cfg, seed=seed))
        want, by = analysis.model_macs(cfg)
        mismatched = sum(1 for k in set(by) | set(mc.by_scope)
                         if by.get(k) != mc.by_scope.get(k))
        ok = want == mc.total and mismatched == 0
        return CheckResult("flops.model_macs_analytic_vs_instrumented", ok,
                           abs(want - mc.total) + mismatched, 0.0,
                           f"analytic {want}, instrumented {mc.total}, "
                           f"label mismatches {mismatched}")

    checks += _run_checks([("flops.model_macs_analytic_vs_instrumented", model_level)])
    return checks


_SUITE_FNS = {
    "gradcheck": suite_gradcheck,
    "oracle": suite_oracle,
    "invariants": suite_invariants,
    "flops": suite_flops,
}


def run_suite(name: str, seed: int = 0) -> SuiteResult:
    if name not in _SUITE_FNS:
        raise ValueError(f"unknown suite {name!r}, expected one of {SUITES}")
    t0 = time.perf_counter()
    checks = _SUITE_FNS[name](seed)
    return SuiteResult(
        suite=name,
        passed=all(c.passed for c in checks),
        seconds=round(time.perf_counter() - t0, 3),
        checks=checks,
    )


def run_all(seed: int = 0) -> list[SuiteResult]:
    return [run_suite(name, seed) for name in SUITES]
