"""Acceptance gate: one test and one printed PASS/FAIL line per criterion.

Run `pytest tests/test_acceptance.py -v -s` to see every line.  Criterion 1
carries a deliberate red on the largest preset; its assertion message and
the README design notes explain why it is left failing rather than fudged.
"""

import contextlib
import io
import time

import numpy as np
import pytest

from debiformer import analysis, verification
from debiformer import backbone as B
from debiformer import tensor as T
from debiformer.cli import main
from debiformer.config import make_variant
from debiformer.rng import Rng


def _line(n: int, ok: bool, detail: str) -> None:
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")


# reference figures the classification presets are expected to reproduce
PARAM_TARGETS = {"T": 21.4e6, "S": 44.0e6, "B": 77.0e6}
FLOP_TARGETS = {"T": 2.6e9, "S": 5.4e9, "B": 11.8e9}


def test_criterion_1_params_and_flops():
    t0 = time.perf_counter()
    rows, ok = [], True
    for name in ("T", "S", "B"):
        report = analysis.model_flops(make_variant(name))
        dp = report.params / PARAM_TARGETS[name] - 1.0
        df = report.mac_flops / FLOP_TARGETS[name] - 1.0
        p_ok, f_ok = abs(dp) <= 0.05, abs(df) <= 0.10
        ok = ok and p_ok and f_ok
        rows.append(
            f"{name}: {report.params / 1e6:.2f}M ({dp:+.1%}{'' if p_ok else ' OUT'}) "
            f"{report.mac_flops / 1e9:.3f}G ({df:+.1%}{'' if f_ok else ' OUT'})"
        )
    elapsed = time.perf_counter() - t0
    ok = ok and elapsed < 30.0
    _line(1, ok, "params within 5%, flops within 10%:  " + "   ".join(rows)
          + f"   [{elapsed:.1f}s]")
    assert ok, (
        "the largest preset overshoots its 77M parameter target by ~24%: the "
        "block parameterization that lands T (+0.8%) and S (+0.4%) inside 5% "
        "makes B structurally heavier, and no uniform per-block cost fits all "
        "three targets at once.  All three FLOPs figures are inside 10%.  "
        "Left failing rather than special-casing the B preset."
    )


def test_criterion_2_stage_geometry():
    # dynamic check: a real 224 forward for the smallest preset
    config = make_variant("T")
    params = B.init_params(config, seed=0)
    img = T.Tensor(Rng(0).uniform(224 * 224 * 3).reshape(224, 224, 3).astype(np.float32))
    trace: dict = {}
    B.backbone_forward(img, config, params, trace=trace)
    res = [s["resolution"] for s in trace["stages"]]
    ok = res == [56, 28, 14, 7]
    # structural check: every classification preset, exact
    for name in ("T", "S", "B", "STL"):
        c = make_variant(name)
        for i, st in enumerate(c.stages):
            H = c.stage_resolution(i)
            ok = ok and H == (56, 28, 14, 7)[i]
            ok = ok and st.M * 32 == st.C
            ok = ok and H % st.r == 0 and H // st.r == 7
            ok = ok and st.S == 7
    _line(2, ok, f"stage resolutions {res}, heads C/32, 7x7 agent grid and 7x7 "
                 "region grid in every stage of every preset (T by forward)")
    assert ok


def test_criterion_3_tokens_per_query():
    ok = True
    for name in ("T", "S", "B", "STL"):
        tq = analysis.tokens_per_query(make_variant(name))
        ok = ok and tq == {"dbra": (256, 128, 64, 49), "bra": (64, 64, 64, 49)}
    _line(3, ok, "tokens per deformable query (256,128,64,49) and per "
                 "routing-only query (64,64,64,49); exact for every preset")
    assert ok


def test_criterion_4_dense_attention_oracle():
    t0 = time.perf_counter()
    checks = {c.name: c for c in verification.run_suite("oracle", seed=0).checks}
    elapsed = time.perf_counter() - t0
    c = checks["oracle.full_routing_equals_dense"]
    cb = checks["oracle.bra_full_routing_equals_dense"]
    ok = c.passed and cb.passed and elapsed < 5.0
    _line(4, ok, f"full routing equals dense cross-attention, max |d| {c.value:.2e} "
                 f"< 1e-12 (routing-only path {cb.value:.2e}); f64, 8x8 map, C=8, "
                 f"S=2, r=2 [{elapsed:.2f}s]")
    assert ok


def test_criterion_5_sampler_oracle():
    checks = {c.name: c for c in verification.run_suite("oracle", seed=0).checks}
    pts = checks["oracle.sampler_1000_points"]
    ctr = checks["oracle.sampler_exact_at_centers"]
    ok = pts.passed and ctr.passed
    _line(5, ok, f"sampler equals the four-neighbor loop, max |d| {pts.value:.2e} "
                 f"< 1e-12 on 1000 points; exact at cell centers "
                 f"(|d| = {ctr.value:.1e})")
    assert ok


@pytest.mark.slow
def test_criterion_6_gradient_suite():
    result = verification.run_suite("gradcheck", seed=0)
    worst = {c.name: c for c in result.checks}["gradcheck.max_over_all"]
    ok = result.passed and result.seconds < 60.0
    _line(6, ok, f"reverse-mode vs central differences (f64, h=1e-5): max rel "
                 f"err {worst.value:.2e} < 1e-4 over every parameter and the "
                 f"input [{result.seconds:.1f}s]")
    assert ok


def test_criterion_7_flops_formula_consistency():
    result = verification.run_suite("flops", seed=0)
    ok = result.passed
    _line(7, ok, "closed-form costs equal instrumented MACs exactly on 3 random "
                 "configs (deformable, routed, routing-only paths) and the full "
                 "toy model per-label map")
    assert ok


def test_criterion_8_invariants_and_command_determinism(tmp_path):
    result = verification.run_suite("invariants", seed=0)
    by = {c.name: c for c in result.checks}
    hp = by["invariants.head_permutation_invariance"]

    # forward command, fixed seed, --threads 1: byte-identical logits archives
    out = tmp_path / "m"
    la, lb = tmp_path / "a.dbt", tmp_path / "b.dbt"
    with contextlib.redirect_stdout(io.StringIO()):
        rc = main(["--threads", "1", "init", "toy", "--seed", "0", "--out", str(out)])
        argv = ["--threads", "1", "forward", "--config", str(out / "config.json"),
                "--weights", str(out / "weights.dbt"), "--random", "--seed", "1"]
        rc += main(argv + ["--out", str(la)])
        rc += main(argv + ["--out", str(lb)])
    cli_ok = rc == 0 and la.read_bytes() == lb.read_bytes()

    ok = result.passed and cli_ok
    failed = [c.name for c in result.checks if not c.passed]
    _line(8, ok, f"{len(result.checks)} invariants pass (head permutation "
                 f"{hp.value:.1e} < 1e-12); forward command byte-identical under "
                 f"fixed seed and --threads 1"
                 + (f"; FAILED: {failed}" if failed or not cli_ok else ""))
    assert ok
