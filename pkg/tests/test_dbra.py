"""DBRA block: shape contracts, dense-attention oracle, local-context
term, softmax row sums, head-permutation invariance, trace contents."""

import numpy as np
import pytest

from debiformer import dbra, deform, tensor as T
from debiformer.rng import Rng

import helpers
from test_deform import sample_oracle_normalized

R = Rng(999)


def make_dbra(cfg, H, W, seed=5, dtype=np.float64):
    return dbra.dbra_params_from(cfg, H, W, dbra.init_getter(seed, dtype=dtype))


def make_bra(cfg, seed=5, dtype=np.float64):
    return dbra.bra_params_from(cfg, dbra.init_getter(seed, dtype=dtype))


def toy_input(name="x", H=8, W=8, C=8, scale=1.0):
    return T.Tensor(helpers.rand(R.for_name(name), (H, W, C), scale=scale))


def test_config_validation():
    with pytest.raises(dbra.ConfigError):
        dbra.DbraConfig(C=8, M=3, r=2, G=1, S=2, k_route=1)   # C % M
    with pytest.raises(dbra.ConfigError):
        dbra.DbraConfig(C=8, M=4, r=2, G=3, S=2, k_route=1)   # C % G
    with pytest.raises(dbra.ConfigError):
        dbra.DbraConfig(C=8, M=2, r=2, G=1, S=2, k_route=5)   # k > S^2
    with pytest.raises(dbra.ConfigError):
        dbra.DbraConfig(C=8, M=2, r=2, G=1, S=2, k_route=1, K=4)  # even kernel
    cfg = dbra.toy_config()
    with pytest.raises(dbra.ConfigError):
        cfg.validate(10, 10)  # grid 5x5 not divisible by S=2


def test_toy_forward_shape_and_finite():
    cfg = dbra.toy_config()
    p = make_dbra(cfg, 8, 8)
    out = dbra.dbra_forward(toy_input(), p, cfg)
    assert out.shape == (8, 8, 8)
    assert np.isfinite(out.data).all()


def test_param_shapes_and_names_agree():
    cfg = dbra.toy_config()
    shapes = dbra.dbra_param_shapes(cfg, 8, 8)
    p = make_dbra(cfg, 8, 8)
    named = dict(p.named("dbra"))
    assert set(named) == {f"dbra.{n}" for n, _, _ in shapes}
    for n, shape, _ in shapes:
        assert named[f"dbra.{n}"].shape == shape
    # position table sized to the map
    assert dict(shapes_map := {n: s for n, s, _ in shapes})["rpb"] == (2, 15, 15)


def test_default_init_zero_offsets_zero_bias():
    cfg = dbra.toy_config()
    p = make_dbra(cfg, 8, 8)
    assert (p.offset.pw.data == 0).all()
    assert (p.rpb.data == 0).all()
    trace = {}
    dbra.dbra_forward(toy_input(), p, cfg, trace=trace)
    ref = deform.reference_grid(4, 4).reshape(-1, 2)
    np.testing.assert_allclose(trace["deform_points"][0], ref, atol=1e-15)
    assert (trace["def_bias"] == 0).all()


def dense_cross_attention_oracle(x, agents, p, M):
    """Multi-head cross-attention of agent tokens over all tokens, plain numpy."""
    C = x.shape[-1]
    d = C // M
    flat = x.reshape(-1, C)
    qh = agents @ p.wq_hat.data + p.bq_hat.data
    kh = flat @ p.wk_hat.data + p.bk_hat.data
    vh = flat @ p.wv_hat.data + p.bv_hat.data
    outs = []
    for m in range(M):
        sl = slice(m * d, (m + 1) * d)
        outs.append(
            helpers.attention_oracle(qh[:, sl], kh[:, sl], vh[:, sl], 1.0 / np.sqrt(d))
        )
    return np.concatenate(outs, axis=1)


def test_bi_level_equals_dense_attention_with_full_routing():
    """k_route = S^2, zero offsets/RPB/LCE: the routed bi-level stage must
    reproduce dense multi-head cross-attention from grid tokens to all
    tokens, to 1e-12 in f64."""
    cfg = dbra.DbraConfig(C=8, M=2, r=2, G=1, S=2, k_route=4, D_r=1, B_r=1, K=3)
    p = make_dbra(cfg, 8, 8)
    p.lce = T.Tensor(np.zeros((5, 5, 8)))
    p.lceb = T.Tensor(np.zeros(8))
    x = toy_input("dense")
    trace = {}
    dbra.dbra_forward(x, p, cfg, trace=trace)

    agents = sample_oracle_normalized(x.data, deform.reference_grid(4, 4).reshape(-1, 2))
    np.testing.assert_allclose(trace["agent_tokens"], agents, atol=1e-13)
    want = dense_cross_attention_oracle(x.data, agents, p, cfg.M)
    assert np.abs(trace["bi_attn_tokens"] - want).max() < 1e-12


def test_bra_equals_dense_self_attention_with_full_routing():
    cfg = dbra.DbraConfig(C=8, M=2, r=2, G=1, S=2, k_route=1, D_r=1, B_r=1, K=3)
    p = make_bra(cfg)
    x = toy_input("bdense")
    trace = {}
    dbra.bra_forward(x, p, cfg, k=4, trace=trace)
    flat = x.data.reshape(-1, 8)
    want = dense_cross_attention_oracle(x.data, flat, p, cfg.M).reshape(8, 8, 8)
    assert np.abs(trace["bi_attn_map"] - want).max() < 1e-12


def test_bra_forward_shape_and_single_route():
    cfg = dbra.toy_config()
    p = make_bra(cfg)
    x = toy_input("bra")
    trace = {}
    out = dbra.bra_forward(x, p, cfg, k=1, trace=trace)
    assert out.shape == (8, 8, 8)
    assert trace["routing"].idx.shape == (4, 1)


def test_softmax_rows_sum_to_one_both_levels():
    cfg = dbra.DbraConfig(C=8, M=2, r=2, G=2, S=2, k_route=2, D_r=1, B_r=1, K=3)
    p = make_dbra(cfg, 8, 8, seed=9)
    # activate offsets and bias tables so the check is not vacuous
    p.offset.pw = T.Tensor(helpers.rand(R.for_name("pw"), (4, 2)))
    p.rpb = T.Tensor(helpers.rand(R.for_name("tb"), (2, 15, 15)))
    trace = {}
    dbra.dbra_forward(toy_input("sm"), p, cfg, trace=trace)
    bi = trace["bi_attention"]          # [R, M, Tq, k*T]
    assert bi.shape == (4, 2, 4, 32)    # k_route=2 regions of 16 tokens
    np.testing.assert_allclose(bi.sum(axis=-1), np.ones(bi.shape[:-1]), atol=1e-12)
    de = trace["def_attention"]         # [M, HW, N_s]
    assert de.shape == (2, 64, 16)
    np.testing.assert_allclose(de.sum(axis=-1), np.ones(de.shape[:-1]), atol=1e-12)


def test_lce_zero_kernel_and_delta_kernel():
    C = 4
    v = T.Tensor(helpers.rand(R.for_name("lce"), (4, 4, C)))
    zeros = dbra.lce(v, T.Tensor(np.zeros((5, 5, C))), T.Tensor(np.zeros(C)), None)
    assert (zeros.data == 0).all()
    delta = np.zeros((5, 5, C))
    delta[2, 2, :] = 1.0  # center tap passes the map through
    pts = [T.Tensor(deform.reference_grid(4, 4).reshape(-1, 2))]  # r=1 grid, exact centers
    out = dbra.lce(v, T.Tensor(delta), T.Tensor(np.zeros(C)), pts)
    np.testing.assert_allclose(out.data, v.data.reshape(-1, C), atol=1e-13)


def test_lce_random_kernel_matches_conv_then_sample_oracle():
    C, G = 6, 2
    rng = R.for_name("lce2")
    v = helpers.rand(rng, (6, 6, C))
    kern = helpers.rand(rng, (5, 5, C))
    bias = helpers.rand(rng, (C,))
    pts = [helpers.rand(rng, (9, 2), scale=0.9) for _ in range(G)]
    out = dbra.lce(
        T.Tensor(v), T.Tensor(kern), T.Tensor(bias), [T.Tensor(p) for p in pts]
    ).data
    conv = helpers.conv2d_oracle(v, kern, bias, stride=1, pad=2, depthwise=True)
    want = np.concatenate(
        [sample_oracle_normalized(conv[:, :, g * 3 : (g + 1) * 3], pts[g]) for g in range(G)],
        axis=1,
    )
    np.testing.assert_allclose(out, want, atol=1e-12)


def _permute_heads(p, cfg, perm):
    """Relabel deformable-level heads: permute head blocks of the q/k/v
    projections, the per-head inner projections and bias tables, the
    matching rows of the output projection, and (because the query channels
    also feed the offset network) the offset network's per-channel
    parameters by the induced within-group channel permutation."""
    d = cfg.head_dim
    col = np.concatenate([np.arange(m * d, (m + 1) * d) for m in perm])
    q = dbra.DbraParams(**{f.name: getattr(p, f.name) for f in p.__dataclass_fields__.values()})
    q.wq = T.Tensor(p.wq.data[:, col].copy())
    q.bq = T.Tensor(p.bq.data[col].copy())
    q.wk = T.Tensor(p.wk.data[:, col].copy())
    q.bk = T.Tensor(p.bk.data[col].copy())
    q.wv = T.Tensor(p.wv.data[:, col].copy())
    q.bv = T.Tensor(p.bv.data[col].copy())
    q.wo_bar = T.Tensor(p.wo_bar.data[perm].copy())
    q.bo_bar = T.Tensor(p.bo_bar.data[perm].copy())
    q.rpb = T.Tensor(p.rpb.data[perm].copy())
    q.wo = T.Tensor(p.wo.data[col, :].copy())
    # the permutation restricted to group 0's channels (the same pattern must
    # repeat in every group because the offset network weights are shared)
    gcol = col[: cfg.group_channels]
    q.offset = deform.OffsetNetParams(
        dw=T.Tensor(p.offset.dw.data[:, :, gcol].copy()),
        dw_b=T.Tensor(p.offset.dw_b.data[gcol].copy()),
        ln_gamma=T.Tensor(p.offset.ln_gamma.data[gcol].copy()),
        ln_beta=T.Tensor(p.offset.ln_beta.data[gcol].copy()),
        pw=T.Tensor(p.offset.pw.data[gcol].copy()),
        pw_b=p.offset.pw_b,
    )
    return q


@pytest.mark.parametrize("G,perm", [(1, [1, 0]), (1, [3, 1, 0, 2]), (2, [1, 0, 3, 2])])
def test_head_permutation_invariance(G, perm):
    """Head relabeling is a model isomorphism: within-group permutations
    (any permutation when G=1) leave the output bitwise-level unchanged."""
    M = len(perm)
    cfg = dbra.DbraConfig(C=8, M=M, r=2, G=G, S=2, k_route=2, D_r=1, B_r=1, K=3)
    p = make_dbra(cfg, 8, 8, seed=13)
    p.offset.pw = T.Tensor(helpers.rand(R.for_name("hp"), (8 // G, 2)))
    p.rpb = T.Tensor(helpers.rand(R.for_name("hp2"), (M, 15, 15)))
    x = toy_input("hperm")
    base = dbra.dbra_forward(x, p, cfg).data
    permuted = dbra.dbra_forward(x, _permute_heads(p, cfg, np.array(perm)), cfg).data
    assert np.abs(base - permuted).max() < 1e-12


def test_rpb_table_size_mismatch_rejected():
    cfg = dbra.toy_config()
    p = make_dbra(cfg, 8, 8)
    with pytest.raises(dbra.ConfigError):
        dbra.dbra_forward(toy_input("mm", H=4, W=4), p, cfg)


def test_nonzero_offsets_change_output():
    cfg = dbra.toy_config()
    p = make_dbra(cfg, 8, 8)
    x = toy_input("off")
    base = dbra.dbra_forward(x, p, cfg).data
    p.offset.pw = T.Tensor(helpers.rand(R.for_name("opw"), (8, 2), scale=3.0))
    moved = dbra.dbra_forward(x, p, cfg).data
    assert np.abs(base - moved).max() > 1e-8


def test_stage1_classification_geometry():
    """56x56x64 stage-1 config: 7x7 agent grid, 49 regions, and with k=4
    each agent region's gathered set holds 4*64 = 256 tokens."""
    cfg = dbra.DbraConfig(C=64, M=2, r=8, G=1, S=7, k_route=4, D_r=1, B_r=1, K=9)
    p = make_dbra(cfg, 56, 56, dtype=np.float32)
    x = T.Tensor(helpers.rand(R.for_name("s1"), (56, 56, 64)).astype(np.float32))
    trace = {}
    out = dbra.dbra_forward(x, p, cfg, trace=trace)
    assert out.shape == (56, 56, 64)
    assert trace["deform_points"].shape == (1, 49, 2)
    assert trace["routing"].idx.shape == (49, 4)
    assert trace["bi_attention"].shape == (49, 2, 1, 256)
    assert trace["def_attention"].shape == (2, 3136, 49)
