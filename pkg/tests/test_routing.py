"""Region routing: partition layout, round trips, adjacency, top-k
determinism, gather order, and the k = S^2 dense-equivalence invariant."""

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from debiformer import routing, tensor as T
from debiformer.rng import Rng

import helpers

R = Rng(31)


def test_partition_layout_row_major_regions_and_tokens():
    # 4x4 map, S=2: region 0 = rows 0-1 x cols 0-1, tokens row-major inside
    x = np.arange(16.0).reshape(4, 4, 1)
    xr = routing.region_partition(T.Tensor(x), 2).data
    assert xr.shape == (4, 4, 1)
    np.testing.assert_array_equal(xr[0, :, 0], [0, 1, 4, 5])
    np.testing.assert_array_equal(xr[1, :, 0], [2, 3, 6, 7])
    np.testing.assert_array_equal(xr[2, :, 0], [8, 9, 12, 13])
    np.testing.assert_array_equal(xr[3, :, 0], [10, 11, 14, 15])


def test_partition_merge_bitwise_identity():
    x = helpers.rand(R.for_name("pm"), (6, 9, 5))
    xr = routing.region_partition(T.Tensor(x), 3)
    back = routing.region_merge(xr, 6, 9).data
    assert (back == x).all()


@given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**31))
@settings(max_examples=25, deadline=None)
def test_partition_merge_property(S, hs, ws, C, seed):
    H, W = S * hs, S * ws
    x = helpers.rand(Rng(seed), (H, W, C))
    back = routing.region_merge(routing.region_partition(T.Tensor(x), S), H, W).data
    assert (back == x).all()


def test_partition_rejects_nondivisible():
    with pytest.raises(T.ShapeError):
        routing.region_partition(T.Tensor(np.zeros((5, 4, 1))), 2)


def test_region_average_is_token_mean():
    xr = helpers.rand(R.for_name("avg"), (4, 6, 3))
    got = routing.region_average(T.Tensor(xr)).data
    want = np.stack([xr[r].mean(axis=0) for r in range(4)])
    np.testing.assert_allclose(got, want, rtol=1e-14)


def test_adjacency_is_unscaled_inner_product():
    q = helpers.rand(R.for_name("adjq"), (3, 8))
    k = helpers.rand(R.for_name("adjk"), (3, 8))
    got = routing.adjacency(T.Tensor(q), T.Tensor(k)).data
    want = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            want[i, j] = sum(q[i, c] * k[j, c] for c in range(8))  # no 1/sqrt(C)
    np.testing.assert_allclose(got, want, rtol=1e-13)


def test_topk_routing_descending_ties_to_smaller_index():
    a = T.Tensor(np.array([[0.5, 0.9, 0.9, 0.1], [1.0, 1.0, 1.0, 1.0]]))
    route = routing.topk_routing(a, 2)
    np.testing.assert_array_equal(route.idx, [[1, 2], [0, 1]])
    assert route.k == 2


def test_gather_follows_idx_order():
    kr = T.Tensor(np.arange(12.0).reshape(3, 2, 2))
    vr = T.Tensor(-np.arange(12.0).reshape(3, 2, 2))
    route = routing.RoutingIndex(S=1, k=2, idx=np.array([[2, 0], [1, 2], [0, 1]]))
    kg, vg = routing.gather_kv(kr, vr, route)
    assert kg.shape == (3, 4, 2)
    # row 0 gathers region 2's tokens then region 0's
    np.testing.assert_array_equal(kg.data[0], np.vstack([kr.data[2], kr.data[0]]))
    np.testing.assert_array_equal(vg.data[0], np.vstack([vr.data[2], vr.data[0]]))


@given(st.integers(0, 2**31))
@settings(max_examples=20, deadline=None)
def test_routing_permutation_equivariance(seed):
    rng = Rng(seed)
    Rn, Ttok, C, k = 6, 3, 4, 3
    q = helpers.rand(rng, (Rn, C))
    kdesc = helpers.rand(rng, (Rn, C))
    kr = helpers.rand(rng, (Rn, Ttok, C))
    a = routing.adjacency(T.Tensor(q), T.Tensor(kdesc)).data
    assume(all(len(np.unique(row)) == Rn for row in a))  # no ties
    perm = rng.u64(Rn).argsort()
    route = routing.topk_routing(T.Tensor(a), k)
    a_p = routing.adjacency(T.Tensor(q), T.Tensor(kdesc[perm])).data
    route_p = routing.topk_routing(T.Tensor(a_p), k)
    # permuted routing selects the same regions in the same preference order
    np.testing.assert_array_equal(perm[route_p.idx], route.idx)
    r1 = routing.RoutingIndex(S=1, k=k, idx=route.idx)
    r2 = routing.RoutingIndex(S=1, k=k, idx=route_p.idx)
    g1, _ = routing.gather_kv(T.Tensor(kr), T.Tensor(kr), r1)
    g2, _ = routing.gather_kv(T.Tensor(kr[perm]), T.Tensor(kr[perm]), r2)
    assert (g1.data == g2.data).all()


def _plain_attention(q, k, v, scale):
    logits = q @ k.T * scale
    logits -= logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=-1, keepdims=True)
    return w @ v


@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-6), (np.float64, 1e-12)])
def test_full_k_routing_equals_dense_attention(dtype, tol):
    """With k = S^2 every region attends to all tokens, so region-wise
    attention over gathered kv must equal unpartitioned dense attention."""
    rng = R.for_name(f"dense{np.dtype(dtype).name}")
    H = W = 8
    S, C = 2, 8
    x = helpers.rand(rng, (H, W, C)).astype(dtype)
    q = helpers.rand(rng, (H, W, C)).astype(dtype)
    scale = 1.0 / np.sqrt(C)

    kr = routing.region_partition(T.Tensor(x), S)
    qr = routing.region_partition(T.Tensor(q), S)
    a = routing.adjacency(routing.region_average(qr), routing.region_average(kr))
    route = routing.topk_routing(a, S * S)
    kg, vg = routing.gather_kv(kr, kr, route)

    out_regions = np.stack(
        [
            _plain_attention(qr.data[r].astype(np.float64), kg.data[r].astype(np.float64),
                             vg.data[r].astype(np.float64), scale)
            for r in range(S * S)
        ]
    )
    merged = routing.region_merge(T.Tensor(out_regions), H, W).data

    dense = _plain_attention(
        q.reshape(-1, C).astype(np.float64), x.reshape(-1, C).astype(np.float64),
        x.reshape(-1, C).astype(np.float64), scale
    ).reshape(H, W, C)
    assert np.abs(merged - dense).max() < tol
