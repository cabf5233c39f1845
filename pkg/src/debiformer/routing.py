"""Region-level sparse routing.

A channels-last map [H, W, C] is partitioned into S x S equal regions in
row-major region order (region (a, b) -> index a*S + b), each region
holding its tokens row-major.  Region descriptors are token means; the
region-to-region affinity is their unscaled inner product.  Each query
region routes to its top-k affine regions (descending, ties to the smaller
index) and attends over the concatenation of their tokens.  The selection
indices are not differentiable; gradients flow through gathered values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class RoutingIndex:
    """Per-region selection: idx[r] lists the k regions query region r attends to."""

    S: int
    k: int
    idx: np.ndarray  # [S*S, k] int64

    def tokens_per_query(self, tokens_per_region: int) -> int:
        return self.k * tokens_per_region


def region_partition(x: Tensor, S: int) -> Tensor:
    """[H, W, C] -> [S*S, (H//S)*(W//S), C], bitwise invertible."""
    if x.ndim != 3:
        raise T.ShapeError(f"region_partition expects [H, W, C], got {x.shape}")
    H, W, C = x.shape
    if H % S or W % S:
        raise T.ShapeError(f"region count S={S} must divide H={H} and W={W}")
    hs, ws = H // S, W // S
    t = T.reshape(x, (S, hs, S, ws, C))
    t = T.permute(t, (0, 2, 1, 3, 4))
    return T.reshape(t, (S * S, hs * ws, C))


def region_merge(xr: Tensor, H: int, W: int) -> Tensor:
    """Inverse of region_partition for an S*S x T x C tensor."""
    R, Ttok, C = xr.shape
    S = int(round(R ** 0.5))
    if S * S != R:
        raise T.ShapeError(f"region axis {R} is not a square count")
    hs, ws = H // S, W // S
    if hs * ws != Ttok or H % S or W % S:
        raise T.ShapeError(f"cannot merge {xr.shape} back to [{H}, {W}, {C}]")
    t = T.reshape(xr, (S, S, hs, ws, C))
    t = T.permute(t, (0, 2, 1, 3, 4))
    return T.reshape(t, (H, W, C))


def region_average(xr: Tensor) -> Tensor:
    """Mean token per region: [R, T, C] -> [R, C]."""
    if xr.ndim != 3:
        raise T.ShapeError(f"region_average expects [R, T, C], got {xr.shape}")
    return T.mean(xr, axis=1)


def adjacency(q_regions: Tensor, k_regions: Tensor) -> Tensor:
    """Unscaled affinity between query and key region descriptors: q k^T."""
    if q_regions.shape[-1] != k_regions.shape[-1]:
        raise T.ShapeError(
            f"descriptor widths differ: {q_regions.shape} vs {k_regions.shape}"
        )
    with T.mac_scope("bi.adjacency"):
        return T.matmul(q_regions, T.permute(k_regions, (1, 0)))


def topk_routing(a: Tensor, k: int) -> RoutingIndex:
    """Per-row top-k of the affinity matrix; descending, ties to smaller index."""
    R = a.shape[0]
    S = int(round(R ** 0.5))
    _, idx = T.topk_lastdim(a, k)
    return RoutingIndex(S=S, k=k, idx=idx)


def gather_kv(
    k_regions: Tensor, v_regions: Tensor, route: RoutingIndex
) -> tuple[Tensor, Tensor]:
    """Concatenate each query region's routed key/value tokens in idx order.

    [R, T, C] inputs give [R, k*T, C] outputs.
    """
    R, Ttok, C = k_regions.shape
    if v_regions.shape != k_regions.shape:
        raise T.ShapeError(f"key/value shapes differ: {k_regions.shape} vs {v_regions.shape}")
    if route.idx.shape[0] != R:
        raise T.ShapeError(f"routing rows {route.idx.shape[0]} != regions {R}")
    k_g = T.reshape(T.gather_rows(k_regions, route.idx), (R, route.k * Ttok, C))
    v_g = T.reshape(T.gather_rows(v_regions, route.idx), (R, route.k * Ttok, C))
    return k_g, v_g
