"""Shared test utilities: independent oracles and gradient comparison."""

import numpy as np

from debiformer import tensor as T
from debiformer.rng import Rng


def rand(rng: Rng, shape, scale=1.0):
    n = int(np.prod(shape)) if shape else 1
    return ((rng.uniform(n) * 2.0 - 1.0) * scale).reshape(shape)


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Elementwise |a-b| / max(|a|, |b|, floor), maximized.

    The floor keeps near-zero gradient pairs from dominating: a pair where
    both sides are below the floor is compared absolutely at floor scale.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def grad_check(build_loss, arrays: dict, h: float = 1e-5, floor: float = 1e-8):
    """Compare tape gradients with central differences for every array.

    `build_loss` maps a dict of numpy arrays to a scalar Tensor, creating
    Tensors internally.  Returns {name: relative error}.
    """
    tensors = {k: T.Tensor(v.copy(), requires_grad=True) for k, v in arrays.items()}
    with T.Graph() as g:
        loss = build_loss(tensors)
    g.backward(loss, wrt=tensors.values())

    errs = {}
    for name, arr in arrays.items():
        def f(x, _name=name):
            trial = {k: T.Tensor(v.copy()) for k, v in arrays.items()}
            trial[_name] = T.Tensor(x.copy())
            return build_loss(trial).item()

        fd = T.finite_diff_grad(f, arr.astype(np.float64), h=h)
        errs[name] = max_rel_err(tensors[name].grad, fd, floor=floor)
    return errs


# ---------------------------------------------------------------------------
# Loop-based oracles (no shared code with the library implementations)


def matmul_oracle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim == 2:
        m, p = a.shape
        n = b.shape[1]
        out = np.zeros((m, n), dtype=a.dtype)
        for i in range(m):
            for j in range(n):
                s = 0.0
                for q in range(p):
                    s += a[i, q] * b[q, j]
                out[i, j] = s
        return out
    flat_a = a.reshape((-1,) + a.shape[-2:])
    flat_b = b.reshape((-1,) + b.shape[-2:])
    outs = [matmul_oracle(x, y) for x, y in zip(flat_a, flat_b)]
    return np.stack(outs).reshape(a.shape[:-2] + outs[0].shape)


def conv2d_oracle(x, w, bias=None, stride=1, pad=0, depthwise=False):
    x = np.asarray(x)
    H, W, Cin = x.shape
    if depthwise:
        kh, kw, _ = w.shape
        Cout = Cin
    else:
        kh, kw, _, Cout = w.shape
    Hout = (H + 2 * pad - kh) // stride + 1
    Wout = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((Hout, Wout, Cout), dtype=x.dtype)
    for ho in range(Hout):
        for wo in range(Wout):
            for co in range(Cout):
                s = 0.0
                for i in range(kh):
                    for j in range(kw):
                        hi = ho * stride + i - pad
                        wi = wo * stride + j - pad
                        if not (0 <= hi < H and 0 <= wi < W):
                            continue
                        if depthwise:
                            s += x[hi, wi, co] * w[i, j, co]
                        else:
                            for ci in range(Cin):
                                s += x[hi, wi, ci] * w[i, j, ci, co]
                out[ho, wo, co] = s
            if bias is not None:
                out[ho, wo] += bias
    return out


def softmax_oracle(x: np.ndarray) -> np.ndarray:
    import math

    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    rows = x.reshape(-1, x.shape[-1])
    orows = out.reshape(-1, x.shape[-1])
    for r in range(rows.shape[0]):
        m = max(rows[r])
        exps = [math.exp(v - m) for v in rows[r]]
        z = sum(exps)
        orows[r] = [e / z for e in exps]
    return out


def layer_norm_oracle(x, gamma, beta, eps=1e-5):
    x = np.asarray(x, dtype=np.float64)
    rows = x.reshape(-1, x.shape[-1])
    out = np.zeros_like(rows)
    for r in range(rows.shape[0]):
        mu = rows[r].mean()
        var = ((rows[r] - mu) ** 2).mean()
        out[r] = (rows[r] - mu) / np.sqrt(var + eps) * gamma + beta
    return out.reshape(x.shape)


def attention_oracle(q, k, v, scale, bias=None):
    """Dense single-head attention with explicit loops over queries."""
    import math

    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nq, d = q.shape
    nk = k.shape[0]
    out = np.zeros((nq, v.shape[1]))
    for i in range(nq):
        logits = np.array(
            [sum(q[i, c] * k[j, c] for c in range(d)) * scale for j in range(nk)]
        )
        if bias is not None:
            logits = logits + bias[i]
        m = logits.max()
        w = np.exp(logits - m)
        w = w / w.sum()
        for j in range(nk):
            out[i] += w[j] * v[j]
    return out
