"""Dense layer primitives with hand-derived reverse-mode gradients.

Every `*_fw` returns (output, cache); the matching `*_bw` consumes the
upstream gradient plus that cache and returns input/parameter gradients.
All functions are dtype-preserving so the same code path runs in float32
for training and float64 for finite-difference verification.
"""

from __future__ import annotations

import numpy as np

LN_EPS = 1e-5


def _mm(x, w):
    """x @ w with leading axes flattened into one GEMM."""
    if x.ndim == 2:
        return x @ w
    return (x.reshape(-1, x.shape[-1]) @ w).reshape(*x.shape[:-1], w.shape[-1])


def linear_fw(x, w, b):
    return _mm(x, w) + b, (x,)


def linear_bw(g, cache, w):
    (x,) = cache
    x2 = x.reshape(-1, x.shape[-1])
    g2 = g.reshape(-1, g.shape[-1])
    dw = x2.T @ g2
    db = g2.sum(axis=0)
    dx = _mm(g, w.T)
    return dx, dw, db


def proj_fw(x, w):
    """Bias-free projection (key projections: a key bias shifts every score
    in a row equally, which softmax ignores, so the parameter would be dead)."""
    return _mm(x, w), (x,)


def proj_bw(g, cache, w):
    (x,) = cache
    dw = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    return _mm(g, w.T), dw


def layer_norm_fw(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv)


def layer_norm_bw(g, cache, gain):
    xhat, inv = cache
    dg = (g * xhat).reshape(-1, g.shape[-1]).sum(axis=0)
    db = g.reshape(-1, g.shape[-1]).sum(axis=0)
    gx = g * gain
    # fused pre-norm gradient: remove the mean and the xhat-aligned component
    dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def silu_fw(x):
    """x * sigmoid(x): smooth (finite-difference friendly) and one exp."""
    with np.errstate(over="ignore"):
        s = np.exp(-x)
    s += 1.0
    np.divide(1.0, s, out=s)
    return x * s, (x, s)


def silu_bw(g, cache):
    x, s = cache
    d = 1.0 - s
    d *= x
    d += 1.0
    d *= s
    d *= g
    return d


def softmax_lastaxis(x):
    """Numerically stable softmax over the last axis, in place when float."""
    m = x.max(axis=-1, keepdims=True)
    np.subtract(x, m, out=x)
    np.exp(x, out=x)
    s = x.sum(axis=-1, keepdims=True)
    np.divide(x, s, out=x)
    return x


def softmax_bw(g, p):
    """d(softmax)/dz given probabilities p and upstream gradient g.

    Consumes g in place when it owns its buffer."""
    inner = np.einsum("...i,...i->...", g, p)[..., None]
    g = np.subtract(g, inner, out=g if g.flags.writeable and g.base is None else None)
    g *= p
    return g


def split_heads(x, n_heads):
    b, length, d = x.shape
    return x.reshape(b, length, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def merge_heads(x):
    b, h, length, dh = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(b, length, h * dh)


def causal_bias(length, dtype):
    """(length, length) additive mask: -1e9 strictly above the diagonal."""
    mask = np.zeros((length, length), dtype=dtype)
    mask[np.triu_indices(length, k=1)] = -1e9
    return mask


def attention_fw(q, k, v, bias=None):
    """Scaled dot-product attention on (B, h, L, dh) tensors.

    `bias` broadcasts into the (B, h, Lq, Lk) score tensor (use
    `causal_bias` for autoregressive masking)."""
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = np.matmul(q, k.transpose(0, 1, 3, 2))
    scores *= scale
    if bias is not None:
        scores += bias
    p = softmax_lastaxis(scores)
    ctx = np.matmul(p, v)
    return ctx, (q, k, v, p, scale)


def attention_bw(g, cache):
    q, k, v, p, scale = cache
    dp = np.matmul(g, v.transpose(0, 1, 3, 2))
    dv = np.matmul(p.transpose(0, 1, 3, 2), g)
    dz = softmax_bw(dp, p)      # reuses dp's buffer
    dz *= scale
    dq = np.matmul(dz, k)
    dk = np.matmul(dz.transpose(0, 1, 3, 2), q)
    return dq, dk, dv


_CAUSAL_BLOCK = 128


def causal_attention_fw(q, k, v):
    """Causal attention computed in query blocks over keys <= query only,
    skipping the strictly-upper half of the score matrix entirely."""
    b, h, length, dh = q.shape
    scale = 1.0 / np.sqrt(dh)
    ctx = np.empty_like(q)
    blocks = []
    for i0 in range(0, length, _CAUSAL_BLOCK):
        i1 = min(i0 + _CAUSAL_BLOCK, length)
        scores = np.matmul(q[:, :, i0:i1], k[:, :, :i1].transpose(0, 1, 3, 2))
        scores *= scale
        rows = np.arange(i0, i1)[:, None]
        cols = np.arange(i1)[None, :]
        scores[:, :, cols > rows] = -1e9 if scores.dtype == np.float32 else -1e18
        p = softmax_lastaxis(scores)
        np.matmul(p, v[:, :, :i1], out=ctx[:, :, i0:i1])
        blocks.append(p)
    return ctx, (q, k, v, blocks, scale)


def causal_attention_bw(g, cache):
    q, k, v, blocks, scale = cache
    dq = np.empty_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    length = q.shape[2]
    for idx, i0 in enumerate(range(0, length, _CAUSAL_BLOCK)):
        i1 = min(i0 + _CAUSAL_BLOCK, length)
        p = blocks[idx]
        gs = g[:, :, i0:i1]
        dp = np.matmul(gs, v[:, :, :i1].transpose(0, 1, 3, 2))
        dv[:, :, :i1] += np.matmul(p.transpose(0, 1, 3, 2), gs)
        dz = softmax_bw(dp, p)
        dz *= scale
        np.matmul(dz, k[:, :, :i1], out=dq[:, :, i0:i1])
        dk[:, :, :i1] += np.matmul(dz.transpose(0, 1, 3, 2), q[:, :, i0:i1])
    return dq, dk, dv


def embedding_bw(d_table, ids, g):
    """Scatter-add gradient into an embedding table."""
    np.add.at(d_table, ids.ravel(), g.reshape(-1, g.shape[-1]))


def timestep_embedding(tau, dim, dtype=np.float32, scale=1000.0):
    """Sinusoidal embedding of scalar flow times tau in [0, 1]."""
    tau = np.asarray(tau, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = scale * tau[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if emb.shape[1] < dim:
        emb = np.pad(emb, ((0, 0), (0, dim - emb.shape[1])))
    return emb.astype(dtype)
