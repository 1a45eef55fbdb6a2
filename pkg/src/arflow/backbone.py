"""Shared tiny transformer with hand-written reverse-mode gradients.

Two operating modes share one parameter topology apart from the input and
output adapters:

    causal         lower-triangular self-attention, token-embedding inputs,
                   one logit head per codebook stream, KV cache for
                   incremental decoding
    bidirectional  full self-attention, linear projection of continuous
                   per-frame channels, a regression head, sinusoidal flow-time
                   embedding, and U-Net-style skip connections pairing the
                   second half of the blocks with the first

Blocks are pre-norm: x + Attn(LN(x)), x + CrossAttn(LN(x), caption memory),
x + FFN(LN(x)). The caption enters every block through cross-attention over
its per-token embeddings. For an even block count 2N, block j >= N receives
Linear(Concat(x, skip)) where the skip source walks backward through the
earlier activations, the deepest block pairing with the embedded input.

Gradients are exact for this fixed graph; the test suite checks every
parameter tensor against central finite differences in float64.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .rng import SeededRng
from .tensorio import save_tensor, load_tensor


class BackboneError(ValueError):
    pass


@dataclass
class BackboneConfig:
    mode: str                      # "causal" | "bidirectional"
    n_blocks: int = 4              # even: 2N blocks, skips pair across the middle
    model_dim: int = 128
    n_heads: int = 4
    ff_dim: int = 512
    max_len: int = 512
    n_books: int = 0               # causal: token streams
    vocab: int = 0                 # causal: ids per stream (incl. reserved)
    input_dim: int = 0             # bidirectional: continuous channels
    cond_dim: int = 0              # extra condition channels concatenated to the input
    caption_vocab: int = 64

    def __post_init__(self):
        if self.mode not in ("causal", "bidirectional"):
            raise BackboneError(f"unknown mode {self.mode!r}")
        if self.n_blocks % 2:
            raise BackboneError("n_blocks must be even (skip pairing)")
        if self.model_dim % self.n_heads:
            raise BackboneError("model_dim must be divisible by n_heads")
        if self.mode == "causal" and (self.n_books < 1 or self.vocab < 2):
            raise BackboneError("causal mode needs n_books and vocab")
        if self.mode == "bidirectional" and self.input_dim < 1:
            raise BackboneError("bidirectional mode needs input_dim")

    @property
    def repr_dim(self) -> int:
        return self.model_dim if self.mode == "causal" else self.input_dim

    def skip_blocks(self) -> range:
        if self.mode != "bidirectional":
            return range(0)
        return range(self.n_blocks // 2, self.n_blocks)


def init_params(cfg: BackboneConfig, rng: SeededRng) -> dict[str, np.ndarray]:
    """Seeded parameter set; topology is a pure function of the config.

    Output heads start at zero so an untrained model predicts the uniform
    distribution (causal) or the zero field (bidirectional)."""
    d = cfg.model_dim
    p: dict[str, np.ndarray] = {}

    def norm(shape, std):
        return (rng.gauss(shape) * std).astype(np.float32)

    if cfg.mode == "causal":
        for k in range(cfg.n_books):
            p[f"tok_emb.{k}"] = norm((cfg.vocab, d), 0.02)
    p["pos_emb"] = norm((cfg.max_len, d), 0.02)
    p["cap_emb"] = norm((cfg.caption_vocab, d), 0.02)
    fan_in = cfg.repr_dim + cfg.cond_dim
    p["in_proj.w"] = norm((fan_in, d), 1.0 / np.sqrt(fan_in))
    p["in_proj.b"] = np.zeros(d, np.float32)
    for j in range(cfg.n_blocks):
        pre = f"blk{j}"
        if j in cfg.skip_blocks():
            p[f"{pre}.skip.w"] = norm((2 * d, d), 1.0 / np.sqrt(2 * d))
            p[f"{pre}.skip.b"] = np.zeros(d, np.float32)
        for ln in ("ln1", "ln2", "ln3"):
            p[f"{pre}.{ln}.g"] = np.ones(d, np.float32)
            p[f"{pre}.{ln}.b"] = np.zeros(d, np.float32)
        for att in ("attn", "xattn"):
            for w in ("wq", "wk", "wv", "wo"):
                p[f"{pre}.{att}.{w}"] = norm((d, d), 1.0 / np.sqrt(d))
            for b in ("bq", "bv", "bo"):
                p[f"{pre}.{att}.{b}"] = np.zeros(d, np.float32)
        p[f"{pre}.ff.w1"] = norm((d, cfg.ff_dim), 1.0 / np.sqrt(d))
        p[f"{pre}.ff.b1"] = np.zeros(cfg.ff_dim, np.float32)
        p[f"{pre}.ff.w2"] = norm((cfg.ff_dim, d), 1.0 / np.sqrt(cfg.ff_dim))
        p[f"{pre}.ff.b2"] = np.zeros(d, np.float32)
    p["ln_f.g"] = np.ones(d, np.float32)
    p["ln_f.b"] = np.zeros(d, np.float32)
    if cfg.mode == "causal":
        for k in range(cfg.n_books):
            p[f"head.w.{k}"] = np.zeros((d, cfg.vocab), np.float32)
            p[f"head.b.{k}"] = np.zeros(cfg.vocab, np.float32)
    else:
        p["out.w"] = np.zeros((d, cfg.input_dim), np.float32)
        p["out.b"] = np.zeros(cfg.input_dim, np.float32)
    return p


def param_count(params: dict[str, np.ndarray]) -> int:
    return int(sum(v.size for v in params.values()))


# -- full forward / backward ---------------------------------------------------


def _embed_input(params, cfg, tokens, latent, cond):
    if cfg.mode == "causal":
        if tokens is None:
            raise BackboneError("causal mode takes token ids")
        rep = params["tok_emb.0"][tokens[:, 0]]
        for k in range(1, cfg.n_books):
            rep = rep + params[f"tok_emb.{k}"][tokens[:, k]]
    else:
        if latent is None:
            raise BackboneError("bidirectional mode takes continuous input")
        rep = latent
    if cfg.cond_dim:
        if cond is None:
            raise BackboneError("model was built with condition channels")
        xin = np.concatenate([rep, cond.astype(rep.dtype)], axis=-1)
    else:
        xin = rep
    return xin


def _block_fw(params, cfg, pre, h, mem_k, mem_v):
    causal = cfg.mode == "causal"
    cache = {}
    a, cache["ln1"] = nn.layer_norm_fw(h, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
    q, cq = nn.linear_fw(a, params[f"{pre}.attn.wq"], params[f"{pre}.attn.bq"])
    k, ck = nn.proj_fw(a, params[f"{pre}.attn.wk"])
    v, cv = nn.linear_fw(a, params[f"{pre}.attn.wv"], params[f"{pre}.attn.bv"])
    attend = nn.causal_attention_fw if causal else nn.attention_fw
    ctx, catt = attend(
        nn.split_heads(q, cfg.n_heads), nn.split_heads(k, cfg.n_heads),
        nn.split_heads(v, cfg.n_heads))
    ctxm = nn.merge_heads(ctx)
    o, co = nn.linear_fw(ctxm, params[f"{pre}.attn.wo"], params[f"{pre}.attn.bo"])
    h = h + o
    cache["attn"] = (cq, ck, cv, catt, co)

    c, cache["ln2"] = nn.layer_norm_fw(h, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])
    xq, cxq = nn.linear_fw(c, params[f"{pre}.xattn.wq"], params[f"{pre}.xattn.bq"])
    xctx, cxatt = nn.attention_fw(nn.split_heads(xq, cfg.n_heads), mem_k, mem_v, None)
    xctxm = nn.merge_heads(xctx)
    xo, cxo = nn.linear_fw(xctxm, params[f"{pre}.xattn.wo"], params[f"{pre}.xattn.bo"])
    h = h + xo
    cache["xattn"] = (cxq, cxatt, cxo)

    f, cache["ln3"] = nn.layer_norm_fw(h, params[f"{pre}.ln3.g"], params[f"{pre}.ln3.b"])
    u, cu = nn.linear_fw(f, params[f"{pre}.ff.w1"], params[f"{pre}.ff.b1"])
    ug, cg = nn.silu_fw(u)
    y, cy = nn.linear_fw(ug, params[f"{pre}.ff.w2"], params[f"{pre}.ff.b2"])
    h = h + y
    cache["ff"] = (cu, cg, cy)
    return h, cache


def forward(params, cfg: BackboneConfig, *, tokens=None, latent=None, cond=None,
            caption=None, tau=None, keep_tape=False):
    """Full (uncached) forward pass.

    tokens  (B, n_books, L) int     causal input
    latent  (B, L, input_dim)       bidirectional input
    cond    (B, L, cond_dim)        condition channels, if configured
    caption (B, Tc) int             caption token ids (cross-attention memory)
    tau     (B,)                    flow time, bidirectional only

    Returns (out, tape): logits (B, n_books, L, vocab) or field values
    (B, L, input_dim). `tape` is None unless keep_tape."""
    if caption is None:
        raise BackboneError("caption ids are required (use the null caption to drop)")
    if cfg.mode == "bidirectional" and tau is None:
        raise BackboneError("bidirectional mode requires tau")
    xin = _embed_input(params, cfg, tokens, latent, cond)
    length = xin.shape[1]
    if length > cfg.max_len:
        raise BackboneError(f"sequence length {length} exceeds max_len {cfg.max_len}")
    h, _ = nn.linear_fw(xin, params["in_proj.w"], params["in_proj.b"])
    h = h + params["pos_emb"][:length]
    if cfg.mode == "bidirectional":
        h = h + nn.timestep_embedding(tau, cfg.model_dim, dtype=h.dtype)[:, None, :]

    mem = params["cap_emb"][caption]

    mem_kv, residuals, blocks, skip_caches = [], [h], [], {}
    for j in range(cfg.n_blocks):
        pre = f"blk{j}"
        mk, cmk = nn.proj_fw(mem, params[f"{pre}.xattn.wk"])
        mv, cmv = nn.linear_fw(mem, params[f"{pre}.xattn.wv"], params[f"{pre}.xattn.bv"])
        mem_kv.append((cmk, cmv))
        if j in cfg.skip_blocks():
            src = residuals[cfg.n_blocks - 1 - j]
            cat = np.concatenate([h, src], axis=-1)
            h, csk = nn.linear_fw(cat, params[f"{pre}.skip.w"], params[f"{pre}.skip.b"])
            skip_caches[j] = csk
        h, cache = _block_fw(params, cfg, pre, h,
                             nn.split_heads(mk, cfg.n_heads),
                             nn.split_heads(mv, cfg.n_heads))
        blocks.append(cache)
        residuals.append(h)

    hf, ln_f_cache = nn.layer_norm_fw(h, params["ln_f.g"], params["ln_f.b"])
    if cfg.mode == "causal":
        out = np.stack(
            [hf @ params[f"head.w.{k}"] + params[f"head.b.{k}"] for k in range(cfg.n_books)],
            axis=1)
    else:
        out = hf @ params["out.w"] + params["out.b"]

    tape = None
    if keep_tape:
        tape = dict(tokens=tokens, xin=xin, mem=mem, caption=caption,
                    mem_kv=mem_kv, blocks=blocks, skip_caches=skip_caches,
                    residuals=residuals, ln_f=ln_f_cache, hf=hf, length=length)
    return out, tape


def _block_bw(params, cfg, pre, g, cache, grads):
    cu, cgel, cy = cache["ff"]
    dy = g
    dug, dw2, db2 = nn.linear_bw(dy, cy, params[f"{pre}.ff.w2"])
    grads[f"{pre}.ff.w2"] += dw2
    grads[f"{pre}.ff.b2"] += db2
    du = nn.silu_bw(dug, cgel)
    df, dw1, db1 = nn.linear_bw(du, cu, params[f"{pre}.ff.w1"])
    grads[f"{pre}.ff.w1"] += dw1
    grads[f"{pre}.ff.b1"] += db1
    dh, dg_, db_ = nn.layer_norm_bw(df, cache["ln3"], params[f"{pre}.ln3.g"])
    grads[f"{pre}.ln3.g"] += dg_
    grads[f"{pre}.ln3.b"] += db_
    g = g + dh

    cxq, cxatt, cxo = cache["xattn"]
    dxctxm, dwo, dbo = nn.linear_bw(g, cxo, params[f"{pre}.xattn.wo"])
    grads[f"{pre}.xattn.wo"] += dwo
    grads[f"{pre}.xattn.bo"] += dbo
    dxq_h, dmk_h, dmv_h = nn.attention_bw(nn.split_heads(dxctxm, cfg.n_heads), cxatt)
    dxq = nn.merge_heads(dxq_h)
    dc, dwq, dbq = nn.linear_bw(dxq, cxq, params[f"{pre}.xattn.wq"])
    grads[f"{pre}.xattn.wq"] += dwq
    grads[f"{pre}.xattn.bq"] += dbq
    dh, dg_, db_ = nn.layer_norm_bw(dc, cache["ln2"], params[f"{pre}.ln2.g"])
    grads[f"{pre}.ln2.g"] += dg_
    grads[f"{pre}.ln2.b"] += db_
    g = g + dh

    cq, ck, cv, catt, co = cache["attn"]
    dctxm, dwo, dbo = nn.linear_bw(g, co, params[f"{pre}.attn.wo"])
    grads[f"{pre}.attn.wo"] += dwo
    grads[f"{pre}.attn.bo"] += dbo
    attend_bw = nn.causal_attention_bw if cfg.mode == "causal" else nn.attention_bw
    dqh, dkh, dvh = attend_bw(nn.split_heads(dctxm, cfg.n_heads), catt)
    da, dwq, dbq = nn.linear_bw(nn.merge_heads(dqh), cq, params[f"{pre}.attn.wq"])
    grads[f"{pre}.attn.wq"] += dwq
    grads[f"{pre}.attn.bq"] += dbq
    dak, dwk = nn.proj_bw(nn.merge_heads(dkh), ck, params[f"{pre}.attn.wk"])
    grads[f"{pre}.attn.wk"] += dwk
    da += dak
    dav, dwv, dbv = nn.linear_bw(nn.merge_heads(dvh), cv, params[f"{pre}.attn.wv"])
    grads[f"{pre}.attn.wv"] += dwv
    grads[f"{pre}.attn.bv"] += dbv
    da += dav
    dh, dg_, db_ = nn.layer_norm_bw(da, cache["ln1"], params[f"{pre}.ln1.g"])
    grads[f"{pre}.ln1.g"] += dg_
    grads[f"{pre}.ln1.b"] += db_
    g = g + dh
    return g, (nn.merge_heads(dmk_h), nn.merge_heads(dmv_h))


def backward(params, cfg: BackboneConfig, tape, d_out):
    """Exact gradients of the fixed graph. Returns (grads, d_cond); d_cond is
    None unless condition channels are configured."""
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    hf = tape["hf"]
    if cfg.mode == "causal":
        flat_hf = hf.reshape(-1, cfg.model_dim)
        g = np.zeros_like(hf)
        for k in range(cfg.n_books):
            gk = d_out[:, k]
            grads[f"head.w.{k}"] += flat_hf.T @ gk.reshape(-1, cfg.vocab)
            grads[f"head.b.{k}"] += gk.reshape(-1, cfg.vocab).sum(axis=0)
            g += gk @ params[f"head.w.{k}"].T
    else:
        grads["out.w"] += hf.reshape(-1, cfg.model_dim).T @ d_out.reshape(-1, cfg.input_dim)
        grads["out.b"] += d_out.reshape(-1, cfg.input_dim).sum(axis=0)
        g = d_out @ params["out.w"].T
    g, dg_, db_ = nn.layer_norm_bw(g, tape["ln_f"], params["ln_f.g"])
    grads["ln_f.g"] += dg_
    grads["ln_f.b"] += db_

    d_mem = np.zeros_like(tape["mem"])
    pending: dict[int, np.ndarray] = {}
    for j in reversed(range(cfg.n_blocks)):
        pre = f"blk{j}"
        g, (dmk, dmv) = _block_bw(params, cfg, pre, g, tape["blocks"][j], grads)
        cmk, cmv = tape["mem_kv"][j]
        dmem_k, dwk = nn.proj_bw(dmk, cmk, params[f"{pre}.xattn.wk"])
        dmem_v, dwv, dbv = nn.linear_bw(dmv, cmv, params[f"{pre}.xattn.wv"])
        grads[f"{pre}.xattn.wk"] += dwk
        grads[f"{pre}.xattn.wv"] += dwv
        grads[f"{pre}.xattn.bv"] += dbv
        d_mem += dmem_k + dmem_v
        if j in cfg.skip_blocks():
            dcat, dw, db = nn.linear_bw(g, tape["skip_caches"][j], params[f"{pre}.skip.w"])
            grads[f"{pre}.skip.w"] += dw
            grads[f"{pre}.skip.b"] += db
            g = dcat[..., : cfg.model_dim]
            src_pos = cfg.n_blocks - 1 - j
            d_src = dcat[..., cfg.model_dim :]
            pending[src_pos] = pending.get(src_pos, 0) + d_src
        if j in pending:
            g = g + pending.pop(j)
    if 0 in pending:
        g = g + pending.pop(0)

    nn.embedding_bw(grads["cap_emb"], tape["caption"], d_mem)
    grads["pos_emb"][: tape["length"]] += g.sum(axis=0)
    dxin = g @ params["in_proj.w"].T
    xin = tape["xin"]
    grads["in_proj.w"] += xin.reshape(-1, xin.shape[-1]).T @ g.reshape(-1, cfg.model_dim)
    grads["in_proj.b"] += g.reshape(-1, cfg.model_dim).sum(axis=0)
    d_cond = None
    if cfg.cond_dim:
        d_cond = dxin[..., cfg.repr_dim :]
    if cfg.mode == "causal":
        d_rep = dxin[..., : cfg.repr_dim]
        for k in range(cfg.n_books):
            nn.embedding_bw(grads[f"tok_emb.{k}"], tape["tokens"][:, k], d_rep)
    return grads, d_cond


# -- incremental decoding (KV cache) --------------------------------------------


class KvCache:
    """Per-stream attention cache for causal decoding.

    Holds appended self-attention keys/values per layer plus the static
    cross-attention projections of the caption. Never share one cache
    between generation streams."""

    def __init__(self, params, cfg: BackboneConfig, caption, batch: int):
        if cfg.mode != "causal":
            raise BackboneError("KV cache applies to causal mode only")
        d, h = cfg.model_dim, cfg.n_heads
        dh = d // h
        self.pos = 0
        self.k = [np.zeros((batch, h, cfg.max_len, dh), np.float32) for _ in range(cfg.n_blocks)]
        self.v = [np.zeros((batch, h, cfg.max_len, dh), np.float32) for _ in range(cfg.n_blocks)]
        mem = params["cap_emb"][caption]
        self.mem_k, self.mem_v = [], []
        for j in range(cfg.n_blocks):
            pre = f"blk{j}"
            mk = mem @ params[f"{pre}.xattn.wk"]
            mv = mem @ params[f"{pre}.xattn.wv"] + params[f"{pre}.xattn.bv"]
            self.mem_k.append(nn.split_heads(mk, h))
            self.mem_v.append(nn.split_heads(mv, h))


def forward_step(params, cfg: BackboneConfig, cache: KvCache, tokens, cond=None):
    """Advance the cache by the given new positions and return their logits.

    tokens (B, n_books, Ln); cond (B, Ln, cond_dim). Computes only the new
    positions; equal to the uncached forward on the full prefix."""
    xin = _embed_input(params, cfg, tokens, None, cond)
    b, ln = xin.shape[0], xin.shape[1]
    pos = cache.pos
    if pos + ln > cfg.max_len:
        raise BackboneError(f"cache overflow at position {pos + ln}")
    h = xin @ params["in_proj.w"] + params["in_proj.b"]
    h += params["pos_emb"][pos : pos + ln]
    total = pos + ln
    bias = None
    if ln > 1:
        bias = np.zeros((ln, total), np.float32)
        cols = np.arange(total)[None, :]
        rows = np.arange(ln)[:, None]
        bias[cols > pos + rows] = -1e9
    for j in range(cfg.n_blocks):
        pre = f"blk{j}"
        a, _ = nn.layer_norm_fw(h, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
        q = nn.split_heads(a @ params[f"{pre}.attn.wq"] + params[f"{pre}.attn.bq"], cfg.n_heads)
        cache.k[j][:, :, pos:total] = nn.split_heads(a @ params[f"{pre}.attn.wk"], cfg.n_heads)
        cache.v[j][:, :, pos:total] = nn.split_heads(
            a @ params[f"{pre}.attn.wv"] + params[f"{pre}.attn.bv"], cfg.n_heads)
        ctx, _ = nn.attention_fw(q, cache.k[j][:, :, :total], cache.v[j][:, :, :total], bias)
        h = h + nn.merge_heads(ctx) @ params[f"{pre}.attn.wo"] + params[f"{pre}.attn.bo"]

        c, _ = nn.layer_norm_fw(h, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])
        xq = nn.split_heads(c @ params[f"{pre}.xattn.wq"] + params[f"{pre}.xattn.bq"], cfg.n_heads)
        xctx, _ = nn.attention_fw(xq, cache.mem_k[j], cache.mem_v[j], None)
        h = h + nn.merge_heads(xctx) @ params[f"{pre}.xattn.wo"] + params[f"{pre}.xattn.bo"]

        f, _ = nn.layer_norm_fw(h, params[f"{pre}.ln3.g"], params[f"{pre}.ln3.b"])
        u, _ = nn.silu_fw(f @ params[f"{pre}.ff.w1"] + params[f"{pre}.ff.b1"])
        h = h + u @ params[f"{pre}.ff.w2"] + params[f"{pre}.ff.b2"]
    hf, _ = nn.layer_norm_fw(h, params["ln_f.g"], params["ln_f.b"])
    out = np.stack(
        [hf @ params[f"head.w.{k}"] + params[f"head.b.{k}"] for k in range(cfg.n_books)],
        axis=1)
    cache.pos = total
    return out


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(path: str, params: dict[str, np.ndarray], meta: dict) -> None:
    """Directory of one PFT1 file per named parameter plus config.json."""
    os.makedirs(path, exist_ok=True)
    for name, value in params.items():
        save_tensor(value, os.path.join(path, name + ".pft"))
    with open(os.path.join(path, "config.json"), "w", encoding="utf-8") as fh:
        json.dump({"params": sorted(params), "meta": meta}, fh, indent=2, sort_keys=True)


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(os.path.join(path, "config.json"), "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    params = {
        name: load_tensor(os.path.join(path, name + ".pft")) for name in payload["params"]
    }
    return params, payload["meta"]
