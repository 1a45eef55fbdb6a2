"""Autoregressive multi-stream decoding: loss, sampling, fill-in-the-middle.

Training shifts the delayed grid right by one with a start column and
minimizes token cross-entropy over non-PAD cells. Decoding walks the
delayed grid one column at a time through the KV cache, forcing PAD cells
and sampling everything else with temperature / top-k / top-p after
classifier-free guidance combines a conditional and an unconditional
stream.

Fill-in-the-middle reorders the frames as [<a> A <c> C <b> B <eos>] so a
causal model can be prompted with [<a> A <c> C <b>] and asked to continue
with the missing middle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backbone as bb
from . import conditioning as cond_mod
from . import delay
from .rng import SeededRng
from .world import ControlSet, WorldSpec, null_caption


class ArError(ValueError):
    pass


@dataclass
class ArSamplerConfig:
    temperature: float = 1.0
    top_k: int | None = None
    top_p: float | None = None
    cfg_coef: float = 3.0
    max_frames: int = 500

    def __post_init__(self):
        if self.top_k is not None and self.top_p is not None:
            raise ArError("set at most one of top_k / top_p")
        if self.temperature <= 0:
            raise ArError("temperature must be positive")
        if self.cfg_coef < 0:
            raise ArError("cfg_coef must be non-negative")


@dataclass
class ArModel:
    """Trained decoder plus everything needed to condition and decode."""

    cfg: bb.BackboneConfig
    params: dict
    world: WorldSpec
    streams: tuple
    stream_dim: int
    fim: bool = False


# -- cross entropy ---------------------------------------------------------------


def ce_loss(logits, target, pad_id: int, mode: str = "standard") -> float:
    """Token cross entropy over non-PAD cells.

    `logits` is (n_books, n_classes, length) or batched with a leading axis;
    `target` matches without the class axis. Standard mode averages
    -log p(target) over non-PAD cells; vocab_scaled mode divides that
    average by the class count (a normalizer that rescales the loss without
    moving its argmin, exposed for exactness checks)."""
    logits = np.asarray(logits)
    lv = np.moveaxis(logits, -2, -1)  # (..., length, n_classes)
    loss, _ = _ce(lv, np.asarray(target), pad_id, want_grad=False)
    if mode == "vocab_scaled":
        return loss / logits.shape[-2]
    if mode != "standard":
        raise ArError(f"unknown ce mode {mode!r}")
    return loss


def _ce(logits_lv, target, pad_id, want_grad=True):
    """Internal CE on class-last logits; returns (loss, grad or None)."""
    mask = target != pad_id
    n = int(mask.sum())
    if n == 0:
        raise ArError("no non-PAD cells to score")
    m = logits_lv.max(axis=-1, keepdims=True)
    z = logits_lv - m
    ez = np.exp(z)
    se = ez.sum(axis=-1, keepdims=True)
    idx = np.where(mask, target, 0)[..., None]   # PAD ids may exceed the class axis
    picked = np.take_along_axis(z, idx, axis=-1)[..., 0] - np.log(se[..., 0])
    loss = float(-(picked * mask).sum() / n)
    if not want_grad:
        return loss, None
    grad = ez
    grad /= se
    np.put_along_axis(grad, idx, np.take_along_axis(grad, idx, axis=-1) - 1.0, axis=-1)
    grad *= (mask[..., None] / n).astype(grad.dtype)
    return loss, grad


# -- training arrays ---------------------------------------------------------------


def start_column(world: WorldSpec, n_books: int) -> np.ndarray:
    return np.full((n_books, 1), world.codebook_size + delay.START_OFFSET, dtype=np.int64)


def build_sequences(world: WorldSpec, tokens: np.ndarray, controls: ControlSet,
                    fim_span: tuple[int, int] | None = None):
    """Delayed (input, target, cond_ids) arrays for one sample.

    Inputs are the targets shifted right under a start column. With a
    fim_span the frames are reordered to [<a> A <c> C <b> B <eos>] first and
    the condition ids follow the same reordering (marker columns borrow the
    frame that opens their segment)."""
    s_ids = cond_mod.stack_control_ids(controls)
    if fim_span is not None:
        s, e = fim_span
        grid = fim_prepare(tokens, s, e, world.codebook_size)
        eos = np.full((grid.shape[0], 1), world.codebook_size + delay.EOS_OFFSET, grid.dtype)
        grid = np.concatenate([grid, eos], axis=1)
        s_ids = s_ids[:, fim_cond_frames(tokens.shape[1], s, e)]
    else:
        grid = tokens
    delayed = delay._shift(grid, world.codebook_size)
    inputs = np.concatenate([start_column(world, grid.shape[0]), delayed[:, :-1]], axis=1)
    idx = np.clip(np.arange(delayed.shape[1]), 0, s_ids.shape[1] - 1)
    return inputs, delayed, s_ids[:, idx]


# -- sampling ---------------------------------------------------------------------


def filter_logits(logits: np.ndarray, top_k=None, top_p=None) -> np.ndarray:
    """Mask logits outside the top-k set / smallest top-p prefix to -1e9.

    top_p keeps the shortest descending-probability prefix whose cumulative
    mass reaches p (the crossing id included), so top_p=1 and top_k=vocab
    are identity filters."""
    out = logits.copy()
    if top_k is not None and top_k < logits.shape[-1]:
        kth = np.partition(logits, -top_k, axis=-1)[..., -top_k : -top_k + 1]
        out[logits < kth] = -1e9
    if top_p is not None and top_p < 1.0:
        m = logits.max(axis=-1, keepdims=True)
        probs = np.exp(logits - m)
        probs /= probs.sum(axis=-1, keepdims=True)
        order = np.argsort(-probs, axis=-1, kind="stable")
        sorted_p = np.take_along_axis(probs, order, axis=-1)
        csum = np.cumsum(sorted_p, axis=-1)
        cut = (csum - sorted_p) < top_p        # keep while mass before me < p
        keep = np.zeros_like(cut)
        np.put_along_axis(keep, order, cut, axis=-1)
        out[~keep] = -1e9
    return out


def guided_logits(cond, uncond, coef: float) -> np.ndarray:
    """uncond + coef * (cond - uncond); exact passthrough at coef 0 and 1."""
    if coef == 1.0:
        return cond
    if coef == 0.0:
        return uncond
    return uncond + coef * (cond - uncond)


def categorical_draw(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw along the last axis; u broadcasts over the rest."""
    cdf = np.cumsum(probs, axis=-1)
    idx = (cdf < u[..., None]).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def _conditional_ids(model: ArModel, controls, n_frames: int, batch: int):
    """(B, S, L) condition ids plus the drop mask; None controls drop all."""
    n_streams = len(model.streams)
    if controls is None:
        ids = np.zeros((batch, n_streams, n_frames), dtype=np.int64)
        drop = np.ones((batch, n_streams), dtype=bool)
        return ids, drop
    ids = np.stack([
        cond_mod.stack_control_ids(
            cond_mod.resample_controls(c, model.world.frame_rate, n_frames))
        for c in controls
    ])
    return ids, np.zeros((batch, n_streams), dtype=bool)


def sample(model: ArModel, captions, controls, sampler: ArSamplerConfig,
           rng: SeededRng, n_frames: int | None = None) -> np.ndarray:
    """Generate (B, n_books, n_frames) token grids.

    Decodes the delayed grid column by column with per-stream KV caches,
    then reverts the delay. Batched over captions; `controls` is a matching
    list of ControlSet or None for unconditional generation."""
    world = model.world
    if n_frames is None:
        n_frames = sampler.max_frames
    captions = np.atleast_2d(np.asarray(captions, dtype=np.int64))
    batch = captions.shape[0]
    n_books = model.cfg.n_books
    total = n_frames + n_books - 1
    template = np.where(
        delay.pad_mask(n_books, n_frames)[None].repeat(batch, 0),
        world.codebook_size + delay.PAD_OFFSET,
        -1,
    )
    cond_ids, drop = _conditional_ids(model, controls, n_frames, batch)
    out, _ = _decode(model, captions, cond_ids, drop, template, sampler, rng)
    return np.stack([delay.revert_delay(g, world.codebook_size) for g in out])


def _decode(model: ArModel, captions, cond_ids, drop, template, sampler,
            rng: SeededRng, eos_stop_row: int | None = None):
    """Shared decode loop over a (B, n_books, total) template (-1 = sample).

    Runs one or two cached streams depending on the guidance coefficient.
    With eos_stop_row set (single-sample fill-in-the-middle), that row may
    sample EOS; doing so pads the rest of the row and fixes the stop column.
    Returns (grids, stop_col)."""
    world, cfg = model.world, model.cfg
    batch, n_books, total = template.shape
    vocab = cfg.vocab
    coef = sampler.cfg_coef
    dual = coef not in (0.0, 1.0)
    want_cond = coef != 0.0

    null_cap = np.repeat(null_caption(world)[None], batch, axis=0)
    cond_grid, _ = cond_mod.embed_conditions(model.params, model.streams, cond_ids, drop)
    cond_grid = cond_mod.ar_shift_grid(cond_grid, total)
    null_grid, _ = cond_mod.embed_conditions(
        model.params, model.streams, np.zeros_like(cond_ids),
        np.ones_like(drop))
    null_grid = cond_mod.ar_shift_grid(null_grid, total)

    if dual:
        caps = np.concatenate([captions, null_cap])
        grids = np.concatenate([cond_grid, null_grid])
    elif want_cond:
        caps, grids = captions, cond_grid
    else:
        caps, grids = null_cap, null_grid
    n_streams = caps.shape[0] // batch
    cache = bb.KvCache(model.params, cfg, caps, batch * n_streams)

    # reserved ids are never sampled; EOS unlocks only on the stop row
    allowed = np.full((n_books, vocab), -1e9, dtype=np.float32)
    allowed[:, : world.codebook_size] = 0.0
    eos_id = world.codebook_size + delay.EOS_OFFSET
    if eos_stop_row is not None:
        allowed[eos_stop_row, eos_id] = 0.0

    sub = rng.spawn(batch)
    draws = np.stack([s.uniform((total, n_books)) for s in sub])
    greedy = sampler.temperature < 1e-4

    out = template.copy()
    prev = np.repeat(start_column(world, n_books)[None], batch, 0)
    stop_col = None
    for p in range(total):
        step_tok = np.concatenate([prev] * n_streams) if n_streams > 1 else prev
        logits = bb.forward_step(model.params, cfg, cache, step_tok, grids[:, p : p + 1])
        logits = logits[:, :, 0, :]
        if dual:
            logits = guided_logits(logits[:batch], logits[batch:], coef)
        need = out[:, :, p] == -1
        if need.any():
            flt = logits + allowed
            if not greedy:
                flt = filter_logits(flt / sampler.temperature,
                                    top_k=sampler.top_k, top_p=sampler.top_p)
                m = flt.max(axis=-1, keepdims=True)
                probs = np.exp(flt - m)
                probs /= probs.sum(axis=-1, keepdims=True)
                picked = categorical_draw(probs, draws[:, p, :])
            else:
                picked = flt.argmax(axis=-1)
            out[:, :, p] = np.where(need, picked, out[:, :, p])
            if eos_stop_row is not None and stop_col is None:
                if out[0, eos_stop_row, p] == eos_id:
                    stop_col = p
                    later = np.arange(total) > p
                    row = out[0, eos_stop_row]
                    out[0, eos_stop_row] = np.where(
                        later & (template[0, eos_stop_row] == -1),
                        world.codebook_size + delay.PAD_OFFSET, row)
        prev = out[:, :, p : p + 1]
    return out, stop_col


# -- fill in the middle --------------------------------------------------------------


def fim_frame_permutation(length: int, s: int, e: int) -> np.ndarray:
    """Frame order [A C B] used by the reorganized sequence (markers aside)."""
    return np.concatenate([np.arange(0, s), np.arange(e, length), np.arange(s, e)])


def fim_cond_frames(length: int, s: int, e: int) -> np.ndarray:
    """Source frame index per column of [<a> A <c> C <b> B <eos>]; marker
    columns borrow the frame that opens their segment."""
    return np.concatenate([
        [0], np.arange(0, s),
        [e], np.arange(e, length),
        [s], np.arange(s, e),
        [length - 1],
    ]).astype(np.int64)


def fim_prepare(tokens: np.ndarray, s: int, e: int, codebook_size: int) -> np.ndarray:
    """Reorganize (K, L) into [<a> A <c> C <b> B], markers replicated down
    all streams; output has L + 3 columns."""
    tokens = np.asarray(tokens)
    n_books, length = tokens.shape
    if not (0 < s < e < length):
        raise ArError(f"invalid span [{s}, {e}) for length {length}")
    col = lambda off: np.full((n_books, 1), codebook_size + off, dtype=tokens.dtype)
    return np.concatenate(
        [col(delay.SEG_A_OFFSET), tokens[:, :s],
         col(delay.SEG_C_OFFSET), tokens[:, e:],
         col(delay.SEG_B_OFFSET), tokens[:, s:e]], axis=1)


def fim_restore(prepared: np.ndarray, s: int, e: int, length: int) -> np.ndarray:
    """Invert fim_prepare (drops the three marker columns)."""
    a = prepared[:, 1 : 1 + s]
    c = prepared[:, 2 + s : 2 + s + (length - e)]
    b = prepared[:, 3 + s + (length - e) : 3 + length]
    return np.concatenate([a, b, c], axis=1)


def draw_fim_span(world: WorldSpec, length: int, rng: SeededRng,
                  span_seconds: float = 5.0, margin_seconds: float = 1.0):
    """Masked span of fixed width whose start is uniform with margins."""
    width = min(world.n_frames(span_seconds), length - 2)
    margin = world.n_frames(margin_seconds)
    lo, hi = margin, length - margin - width
    if hi < lo:
        lo, hi = 1, max(length - width - 1, 1)
    s = int(rng.integers(lo, hi + 1))
    return s, s + width


def fim_inpaint(model: ArModel, sample_tokens: np.ndarray, caption, controls: ControlSet,
                s: int, e: int, sampler: ArSamplerConfig, rng: SeededRng) -> np.ndarray:
    """Regenerate frames [s, e) of a token grid; context frames are copied
    from the source bitwise. Generation stops at EOS or after e - s frames."""
    world = model.world
    n_books, length = sample_tokens.shape
    if not (0 < s < e < length):
        raise ArError(f"invalid span [{s}, {e}) for length {length}")
    prepared = fim_prepare(sample_tokens, s, e, world.codebook_size)
    prompt_len = s + (length - e) + 3   # [<a> A <c> C <b>]
    budget = e - s
    total_frames = prompt_len + budget + 1          # room for content + eos
    total = total_frames + n_books - 1

    template = np.full((1, n_books, total), -1, dtype=np.int64)
    pad = world.codebook_size + delay.PAD_OFFSET
    for i in range(n_books):
        cells = np.full(total_frames, -1, dtype=np.int64)
        cells[:prompt_len] = prepared[i, :prompt_len]
        template[0, i, i : i + total_frames] = cells
        template[0, i, :i] = pad
        template[0, i, i + total_frames :] = pad

    cond_frames = fim_cond_frames(length, s, e)
    s_ids = cond_mod.stack_control_ids(
        cond_mod.resample_controls(controls, world.frame_rate, length))
    idx = np.clip(np.arange(total), 0, len(cond_frames) - 1)
    cond_ids = s_ids[:, cond_frames[idx]][None]
    drop = np.zeros((1, len(model.streams)), dtype=bool)

    out, stop = _decode(model, np.atleast_2d(caption), cond_ids, drop, template,
                        sampler, rng, eos_stop_row=0)
    gen_end = prompt_len + budget if stop is None else min(stop, prompt_len + budget)
    reverted = delay._unshift(out[0], world.codebook_size)[:, :gen_end]
    middle = reverted[:, prompt_len:]
    if middle.size and middle.max() >= world.codebook_size:
        bad = np.argwhere(middle >= world.codebook_size)[0]
        raise ArError(
            f"model emitted special id {middle[tuple(bad)]} at stream {bad[0]}, "
            f"generated frame {bad[1]}")
    return np.concatenate(
        [sample_tokens[:, :s], middle, sample_tokens[:, e:]], axis=1)
