"""Frame-aligned condition streams: resampling, learned embeddings, dropout.

Three streams condition both paradigms: chord ids, melody pitch ids (with a
silent id), and drum token ids (first-codebook indices of the temporally
blurred latent). Each stream owns a learned embedding table whose final row
is the stream's null embedding; a dropped stream uses that row at every
frame, and dropping all streams at once is the guidance unconditional state.

Alignment: flow-matching consumers pair condition frame t with latent frame
t. Autoregressive consumers receive the grid so that the condition for frame
t is concatenated to the input position holding frame t-1 (condition frame 0
rides on the start token).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import SeededRng
from .world import ControlSet, WorldSpec


class ConditioningError(ValueError):
    pass


@dataclass(frozen=True)
class CondStream:
    name: str
    vocab: int  # semantic ids 0..vocab-1; the table appends a null row at index `vocab`


@dataclass
class ConditionGrid:
    channels: np.ndarray   # (L, total_dim) concatenated stream embeddings
    dropped: np.ndarray    # per-stream null flags


def streams_for_world(world: WorldSpec) -> tuple[CondStream, ...]:
    return (
        CondStream("chord", world.chord_vocab),
        CondStream("melody", world.melody_vocab + 1),
        CondStream("drum", world.codebook_size),
    )


def total_cond_dim(streams, stream_dim: int) -> int:
    return len(streams) * stream_dim


def init_cond_params(streams, stream_dim: int, rng: SeededRng) -> dict[str, np.ndarray]:
    """Embedding tables (vocab + 1 rows, the last one the null embedding)."""
    scale = 1.0 / np.sqrt(stream_dim)
    return {
        f"cond.{s.name}": (rng.gauss((s.vocab + 1, stream_dim)) * scale).astype(np.float32)
        for s in streams
    }


# -- resampling ------------------------------------------------------------------


def resample_controls(c: ControlSet, frame_rate: float, n_frames: int) -> ControlSet:
    """Bring every stream to the latent frame rate.

    Chords hold the value of the nearest previous switch, melody and drums
    use nearest-neighbor index mapping, and beat events map through
    round(src_frame * target/source) so event times survive."""
    if len(c) == 0:
        raise ConditioningError("cannot resample an empty control stream")
    src = c.source_rate
    if src == frame_rate and len(c) == n_frames:
        return c
    j = np.arange(n_frames)
    hold = np.clip(np.floor(j * src / frame_rate).astype(np.int64), 0, len(c) - 1)
    nearest = np.clip(np.rint(j * src / frame_rate).astype(np.int64), 0, len(c) - 1)
    beat_flags = np.zeros(n_frames, dtype=np.int64)
    src_beats = np.flatnonzero(c.beat_flags)
    tgt = np.clip(np.rint(src_beats * frame_rate / src).astype(np.int64), 0, n_frames - 1)
    beat_flags[tgt] = 1
    return ControlSet(
        chords=c.chords[hold],
        melody=c.melody[nearest],
        drums=c.drums[nearest],
        beat_flags=beat_flags,
        source_rate=frame_rate,
    )


# -- dropout and embedding ---------------------------------------------------------


def drop_conditions(rng: SeededRng, n_streams: int, p_drop: float, p_all: float,
                    batch: int = 1) -> np.ndarray:
    """(batch, n_streams) boolean drop mask. With probability p_all a row
    drops every stream (trains the unconditional state); otherwise streams
    drop independently with p_drop."""
    if not (0.0 <= p_drop <= 1.0 and 0.0 <= p_all <= 1.0):
        raise ConditioningError("probabilities must lie in [0, 1]")
    all_row = rng.uniform(batch) < p_all
    independent = rng.uniform((batch, n_streams)) < p_drop
    return np.where(all_row[:, None], True, independent)


def stack_control_ids(c: ControlSet) -> np.ndarray:
    """(n_streams, L) id matrix in stream order chord, melody, drum."""
    return np.stack([c.chords, c.melody, c.drums]).astype(np.int64)


def embed_conditions(params, streams, ids: np.ndarray, drop_mask: np.ndarray):
    """Batched lookup: ids (B, S, L), drop_mask (B, S) -> (grid, cache).

    Dropped rows read the stream's learned null row; the cache carries the
    effective ids for the scatter-add backward."""
    b, n_streams, length = ids.shape
    chunks, eff_ids = [], []
    for s_idx, stream in enumerate(streams):
        eff = np.where(drop_mask[:, s_idx : s_idx + 1], stream.vocab, ids[:, s_idx])
        table = params[f"cond.{stream.name}"]
        if eff.min() < 0 or eff.max() > stream.vocab:
            raise ConditioningError(f"{stream.name}: id out of range")
        chunks.append(table[eff])
        eff_ids.append(eff)
    grid = np.concatenate(chunks, axis=-1)
    return grid, eff_ids


def embed_conditions_bw(grads, streams, cache, d_grid) -> None:
    dim = d_grid.shape[-1] // len(streams)
    for s_idx, stream in enumerate(streams):
        chunk = d_grid[..., s_idx * dim : (s_idx + 1) * dim]
        np.add.at(grads[f"cond.{stream.name}"], cache[s_idx].ravel(),
                  chunk.reshape(-1, dim))


def build_condition_grid(params, streams, c: ControlSet, drop_mask=None) -> ConditionGrid:
    """Single-sample convenience wrapper returning the (L, C) grid."""
    if drop_mask is None:
        drop_mask = np.zeros(len(streams), dtype=bool)
    ids = stack_control_ids(c)[None]
    grid, _ = embed_conditions(params, streams, ids, np.asarray(drop_mask)[None])
    return ConditionGrid(channels=grid[0], dropped=np.asarray(drop_mask))


def ar_shift_grid(grid: np.ndarray, delayed_len: int) -> np.ndarray:
    """Extend a (B, L, C) frame-aligned grid to the delayed input length so
    that input position p carries the condition for frame p (tail positions
    reuse the final frame)."""
    length = grid.shape[1]
    idx = np.clip(np.arange(delayed_len), 0, length - 1)
    return grid[:, idx]
