"""Seeded synthetic world: paired (caption, controls, latent, tokens) samples
with an exact inverse oracle.

Every sample is synthesized from three frame-aligned control streams:

    chord   piecewise-constant ids, geometric segment lengths (mean 2 s)
    melody  per-frame random walk over pitch ids; a reserved null id is silent
    drums   a beat flag that fires every `beat_period` frames

A frame's latent column is the sum of one vector per active control plus
isotropic noise. The synthesis vectors are rows of seeded codebooks whose
per-stage radii decay geometrically, so residual quantization against those
same codebooks peels the controls off stage by stage: stage 1 recovers the
chord, stage 2 the melody, stage 3 the drum flag, and later stages mop up
noise. Within each stage the words are redrawn until their pairwise
separation exceeds 0.8x the stage radius, which makes the assignment exact
for in-distribution inputs (up to noise tails) and keeps the stagewise
reconstruction error near the noise floor.

Because synthesis is invertible by enumeration, `decode_controls` serves as
the exact evaluation oracle: no pretrained extractors anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import SeededRng

# Stage radii: base * decay^(stage-1). Chosen so each stage's words dwarf
# everything later stages add (see module docstring).
RADIUS_BASE = 7.8
RADIUS_DECAY = 0.285
SEPARATION_FRACTION = 0.8

# Caption vocabulary (closed, templated).
TOK_NULL = 0       # dropped-caption token for guidance
KW_CHORDS = 1
KW_BEAT = 2
TOK_NONE = 3
CHORD_TOKEN_BASE = 4
CAPTION_VOCAB = 64


class WorldError(ValueError):
    pass


@dataclass
class ControlSet:
    """Frame-aligned condition streams (all 1-d, same length)."""

    chords: np.ndarray        # chord ids
    melody: np.ndarray        # pitch ids; melody_vocab means silent
    drums: np.ndarray         # first-codebook ids of the blurred latent
    beat_flags: np.ndarray    # ground-truth beat indicator (metric reference)
    source_rate: float        # frames per second of all streams

    def __len__(self):
        return len(self.chords)


@dataclass
class WorldSample:
    caption: np.ndarray       # caption token ids, fixed template length
    controls: ControlSet
    latent: np.ndarray        # (latent_dim, L) float32
    tokens: np.ndarray        # (n_codebooks, L) int64
    duration: float


@dataclass
class NormStats:
    """Scalar latent normalization statistics."""

    mean: float
    mean_std: float
    n_segments: int
    clamped: bool = False


@dataclass
class WorldSpec:
    seed: int
    frame_rate: float = 50.0
    latent_dim: int = 8
    n_codebooks: int = 4
    codebook_size: int = 32
    chord_vocab: int = 12
    melody_vocab: int = 16
    beat_period: int = 10
    noise_std: float = 0.05
    _derived: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.chord_vocab > self.codebook_size:
            raise WorldError("chord_vocab must fit inside codebook 1")
        if self.melody_vocab + 1 > self.codebook_size:
            raise WorldError("melody_vocab plus the zero word must fit inside codebook 2")
        if self.n_codebooks < 1:
            raise WorldError("need at least one codebook")
        if self.beat_period < 1:
            raise WorldError("beat_period must be positive")
        if CHORD_TOKEN_BASE + self.chord_vocab + self.beat_period >= CAPTION_VOCAB:
            raise WorldError("caption template does not fit the closed vocabulary")

    # -- seeded construction -------------------------------------------------

    @property
    def melody_null(self) -> int:
        return self.melody_vocab

    @property
    def caption_length(self) -> int:
        return self.chord_vocab + 3

    def _derive(self):
        if self._derived:
            return self._derived
        rng = SeededRng(self.seed)
        n_books = max(3, self.n_codebooks)
        books = []
        for k in range(n_books):
            radius = RADIUS_BASE * RADIUS_DECAY**k
            with_zero = k >= 1
            books.append(_draw_codebook(rng, self.codebook_size, self.latent_dim, radius, with_zero))
        w_chord = books[0][: self.chord_vocab].copy()
        w_melody = np.zeros((self.melody_vocab + 1, self.latent_dim), dtype=np.float32)
        w_melody[: self.melody_vocab] = books[1][1 : 1 + self.melody_vocab]
        w_drum = books[2][1].copy()
        self._derived.update(
            books=books[: self.n_codebooks],
            w_chord=w_chord,
            w_melody=w_melody,
            w_drum=w_drum,
            signatures=None,
        )
        return self._derived

    @property
    def codebooks(self) -> list[np.ndarray]:
        return self._derive()["books"]

    @property
    def w_chord(self) -> np.ndarray:
        return self._derive()["w_chord"]

    @property
    def w_melody(self) -> np.ndarray:
        return self._derive()["w_melody"]

    @property
    def w_drum(self) -> np.ndarray:
        return self._derive()["w_drum"]

    def n_frames(self, seconds: float) -> int:
        return int(round(self.frame_rate * seconds))


def _draw_codebook(rng: SeededRng, size: int, dim: int, radius: float, with_zero: bool) -> np.ndarray:
    """Words on the radius-sphere, redrawn until min pairwise separation
    exceeds SEPARATION_FRACTION * radius. Books past the first reserve
    word 0 as the zero vector so an empty residual stays empty."""
    n_random = size - 1 if with_zero else size
    words = rng.gauss((n_random, dim)).astype(np.float64)
    words *= radius / np.linalg.norm(words, axis=1, keepdims=True)
    threshold = SEPARATION_FRACTION * radius
    for _ in range(10_000):
        diff = words[:, None, :] - words[None, :, :]
        dist = np.linalg.norm(diff, axis=-1)
        np.fill_diagonal(dist, np.inf)
        bad = np.unique(np.argwhere(dist < threshold).max(axis=1)) if (dist < threshold).any() else []
        if len(bad) == 0:
            break
        redraw = rng.gauss((len(bad), dim)).astype(np.float64)
        redraw *= radius / np.linalg.norm(redraw, axis=1, keepdims=True)
        words[bad] = redraw
    else:
        raise WorldError("codebook separation rejection did not converge")
    if with_zero:
        words = np.concatenate([np.zeros((1, dim)), words], axis=0)
    return words.astype(np.float32)


# -- synthesis and its exact inverse ------------------------------------------


def synthesize(world: WorldSpec, chords, melody, beat_flags, rng: SeededRng | None = None) -> np.ndarray:
    """Latent (D, L) for the given control streams; noise iff rng given."""
    chords = np.asarray(chords)
    melody = np.asarray(melody)
    beat_flags = np.asarray(beat_flags)
    if not (len(chords) == len(melody) == len(beat_flags)):
        raise WorldError("control streams differ in length")
    cols = world.w_chord[chords] + world.w_melody[melody]
    cols = cols + beat_flags[:, None].astype(np.float32) * world.w_drum[None, :]
    if rng is not None and world.noise_std > 0:
        cols = cols + world.noise_std * rng.gauss(cols.shape)
    return np.ascontiguousarray(cols.T, dtype=np.float32)


def _signatures(world: WorldSpec):
    """All (chord, melody, drum) composite vectors, ordered so that argmin
    tie-breaks resolve to the lowest chord index, then melody, then drum."""
    d = world._derive()
    if d["signatures"] is None:
        combos = []
        vecs = []
        for c in range(world.chord_vocab):
            for m in range(world.melody_vocab + 1):
                for f in (0, 1):
                    combos.append((c, m, f))
                    vecs.append(world.w_chord[c] + world.w_melody[m] + f * world.w_drum)
        d["signatures"] = (np.asarray(combos), np.asarray(vecs, dtype=np.float32))
    return d["signatures"]


def decode_controls(world: WorldSpec, latent: np.ndarray) -> ControlSet:
    """Recover per-frame (chord, melody, drum flag) by exact enumeration of
    the product control space; ties resolve to the lowest index."""
    combos, vecs = _signatures(world)
    frames = np.asarray(latent, dtype=np.float32).T            # (L, D)
    diff = frames[:, None, :] - vecs[None, :, :]
    idx = np.argmin(np.einsum("lsd,lsd->ls", diff, diff), axis=1)
    picked = combos[idx]
    drums = tokenize(world, temporal_blur(latent), n_books=1)[0]
    return ControlSet(
        chords=picked[:, 0].astype(np.int64),
        melody=picked[:, 1].astype(np.int64),
        drums=drums,
        beat_flags=picked[:, 2].astype(np.int64),
        source_rate=world.frame_rate,
    )


def tokenize(world: WorldSpec, latent: np.ndarray, n_books: int | None = None) -> np.ndarray:
    """Residual quantization of (D, L) against the seeded codebooks.

    Stream j holds the nearest-word index of the residual left by streams
    < j (euclidean distance, ties to the lowest index)."""
    latent = np.asarray(latent, dtype=np.float32)
    if latent.ndim != 2 or latent.shape[0] != world.latent_dim:
        raise WorldError(f"latent must be ({world.latent_dim}, L), got {latent.shape}")
    if n_books is None:
        n_books = world.n_codebooks
    resid = latent.T.astype(np.float32).copy()                  # (L, D)
    out = np.empty((n_books, resid.shape[0]), dtype=np.int64)
    for k in range(n_books):
        book = world.codebooks[k]
        # argmin ||r - w||^2 == argmax (r.w - ||w||^2 / 2); first index wins ties
        score = resid @ book.T - 0.5 * np.einsum("sd,sd->s", book, book)[None, :]
        idx = np.argmax(score, axis=1)
        out[k] = idx
        resid -= book[idx]
    return out


def detokenize(world: WorldSpec, tokens: np.ndarray) -> np.ndarray:
    """Sum of selected codewords per frame; rejects reserved/out-of-range ids."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise WorldError(f"token grid must be 2-d, got shape {tokens.shape}")
    n_books = tokens.shape[0]
    if n_books > world.n_codebooks:
        raise WorldError(f"grid has {n_books} streams, world has {world.n_codebooks}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= world.codebook_size):
        raise WorldError("token grid contains reserved or out-of-range ids")
    cols = np.zeros((tokens.shape[1], world.latent_dim), dtype=np.float32)
    for k in range(n_books):
        cols += world.codebooks[k][tokens[k]]
    return np.ascontiguousarray(cols.T)


def temporal_blur(latent: np.ndarray, window: int = 5) -> np.ndarray:
    """Replace each frame by the mean of its fixed 5-frame window (the last
    window may be short)."""
    latent = np.asarray(latent, dtype=np.float32)
    length = latent.shape[1]
    if length < 1:
        raise WorldError("cannot blur an empty sequence")
    out = np.empty_like(latent)
    for start in range(0, length, window):
        stop = min(start + window, length)
        out[:, start:stop] = latent[:, start:stop].mean(axis=1, keepdims=True)
    return out


# -- sample generation ---------------------------------------------------------


def gen_controls(world: WorldSpec, rng: SeededRng, n_frames: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Raw (chords, melody, beat_flags) streams for `n_frames` frames."""
    mean_frames = 2.0 * world.frame_rate
    chords = np.empty(n_frames, dtype=np.int64)
    pos = 0
    label = int(rng.integers(0, world.chord_vocab))
    while pos < n_frames:
        seg = int(rng._gen.geometric(1.0 / mean_frames))
        chords[pos : pos + seg] = label
        pos += seg
        if world.chord_vocab > 1:
            step = int(rng.integers(1, world.chord_vocab))
            label = (label + step) % world.chord_vocab
    # reflected random walk, vectorized: fold the free walk into [0, V-1]
    # with a triangle wave of period 2V-2
    vocab = world.melody_vocab
    start = int(rng.integers(0, vocab))
    steps = rng.integers(-1, 2, shape=n_frames)
    free = start + np.cumsum(steps)
    if vocab == 1:
        melody = np.zeros(n_frames, dtype=np.int64)
    else:
        period = 2 * vocab - 2
        folded = np.mod(free, period)
        melody = np.where(folded >= vocab, period - folded, folded).astype(np.int64)
    beat_flags = (np.arange(n_frames) % world.beat_period == 0).astype(np.int64)
    return chords, melody, beat_flags


def make_caption(world: WorldSpec, chords: np.ndarray) -> np.ndarray:
    """Fixed-length template: the distinct chords in order of first
    appearance, padded with TOK_NONE, then the beat period."""
    caption = np.full(world.caption_length, TOK_NONE, dtype=np.int64)
    caption[0] = KW_CHORDS
    _, first = np.unique(chords, return_index=True)
    distinct = chords[np.sort(first)]
    for slot, c in enumerate(distinct[: world.chord_vocab]):
        caption[1 + slot] = CHORD_TOKEN_BASE + int(c)
    caption[-2] = KW_BEAT
    caption[-1] = CHORD_TOKEN_BASE + world.chord_vocab + (world.beat_period - 1)
    return caption


def gen_sample(world: WorldSpec, rng: SeededRng, seconds: float) -> WorldSample:
    """One paired sample: controls, caption, noisy latent, token grid."""
    if seconds <= 0:
        raise WorldError("duration must be positive")
    n_frames = world.n_frames(seconds)
    chords, melody, beat_flags = gen_controls(world, rng, n_frames)
    latent = synthesize(world, chords, melody, beat_flags, rng=rng)
    tokens = tokenize(world, latent)
    controls = ControlSet(
        chords=chords,
        melody=melody,
        drums=tokenize(world, temporal_blur(latent), n_books=1)[0],
        beat_flags=beat_flags,
        source_rate=world.frame_rate,
    )
    return WorldSample(
        caption=make_caption(world, chords),
        controls=controls,
        latent=latent,
        tokens=tokens,
        duration=seconds,
    )


def null_caption(world: WorldSpec) -> np.ndarray:
    """The dropped-caption token sequence (guidance unconditional state)."""
    return np.full(world.caption_length, TOK_NULL, dtype=np.int64)


# -- latent normalization --------------------------------------------------------


def norm_stats_from_matrix(m: np.ndarray, clamp: float = 1e-6) -> NormStats:
    """Scalar stats of a stacked (n, L, D) latent matrix: global mean, and
    the mean over (sample, dim) of the per-sample temporal std."""
    m = np.asarray(m)
    mean = float(m.mean())
    mean_std = float(m.std(axis=1, ddof=1).mean())
    clamped = not mean_std > clamp
    if clamped:
        mean_std = clamp
    return NormStats(mean=mean, mean_std=mean_std, n_segments=m.shape[0], clamped=clamped)


def compute_norm_stats(world: WorldSpec, rng: SeededRng, n: int = 2048, seconds: float = 10.0) -> NormStats:
    """Stats over `n` random segments (default 2048, 10 s each)."""
    if n < 1:
        raise WorldError("need at least one segment")
    n_frames = world.n_frames(seconds)
    stack = np.empty((n, n_frames, world.latent_dim), dtype=np.float32)
    for i in range(n):
        chords, melody, beats = gen_controls(world, rng, n_frames)
        stack[i] = synthesize(world, chords, melody, beats, rng=rng).T
    return norm_stats_from_matrix(stack)


def normalize(z: np.ndarray, stats: NormStats) -> np.ndarray:
    return ((z - stats.mean) / stats.mean_std).astype(np.float32)


def unnormalize(z: np.ndarray, stats: NormStats) -> np.ndarray:
    return (z * stats.mean_std + stats.mean).astype(np.float32)
