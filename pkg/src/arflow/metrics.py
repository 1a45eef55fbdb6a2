"""Temporal-adherence metrics against the world's exact control oracle.

Chord agreement is measured as the fraction of the timeline on which the
two full-coverage label segmentations agree (for segmentations covering the
whole duration, intersection-over-union of matching label time reduces to
exactly this). Beat F1 greedily matches each generated beat to the nearest
unmatched reference beat within a 50 ms window. Melody similarity is the
cosine between stacked 12-bin one-hot chromagrams (pitch id mod 12; null
frames contribute an all-zero row).
"""

from __future__ import annotations

import csv

import numpy as np

from .world import ControlSet, WorldSpec, decode_controls, detokenize


class MetricError(ValueError):
    pass


# -- label segments -----------------------------------------------------------------


def validate_segments(segments, duration: float, tol: float = 1e-6) -> None:
    """Segments must tile [0, duration] contiguously in order."""
    if not segments:
        raise MetricError("empty segmentation")
    if abs(segments[0][1]) > tol:
        raise MetricError("first segment must start at 0")
    for (_, _, prev_end), (_, start, _) in zip(segments, segments[1:]):
        if abs(start - prev_end) > tol:
            raise MetricError(f"gap or overlap at t={start}")
    if abs(segments[-1][2] - duration) > tol:
        raise MetricError("last segment must end at the total duration")


def segments_from_frames(ids: np.ndarray, frame_rate: float):
    """Run-length encode per-frame ids into (label, start_s, end_s) tuples."""
    ids = np.asarray(ids)
    if ids.size == 0:
        raise MetricError("empty id stream")
    switches = np.flatnonzero(np.diff(ids)) + 1
    bounds = np.concatenate([[0], switches, [len(ids)]])
    return [
        (int(ids[a]), a / frame_rate, b / frame_rate)
        for a, b in zip(bounds[:-1], bounds[1:])
    ]


def chord_iou(ref, gen) -> float:
    """Fraction of the shared timeline where the labels agree (exact
    interval sweep, no sampling)."""
    dur_ref = ref[-1][2]
    dur_gen = gen[-1][2]
    if abs(dur_ref - dur_gen) > 1e-6:
        raise MetricError(f"duration mismatch: {dur_ref} vs {dur_gen}")
    validate_segments(ref, dur_ref)
    validate_segments(gen, dur_gen)
    agree = 0.0
    t = 0.0
    i = j = 0
    while i < len(ref) and j < len(gen):
        end = min(ref[i][2], gen[j][2])
        if ref[i][0] == gen[j][0]:
            agree += end - t
        t = end
        if ref[i][2] <= end + 1e-12:
            i += 1
        if gen[j][2] <= end + 1e-12:
            j += 1
    return agree / dur_ref if dur_ref > 0 else 1.0


# -- beats -------------------------------------------------------------------------


def beats_from_flags(flags: np.ndarray, frame_rate: float) -> np.ndarray:
    """Onset times (s) of a per-frame indicator: frames where the flag rises."""
    flags = np.asarray(flags).astype(bool)
    rising = flags & ~np.concatenate([[False], flags[:-1]])
    return np.flatnonzero(rising) / frame_rate


def beat_f1(ref, gen, tol: float = 0.050) -> float:
    """Greedy one-to-one matching in time order: each generated beat takes
    the nearest unmatched reference within tol. Empty vs empty scores 1."""
    ref = np.asarray(ref, dtype=float)
    gen = np.asarray(gen, dtype=float)
    if ref.size == 0 and gen.size == 0:
        return 1.0
    if ref.size == 0 or gen.size == 0:
        return 0.0
    used = np.zeros(ref.size, dtype=bool)
    hits = 0
    for g in gen:
        free = np.flatnonzero(~used)
        if free.size == 0:
            break
        dist = np.abs(ref[free] - g)
        best = free[np.argmin(dist)]
        if abs(ref[best] - g) <= tol:
            used[best] = True
            hits += 1
    precision = hits / gen.size
    recall = hits / ref.size
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


# -- melody -------------------------------------------------------------------------


def melody_similarity(ref_mel, gen_mel, n_bins: int = 12, null_id: int | None = None) -> float:
    """Cosine similarity of stacked one-hot pitch-class chromagrams."""
    ref_mel = np.asarray(ref_mel)
    gen_mel = np.asarray(gen_mel)
    if ref_mel.shape != gen_mel.shape:
        raise MetricError("melody streams differ in length")

    def chroma(ids):
        c = np.zeros((ids.size, n_bins), dtype=np.float64)
        live = ids >= 0
        if null_id is not None:
            live &= ids != null_id
        c[np.flatnonzero(live), ids[live] % n_bins] = 1.0
        return c

    a = chroma(ref_mel).ravel()
    b = chroma(gen_mel).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


# -- whole-sample evaluation ------------------------------------------------------------


def eval_generation(world: WorldSpec, generated: np.ndarray, controls: ControlSet) -> dict:
    """All three adherence metrics of one generated output against its
    conditioning controls. `generated` is a (D, L) latent or an integer
    (n_books, L) token grid (decoded through the codebooks first)."""
    generated = np.asarray(generated)
    if np.issubdtype(generated.dtype, np.integer):
        latent = detokenize(world, generated)
    else:
        latent = generated
    length = latent.shape[1]
    if length != len(controls):
        raise MetricError(f"generated length {length} vs controls {len(controls)}")
    decoded = decode_controls(world, latent)
    fr = world.frame_rate
    return {
        "chord_iou": chord_iou(
            segments_from_frames(controls.chords, fr),
            segments_from_frames(decoded.chords, fr)),
        "beat_f1": beat_f1(
            beats_from_flags(controls.beat_flags, fr),
            beats_from_flags(decoded.beat_flags, fr)),
        "melody_sim": melody_similarity(controls.melody, decoded.melody,
                                        null_id=world.melody_null),
    }


def write_metrics_csv(path: str, records: list[dict]) -> None:
    """CSV rows of sample_id, chord_iou, beat_f1, melody_sim."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "chord_iou", "beat_f1", "melody_sim"])
        for rec in records:
            writer.writerow([rec["sample_id"], f"{rec['chord_iou']:.6f}",
                             f"{rec['beat_f1']:.6f}", f"{rec['melody_sim']:.6f}"])
