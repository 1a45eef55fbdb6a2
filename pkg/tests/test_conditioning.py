"""Condition streams: resampling, dropout, embedding grids."""

import numpy as np
import pytest

from arflow.conditioning import (ConditioningError, build_condition_grid,
                                 drop_conditions, embed_conditions,
                                 embed_conditions_bw, init_cond_params,
                                 ar_shift_grid, resample_controls,
                                 stack_control_ids, streams_for_world,
                                 total_cond_dim)
from arflow.rng import SeededRng
from arflow.world import ControlSet, WorldSpec, gen_sample


@pytest.fixture(scope="module")
def world():
    return WorldSpec(seed=5)


@pytest.fixture(scope="module")
def streams(world):
    return streams_for_world(world)


@pytest.fixture(scope="module")
def tables(streams):
    return init_cond_params(streams, 8, SeededRng(2))


def controls_at(rate, n):
    return ControlSet(
        chords=np.arange(n) // max(n // 3, 1) % 12,
        melody=np.arange(n) % 17,
        drums=np.zeros(n, dtype=np.int64),
        beat_flags=(np.arange(n) % 5 == 0).astype(np.int64),
        source_rate=rate,
    )


def test_identity_when_rates_match(world):
    c = controls_at(world.frame_rate, 100)
    out = resample_controls(c, world.frame_rate, 100)
    assert out is c


def test_chord_switch_lands_on_frame_200(world):
    # switch at 4.00 s in a 25 Hz source -> frame 200 at 50 Hz
    src = ControlSet(
        chords=np.where(np.arange(250) < 100, 2, 7),
        melody=np.zeros(250, dtype=np.int64),
        drums=np.zeros(250, dtype=np.int64),
        beat_flags=np.zeros(250, dtype=np.int64),
        source_rate=25.0,
    )
    out = resample_controls(src, 50.0, 500)
    assert out.chords[199] == 2
    assert out.chords[200] == 7


def test_null_melody_stays_null(world):
    c = ControlSet(
        chords=np.zeros(40, dtype=np.int64),
        melody=np.full(40, world.melody_null),
        drums=np.zeros(40, dtype=np.int64),
        beat_flags=np.zeros(40, dtype=np.int64),
        source_rate=25.0,
    )
    out = resample_controls(c, 50.0, 80)
    assert (out.melody == world.melody_null).all()


def test_beat_events_survive_resampling(world):
    c = controls_at(25.0, 100)
    out = resample_controls(c, 50.0, 200)
    src_beats = np.flatnonzero(c.beat_flags) / 25.0
    new_beats = np.flatnonzero(out.beat_flags) / 50.0
    assert np.abs(src_beats - new_beats).max() <= 0.5 / 50.0 + 1e-9


def test_empty_stream_rejected(world):
    empty = ControlSet(*(np.zeros(0, dtype=np.int64),) * 4, source_rate=50.0)
    with pytest.raises(ConditioningError):
        resample_controls(empty, 50.0, 10)


# -- dropout -------------------------------------------------------------------


def test_drop_all_probability_one():
    mask = drop_conditions(SeededRng(1), 3, p_drop=0.0, p_all=1.0, batch=16)
    assert mask.all()


def test_never_dropped():
    mask = drop_conditions(SeededRng(2), 3, p_drop=0.0, p_all=0.0, batch=16)
    assert not mask.any()


def test_drop_rate_binomial_bound():
    mask = drop_conditions(SeededRng(3), 3, p_drop=0.5, p_all=0.0, batch=10_000)
    rates = mask.mean(axis=0)
    assert np.all(np.abs(rates - 0.5) < 0.02)


def test_bad_probability_rejected():
    with pytest.raises(ConditioningError):
        drop_conditions(SeededRng(0), 3, p_drop=1.5, p_all=0.0)


# -- embedding grids --------------------------------------------------------------


def test_all_dropped_equals_null_rows(world, streams, tables, ):
    sample = gen_sample(world, SeededRng(7), 1.0)
    grid = build_condition_grid(tables, streams, sample.controls,
                                drop_mask=np.ones(3, dtype=bool))
    null_rows = np.concatenate(
        [tables[f"cond.{s.name}"][s.vocab] for s in streams])
    assert np.allclose(grid.channels, null_rows[None, :])
    assert grid.dropped.all()


def test_channel_count(world, streams, tables):
    sample = gen_sample(world, SeededRng(8), 1.0)
    grid = build_condition_grid(tables, streams, sample.controls)
    assert grid.channels.shape == (50, total_cond_dim(streams, 8))


def test_single_live_stream(world, streams, tables):
    sample = gen_sample(world, SeededRng(9), 1.0)
    drop = np.array([False, True, True])
    grid = build_condition_grid(tables, streams, sample.controls, drop_mask=drop)
    null_mel = tables["cond.melody"][streams[1].vocab]
    null_drum = tables["cond.drum"][streams[2].vocab]
    assert np.allclose(grid.channels[:, 8:16], null_mel[None])
    assert np.allclose(grid.channels[:, 16:], null_drum[None])
    live = tables["cond.chord"][sample.controls.chords]
    assert np.allclose(grid.channels[:, :8], live)


def test_ar_shift_places_frame0_on_start_position(world, streams, tables):
    sample = gen_sample(world, SeededRng(10), 1.0)
    ids = stack_control_ids(sample.controls)[None]
    grid, _ = embed_conditions(tables, streams, ids, np.zeros((1, 3), bool))
    shifted = ar_shift_grid(grid, grid.shape[1] + 3)
    assert np.array_equal(shifted[:, 0], grid[:, 0])       # start position
    assert np.array_equal(shifted[:, -1], grid[:, -1])     # tail clamps
    assert shifted.shape[1] == grid.shape[1] + 3


def test_embedding_backward_scatters(world, streams, tables):
    ids = np.zeros((1, 3, 4), dtype=np.int64)
    ids[0, 0] = [1, 1, 2, 3]
    drop = np.zeros((1, 3), dtype=bool)
    grid, cache = embed_conditions(tables, streams, ids, drop)
    grads = {k: np.zeros_like(v) for k, v in tables.items()}
    d_grid = np.ones_like(grid)
    embed_conditions_bw(grads, streams, cache, d_grid)
    assert np.allclose(grads["cond.chord"][1], 2.0)   # id 1 hit twice
    assert np.allclose(grads["cond.chord"][2], 1.0)
    assert np.allclose(grads["cond.chord"][0], 0.0)


def test_out_of_range_id_rejected(streams, tables):
    ids = np.full((1, 3, 2), 99, dtype=np.int64)
    with pytest.raises(ConditioningError):
        embed_conditions(tables, streams, ids, np.zeros((1, 3), bool))
