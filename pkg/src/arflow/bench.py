"""Inference throughput and latency sweeps for both paradigms.

Each configuration runs a few warmup iterations, then reports the median
wall time of the measured iterations (medians shrug off one noisy outlier
on a busy desk machine). Model-evaluation counts are recorded alongside
timing: guidance doubles every count, the autoregressive decoder spends one
evaluation per delayed position, and the fixed-step flow sampler spends one
per solver step.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import ar as ar_mod
from . import fm as fm_mod
from .rng import SeededRng
from .world import gen_sample


class BenchError(ValueError):
    pass


@dataclass
class BenchPlan:
    batch_sizes: tuple = (1, 2, 4, 8, 16, 32)
    fm_step_counts: tuple = (10, 25, 50, 200)
    warmup_iters: int = 3
    measured_iters: int = 10
    generation_seconds: float = 2.0
    cfg_coef: float = 3.0

    def __post_init__(self):
        if list(self.batch_sizes) != sorted(self.batch_sizes):
            raise BenchError("batch_sizes must be ascending")
        if self.warmup_iters < 0 or self.measured_iters < 1:
            raise BenchError("need at least one measured iteration")


@dataclass
class BenchRow:
    paradigm: str
    batch: int
    steps: int          # solver steps (flow only; 0 for the autoregressive rows)
    wall_s: float       # median wall seconds of one iteration
    samples_per_s: float
    s_per_sample: float
    model_evals: int    # model evaluations per sample
    failed: bool = False


def _timed(fn, warmup: int, iters: int) -> float:
    for _ in range(warmup):
        fn()
    walls = []
    for _ in range(iters):
        t0 = time.perf_counter()
        fn()
        walls.append(time.perf_counter() - t0)
    return float(np.median(walls))


def _row(paradigm, batch, steps, wall, evals) -> BenchRow:
    return BenchRow(paradigm=paradigm, batch=batch, steps=steps, wall_s=wall,
                    samples_per_s=batch / wall, s_per_sample=wall / batch,
                    model_evals=evals)


def run_bench(plan: BenchPlan, ar_model=None, fm_model=None, seed: int = 0,
              progress=None) -> list[BenchRow]:
    """Sweep batch sizes (and flow step counts) and time generation.

    Either model may be None to benchmark a single paradigm. Conditioning
    comes from freshly generated world samples so the measured path is the
    guided dual-stream one used in practice."""
    if ar_model is None and fm_model is None:
        raise BenchError("nothing to benchmark")
    world = (ar_model or fm_model).world
    n_frames = world.n_frames(plan.generation_seconds)
    rows: list[BenchRow] = []
    data_rng = SeededRng(seed)
    refs = [gen_sample(world, data_rng, plan.generation_seconds)
            for _ in range(max(plan.batch_sizes))]

    for batch in plan.batch_sizes:
        caps = np.stack([s.caption for s in refs[:batch]])
        ctrls = [s.controls for s in refs[:batch]]
        if ar_model is not None:
            sampler = ar_mod.ArSamplerConfig(cfg_coef=plan.cfg_coef,
                                             max_frames=n_frames)
            evals = (n_frames + ar_model.cfg.n_books - 1) * 2
            try:
                wall = _timed(
                    lambda: ar_mod.sample(ar_model, caps, ctrls, sampler,
                                          SeededRng(seed + 1), n_frames=n_frames),
                    plan.warmup_iters, plan.measured_iters)
                rows.append(_row("ar", batch, 0, wall, evals))
            except MemoryError:
                rows.append(BenchRow("ar", batch, 0, 0.0, 0.0, 0.0, evals, failed=True))
            if progress:
                progress(rows[-1])
        if fm_model is not None:
            for steps in plan.fm_step_counts:
                cfg = fm_mod.FmSamplerConfig(solver="euler", n_steps=steps,
                                             cfg_coef=plan.cfg_coef)
                try:
                    wall = _timed(
                        lambda: fm_mod.euler_sample(fm_model, caps, ctrls, cfg,
                                                    SeededRng(seed + 2), n_frames),
                        plan.warmup_iters, plan.measured_iters)
                    rows.append(_row("fm", batch, steps, wall, steps * 2))
                except MemoryError:
                    rows.append(BenchRow("fm", batch, steps, 0.0, 0.0, 0.0,
                                         steps * 2, failed=True))
                if progress:
                    progress(rows[-1])
    return rows


REPORT_HEADER = ["paradigm", "batch", "steps", "wall_s", "samples_per_s",
                 "s_per_sample", "model_evals"]


def report(rows: list[BenchRow], path: str) -> None:
    """Fixed-header CSV; failed rows are skipped with a trailing comment."""
    if not rows:
        raise BenchError("no rows to report")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_HEADER)
        for r in rows:
            if r.failed:
                continue
            writer.writerow([r.paradigm, r.batch, r.steps, f"{r.wall_s:.6f}",
                             f"{r.samples_per_s:.6f}", f"{r.s_per_sample:.6f}",
                             r.model_evals])


def read_report(path: str) -> list[BenchRow]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != REPORT_HEADER:
            raise BenchError(f"unexpected header in {path}")
        for rec in reader:
            rows.append(BenchRow(
                paradigm=rec["paradigm"], batch=int(rec["batch"]),
                steps=int(rec["steps"]), wall_s=float(rec["wall_s"]),
                samples_per_s=float(rec["samples_per_s"]),
                s_per_sample=float(rec["s_per_sample"]),
                model_evals=int(rec["model_evals"])))
    return rows
