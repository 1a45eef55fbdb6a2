"""Conditional flow matching: path, objective, ODE sampling, inpainting.

The probability path from noise y0 to data y1 is

    psi_tau(y0, y1) = (1 - (1 - sigma_min) * tau) * y0 + tau * y1

whose conditional vector field, evaluated anywhere along its own path, is
the constant y1 - (1 - sigma_min) * y0. Training regresses that constant;
sampling integrates the learned field from tau=0 to 1 with either fixed-step
Euler updates or the adaptive Dormand-Prince 5(4) pair.

Editing: `invert` runs the Euler recursion backward from data to noise and
keeps the trajectory; zero-shot inpainting replays it while re-seeding the
masked span from fresh noise, and supervised inpainting plugs the clean
context into the state before every solver step. Both finish by copying the
source context back verbatim, so context frames survive bitwise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import backbone as bb
from . import conditioning as cond_mod
from .rng import SeededRng
from .world import NormStats, WorldSpec, normalize, null_caption, unnormalize


class FmError(ValueError):
    pass


class SolverBudgetError(RuntimeError):
    """Adaptive solver ran out of its evaluation budget; carries the state."""

    def __init__(self, tau, state, n_evals):
        super().__init__(f"solver exceeded {n_evals} evaluations at tau={tau:.4f}")
        self.tau = tau
        self.state = state
        self.n_evals = n_evals


@dataclass
class OtPath:
    sigma_min: float = 1e-4

    def __post_init__(self):
        if not 0.0 < self.sigma_min < 1.0:
            raise FmError("sigma_min must lie in (0, 1)")


def psi(path: OtPath, tau, y0, y1):
    """Point on the path at time tau."""
    tau = np.asarray(tau)
    return (1.0 - (1.0 - path.sigma_min) * tau) * y0 + tau * y1


def target_field(path: OtPath, tau, y, y1):
    """Conditional field (y1 - (1-s)y) / (1 - (1-s)tau); constant along psi."""
    denom = 1.0 - (1.0 - path.sigma_min) * np.asarray(tau)
    if np.any(denom < 1e-8):
        raise FmError("field denominator underflow (tau must stay within [0, 1])")
    return (y1 - (1.0 - path.sigma_min) * y) / denom


def fm_loss(field_fn, path: OtPath, latents, tau_rng: SeededRng, noise_rng: SeededRng,
            taus=None):
    """Time-weighted regression objective on a batch of normalized latents.

    latents is (B, L, D); field_fn(y, tau) estimates the field. Draws
    tau ~ U[0,1] and y0 ~ N(0,I) unless taus is given, then averages the
    per-sample elementwise MSE weighted by (1 + tau)."""
    z = np.asarray(latents)
    batch = z.shape[0]
    if taus is None:
        taus = tau_rng.uniform(batch).astype(np.float32)
    y0 = noise_rng.gauss(z.shape)
    y = psi(path, taus[:, None, None], y0, z)
    target = z - (1.0 - path.sigma_min) * y0
    pred = field_fn(y, taus)
    per_sample = ((pred - target) ** 2).reshape(batch, -1).mean(axis=1)
    return float(((1.0 + taus) * per_sample).mean())


# -- ODE solvers -------------------------------------------------------------------

# Dormand-Prince 5(4) tableau and embedded error coefficients.
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_ERR = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])

_SAFETY = 0.9
_FACTOR_MIN = 0.2
_FACTOR_MAX = 5.0
_FIRST_STEP = 0.05


def euler_integrate(field_fn, y0, n_steps: int, trace: list | None = None):
    """Fixed-grid update y <- y + (1/N) field(y, k/N) for k = 0..N-1."""
    if n_steps < 1:
        raise FmError("n_steps must be at least 1")
    y = np.array(y0, copy=True)
    h = 1.0 / n_steps
    for k in range(n_steps):
        tau = k / n_steps
        y += h * field_fn(y, tau)
        if not np.isfinite(y).all():
            raise FmError(f"non-finite state after euler step {k + 1}/{n_steps}")
        if trace is not None:
            trace.append({"tau": tau, "h": h, "err_norm": "", "accepted": 1})
    return y


def dopri5_integrate(field_fn, y0, rtol: float, atol: float, max_evals: int = 1000,
                     trace: list | None = None):
    """Adaptive Dormand-Prince 5(4) over tau in [0, 1].

    Error norm is the RMS of |e_i| / (atol + rtol * max(|y_i|, |y_new_i|));
    a step is accepted when it is <= 1. The next step scales by
    clamp(0.9 * err^(-1/5), 0.2, 5) and the last step lands exactly on 1.
    Returns (y, n_evals)."""
    if rtol <= 0 or atol <= 0:
        raise FmError("tolerances must be positive")
    y = np.array(y0, copy=True, dtype=np.float64)
    t = 0.0
    h = min(_FIRST_STEP, 1.0)
    n_evals = 0
    while t < 1.0 - 1e-12:
        h = min(h, 1.0 - t)
        if n_evals + 7 > max_evals:
            raise SolverBudgetError(t, y, n_evals)
        k = []
        for stage in range(7):
            y_stage = y
            if stage:
                y_stage = y + h * sum(a * ki for a, ki in zip(_DP_A[stage], k))
            k.append(np.asarray(field_fn(y_stage, t + _DP_C[stage] * h), dtype=np.float64))
        n_evals += 7
        y_new = y + h * sum(b * ki for b, ki in zip(_DP_B5, k) if b)
        err_vec = h * sum(c * ki for c, ki in zip(_DP_ERR, k) if c)
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        err = float(np.sqrt(np.mean((err_vec / scale) ** 2)))
        accepted = err <= 1.0
        if trace is not None:
            trace.append({"tau": t, "h": h, "err_norm": err, "accepted": int(accepted)})
        if accepted:
            t += h
            y = y_new
            if not np.isfinite(y).all():
                raise FmError(f"non-finite state at tau={t:.4f}")
        with np.errstate(divide="ignore"):
            factor = _SAFETY * err ** (-0.2) if err > 0 else _FACTOR_MAX
        h *= min(max(factor, _FACTOR_MIN), _FACTOR_MAX)
    return y, n_evals


def write_trace(path: str, rows: list[dict]) -> None:
    """Solver trace CSV: one row per step of tau, step size, error, accept."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["tau", "h", "err_norm", "accepted"])
        writer.writeheader()
        writer.writerows(rows)


# -- model-driven sampling -----------------------------------------------------------


@dataclass
class FmSamplerConfig:
    solver: str = "euler"
    n_steps: int = 50
    rtol: float = 1e-3
    atol: float = 1e-5
    max_evals: int = 1000
    cfg_coef: float = 3.0

    def __post_init__(self):
        if self.solver not in ("euler", "dopri5"):
            raise FmError(f"unknown solver {self.solver!r}")
        if self.n_steps < 1:
            raise FmError("n_steps must be at least 1")
        if self.rtol <= 0 or self.atol <= 0:
            raise FmError("tolerances must be positive")
        if self.cfg_coef < 0:
            raise FmError("cfg_coef must be non-negative")


@dataclass
class FmModel:
    cfg: bb.BackboneConfig
    params: dict
    world: WorldSpec
    streams: tuple
    stream_dim: int
    norm_stats: NormStats
    path: OtPath = field(default_factory=OtPath)
    inpaint_ft: bool = False


def _cond_grids(model: FmModel, captions, controls, n_frames: int, batch: int):
    """(conditional grid, null grid, conditional captions, null captions)."""
    n_streams = len(model.streams)
    if controls is None:
        ids = np.zeros((batch, n_streams, n_frames), dtype=np.int64)
        drop = np.ones((batch, n_streams), dtype=bool)
    else:
        ids = np.stack([
            cond_mod.stack_control_ids(
                cond_mod.resample_controls(c, model.world.frame_rate, n_frames))
            for c in controls
        ])
        drop = np.zeros((batch, n_streams), dtype=bool)
    grid, _ = cond_mod.embed_conditions(model.params, model.streams, ids, drop)
    null_grid, _ = cond_mod.embed_conditions(
        model.params, model.streams, np.zeros_like(ids), np.ones_like(drop))
    null_caps = np.repeat(null_caption(model.world)[None], batch, axis=0)
    return grid, null_grid, np.atleast_2d(captions), null_caps


def guided_field_fn(model: FmModel, captions, controls, n_frames: int, batch: int,
                    coef: float):
    """Returns field(y, tau) on (B, L, D) normalized states with guidance
    uncond + coef * (cond - uncond); coef 0/1 run a single stream."""
    grid, null_grid, caps, null_caps = _cond_grids(model, captions, controls,
                                                   n_frames, batch)

    def eval_once(y, tau, g, c):
        taus = np.full(y.shape[0], tau, dtype=np.float32) if np.ndim(tau) == 0 else tau
        out, _ = bb.forward(model.params, model.cfg, latent=y.astype(np.float32),
                            cond=g, caption=c, tau=taus)
        return out

    if coef == 1.0:
        return lambda y, tau: eval_once(y, tau, grid, caps)
    if coef == 0.0:
        return lambda y, tau: eval_once(y, tau, null_grid, null_caps)

    def field(y, tau):
        y2 = np.concatenate([y, y]).astype(np.float32)
        taus = np.full(y.shape[0], tau, dtype=np.float32) if np.ndim(tau) == 0 else tau
        out, _ = bb.forward(
            model.params, model.cfg, latent=y2,
            cond=np.concatenate([grid, null_grid]),
            caption=np.concatenate([caps, null_caps]),
            tau=np.concatenate([taus, taus]))
        c, u = out[: y.shape[0]], out[y.shape[0] :]
        return u + coef * (c - u)

    return field


def euler_sample(model: FmModel, captions, controls, cfg: FmSamplerConfig,
                 rng: SeededRng, n_frames: int, trace: list | None = None) -> np.ndarray:
    """Batched fixed-step generation; returns unnormalized (B, D, L)."""
    captions = np.atleast_2d(np.asarray(captions, dtype=np.int64))
    batch = captions.shape[0]
    field_fn = guided_field_fn(model, captions, controls, n_frames, batch, cfg.cfg_coef)
    y0 = rng.gauss((batch, n_frames, model.world.latent_dim))
    y = euler_integrate(field_fn, y0, cfg.n_steps, trace=trace)
    return unnormalize(y, model.norm_stats).transpose(0, 2, 1)


def dopri5_sample(model: FmModel, caption, controls, cfg: FmSamplerConfig,
                  rng: SeededRng, n_frames: int, trace: list | None = None):
    """Single-sample adaptive generation; returns (latent (D, L), n_evals)."""
    caption = np.atleast_2d(np.asarray(caption, dtype=np.int64))
    field_fn = guided_field_fn(model, caption, controls, n_frames, 1, cfg.cfg_coef)
    y0 = rng.gauss((1, n_frames, model.world.latent_dim))
    y, n_evals = dopri5_integrate(field_fn, y0, cfg.rtol, cfg.atol,
                                  max_evals=cfg.max_evals, trace=trace)
    out = unnormalize(y.astype(np.float32), model.norm_stats)
    return out[0].T, n_evals


def sample(model: FmModel, captions, controls, cfg: FmSamplerConfig,
           rng: SeededRng, n_frames: int, trace: list | None = None) -> np.ndarray:
    """Solver dispatch; always returns (B, D, L)."""
    if cfg.solver == "euler":
        return euler_sample(model, captions, controls, cfg, rng, n_frames, trace=trace)
    captions = np.atleast_2d(np.asarray(captions, dtype=np.int64))
    outs = []
    for i in range(captions.shape[0]):
        ctrl = None if controls is None else [controls[i]]
        lat, _ = dopri5_sample(model, captions[i : i + 1], ctrl, cfg, rng, n_frames,
                               trace=trace)
        outs.append(lat)
    return np.stack(outs)


# -- inversion and inpainting ----------------------------------------------------------


def invert(model: FmModel, z_norm: np.ndarray, caption, controls,
           n_steps: int, guidance_coef: float = 1.0) -> list[np.ndarray]:
    """Backward Euler recursion from data to noise (normalized (D, L) in,
    list of N states out, noise end first).

    Evaluations run at tau = 1, 1-dt, ..., dt; each state is appended after
    its update and the list is reversed, so forward replay visits them in
    tau order. Guidance defaults to the pure conditional field."""
    field_fn = guided_field_fn(model, np.atleast_2d(caption),
                               None if controls is None else [controls],
                               z_norm.shape[1], 1, guidance_coef)
    dt = 1.0 / n_steps
    z = z_norm.T[None].astype(np.float32)
    t = 1.0
    states = []
    for _ in range(n_steps):
        z = z - dt * field_fn(z, t)
        if not np.isfinite(z).all():
            raise FmError(f"non-finite state during inversion at tau={t:.4f}")
        states.append(z[0].T.copy())
        t -= dt
    states.reverse()
    return states


def zs_inpaint(model: FmModel, z0: np.ndarray, caption, controls,
               cfg: FmSamplerConfig, span: tuple[int, int], rng: SeededRng,
               inversion_coef: float = 1.0) -> np.ndarray:
    """Zero-shot inpainting via inversion; z0 is unnormalized (D, L).

    The inversion trajectory supplies the context at every forward step and
    the source context is copied back verbatim at the end."""
    s, e = span
    length = z0.shape[1]
    if not (0 <= s <= e <= length):
        raise FmError(f"invalid mask [{s}, {e}) for length {length}")
    z_norm = normalize(z0, model.norm_stats)
    noises = invert(model, z_norm, caption, controls, cfg.n_steps,
                    guidance_coef=inversion_coef)
    field_fn = guided_field_fn(model, np.atleast_2d(caption),
                               None if controls is None else [controls],
                               length, 1, cfg.cfg_coef)
    dt = 1.0 / cfg.n_steps
    y = rng.gauss((1, length, model.world.latent_dim))
    t = 0.0
    for noise in noises:
        y[0, :s] = noise.T[:s]
        y[0, e:] = noise.T[e:]
        y = y + dt * field_fn(y, t)
        t += dt
    out = unnormalize(y[0].T, model.norm_stats)
    out[:, :s] = z0[:, :s]
    out[:, e:] = z0[:, e:]
    return out


def sup_inpaint(model: FmModel, z0: np.ndarray, caption, controls,
                cfg: FmSamplerConfig, rng: SeededRng,
                span: tuple[int, int] | None = None) -> np.ndarray:
    """Supervised inpainting: plug the clean context into the state before
    every Euler step (expects a model fine-tuned the same way). With no span
    given, draws start ~ U(0.1 L, 0.9 L) with width L/2, clamped to fit."""
    length = z0.shape[1]
    if span is None:
        span = draw_half_mask(length, rng)
    s, e = span
    if not (0 <= s <= e <= length):
        raise FmError(f"invalid mask [{s}, {e}) for length {length}")
    z_norm = normalize(z0, model.norm_stats).T          # (L, D)
    field_fn = guided_field_fn(model, np.atleast_2d(caption),
                               None if controls is None else [controls],
                               length, 1, cfg.cfg_coef)
    dt = 1.0 / cfg.n_steps
    y = rng.gauss((1, length, model.world.latent_dim))
    t = 0.0
    for _ in range(cfg.n_steps):
        y[0, :s] = z_norm[:s]
        y[0, e:] = z_norm[e:]
        y = y + dt * field_fn(y, t)
        t += dt
    out = unnormalize(y[0].T, model.norm_stats)
    out[:, :s] = z0[:, :s]
    out[:, e:] = z0[:, e:]
    return out


def draw_half_mask(length: int, rng: SeededRng) -> tuple[int, int]:
    """Mask of width length // 2 starting uniform in [0.1 L, 0.9 L], clamped
    so the span ends inside 0.9 L."""
    width = length // 2
    lo = max(int(round(0.1 * length)), 0)
    hi = max(int(round(0.9 * length)) - width, lo)
    s = int(rng.integers(lo, hi + 1))
    return s, min(s + width, length)


def draw_seconds_mask(world: WorldSpec, length: int, rng: SeededRng,
                      span_seconds: float = 5.0, margin_seconds: float = 1.0):
    """Fixed-duration mask with at least the given margin on both sides."""
    width = min(world.n_frames(span_seconds), max(length - 2, 1))
    margin = world.n_frames(margin_seconds)
    lo, hi = margin, length - margin - width
    if hi < lo:
        lo, hi = 0, max(length - width, 0)
    s = int(rng.integers(lo, hi + 1))
    return s, s + width
