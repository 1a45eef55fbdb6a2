"""Training loops for both paradigms over the synthetic world.

Batches are drawn either from a fixed dataset (cycled with a seeded
sampler) or synthesized on the fly; with identical seeds and thread counts
two runs produce bit-identical parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ar as ar_mod
from . import backbone as bb
from . import conditioning as cond_mod
from . import delay
from . import fm as fm_mod
from .optim import AdamW
from .rng import SeededRng
from .world import (CAPTION_VOCAB, WorldSample, WorldSpec, gen_sample,
                    normalize)


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    segment_seconds: float = 10.0
    peak_lr: float = 1e-4
    warmup_steps: int = 4000
    total_steps: int | None = None      # schedule horizon; defaults to steps
    weight_decay: float = 0.01
    cond_drop_p: float = 0.5
    cond_drop_all: float = 0.1
    seed: int = 0
    fim: bool = False                   # AR fill-in-the-middle fine-tuning
    inpaint_ft: bool = False            # FM supervised-inpainting fine-tuning
    log_every: int = 0

    def horizon(self) -> int:
        return self.total_steps if self.total_steps else self.steps


def make_ar_model(world: WorldSpec, *, n_blocks=4, model_dim=128, n_heads=4,
                  ff_dim=512, max_len=None, stream_dim=8, seed=0) -> ar_mod.ArModel:
    streams = cond_mod.streams_for_world(world)
    if max_len is None:
        max_len = world.n_frames(10.0) + world.n_codebooks + 8
    cfg = bb.BackboneConfig(
        mode="causal", n_blocks=n_blocks, model_dim=model_dim, n_heads=n_heads,
        ff_dim=ff_dim, max_len=max_len, n_books=world.n_codebooks,
        vocab=delay.total_vocab(world.codebook_size),
        cond_dim=cond_mod.total_cond_dim(streams, stream_dim),
        caption_vocab=CAPTION_VOCAB)
    rng = SeededRng(seed)
    params = bb.init_params(cfg, rng)
    params.update(cond_mod.init_cond_params(streams, stream_dim, rng))
    return ar_mod.ArModel(cfg=cfg, params=params, world=world, streams=streams,
                          stream_dim=stream_dim)


def make_fm_model(world: WorldSpec, norm_stats, *, n_blocks=4, model_dim=128,
                  n_heads=4, ff_dim=512, max_len=None, stream_dim=8, seed=0,
                  sigma_min=1e-4) -> fm_mod.FmModel:
    streams = cond_mod.streams_for_world(world)
    if max_len is None:
        max_len = world.n_frames(10.0) + 8
    cfg = bb.BackboneConfig(
        mode="bidirectional", n_blocks=n_blocks, model_dim=model_dim,
        n_heads=n_heads, ff_dim=ff_dim, max_len=max_len,
        input_dim=world.latent_dim,
        cond_dim=cond_mod.total_cond_dim(streams, stream_dim),
        caption_vocab=CAPTION_VOCAB)
    rng = SeededRng(seed)
    params = bb.init_params(cfg, rng)
    params.update(cond_mod.init_cond_params(streams, stream_dim, rng))
    return fm_mod.FmModel(cfg=cfg, params=params, world=world, streams=streams,
                          stream_dim=stream_dim, norm_stats=norm_stats,
                          path=fm_mod.OtPath(sigma_min=sigma_min))


def _next_batch(world, cfg: TrainConfig, data_rng: SeededRng,
                dataset: list[WorldSample] | None) -> list[WorldSample]:
    if dataset:
        idx = data_rng.integers(0, len(dataset), cfg.batch_size)
        return [dataset[int(i)] for i in idx]
    return [gen_sample(world, data_rng, cfg.segment_seconds) for _ in range(cfg.batch_size)]


def _make_optimizer(params, cfg: TrainConfig) -> AdamW:
    return AdamW(params, peak_lr=cfg.peak_lr, warmup_steps=cfg.warmup_steps,
                 total_steps=cfg.horizon(), weight_decay=cfg.weight_decay)


def ar_train_step(model: ar_mod.ArModel, samples, opt: AdamW,
                  drop_rng: SeededRng, cfg: TrainConfig,
                  fim_rng: SeededRng | None = None) -> float:
    """One update: delayed grids, shifted inputs, condition dropout, token
    cross entropy (standard mode), backprop, AdamW."""
    world = model.world
    inputs, targets, cond_ids = [], [], []
    for s in samples:
        span = None
        if cfg.fim:
            span = ar_mod.draw_fim_span(world, s.tokens.shape[1], fim_rng)
        i, t, c = ar_mod.build_sequences(world, s.tokens, s.controls, fim_span=span)
        inputs.append(i)
        targets.append(t)
        cond_ids.append(c)
    inputs = np.stack(inputs)
    targets = np.stack(targets)
    cond_ids = np.stack(cond_ids)
    captions = np.stack([s.caption for s in samples])
    if inputs.shape[-1] > model.cfg.max_len:
        raise ar_mod.ArError(
            f"sequence length {inputs.shape[-1]} overflows max_len {model.cfg.max_len}")

    drop = cond_mod.drop_conditions(drop_rng, len(model.streams),
                                    cfg.cond_drop_p, cfg.cond_drop_all,
                                    batch=len(samples))
    grid, grid_cache = cond_mod.embed_conditions(model.params, model.streams,
                                                 cond_ids, drop)
    logits, tape = bb.forward(model.params, model.cfg, tokens=inputs, cond=grid,
                              caption=captions, keep_tape=True)
    loss, d_logits = ar_mod._ce(logits, targets, delay.pad_id(world.codebook_size))
    grads, d_cond = bb.backward(model.params, model.cfg, tape, d_logits)
    cond_mod.embed_conditions_bw(grads, model.streams, grid_cache, d_cond)
    opt.step(model.params, grads)
    return loss


def fm_train_step(model: fm_mod.FmModel, samples, opt: AdamW,
                  drop_rng: SeededRng, tau_rng: SeededRng, noise_rng: SeededRng,
                  cfg: TrainConfig, mask_rng: SeededRng | None = None) -> float:
    """One update of the time-weighted field regression; with inpaint_ft the
    clean context is plugged into the state and the loss is masked to the
    hidden span."""
    world = model.world
    z = np.stack([normalize(s.latent, model.norm_stats).T for s in samples])
    cond_ids = np.stack([cond_mod.stack_control_ids(s.controls) for s in samples])
    captions = np.stack([s.caption for s in samples])
    batch, length, _ = z.shape

    taus = tau_rng.uniform(batch).astype(np.float32)
    y0 = noise_rng.gauss(z.shape)
    y = fm_mod.psi(model.path, taus[:, None, None], y0, z).astype(np.float32)
    target = z - (1.0 - model.path.sigma_min) * y0

    loss_mask = None
    if cfg.inpaint_ft:
        loss_mask = np.zeros((batch, length, 1), dtype=np.float32)
        for b in range(batch):
            s_, e_ = fm_mod.draw_half_mask(length, mask_rng)
            y[b, :s_] = z[b, :s_]
            y[b, e_:] = z[b, e_:]
            loss_mask[b, s_:e_] = 1.0

    drop = cond_mod.drop_conditions(drop_rng, len(model.streams),
                                    cfg.cond_drop_p, cfg.cond_drop_all, batch=batch)
    grid, grid_cache = cond_mod.embed_conditions(model.params, model.streams,
                                                 cond_ids, drop)
    pred, tape = bb.forward(model.params, model.cfg, latent=y, cond=grid,
                            caption=captions, tau=taus, keep_tape=True)
    diff = pred - target
    if loss_mask is not None:
        diff = diff * loss_mask
        denom = np.maximum(loss_mask.sum(axis=(1, 2)), 1.0) * z.shape[2]
    else:
        denom = np.full(batch, length * z.shape[2], dtype=np.float32)
    per_sample = (diff * diff).reshape(batch, -1).sum(axis=1) / denom
    weights = 1.0 + taus
    loss = float((weights * per_sample).mean())
    d_pred = (2.0 * weights / (batch * denom))[:, None, None] * diff
    grads, d_cond = bb.backward(model.params, model.cfg, tape,
                                d_pred.astype(np.float32))
    cond_mod.embed_conditions_bw(grads, model.streams, grid_cache, d_cond)
    opt.step(model.params, grads)
    return loss


def train_ar(model: ar_mod.ArModel, cfg: TrainConfig,
             dataset: list[WorldSample] | None = None, hook=None) -> list[float]:
    root = SeededRng(cfg.seed)
    data_rng, drop_rng, fim_rng = root.spawn(3)
    opt = _make_optimizer(model.params, cfg)
    history = []
    for step in range(cfg.steps):
        samples = _next_batch(model.world, cfg, data_rng, dataset)
        loss = ar_train_step(model, samples, opt, drop_rng, cfg, fim_rng=fim_rng)
        history.append(loss)
        if cfg.log_every and step % cfg.log_every == 0:
            print(f"[ar] step {step} loss {loss:.4f}")
        if hook:
            hook(step, loss)
    model.fim = model.fim or cfg.fim
    return history


def world_to_dict(world: WorldSpec) -> dict:
    return {
        "seed": world.seed, "frame_rate": world.frame_rate,
        "latent_dim": world.latent_dim, "n_codebooks": world.n_codebooks,
        "codebook_size": world.codebook_size, "chord_vocab": world.chord_vocab,
        "melody_vocab": world.melody_vocab, "beat_period": world.beat_period,
        "noise_std": world.noise_std,
    }


def save_model(path: str, model) -> None:
    """Checkpoint directory: named PFT1 tensors plus a JSON config."""
    if isinstance(model, ar_mod.ArModel):
        meta = {"paradigm": "ar", "fim": model.fim}
    else:
        st = model.norm_stats
        meta = {"paradigm": "fm", "inpaint_ft": model.inpaint_ft,
                "sigma_min": model.path.sigma_min,
                "norm_stats": {"mean": st.mean, "mean_std": st.mean_std,
                               "n_segments": st.n_segments, "clamped": st.clamped}}
    meta["world"] = world_to_dict(model.world)
    meta["model"] = {
        "n_blocks": model.cfg.n_blocks, "model_dim": model.cfg.model_dim,
        "n_heads": model.cfg.n_heads, "ff_dim": model.cfg.ff_dim,
        "max_len": model.cfg.max_len, "stream_dim": model.stream_dim,
    }
    bb.save_checkpoint(path, model.params, meta)


def load_model(path: str):
    """Rebuild an ArModel or FmModel from a checkpoint directory."""
    params, meta = bb.load_checkpoint(path)
    world = WorldSpec(**meta["world"])
    m = meta["model"]
    kwargs = dict(n_blocks=m["n_blocks"], model_dim=m["model_dim"],
                  n_heads=m["n_heads"], ff_dim=m["ff_dim"],
                  max_len=m["max_len"], stream_dim=m["stream_dim"])
    if meta["paradigm"] == "ar":
        model = make_ar_model(world, **kwargs)
        model.fim = meta.get("fim", False)
    else:
        from .world import NormStats
        st = meta["norm_stats"]
        stats = NormStats(mean=st["mean"], mean_std=st["mean_std"],
                          n_segments=st["n_segments"], clamped=st["clamped"])
        model = make_fm_model(world, stats, sigma_min=meta.get("sigma_min", 1e-4),
                              **kwargs)
        model.inpaint_ft = meta.get("inpaint_ft", False)
    model.params = params
    return model


def train_fm(model: fm_mod.FmModel, cfg: TrainConfig,
             dataset: list[WorldSample] | None = None, hook=None) -> list[float]:
    root = SeededRng(cfg.seed)
    data_rng, drop_rng, tau_rng, noise_rng, mask_rng = root.spawn(5)
    opt = _make_optimizer(model.params, cfg)
    history = []
    for step in range(cfg.steps):
        samples = _next_batch(model.world, cfg, data_rng, dataset)
        loss = fm_train_step(model, samples, opt, drop_rng, tau_rng, noise_rng,
                             cfg, mask_rng=mask_rng)
        history.append(loss)
        if cfg.log_every and step % cfg.log_every == 0:
            print(f"[fm] step {step} loss {loss:.4f}")
        if hook:
            hook(step, loss)
    model.inpaint_ft = model.inpaint_ft or cfg.inpaint_ft
    return history
