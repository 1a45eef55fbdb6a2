"""Command-line entry point wiring the whole pipeline.

Subcommands: gen-data, train, sample, inpaint, eval, bench, sweep,
print-config. Every run is reproducible from its config and seeds; errors
exit nonzero with a single `error: ...` line on stderr.
"""

from __future__ import annotations

import argparse
import itertools
import os
import sys

import numpy as np

from . import ar as ar_mod
from . import bench as bench_mod
from . import config as config_mod
from . import data as data_mod
from . import fm as fm_mod
from . import metrics as metrics_mod
from .rng import SeededRng
from .tensorio import save_grid, save_tensor
from .training import (load_model, make_ar_model, make_fm_model, save_model,
                       train_ar, train_fm)
from .world import gen_sample, norm_stats_from_matrix


def _add_common(p):
    p.add_argument("--config", help="INI config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="override one config key")


def _samplers_from(cfg, args=None):
    a = cfg["ar_sampler"]
    ar_sampler = ar_mod.ArSamplerConfig(
        temperature=a["temperature"],
        top_k=a["top_k"] or None,
        top_p=a["top_p"] or None,
        cfg_coef=a["cfg_coef"])
    f = cfg["fm_sampler"]
    fm_sampler = fm_mod.FmSamplerConfig(
        solver=f["solver"], n_steps=f["n_steps"], rtol=f["rtol"], atol=f["atol"],
        max_evals=f["max_evals"], cfg_coef=f["cfg_coef"])
    return ar_sampler, fm_sampler


def _eval_conditions(cfg, world, n):
    rng = SeededRng(cfg["eval"]["seed"])
    return [gen_sample(world, rng, cfg["eval"]["seconds"]) for _ in range(n)]


def cmd_print_config(args):
    cfg = config_mod.load_config(args.config, args.overrides)
    sys.stdout.write(config_mod.dump_config(cfg))
    return 0


def cmd_gen_data(args):
    cfg = config_mod.load_config(args.config, args.overrides)
    world = config_mod.world_from_config(cfg)
    rng = SeededRng(cfg["data"]["seed"])
    samples = [gen_sample(world, rng, cfg["data"]["seconds"])
               for _ in range(cfg["data"]["n_samples"])]
    data_mod.save_dataset(args.out, samples)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def _build_model(cfg, world, paradigm, dataset):
    m = cfg["model"]
    kwargs = dict(n_blocks=m["n_blocks"], model_dim=m["model_dim"],
                  n_heads=m["n_heads"], ff_dim=m["ff_dim"],
                  stream_dim=m["stream_dim"], seed=m["seed"])
    if m["max_len"]:
        kwargs["max_len"] = m["max_len"]
    if paradigm == "ar":
        return make_ar_model(world, **kwargs)
    stack = np.stack([s.latent.T for s in dataset[:2048]])
    stats = norm_stats_from_matrix(stack)
    return make_fm_model(world, stats, sigma_min=m["sigma_min"], **kwargs)


def cmd_train(args):
    cfg = config_mod.load_config(args.config, args.overrides)
    if args.steps:
        cfg["train"]["steps"] = args.steps
    world = config_mod.world_from_config(cfg)
    dataset = data_mod.load_dataset(args.data, world)
    model = _build_model(cfg, world, args.paradigm, dataset)
    tc = config_mod.train_config_from(cfg)
    trainer = train_ar if args.paradigm == "ar" else train_fm
    history = trainer(model, tc, dataset=dataset)
    save_model(args.out, model)
    print(f"trained {args.paradigm} for {tc.steps} steps, "
          f"final loss {history[-1]:.4f}, checkpoint at {args.out}")
    return 0


def cmd_sample(args):
    cfg = config_mod.load_config(args.config, args.overrides)
    if args.solver:
        cfg["fm_sampler"]["solver"] = args.solver
    if args.steps:
        cfg["fm_sampler"]["n_steps"] = args.steps
    for name in ("temperature", "top_k", "top_p", "cfg_coef"):
        value = getattr(args, name)
        if value is not None:
            cfg["ar_sampler"][name] = value
            if name == "cfg_coef":
                cfg["fm_sampler"]["cfg_coef"] = value
    model = load_model(args.ckpt)
    paradigm = "ar" if isinstance(model, ar_mod.ArModel) else "fm"
    if args.paradigm and args.paradigm != paradigm:
        raise config_mod.ConfigError(
            f"checkpoint {args.ckpt} holds a {paradigm} model, not {args.paradigm}")
    world = model.world
    refs = _eval_conditions(cfg, world, args.n)
    caps = np.stack([s.caption for s in refs])
    ctrls = [s.controls for s in refs]
    n_frames = world.n_frames(cfg["eval"]["seconds"])
    if args.max_frames:
        n_frames = args.max_frames
    ar_sampler, fm_sampler = _samplers_from(cfg)
    os.makedirs(args.out, exist_ok=True)
    rng = SeededRng(cfg["eval"]["seed"] + 1)
    if paradigm == "ar":
        grids = ar_mod.sample(model, caps, ctrls, ar_sampler, rng, n_frames=n_frames)
        for i, g in enumerate(grids):
            save_grid(g, os.path.join(args.out, f"gen_{i:05d}.tokens.pft"))
    else:
        trace = []
        lats = fm_mod.sample(model, caps, ctrls, fm_sampler, rng, n_frames, trace=trace)
        for i, lat in enumerate(lats):
            save_tensor(lat, os.path.join(args.out, f"gen_{i:05d}.latent.pft"))
        # euler integrates the whole batch on one grid: the trace holds
        # exactly n_steps rows; dopri5 concatenates one trace per sample
        fm_mod.write_trace(os.path.join(args.out, "trace.csv"), trace)
    print(f"wrote {args.n} generations to {args.out}")
    return 0


def cmd_inpaint(args):
    cfg = config_mod.load_config(args.config, args.overrides)
    model = load_model(args.ckpt)
    world = model.world
    refs = _eval_conditions(cfg, world, args.n)
    n_frames = world.n_frames(cfg["eval"]["seconds"])
    ar_sampler, fm_sampler = _samplers_from(cfg)
    rng = SeededRng(cfg["eval"]["seed"] + 2)
    os.makedirs(args.out, exist_ok=True)
    spans = []
    for i, ref in enumerate(refs):
        if args.mode == "fim":
            s, e = ar_mod.draw_fim_span(world, n_frames, rng)
            out = ar_mod.fim_inpaint(model, ref.tokens, ref.caption, ref.controls,
                                     s, e, ar_sampler, rng)
            save_grid(out, os.path.join(args.out, f"inpaint_{i:05d}.tokens.pft"))
        else:
            if args.mask_policy == "half":
                span = fm_mod.draw_half_mask(n_frames, rng)
            else:
                span = fm_mod.draw_seconds_mask(world, n_frames, rng)
            s, e = span
            fn = fm_mod.zs_inpaint if args.mode == "zs" else fm_mod.sup_inpaint
            if args.mode == "zs":
                out = fn(model, ref.latent, ref.caption, ref.controls, fm_sampler,
                         (s, e), rng)
            else:
                out = fn(model, ref.latent, ref.caption, ref.controls, fm_sampler,
                         rng, span=(s, e))
            save_tensor(out, os.path.join(args.out, f"inpaint_{i:05d}.latent.pft"))
        spans.append((i, s, e))
    with open(os.path.join(args.out, "spans.csv"), "w", encoding="utf-8") as fh:
        fh.write("sample,start_frame,end_frame\n")
        fh.writelines(f"{i},{s},{e}\n" for i, s, e in spans)
    print(f"inpainted {args.n} samples ({args.mode}) into {args.out}")
    return 0


def _eval_model(model, cfg, n):
    world = model.world
    refs = _eval_conditions(cfg, world, n)
    caps = np.stack([s.caption for s in refs])
    ctrls = [s.controls for s in refs]
    n_frames = world.n_frames(cfg["eval"]["seconds"])
    ar_sampler, fm_sampler = _samplers_from(cfg)
    rng = SeededRng(cfg["eval"]["seed"] + 3)
    if isinstance(model, ar_mod.ArModel):
        outs = ar_mod.sample(model, caps, ctrls, ar_sampler, rng, n_frames=n_frames)
    else:
        outs = fm_mod.sample(model, caps, ctrls, fm_sampler, rng, n_frames)
    records = []
    for i, (out, ref) in enumerate(zip(outs, refs)):
        rec = metrics_mod.eval_generation(world, out, ref.controls)
        rec["sample_id"] = f"eval_{i:05d}"
        records.append(rec)
    return records


def cmd_eval(args):
    cfg = config_mod.load_config(args.config, args.overrides)
    model = load_model(args.ckpt)
    records = _eval_model(model, cfg, args.n or cfg["eval"]["n_samples"])
    metrics_mod.write_metrics_csv(args.out, records)
    means = {k: float(np.mean([r[k] for r in records]))
             for k in ("chord_iou", "beat_f1", "melody_sim")}
    print(f"wrote {len(records)} rows to {args.out}; means: "
          f"chord_iou {means['chord_iou']:.3f} beat_f1 {means['beat_f1']:.3f} "
          f"melody_sim {means['melody_sim']:.3f}")
    return 0


def cmd_bench(args):
    cfg = config_mod.load_config(args.config, args.overrides)
    b = cfg["bench"]
    plan = bench_mod.BenchPlan(
        batch_sizes=b["batch_sizes"], fm_step_counts=b["fm_step_counts"],
        warmup_iters=b["warmup_iters"], measured_iters=b["measured_iters"],
        generation_seconds=b["generation_seconds"])
    ar_model = load_model(args.ckpt_ar) if args.ckpt_ar else None
    fm_model = load_model(args.ckpt_fm) if args.ckpt_fm else None
    rows = bench_mod.run_bench(plan, ar_model=ar_model, fm_model=fm_model,
                               progress=lambda r: print(
                                   f"  {r.paradigm} batch={r.batch} steps={r.steps} "
                                   f"wall={r.wall_s:.3f}s"))
    bench_mod.report(rows, args.out)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def cmd_sweep(args):
    cfg = config_mod.load_config(args.config, args.overrides)
    axes = []
    for spec in args.param:
        if "=" not in spec:
            raise config_mod.ConfigError(f"bad sweep axis {spec!r}")
        key, values = spec.split("=", 1)
        axes.append((key, values.split(",")))
    model = load_model(args.ckpt) if args.ckpt else None
    rows = []
    for combo in itertools.product(*(vals for _, vals in axes)):
        overrides = [f"{key}={val}" for (key, _), val in zip(axes, combo)]
        run_cfg = config_mod.apply_overrides(
            config_mod.load_config(args.config, args.overrides), overrides)
        if args.stage == "sample":
            records = _eval_model(model, run_cfg, args.n)
        else:
            world = config_mod.world_from_config(run_cfg)
            dataset = data_mod.load_dataset(args.data, world)
            trained = _build_model(run_cfg, world, args.paradigm, dataset)
            trainer = train_ar if args.paradigm == "ar" else train_fm
            trainer(trained, config_mod.train_config_from(run_cfg), dataset=dataset)
            records = _eval_model(trained, run_cfg, args.n)
        means = {k: float(np.mean([r[k] for r in records]))
                 for k in ("chord_iou", "beat_f1", "melody_sim")}
        rows.append((combo, means))
        print(f"  {dict(zip((k for k, _ in axes), combo))} -> {means}")
    with open(args.out, "w", encoding="utf-8") as fh:
        head = ",".join(key for key, _ in axes)
        fh.write(f"{head},chord_iou,beat_f1,melody_sim\n")
        for combo, means in rows:
            fh.write(",".join(map(str, combo)) +
                     f",{means['chord_iou']:.6f},{means['beat_f1']:.6f},"
                     f"{means['melody_sim']:.6f}\n")
    print(f"wrote {len(rows)} aggregated rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="arflow",
        description="Dual-paradigm latent sequence generation on a synthetic world")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("print-config", help="print the resolved configuration")
    _add_common(p)
    p.set_defaults(fn=cmd_print_config)

    p = sub.add_parser("gen-data", help="write a dataset manifest")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train one paradigm on a dataset")
    _add_common(p)
    p.add_argument("--paradigm", choices=("ar", "fm"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, help="override train.steps")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="generate from a checkpoint")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--paradigm", choices=("ar", "fm"),
                   help="optional check against the checkpoint's paradigm")
    p.add_argument("--solver", choices=("euler", "dopri5"))
    p.add_argument("--steps", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--top_k", type=int)
    p.add_argument("--top_p", type=float)
    p.add_argument("--cfg_coef", type=float)
    p.add_argument("--max_frames", type=int)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("inpaint", help="regenerate a masked span")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("zs", "sup", "fim"), required=True)
    p.add_argument("--mask-policy", choices=("seconds", "half"), default="seconds")
    p.add_argument("--n", type=int, default=4)
    p.set_defaults(fn=cmd_inpaint)

    p = sub.add_parser("eval", help="sample and score adherence metrics")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="throughput / latency sweep")
    _add_common(p)
    p.add_argument("--ckpt-ar")
    p.add_argument("--ckpt-fm")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("sweep", help="grid of config overrides, one CSV")
    _add_common(p)
    p.add_argument("--stage", choices=("sample", "train"), default="sample")
    p.add_argument("--param", action="append", required=True,
                   metavar="SECTION.KEY=V1,V2,...")
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--paradigm", choices=("ar", "fm"), default="ar")
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # single-line machine-parseable failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
