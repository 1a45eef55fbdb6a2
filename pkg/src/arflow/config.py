"""Run configuration: INI-style sections of key=value pairs.

Every key is declared in the schema below with its type and default;
unknown sections or keys are rejected, so `print-config` output is the
complete reference and re-parses to an equivalent configuration.
"""

from __future__ import annotations

import configparser
import io

from .training import TrainConfig
from .world import WorldSpec


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "world": {
        "seed": (int, 0),
        "frame_rate": (float, 50.0),
        "latent_dim": (int, 8),
        "n_codebooks": (int, 4),
        "codebook_size": (int, 32),
        "chord_vocab": (int, 12),
        "melody_vocab": (int, 16),
        "beat_period": (int, 10),
        "noise_std": (float, 0.05),
    },
    "model": {
        "n_blocks": (int, 4),
        "model_dim": (int, 128),
        "n_heads": (int, 4),
        "ff_dim": (int, 512),
        "max_len": (int, 0),          # 0 = derive from segment length
        "stream_dim": (int, 8),
        "sigma_min": (float, 1e-4),
        "seed": (int, 0),
    },
    "train": {
        "steps": (int, 2000),
        "batch_size": (int, 32),
        "segment_seconds": (float, 10.0),
        "peak_lr": (float, 1e-4),
        "warmup_steps": (int, 4000),
        "weight_decay": (float, 0.01),
        "cond_drop_p": (float, 0.5),
        "cond_drop_all": (float, 0.1),
        "seed": (int, 0),
        "fim": (_bool, False),
        "inpaint_ft": (_bool, False),
    },
    "ar_sampler": {
        "temperature": (float, 1.0),
        "top_k": (int, 0),            # 0 = unset
        "top_p": (float, 0.0),        # 0 = unset
        "cfg_coef": (float, 3.0),
    },
    "fm_sampler": {
        "solver": (str, "euler"),
        "n_steps": (int, 50),
        "rtol": (float, 1e-3),
        "atol": (float, 1e-5),
        "max_evals": (int, 1000),
        "cfg_coef": (float, 3.0),
    },
    "data": {
        "n_samples": (int, 512),
        "seconds": (float, 10.0),
        "seed": (int, 0),
    },
    "bench": {
        "batch_sizes": (_int_list, (1, 2, 4, 8, 16, 32)),
        "fm_step_counts": (_int_list, (10, 25, 50, 200)),
        "warmup_iters": (int, 3),
        "measured_iters": (int, 10),
        "generation_seconds": (float, 2.0),
    },
    "eval": {
        "n_samples": (int, 50),
        "seconds": (float, 10.0),
        "seed": (int, 7),
    },
}


def default_config() -> dict[str, dict]:
    return {sec: {k: spec[1] for k, spec in keys.items()} for sec, keys in SCHEMA.items()}


def parse_config(text: str, base: dict | None = None) -> dict[str, dict]:
    """Parse INI text over the defaults; unknown keys are errors."""
    cfg = base or default_config()
    parser = configparser.ConfigParser()
    parser.read_string(text)
    for sec in parser.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown config section [{sec}]")
        for key, raw in parser.items(sec):
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {sec}.{key}")
            kind = SCHEMA[sec][key][0]
            try:
                cfg[sec][key] = kind(raw)
            except (ValueError, ConfigError) as exc:
                raise ConfigError(f"bad value for {sec}.{key}: {raw!r} ({exc})") from exc
    return cfg


def apply_overrides(cfg: dict, overrides: list[str]) -> dict[str, dict]:
    """Apply --set section.key=value pairs."""
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value: {item!r}")
        target, raw = item.split("=", 1)
        sec, key = target.split(".", 1)
        if sec not in SCHEMA or key not in SCHEMA[sec]:
            raise ConfigError(f"unknown key {sec}.{key}")
        kind = SCHEMA[sec][key][0]
        cfg[sec][key] = kind(raw)
    return cfg


def dump_config(cfg: dict) -> str:
    out = io.StringIO()
    for sec, keys in cfg.items():
        out.write(f"[{sec}]\n")
        for key, value in keys.items():
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            out.write(f"{key} = {value}\n")
        out.write("\n")
    return out.getvalue()


def load_config(path: str | None, overrides: list[str] | None = None) -> dict[str, dict]:
    cfg = default_config()
    if path:
        with open(path, encoding="utf-8") as fh:
            cfg = parse_config(fh.read(), cfg)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def world_from_config(cfg: dict) -> WorldSpec:
    return WorldSpec(**cfg["world"])


def train_config_from(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        steps=t["steps"], batch_size=t["batch_size"],
        segment_seconds=t["segment_seconds"], peak_lr=t["peak_lr"],
        warmup_steps=t["warmup_steps"], weight_decay=t["weight_decay"],
        cond_drop_p=t["cond_drop_p"], cond_drop_all=t["cond_drop_all"],
        seed=t["seed"], fim=t["fim"], inpaint_ft=t["inpaint_ft"])
