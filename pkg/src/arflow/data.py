"""Dataset manifest: a directory of PFT1 tensors plus a tab-separated index.

Each index line maps a sample id to its tensor files, duration, and caption
token ids:

    id <TAB> latent <TAB> tokens <TAB> chords <TAB> melody <TAB> drums
       <TAB> beats <TAB> duration <TAB> caption ids (space separated)

File names are relative to the manifest directory.
"""

from __future__ import annotations

import os

import numpy as np

from .tensorio import TensorIOError, load_grid, load_tensor, save_grid, save_tensor
from .world import ControlSet, WorldSample, WorldSpec

INDEX_NAME = "index.tsv"


def save_dataset(path: str, samples: list[WorldSample]) -> None:
    os.makedirs(path, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        sid = f"sample_{i:05d}"
        files = {
            "latent": f"{sid}.latent.pft",
            "tokens": f"{sid}.tokens.pft",
            "chords": f"{sid}.chords.pft",
            "melody": f"{sid}.melody.pft",
            "drums": f"{sid}.drums.pft",
            "beats": f"{sid}.beats.pft",
        }
        save_tensor(s.latent, os.path.join(path, files["latent"]))
        save_grid(s.tokens, os.path.join(path, files["tokens"]))
        save_grid(s.controls.chords, os.path.join(path, files["chords"]))
        save_grid(s.controls.melody, os.path.join(path, files["melody"]))
        save_grid(s.controls.drums, os.path.join(path, files["drums"]))
        save_grid(s.controls.beat_flags, os.path.join(path, files["beats"]))
        caption = " ".join(str(int(t)) for t in s.caption)
        lines.append("\t".join(
            [sid, files["latent"], files["tokens"], files["chords"],
             files["melody"], files["drums"], files["beats"],
             repr(float(s.duration)), caption]))
    with open(os.path.join(path, INDEX_NAME), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path: str, world: WorldSpec) -> list[WorldSample]:
    index = os.path.join(path, INDEX_NAME)
    if not os.path.exists(index):
        raise TensorIOError(f"no dataset index at {index}")
    samples = []
    with open(index, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 9:
                raise TensorIOError(f"malformed index line: {line[:80]!r}")
            (_, f_latent, f_tokens, f_chords, f_melody, f_drums, f_beats,
             duration, caption) = parts
            controls = ControlSet(
                chords=load_grid(os.path.join(path, f_chords)),
                melody=load_grid(os.path.join(path, f_melody)),
                drums=load_grid(os.path.join(path, f_drums)),
                beat_flags=load_grid(os.path.join(path, f_beats)),
                source_rate=world.frame_rate,
            )
            samples.append(WorldSample(
                caption=np.array([int(t) for t in caption.split()], dtype=np.int64),
                controls=controls,
                latent=load_tensor(os.path.join(path, f_latent)),
                tokens=load_grid(os.path.join(path, f_tokens)),
                duration=float(duration),
            ))
    return samples
