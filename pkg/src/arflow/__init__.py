"""Dual-paradigm latent sequence generation on a seeded synthetic world.

Autoregressive multi-stream token decoding and conditional flow matching
share one tiny hand-backpropagated transformer, one conditioning pipeline,
and one exact evaluation oracle, so the two paradigms can be trained,
sampled, inpainted, and benchmarked under identical conditions.
"""

from .rng import SeededRng, gauss_sample
from .tensorio import load_tensor, save_tensor
from .world import (ControlSet, NormStats, WorldSample, WorldSpec,
                    compute_norm_stats, decode_controls, detokenize,
                    gen_sample, normalize, temporal_blur, tokenize,
                    unnormalize)
from .delay import apply_delay, revert_delay
from .ar import ArModel, ArSamplerConfig, ce_loss, fim_inpaint, fim_prepare
from .fm import (FmModel, FmSamplerConfig, OtPath, dopri5_sample, euler_sample,
                 fm_loss, invert, psi, sup_inpaint, target_field, zs_inpaint)
from .metrics import beat_f1, chord_iou, eval_generation, melody_similarity
from .training import (TrainConfig, load_model, make_ar_model, make_fm_model,
                       save_model, train_ar, train_fm)

__version__ = "0.1.0"
