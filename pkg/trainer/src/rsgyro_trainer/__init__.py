"""Desk-scale diffusion denoiser for gyro rolling-shutter fields.

Consumes datasets, test vectors, and evaluation tooling from the field
toolkit purely through files and its CLI; reimplements the scheduler math
independently and cross-checks it against exported test vectors.
"""

from .attention import ConfigurationError, PatchAttention, PatchAttentionConfig
from .model import UNetDenoiser, as_denoiser_fn, build_denoiser
from .schedule import Schedule, check_vectors, ddim_step, make_schedule, q_sample, step_subsequence
from .train import ConsistencyError, ToyDataset, TrainConfig, load_checkpoint, load_dataset, train
from .infer import field_to_native, infer_field, infer_manifest, sample_normalized_field

__version__ = "0.1.0"
