"""Gyro-driven rolling-shutter toolkit.

Simulates row-wise exposure distortion from gyroscope traces, builds the
dense correction field, synthesizes self-consistent training datasets, runs
x0-parameterized DDIM sampling against pluggable denoisers, and evaluates
corrections with masked PSNR / SSIM / endpoint error.
"""

from .errors import (
    ContractError,
    CoverageError,
    DegenerateMaskError,
    FlowFormatError,
    InvalidTraceError,
    NonContractiveFieldError,
    PointAtInfinityError,
    RangeError,
    ShapeError,
    StepOrderError,
)
from .rotation import (
    CameraIntrinsics,
    GyroSample,
    GyroTrace,
    Homography,
    Rotation,
    apply_homography,
    homography_from_rotation,
    integrate_trace,
    integrate_trace_many,
    rodrigues,
    slerp,
)
from .field import (
    ImageBuffer,
    MotionField,
    RowTiming,
    ValidMask,
    build_igf,
    composition_residual,
    downsample_image,
    invert_field,
    remap,
    resize_image,
    row_rotations,
    sample_field_bilinear,
    upsample_field,
)
from .diffusion import (
    DEFAULT_BETA_END,
    DEFAULT_BETA_START,
    DEFAULT_NORM_SCALE,
    DEFAULT_STEPS,
    DEFAULT_T,
    NoiseSchedule,
    cfg_combine,
    ddim_step,
    denormalize_field,
    fixed_x0_denoiser,
    gaussian_posterior_denoiser,
    loss_mse,
    loss_overall,
    loss_photometric,
    make_schedule,
    normalize_field,
    q_sample,
    sample_field,
    step_subsequence,
)
from .fileio import (
    load_image,
    quantize_image,
    read_flow,
    read_intrinsics,
    read_manifest,
    read_trace,
    save_image,
    write_flow,
    write_intrinsics,
    write_manifest,
    write_trace,
)
from .synth import (
    DatasetSample,
    MotionPattern,
    default_intrinsics,
    gen_gyro_trace,
    make_source_image,
    synth_dataset,
    synth_pair,
)
from .metrics import (
    EvalReport,
    FlowDirPredictor,
    OraclePredictor,
    ZeroPredictor,
    epe,
    evaluate,
    psnr,
    ssim,
)

__version__ = "0.1.0"
