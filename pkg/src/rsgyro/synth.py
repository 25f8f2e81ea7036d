"""Synthetic gyro traces and self-consistent (RS, GS, field) training triplets.

The synthesis direction makes the ground-truth label exact by construction:
the RS image is rendered by warping a source with the inverted field, and the
GS image is then *defined* as the field-corrected RS image, so
``remap(I_RS, G) == I_GS`` holds for every emitted pair regardless of the
inversion residual. GS images are recomputed from the quantized RS PNG and
the float32 flow actually written to disk, so the identity survives file
round trips to within output quantization.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import NonContractiveFieldError
from .field import (
    ImageBuffer,
    MotionField,
    RowTiming,
    ValidMask,
    build_igf,
    downsample_image,
    invert_field,
    remap,
    resize_image,
    row_rotations,
    upsample_field,
)
from . import fileio
from .diffusion import DEFAULT_NORM_SCALE
from .rotation import CameraIntrinsics, GyroSample, GyroTrace

log = logging.getLogger(__name__)

PATTERN_KINDS = ("constant", "sinusoid", "smooth-noise")
DEFAULT_READOUT_NS = 30_000_000  # 30 ms top-to-bottom readout
DEFAULT_RATE_HZ = 200.0
DEFAULT_MODEL_RESOLUTION = 64
DEFAULT_MAX_ANGLE_DEG = 3.0
MAX_SYNTH_ATTEMPTS = 20


@dataclass(frozen=True)
class MotionPattern:
    """Parameters of one synthetic camera-shake waveform.

    ``amplitude`` bounds |omega| per axis in rad/s; ``frequency`` applies to
    the sinusoid kind, ``smoothness`` is the low-pass cutoff (Hz) of the
    smooth-noise kind, and ``seed`` only affects smooth-noise.
    """

    kind: str
    amplitude: tuple
    frequency: float = 0.0
    smoothness: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PATTERN_KINDS:
            raise ValueError(f"unknown pattern kind {self.kind!r}")
        amp = np.asarray(self.amplitude, dtype=np.float64)
        if amp.shape != (3,) or not np.all(np.isfinite(amp)) or np.any(amp < 0.0):
            raise ValueError(f"amplitude must be three finite values >= 0, got {self.amplitude}")
        object.__setattr__(self, "amplitude", tuple(float(a) for a in amp))
        if self.kind == "sinusoid" and not self.frequency > 0.0:
            raise ValueError(f"sinusoid needs frequency > 0, got {self.frequency}")
        if self.kind == "smooth-noise" and not self.smoothness > 0.0:
            raise ValueError(f"smooth-noise needs a cutoff > 0, got {self.smoothness}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "amplitude": list(self.amplitude),
            "frequency": self.frequency,
            "smoothness": self.smoothness,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MotionPattern":
        return cls(
            kind=d["kind"],
            amplitude=tuple(d["amplitude"]),
            frequency=float(d.get("frequency", 0.0)),
            smoothness=float(d.get("smoothness", 0.0)),
            seed=int(d.get("seed", 0)),
        )


@dataclass(frozen=True)
class DatasetSample:
    """One manifest row: file paths plus the generating parameters."""

    id: str
    rs_path: str
    gs_path: str
    flow_path: str
    trace_path: str
    intrinsics: CameraIntrinsics
    pattern: MotionPattern
    is_identity_pair: bool

    @classmethod
    def from_row(cls, row: dict) -> "DatasetSample":
        return cls(
            id=row["id"],
            rs_path=row["rs_path"],
            gs_path=row["gs_path"],
            flow_path=row["flow_path"],
            trace_path=row["trace_path"],
            intrinsics=fileio.intrinsics_from_dict(row["intrinsics"]),
            pattern=MotionPattern.from_dict(row["pattern"]),
            is_identity_pair=bool(row["is_identity_pair"]),
        )


def gen_gyro_trace(pattern: MotionPattern, duration_ns: int, rate_hz: float) -> GyroTrace:
    """Sample the pattern waveform at ``rate_hz`` over [0, duration_ns].

    Deterministic given the pattern seed. A final sample at exactly
    ``duration_ns`` is appended when the regular grid falls short, so the
    trace always spans its full duration.
    """
    if duration_ns <= 0:
        raise ValueError(f"duration_ns must be positive, got {duration_ns}")
    duration_s = duration_ns * 1e-9
    if rate_hz < 2.0 / duration_s:
        raise ValueError(
            f"rate {rate_hz} Hz gives fewer than 2 samples over {duration_s} s"
        )
    n = int(math.floor(duration_s * rate_hz)) + 1
    times_ns = np.array([round(k * 1e9 / rate_hz) for k in range(n)], dtype=np.int64)
    t_s = times_ns * 1e-9
    amp = np.asarray(pattern.amplitude)

    if pattern.kind == "constant":
        values = np.tile(amp, (n, 1))
    elif pattern.kind == "sinusoid":
        values = amp[None, :] * np.sin(2.0 * math.pi * pattern.frequency * t_s)[:, None]
    else:
        values = _smooth_noise(pattern, n, rate_hz)

    samples = [GyroSample(int(t), tuple(v)) for t, v in zip(times_ns, values)]
    if times_ns[-1] < duration_ns:
        if pattern.kind == "sinusoid":
            tail = amp * math.sin(2.0 * math.pi * pattern.frequency * duration_s)
        elif pattern.kind == "constant":
            tail = amp
        else:
            tail = values[-1]
        samples.append(GyroSample(int(duration_ns), tuple(tail)))
    return GyroTrace(samples, duration_ns)


def _smooth_noise(pattern: MotionPattern, n: int, rate_hz: float) -> np.ndarray:
    rng = np.random.default_rng(pattern.seed)
    white = rng.standard_normal((n, 3))
    spectrum = np.fft.rfft(white, axis=0)
    freqs = np.fft.rfftfreq(n, d=1.0 / rate_hz)
    spectrum[freqs > pattern.smoothness] = 0.0
    sig = np.fft.irfft(spectrum, n=n, axis=0)
    peak = np.abs(sig).max(axis=0)
    amp = np.asarray(pattern.amplitude)
    scale = np.where(peak > 0.0, amp / np.where(peak > 0.0, peak, 1.0), 0.0)
    return sig * scale[None, :]


def synth_pair(
    src: ImageBuffer,
    k: CameraIntrinsics,
    trace: GyroTrace,
    timing: RowTiming,
    invert_iters: int = 10,
    invert_tol: float = 1e-3,
) -> tuple[ImageBuffer, ImageBuffer, MotionField, ValidMask]:
    """Render a self-consistent (I_RS, I_GS, G, mask) triplet from a source.

    G corrects RS toward the reference-row pose; I_RS is the source warped
    with the inverse field and I_GS is remap(I_RS, G) by definition. The mask
    is the conjunction of both remap masks.
    """
    if (src.width, src.height) != (k.width, k.height):
        raise ValueError(
            f"source {src.width}x{src.height} does not match intrinsics "
            f"{k.width}x{k.height}"
        )
    rows = row_rotations(trace, timing, src.height)
    g, _ = build_igf(k, rows, src.width, src.height)
    g_inv = invert_field(g, iters=invert_iters, tol=invert_tol)
    i_rs, mask_rs = remap(src, g_inv)
    i_gs, mask_gs = remap(i_rs, g)
    return i_rs, i_gs, g, mask_rs & mask_gs


def max_row_angle_deg(rows: list) -> float:
    return math.degrees(max(r.angle() for r in rows))


def default_intrinsics(width: int, height: int) -> CameraIntrinsics:
    return CameraIntrinsics(
        fx=float(width), fy=float(width), cx=width / 2.0, cy=height / 2.0,
        width=width, height=height,
    )


def make_source_image(seed: int, width: int, height: int) -> ImageBuffer:
    """Procedural smooth natural-looking RGB test image.

    Layered low-frequency noise plus soft-edged bands and ellipses; smooth
    enough to survive a double bilinear resample at ~sub-pixel error, with
    enough straight structure to expose rolling-shutter skew.
    """
    from .field import _bilinear_resize  # local import avoids a public helper

    rng = np.random.default_rng(seed)
    img = np.zeros((height, width, 3))
    for cell, gain in ((24, 0.5), (8, 0.2)):
        gh = max(height // cell, 2) + 1
        gw = max(width // cell, 2) + 1
        img += gain * _bilinear_resize(rng.standard_normal((gh, gw, 3)), width, height)
    img = 0.5 + 0.35 * img / max(np.abs(img).max(), 1e-9)

    xg, yg = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    for _ in range(6):
        # soft-edged straight band at a random orientation and width
        theta = rng.uniform(0.0, math.pi)
        nx, ny = math.cos(theta), math.sin(theta)
        c = nx * rng.uniform(0, width) + ny * rng.uniform(0, height)
        half_w = rng.uniform(2.0, 12.0)
        d = np.abs(nx * xg + ny * yg - c)
        soft = np.clip((half_w - d) / 1.5 + 0.5, 0.0, 1.0)
        img += (soft * rng.uniform(-0.3, 0.3))[:, :, None] * rng.uniform(0.5, 1.0, size=3)
    for _ in range(3):
        cx, cy = rng.uniform(0, width), rng.uniform(0, height)
        ax, ay = rng.uniform(8, width / 3), rng.uniform(8, height / 3)
        d = np.sqrt(((xg - cx) / ax) ** 2 + ((yg - cy) / ay) ** 2)
        soft = np.clip((1.0 - d) / 0.05, 0.0, 1.0)
        img += (soft * rng.uniform(-0.25, 0.25))[:, :, None] * rng.uniform(0.5, 1.0, size=3)
    return ImageBuffer(np.clip(img, 0.0, 1.0))


def _draw_pattern(rng: np.random.Generator, kinds, max_angle_deg: float, readout_s: float) -> MotionPattern:
    """Draw pattern parameters whose total rotation stays under the cap."""
    kind = kinds[int(rng.integers(len(kinds)))]
    angle_rad = math.radians(rng.uniform(0.3, max_angle_deg))
    direction = np.abs(rng.standard_normal(3))
    direction /= max(np.linalg.norm(direction), 1e-9)
    if kind == "constant":
        amp = direction * angle_rad / readout_s
        return MotionPattern(kind, tuple(amp))
    if kind == "sinusoid":
        freq = float(rng.uniform(1.0, 5.0))
        # peak-to-peak integrated angle of a*sin(2 pi f t) is a/(pi f)
        amp = direction * angle_rad * math.pi * freq
        return MotionPattern(kind, tuple(amp), frequency=freq)
    cutoff = float(rng.uniform(2.0, 20.0))
    amp = direction * angle_rad / readout_s
    return MotionPattern(
        kind, tuple(amp), smoothness=cutoff, seed=int(rng.integers(2**31))
    )


def _zero_pattern() -> MotionPattern:
    return MotionPattern("constant", (0.0, 0.0, 0.0))


def _zero_trace(duration_ns: int) -> GyroTrace:
    return GyroTrace(
        [GyroSample(0, (0.0, 0.0, 0.0)), GyroSample(duration_ns, (0.0, 0.0, 0.0))],
        duration_ns,
    )


def _build_sample(task: dict) -> dict:
    """Worker: synthesize and write one sample; returns its manifest row.

    Fully determined by the task dict, so results do not depend on worker
    count or scheduling.
    """
    out_dir = task["out_dir"]
    sample_id = task["id"]
    cfg = task["cfg"]
    k = fileio.intrinsics_from_dict(cfg["intrinsics"])
    mres = cfg["model_resolution"]
    readout_ns = cfg["readout_ns"]
    timing = RowTiming(readout_ns=readout_ns, t0_ns=0, reference_row=cfg["reference_row"])
    rng = np.random.default_rng(task["seed"])

    src = resize_image(fileio.load_image(task["src_path"]), k.width, k.height)

    if task["identity"]:
        pattern = _zero_pattern()
        trace = _zero_trace(readout_ns)
        rs_q = fileio.quantize_image(src)
        gs = rs_q
        g32 = MotionField.zeros(k.width, k.height)
    else:
        if task["fixed_pattern"] is not None:
            pattern = MotionPattern.from_dict(task["fixed_pattern"])
            attempts = 1
        else:
            attempts = MAX_SYNTH_ATTEMPTS
        last_err = None
        for attempt in range(attempts):
            if task["fixed_pattern"] is None:
                pattern = _draw_pattern(
                    rng, cfg["pattern_kinds"], cfg["max_angle_deg"], readout_ns * 1e-9
                )
            trace = gen_gyro_trace(pattern, readout_ns, cfg["rate_hz"])
            try:
                i_rs, _, g, _ = synth_pair(src, k, trace, timing)
                break
            except NonContractiveFieldError as err:
                last_err = err
        else:
            raise NonContractiveFieldError(
                f"sample {sample_id}: no contractive pattern after {attempts} tries"
            ) from last_err
        # commit to the quantized RS image and float32 flow that reach disk,
        # then define GS from them so the remap identity survives file IO
        rs_q = fileio.quantize_image(i_rs)
        g32 = MotionField(g.data.astype(np.float32).astype(np.float64))
        gs, _ = remap(rs_q, g32)

    paths = {
        "rs_path": f"rs/{sample_id}.png",
        "gs_path": f"gs/{sample_id}.png",
        "flow_path": f"flow/{sample_id}.flo",
        "trace_path": f"trace/{sample_id}.csv",
    }
    fileio.save_image(os.path.join(out_dir, paths["rs_path"]), rs_q)
    fileio.save_image(os.path.join(out_dir, paths["gs_path"]), gs)
    fileio.write_flow(os.path.join(out_dir, paths["flow_path"]), g32)
    fileio.write_trace(os.path.join(out_dir, paths["trace_path"]), trace)

    # model-resolution companions for the trainer, derived from the bytes on disk
    rs_small = downsample_image(rs_q, mres, mres)
    gs_small = downsample_image(fileio.quantize_image(gs), mres, mres)
    g_small = upsample_field(g32, mres, mres)
    fileio.save_image(os.path.join(out_dir, f"rs{mres}/{sample_id}.png"), rs_small)
    fileio.save_image(os.path.join(out_dir, f"gs{mres}/{sample_id}.png"), gs_small)
    fileio.write_flow(os.path.join(out_dir, f"flow{mres}/{sample_id}.flo"), g_small)

    return {
        "id": sample_id,
        **paths,
        "intrinsics": cfg["intrinsics"],
        "pattern": pattern.to_dict(),
        "is_identity_pair": bool(task["identity"]),
        "norm_scale": cfg["norm_scale"],
        "model_resolution": mres,
    }


def list_source_images(src_dir) -> list:
    """Usable image files under ``src_dir``; unreadable files are skipped."""
    from PIL import Image

    out = []
    for name in sorted(os.listdir(src_dir)):
        if not name.lower().endswith((".png", ".jpg", ".jpeg")):
            continue
        path = os.path.join(src_dir, name)
        try:
            with Image.open(path) as img:
                img.verify()
            out.append(path)
        except Exception as err:
            log.warning("skipping unreadable source %s: %s", path, err)
    return out


def synth_dataset(
    src_dir,
    out_dir,
    count: int,
    identity_fraction: float = 0.2,
    seed: int = 0,
    width: int = 600,
    height: int = 800,
    pattern_kinds=PATTERN_KINDS,
    fixed_pattern: MotionPattern | None = None,
    max_angle_deg: float = DEFAULT_MAX_ANGLE_DEG,
    readout_ns: int = DEFAULT_READOUT_NS,
    rate_hz: float = DEFAULT_RATE_HZ,
    reference_row: int = 0,
    model_resolution: int = DEFAULT_MODEL_RESOLUTION,
    norm_scale: float = DEFAULT_NORM_SCALE,
    workers: int = 1,
    intrinsics: CameraIntrinsics | None = None,
) -> list:
    """Write ``count`` samples plus a JSONL manifest; returns the manifest rows.

    Deterministic given (seed, configuration): every per-sample decision is
    drawn up front from one seeded generator and handed to workers, so the
    bytes written are identical for any worker count. ``fixed_pattern`` pins
    every non-identity sample to one motion pattern (single-pattern sets).
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if not 0.0 <= identity_fraction <= 1.0:
        raise ValueError(f"identity_fraction must be in [0, 1], got {identity_fraction}")
    sources = list_source_images(src_dir)
    if not sources:
        raise ValueError(f"no usable source images in {src_dir}")
    k = intrinsics or default_intrinsics(width, height)

    rng = np.random.default_rng(seed)
    n_identity = int(count * identity_fraction + 0.5)
    identity_ids = set(rng.choice(count, size=n_identity, replace=False).tolist()) if n_identity else set()
    src_picks = rng.integers(0, len(sources), size=count)
    sample_seeds = rng.integers(0, 2**63, size=count)

    cfg = {
        "intrinsics": fileio.intrinsics_to_dict(k),
        "pattern_kinds": list(pattern_kinds),
        "max_angle_deg": max_angle_deg,
        "readout_ns": readout_ns,
        "rate_hz": rate_hz,
        "reference_row": reference_row,
        "model_resolution": model_resolution,
        "norm_scale": norm_scale,
    }
    for sub in ("rs", "gs", "flow", "trace", f"rs{model_resolution}",
                f"gs{model_resolution}", f"flow{model_resolution}"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    tasks = [
        {
            "id": f"{i:06d}",
            "out_dir": out_dir,
            "cfg": cfg,
            "seed": int(sample_seeds[i]),
            "src_path": sources[int(src_picks[i])],
            "identity": i in identity_ids,
            "fixed_pattern": fixed_pattern.to_dict() if fixed_pattern else None,
        }
        for i in range(count)
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_build_sample, tasks))
    else:
        rows = [_build_sample(t) for t in tasks]
    rows.sort(key=lambda r: r["id"])
    fileio.write_manifest(os.path.join(out_dir, "manifest.jsonl"), rows)
    return rows
