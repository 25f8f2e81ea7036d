"""PSNR, SSIM, and endpoint error with validity masking, plus a dataset-level
evaluation harness reporting mean and standard deviation over repeated runs.

Black-edge pixels (mask False) are excluded from every statistic. PSNR is
averaged over RGB channels; SSIM runs on Rec.601 luma with the canonical
11x11 Gaussian window (sigma 1.5, K1=0.01, K2=0.03, dynamic range 1).
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from . import fileio
from .diffusion import denormalize_field, normalize_field
from .errors import DegenerateMaskError, ShapeError
from .field import (
    ImageBuffer,
    MotionField,
    ValidMask,
    downsample_image,
    remap,
    upsample_field,
)
from .synth import DatasetSample

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def psnr(a: ImageBuffer, b: ImageBuffer, mask: ValidMask) -> float:
    """Peak signal-to-noise ratio in dB over masked pixels, capped at 99."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"image shapes {a.data.shape} and {b.data.shape} differ")
    if mask.data.shape != a.data.shape[:2]:
        raise ShapeError("mask shape does not match images")
    if mask.count() == 0:
        raise DegenerateMaskError("psnr over an empty mask")
    diff = (a.data - b.data)[mask.data]
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def _luma(img: ImageBuffer) -> np.ndarray:
    if img.channels == 1:
        return img.data[:, :, 0]
    r, g, b = LUMA_WEIGHTS
    return r * img.data[:, :, 0] + g * img.data[:, :, 1] + b * img.data[:, :, 2]


def gaussian_kernel_1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _valid_filter(img: np.ndarray, k1d: np.ndarray) -> np.ndarray:
    """Separable 'valid'-mode correlation with an outer-product kernel."""
    from numpy.lib.stride_tricks import sliding_window_view

    n = len(k1d)
    rows = sliding_window_view(img, n, axis=0) @ k1d
    return sliding_window_view(rows, n, axis=1) @ k1d


def ssim(a: ImageBuffer, b: ImageBuffer, mask: ValidMask) -> float:
    """Single-scale SSIM on luma, averaged over windows with valid centers."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"image shapes {a.data.shape} and {b.data.shape} differ")
    if min(a.height, a.width) < SSIM_WINDOW:
        raise ShapeError(
            f"image {a.height}x{a.width} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )
    if mask.data.shape != a.data.shape[:2]:
        raise ShapeError("mask shape does not match images")
    la, lb = _luma(a), _luma(b)
    k = gaussian_kernel_1d()
    mu_a = _valid_filter(la, k)
    mu_b = _valid_filter(lb, k)
    var_a = _valid_filter(la * la, k) - mu_a * mu_a
    var_b = _valid_filter(lb * lb, k) - mu_b * mu_b
    cov = _valid_filter(la * lb, k) - mu_a * mu_b
    c1 = SSIM_K1 * SSIM_K1
    c2 = SSIM_K2 * SSIM_K2
    ssim_map = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    )
    half = SSIM_WINDOW // 2
    centers = mask.data[half:-half, half:-half]
    if not centers.any():
        raise DegenerateMaskError("ssim has no valid window centers")
    return float(ssim_map[centers].mean())


def epe(pred: MotionField, gt: MotionField, mask: ValidMask) -> float:
    """Mean endpoint error in pixels over masked pixels."""
    if pred.data.shape != gt.data.shape:
        raise ShapeError(f"field shapes {pred.data.shape} and {gt.data.shape} differ")
    if mask.data.shape != pred.data.shape[:2]:
        raise ShapeError("mask shape does not match fields")
    if mask.count() == 0:
        raise DegenerateMaskError("epe over an empty mask")
    d = pred.data - gt.data
    return float(np.sqrt(d[:, :, 0] ** 2 + d[:, :, 1] ** 2)[mask.data].mean())


@dataclass
class EvalReport:
    """Per-sample metrics plus run-level aggregates (mean/std across runs)."""

    run_count: int
    samples: list = dataclass_field(default_factory=list)
    runs: list = dataclass_field(default_factory=list)
    aggregate: dict = dataclass_field(default_factory=dict)
    failed: list = dataclass_field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "run_count": self.run_count,
            "samples": self.samples,
            "runs": self.runs,
            "aggregate": self.aggregate,
            "failed": self.failed,
        }

    def to_csv(self, method: str = "rsgyro") -> str:
        """One-row table mirroring the usual benchmark layout."""
        lines = ["method,psnr_db,ssim,epe_px"]
        agg = self.aggregate
        lines.append(
            f"{method},"
            f"{agg['psnr_db']['mean']:.4f}({agg['psnr_db']['std']:.4f}),"
            f"{agg['ssim']['mean']:.4f}({agg['ssim']['std']:.4f}),"
            f"{agg['epe_px']['mean']:.4f}({agg['epe_px']['std']:.4f})"
        )
        return "\n".join(lines) + "\n"


def run_seed(base_seed: int, sample_index: int, run: int) -> int:
    """Deterministic per-(sample, run) sampling seed."""
    ss = np.random.SeedSequence([base_seed, sample_index, run])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _eval_one(task: dict) -> dict:
    """Worker: run the predictor on one sample for every run."""
    root = task["root"]
    sample = DatasetSample.from_row(task["row"])
    predictor = task["predictor"]
    norm_scale = float(task["row"]["norm_scale"])
    mres = int(task["row"]["model_resolution"])

    i_rs = fileio.load_image(os.path.join(root, sample.rs_path))
    i_gs = fileio.load_image(os.path.join(root, sample.gs_path))
    g_gt = fileio.read_flow(os.path.join(root, sample.flow_path))
    _, mask_gt = remap(i_rs, g_gt)
    cond = downsample_image(i_rs, mres, mres)

    per_run = []
    try:
        for r in range(task["runs"]):
            tensor = predictor(cond, sample, run_seed(task["base_seed"], task["index"], r), r)
            pred = denormalize_field(np.asarray(tensor, dtype=np.float64), norm_scale)
            pred = upsample_field(pred, i_rs.width, i_rs.height)
            corrected, _ = remap(i_rs, pred)
            corrected = fileio.quantize_image(corrected)
            per_run.append(
                {
                    "psnr_db": psnr(corrected, i_gs, mask_gt),
                    "ssim": ssim(corrected, i_gs, mask_gt),
                    "epe_px": epe(pred, g_gt, mask_gt),
                }
            )
    except Exception as err:  # predictor failure: report, exclude from aggregates
        return {"id": sample.id, "error": f"{type(err).__name__}: {err}", "runs": None}
    return {"id": sample.id, "error": None, "runs": per_run}


def evaluate(
    manifest_path,
    predictor,
    runs: int = 10,
    base_seed: int = 0,
    workers: int = 1,
) -> EvalReport:
    """Evaluate a predictor over a dataset manifest.

    ``predictor(cond, sample, seed, run) -> (2, h, w) normalized field tensor``
    receives the RS image at model resolution, the manifest row, a
    deterministic per-(sample, run) seed, and the run index. Each prediction
    is denormalized,
    upsampled to native size, used to correct the RS image (quantized to the
    8-bit grid, as a saved PNG would be), and scored on the ground-truth
    validity mask. Aggregates are the mean and standard deviation across
    run-level means, reported per the 10-iteration protocol.
    """
    if runs < 1:
        raise ValueError(f"runs must be >= 1, got {runs}")
    rows = fileio.read_manifest(manifest_path)
    root = fileio.manifest_dir(manifest_path)
    tasks = [
        {
            "root": root,
            "row": row,
            "index": i,
            "runs": runs,
            "base_seed": base_seed,
            "predictor": predictor,
        }
        for i, row in enumerate(rows)
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_eval_one, tasks))
    else:
        results = [_eval_one(t) for t in tasks]

    report = EvalReport(run_count=runs)
    ok = [r for r in results if r["error"] is None]
    report.failed = [{"id": r["id"], "error": r["error"]} for r in results if r["error"]]
    metrics = ("psnr_db", "ssim", "epe_px")
    for r in ok:
        report.samples.append(
            {"id": r["id"], **{m: float(np.mean([run[m] for run in r["runs"]])) for m in metrics}}
        )
    if ok:
        for run_idx in range(runs):
            report.runs.append(
                {m: float(np.mean([r["runs"][run_idx][m] for r in ok])) for m in metrics}
            )
        report.aggregate = {
            m: {
                "mean": float(np.mean([run[m] for run in report.runs])),
                "std": float(np.std([run[m] for run in report.runs])),
            }
            for m in metrics
        }
    return report


class OraclePredictor:
    """Returns each sample's stored ground-truth field (normalized)."""

    def __init__(self, manifest_path, norm_scale: float):
        self.root = fileio.manifest_dir(manifest_path)
        self.norm_scale = norm_scale

    def __call__(self, cond, sample, seed, run):
        g = fileio.read_flow(os.path.join(self.root, sample.flow_path))
        return normalize_field(g, self.norm_scale)


class ZeroPredictor:
    """Always reports a zero field at model resolution (the no-op baseline)."""

    def __call__(self, cond, sample, seed, run):
        return np.zeros((2, cond.height, cond.width))


class FlowDirPredictor:
    """Reads per-run flow files written by an external model.

    Looks for ``<flow_dir>/run{r:02d}/<id>.flo`` and falls back to
    ``<flow_dir>/<id>.flo`` when the per-run file is absent.
    """

    def __init__(self, flow_dir, norm_scale: float):
        self.flow_dir = flow_dir
        self.norm_scale = norm_scale

    def __call__(self, cond, sample, seed, run):
        candidate = os.path.join(self.flow_dir, f"run{run:02d}", f"{sample.id}.flo")
        if not os.path.exists(candidate):
            candidate = os.path.join(self.flow_dir, f"{sample.id}.flo")
        g = fileio.read_flow(candidate)
        return normalize_field(g, self.norm_scale)
