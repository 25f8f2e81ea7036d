"""Inference: downsample the RS image, run the 8-step deterministic sampler,
denormalize, upsample the field to native size, and write flow files that the
field toolkit's CLI consumes directly.
"""

from __future__ import annotations

import os

import torch
import torch.nn.functional as F

from . import dataio
from .model import UNetDenoiser, gray_like
from .schedule import Schedule, ddim_step, make_schedule, step_subsequence


def sample_normalized_field(
    model: UNetDenoiser,
    condition: torch.Tensor,
    s: Schedule,
    steps: int = 8,
    seed: int = 0,
    w: float = 1.0,
) -> torch.Tensor:
    """Seeded DDIM (eta = 0) draw of a (2, R, R) normalized field."""
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    r = condition.shape[-1]
    x = torch.randn((1, 2, r, r), generator=gen, dtype=torch.float64)
    cond = condition[None].float()
    taus = step_subsequence(s.T, steps)
    with torch.no_grad():
        for i, t in enumerate(taus):
            t_prev = taus[i + 1] if i + 1 < len(taus) else -1
            x0_cond = model(x.float(), torch.tensor([t]), cond).double()
            if w != 1.0:
                x0_uncond = model(x.float(), torch.tensor([t]), gray_like(cond.shape)).double()
                x0_hat = x0_uncond + w * (x0_cond - x0_uncond)
            else:
                x0_hat = x0_cond
            x = ddim_step(x, x0_hat, t, t_prev, 0.0, s)
    return x[0]


def field_to_native(field: torch.Tensor, width: int, height: int) -> torch.Tensor:
    """Bilinear resize of a (2, r, r) pixel field, rescaling displacements."""
    r = field.shape[-1]
    out = F.interpolate(field[None].float(), size=(height, width), mode="bilinear",
                        align_corners=True)[0]
    out[0] *= width / r
    out[1] *= height / r
    return out


def infer_field(model: UNetDenoiser, cfg, rs_native: torch.Tensor, steps: int = 8,
                seed: int = 0) -> torch.Tensor:
    """RS image (3, H, W) -> native-resolution field (2, H, W) in pixels."""
    s = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    r = cfg.resolution
    cond = F.adaptive_avg_pool2d(rs_native[None], (r, r))[0]
    x0 = sample_normalized_field(model, cond, s, steps=steps, seed=seed)
    field_model = (x0 * cfg.norm_scale).float()
    return field_to_native(field_model, rs_native.shape[2], rs_native.shape[1])


def infer_manifest(model: UNetDenoiser, cfg, manifest_path, out_dir, runs: int = 1,
                   steps: int = 8, base_seed: int = 0) -> None:
    """Write per-run flow predictions in the eval harness's directory layout:
    out_dir/run{r:02d}/<id>.flo.
    """
    rows = dataio.read_manifest(manifest_path)
    root = dataio.manifest_dir(manifest_path)
    for run in range(runs):
        run_dir = os.path.join(out_dir, f"run{run:02d}")
        os.makedirs(run_dir, exist_ok=True)
        for i, row in enumerate(rows):
            rs = dataio.load_png(os.path.join(root, row["rs_path"]))
            seed = base_seed * 1_000_003 + i * 1_009 + run
            field = infer_field(model, cfg, rs, steps=steps, seed=seed)
            dataio.write_flow(os.path.join(run_dir, f"{row['id']}.flo"), field)
