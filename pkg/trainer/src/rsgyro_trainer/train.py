"""Training loop: x0 prediction with the dynamically weighted MSE+photometric
loss, condition dropout for classifier-free guidance, and CSV loss logging.
"""

from __future__ import annotations

import csv
import os
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F

from . import dataio
from .model import GRAY_CONDITION, UNetDenoiser, build_denoiser
from .schedule import Schedule, check_vectors, make_schedule, q_sample


class ConsistencyError(RuntimeError):
    """Manifest and training configuration disagree on shared constants."""


@dataclass
class TrainConfig:
    lr: float = 3e-4
    batch_size: int = 8
    steps: int = 2000
    resolution: int = 64
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    norm_scale: float = 8.0
    cond_dropout: float = 0.1
    seed: int = 0
    base_width: int = 32
    num_patches: int = 8
    embed_dim: int = 64
    heads: int = 4
    vectors_path: str | None = None


@dataclass
class ToyDataset:
    conditions: torch.Tensor  # (N, 3, R, R) RS images
    targets: torch.Tensor     # (N, 2, R, R) normalized fields
    gs: torch.Tensor          # (N, 3, R, R) GS images
    identity: torch.Tensor    # (N,) bool
    ids: list = field(default_factory=list)


def load_dataset(manifest_path, cfg: TrainConfig) -> ToyDataset:
    rows = dataio.read_manifest(manifest_path)
    if not rows:
        raise ConsistencyError(f"empty manifest {manifest_path}")
    root = dataio.manifest_dir(manifest_path)
    r = cfg.resolution
    conds, targets, gss, identity, ids = [], [], [], [], []
    for row in rows:
        if int(row["model_resolution"]) != r:
            raise ConsistencyError(
                f"manifest model_resolution {row['model_resolution']} != config {r}"
            )
        if float(row["norm_scale"]) != cfg.norm_scale:
            raise ConsistencyError(
                f"manifest norm_scale {row['norm_scale']} != config {cfg.norm_scale}"
            )
        sid = row["id"]
        conds.append(dataio.load_png(os.path.join(root, f"rs{r}", f"{sid}.png")))
        gss.append(dataio.load_png(os.path.join(root, f"gs{r}", f"{sid}.png")))
        flow = dataio.read_flow(os.path.join(root, f"flow{r}", f"{sid}.flo"))
        targets.append(flow / cfg.norm_scale)
        identity.append(bool(row["is_identity_pair"]))
        ids.append(sid)
    return ToyDataset(
        conditions=torch.stack(conds),
        targets=torch.stack(targets),
        gs=torch.stack(gss),
        identity=torch.tensor(identity),
        ids=ids,
    )


def warp_by_field(images: torch.Tensor, fields_px: torch.Tensor):
    """Differentiable backward warp: out(p) = img(p + G(p)), bilinear.

    ``fields_px`` is (B, 2, H, W) in pixels. Returns (warped, valid) where
    valid marks samples whose position stayed inside the image.
    """
    b, _, h, w = images.shape
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=images.dtype), torch.arange(w, dtype=images.dtype),
        indexing="ij",
    )
    sx = xs[None] + fields_px[:, 0]
    sy = ys[None] + fields_px[:, 1]
    valid = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    grid = torch.stack([2.0 * sx / (w - 1) - 1.0, 2.0 * sy / (h - 1) - 1.0], dim=-1)
    warped = F.grid_sample(images, grid, mode="bilinear", padding_mode="zeros",
                           align_corners=True)
    return warped, valid


def compute_losses(
    model: UNetDenoiser,
    batch_cond: torch.Tensor,
    batch_x0: torch.Tensor,
    batch_gs: torch.Tensor,
    s: Schedule,
    cfg: TrainConfig,
    gen: torch.Generator,
):
    """One training step's loss: l_mse + detach(l_mse/l_pl) * l_pl."""
    b = batch_x0.shape[0]
    t = torch.randint(0, cfg.T, (b,), generator=gen)
    eps = torch.randn(batch_x0.shape, generator=gen)
    x_t = q_sample(batch_x0, t, eps, s)
    drop = torch.rand(b, generator=gen) < cfg.cond_dropout
    cond = batch_cond.clone()
    cond[drop] = GRAY_CONDITION
    x0_hat = model(x_t.float(), t, cond)

    l_mse = F.mse_loss(x0_hat, batch_x0)
    warped, valid = warp_by_field(batch_cond, x0_hat * cfg.norm_scale)
    mask = valid[:, None].float()
    denom = mask.sum().clamp(min=1.0) * batch_gs.shape[1]
    l_pl = (torch.abs(warped - batch_gs) * mask).sum() / denom
    l_pl_val = float(l_pl.detach())
    if l_pl_val > 1e-12:
        weight = (l_mse / l_pl).detach()
        loss = l_mse + weight * l_pl
    else:
        loss = l_mse
    return loss, float(l_mse.detach()), l_pl_val


def train(manifest_path, cfg: TrainConfig, checkpoint_path, loss_csv_path) -> list:
    """Train a denoiser; returns the per-step loss history."""
    if cfg.vectors_path:
        check_vectors(cfg.vectors_path)
    data = load_dataset(manifest_path, cfg)
    s = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    torch.manual_seed(cfg.seed)
    model = build_denoiser(
        resolution=cfg.resolution, base_width=cfg.base_width,
        num_patches=cfg.num_patches, embed_dim=cfg.embed_dim, heads=cfg.heads,
    )
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed)

    n = data.targets.shape[0]
    history = []
    model.train()
    for step in range(cfg.steps):
        idx = torch.randint(0, n, (cfg.batch_size,), generator=gen)
        loss, l_mse, l_pl = compute_losses(
            model, data.conditions[idx], data.targets[idx], data.gs[idx], s, cfg, gen
        )
        opt.zero_grad()
        loss.backward()
        opt.step()
        l_overall = l_mse + (l_mse / l_pl) * l_pl if l_pl > 1e-12 else l_mse
        history.append({"step": step, "l_mse": l_mse, "l_pl": l_pl, "l_overall": l_overall})

    with open(loss_csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["step", "l_mse", "l_pl", "l_overall"])
        writer.writeheader()
        writer.writerows(history)
    torch.save(
        {"config": asdict(cfg), "model_state": model.state_dict(), "steps": cfg.steps},
        checkpoint_path,
    )
    return history


def load_checkpoint(path) -> tuple:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    cfg = TrainConfig(**payload["config"])
    model = build_denoiser(
        resolution=cfg.resolution, base_width=cfg.base_width,
        num_patches=cfg.num_patches, embed_dim=cfg.embed_dim, heads=cfg.heads,
    )
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model, cfg
