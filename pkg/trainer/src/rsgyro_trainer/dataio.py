"""Readers and writers for the toolkit's file interfaces: manifests, PNGs,
and Middlebury-style .flo flow files. Independent of the producing package.
"""

from __future__ import annotations

import json
import os

import numpy as np
import torch
from PIL import Image

FLOW_MAGIC = 202021.25


def read_manifest(path) -> list:
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def manifest_dir(path) -> str:
    return os.path.dirname(os.path.abspath(path))


def load_png(path) -> torch.Tensor:
    """PNG -> float32 tensor (C, H, W) in [0, 1]."""
    with Image.open(path) as img:
        if img.mode not in ("L", "RGB"):
            img = img.convert("RGB")
        arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def read_flow(path) -> torch.Tensor:
    """.flo -> float32 tensor (2, H, W), channels (dx, dy)."""
    with open(path, "rb") as f:
        raw = f.read()
    magic = np.frombuffer(raw, dtype="<f4", count=1)[0]
    if magic != np.float32(FLOW_MAGIC):
        raise ValueError(f"{path}: bad flow magic {magic!r}")
    w, h = (int(v) for v in np.frombuffer(raw, dtype="<i4", count=2, offset=4))
    data = np.frombuffer(raw, dtype="<f4", count=2 * w * h, offset=12).reshape(h, w, 2)
    return torch.from_numpy(data.copy()).permute(2, 0, 1).contiguous()


def write_flow(path, field: torch.Tensor) -> None:
    """(2, H, W) tensor in pixels -> .flo file."""
    assert field.dim() == 3 and field.shape[0] == 2, field.shape
    h, w = field.shape[1], field.shape[2]
    data = field.permute(1, 2, 0).contiguous().numpy().astype("<f4")
    with open(path, "wb") as f:
        f.write(np.float32(FLOW_MAGIC).astype("<f4").tobytes())
        f.write(np.array([w, h], dtype="<i4").tobytes())
        f.write(data.tobytes())
