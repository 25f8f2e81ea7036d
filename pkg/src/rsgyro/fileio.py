"""File formats: Middlebury-style .flo flow files, 8-bit PNG images, gyro
trace CSVs, intrinsics JSON, and JSONL dataset manifests.

Flow files are little-endian: float32 magic 202021.25, int32 width, int32
height, then row-major interleaved float32 (dx, dy). Images convert to/from
[0, 1] by value/255 with round-half-up on write.
"""

from __future__ import annotations

import csv
import json
import os

import numpy as np
from PIL import Image

from .errors import FlowFormatError
from .field import ImageBuffer, MotionField
from .rotation import CameraIntrinsics, GyroSample, GyroTrace

FLOW_MAGIC = np.float32(202021.25)


def write_flow(path, g: MotionField) -> None:
    data = g.data.astype("<f4")
    with open(path, "wb") as f:
        f.write(FLOW_MAGIC.astype("<f4").tobytes())
        f.write(np.array([g.width, g.height], dtype="<i4").tobytes())
        f.write(data.tobytes())


def read_flow(path) -> MotionField:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12:
        raise FlowFormatError("flow file truncated before header", len(raw))
    magic = np.frombuffer(raw, dtype="<f4", count=1)[0]
    if magic != FLOW_MAGIC:
        raise FlowFormatError(f"bad magic {magic!r}, expected 202021.25", 0)
    w, h = (int(v) for v in np.frombuffer(raw, dtype="<i4", count=2, offset=4))
    if w < 1 or h < 1:
        raise FlowFormatError(f"bad dimensions {w}x{h}", 4)
    expected = 12 + 8 * w * h
    if len(raw) != expected:
        raise FlowFormatError(
            f"flow payload has {len(raw) - 12} bytes, expected {8 * w * h}",
            min(len(raw), expected),
        )
    data = np.frombuffer(raw, dtype="<f4", count=2 * w * h, offset=12)
    return MotionField(data.reshape(h, w, 2).astype(np.float64))


def quantize_image(img: ImageBuffer) -> ImageBuffer:
    """Snap values to the 8-bit grid exactly as a PNG write/read would."""
    return ImageBuffer(to_uint8(img) / 255.0)


def to_uint8(img: ImageBuffer) -> np.ndarray:
    # round half up, not banker's rounding
    return np.clip(np.floor(img.data * 255.0 + 0.5), 0, 255).astype(np.uint8)


def save_image(path, img: ImageBuffer) -> None:
    arr = to_uint8(img)
    if arr.shape[2] == 1:
        pil = Image.fromarray(arr[:, :, 0], mode="L")
    else:
        pil = Image.fromarray(arr, mode="RGB")
    pil.save(path, format="PNG")


def load_image(path) -> ImageBuffer:
    with Image.open(path) as pil:
        if pil.mode not in ("L", "RGB"):
            pil = pil.convert("RGB")
        arr = np.asarray(pil, dtype=np.float64) / 255.0
    return ImageBuffer(arr)


def write_trace(path, trace: GyroTrace) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["t_ns", "wx", "wy", "wz"])
        for s in trace.samples:
            writer.writerow([s.t_ns, repr(s.omega[0]), repr(s.omega[1]), repr(s.omega[2])])


def read_trace(path, duration_ns: int | None = None) -> GyroTrace:
    """Load a trace CSV; duration defaults to the last sample time."""
    samples = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if [c.strip() for c in header] != ["t_ns", "wx", "wy", "wz"]:
            raise ValueError(f"unexpected trace header {header} in {path}")
        for row in reader:
            if not row:
                continue
            samples.append(
                GyroSample(int(row[0]), (float(row[1]), float(row[2]), float(row[3])))
            )
    if duration_ns is None:
        if not samples:
            raise ValueError(f"trace file {path} has no samples")
        duration_ns = samples[-1].t_ns
    return GyroTrace(samples, duration_ns)


def write_intrinsics(path, k: CameraIntrinsics) -> None:
    with open(path, "w") as f:
        json.dump(intrinsics_to_dict(k), f, indent=2)
        f.write("\n")


def read_intrinsics(path) -> CameraIntrinsics:
    with open(path) as f:
        d = json.load(f)
    return intrinsics_from_dict(d)


def intrinsics_to_dict(k: CameraIntrinsics) -> dict:
    return {
        "fx": k.fx,
        "fy": k.fy,
        "cx": k.cx,
        "cy": k.cy,
        "width": k.width,
        "height": k.height,
    }


def intrinsics_from_dict(d: dict) -> CameraIntrinsics:
    return CameraIntrinsics(
        fx=float(d["fx"]),
        fy=float(d["fy"]),
        cx=float(d["cx"]),
        cy=float(d["cy"]),
        width=int(d["width"]),
        height=int(d["height"]),
    )


def write_manifest(path, rows: list) -> None:
    """Write dataset rows as JSON Lines, one object per sample."""
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True))
            f.write("\n")


def read_manifest(path) -> list:
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def manifest_dir(manifest_path) -> str:
    """Directory that manifest-relative sample paths resolve against."""
    return os.path.dirname(os.path.abspath(manifest_path))
