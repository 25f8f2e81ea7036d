"""Dense motion-field construction, image remapping, field inversion, and
resampling across resolutions.

The motion field G stores per-pixel displacements in pixels: correcting a
rolling-shutter image means sampling it at p + G(p) for every output pixel p
(backward warping). Fields are (H, W, 2) arrays with channels (dx, dy);
images are (H, W, C) arrays with values in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonContractiveFieldError, ShapeError
from .rotation import (
    CameraIntrinsics,
    GyroTrace,
    homography_from_rotation,
    integrate_trace_many,
    require_coverage,
)

_W_EPS = 1e-9


class MotionField:
    """Dense 2-channel displacement field in pixels, shape (H, W, 2)."""

    __slots__ = ("data",)

    def __init__(self, data):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 3 or data.shape[2] != 2:
            raise ShapeError(f"motion field must have shape (H, W, 2), got {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ShapeError(f"motion field dimensions must be >= 1, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("motion field contains non-finite values")
        self.data = data

    @classmethod
    def zeros(cls, width: int, height: int) -> "MotionField":
        return cls(np.zeros((height, width, 2)))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def max_abs(self) -> float:
        return float(np.abs(self.data).max())


class ImageBuffer:
    """Image with 1 or 3 channels, values in [0, 1], shape (H, W, C)."""

    __slots__ = ("data",)

    def __init__(self, data):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise ShapeError(f"image must have shape (H, W, 1|3), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("image contains non-finite values")
        if data.min() < 0.0 or data.max() > 1.0:
            raise ValueError(
                f"image values must lie in [0, 1], got [{data.min()}, {data.max()}]"
            )
        self.data = data

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


class ValidMask:
    """Boolean per-pixel validity, shape (H, W). False marks black-edge pixels."""

    __slots__ = ("data",)

    def __init__(self, data):
        data = np.asarray(data)
        if data.ndim != 2:
            raise ShapeError(f"mask must be 2-D, got shape {data.shape}")
        self.data = data.astype(bool)

    @classmethod
    def full(cls, width: int, height: int) -> "ValidMask":
        return cls(np.ones((height, width), dtype=bool))

    def __and__(self, other: "ValidMask") -> "ValidMask":
        if self.data.shape != other.data.shape:
            raise ShapeError("mask shapes differ")
        return ValidMask(self.data & other.data)

    def count(self) -> int:
        return int(self.data.sum())


@dataclass(frozen=True)
class RowTiming:
    """Capture timing of a rolling-shutter frame.

    ``readout_ns`` is the top-to-bottom readout duration; row r of an
    H-row frame is exposed at ``t0_ns + r * readout_ns / (H - 1)``, and
    ``reference_row`` is the row whose pose defines "corrected".
    """

    readout_ns: int
    t0_ns: int = 0
    reference_row: int = 0

    def __post_init__(self):
        if self.readout_ns <= 0:
            raise ValueError(f"readout_ns must be positive, got {self.readout_ns}")
        if self.reference_row < 0:
            raise ValueError(f"reference_row must be >= 0, got {self.reference_row}")

    def row_time_ns(self, row: int, height: int) -> float:
        if height == 1:
            return float(self.t0_ns)
        return self.t0_ns + row * self.readout_ns / (height - 1)


def row_rotations(trace: GyroTrace, timing: RowTiming, height: int) -> list:
    """Per-row rotation relative to the reference row's pose (identity there)."""
    if height < 1:
        raise ValueError(f"height must be >= 1, got {height}")
    if timing.reference_row >= height:
        raise ValueError(
            f"reference_row {timing.reference_row} outside image of height {height}"
        )
    require_coverage(trace, timing.t0_ns, timing.t0_ns + timing.readout_ns)
    times = [timing.row_time_ns(r, height) for r in range(height)]
    poses = integrate_trace_many(trace, times)
    ref_inv = poses[timing.reference_row].inverse()
    return [ref_inv * p for p in poses]


def build_igf(
    k: CameraIntrinsics, rows: list, width: int, height: int
) -> tuple[MotionField, ValidMask]:
    """Per-pixel displacement field from per-row rotation homographies.

    Row y of the output grid is transformed by H_y = K R_y K^-1; the field is
    the transformed grid minus the grid. Pixels sent to (near) infinity get a
    zero displacement and a False mask entry.
    """
    if len(rows) != height:
        raise ShapeError(f"got {len(rows)} row rotations for height {height}")
    xs = np.arange(width, dtype=np.float64)
    field = np.zeros((height, width, 2))
    valid = np.ones((height, width), dtype=bool)
    for y, rot in enumerate(rows):
        # normalized homography, so per-pixel apply_homography agrees exactly
        m = homography_from_rotation(k, rot).m
        fy = float(y)
        u = m[0, 0] * xs + m[0, 1] * fy + m[0, 2]
        v = m[1, 0] * xs + m[1, 1] * fy + m[1, 2]
        w = m[2, 0] * xs + m[2, 1] * fy + m[2, 2]
        ok = np.abs(w) > _W_EPS
        w_safe = np.where(ok, w, 1.0)
        field[y, :, 0] = np.where(ok, u / w_safe - xs, 0.0)
        field[y, :, 1] = np.where(ok, v / w_safe - fy, 0.0)
        valid[y, :] = ok
    return MotionField(field), ValidMask(valid)


def _bilinear_gather(data: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    """Bilinear sample of (H, W, C) data at float coordinates (no bounds check).

    Coordinates must already be clipped to [0, W-1] x [0, H-1]. Exact integer
    coordinates reproduce source values bit for bit because the zero-weight
    corner term contributes an exact 0.0.
    """
    h, w = data.shape[:2]
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    x0 = np.clip(x0, 0, w - 1)
    y0 = np.clip(y0, 0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]
    top = (1.0 - fx) * data[y0, x0] + fx * data[y0, x1]
    bot = (1.0 - fx) * data[y1, x0] + fx * data[y1, x1]
    return (1.0 - fy) * top + fy * bot


def _grid(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    return np.meshgrid(
        np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64)
    )


def remap(img: ImageBuffer, g: MotionField) -> tuple[ImageBuffer, ValidMask]:
    """Backward-warp ``img`` by ``g``: out(p) = img(p + G(p)), bilinear.

    Samples whose bilinear footprint leaves [0, W-1] x [0, H-1] produce 0 and
    a False mask entry.
    """
    if (img.height, img.width) != (g.height, g.width):
        raise ShapeError(
            f"image {img.height}x{img.width} does not match field {g.height}x{g.width}"
        )
    xg, yg = _grid(img.width, img.height)
    sx = xg + g.data[:, :, 0]
    sy = yg + g.data[:, :, 1]
    valid = (sx >= 0.0) & (sx <= img.width - 1.0) & (sy >= 0.0) & (sy <= img.height - 1.0)
    out = _bilinear_gather(img.data, np.clip(sx, 0.0, img.width - 1.0), np.clip(sy, 0.0, img.height - 1.0))
    out[~valid] = 0.0
    # convex combinations can overshoot [0, 1] by a few ulp; integer-coordinate
    # samples are already exact so this clip never alters them
    np.clip(out, 0.0, 1.0, out=out)
    return ImageBuffer(out), ValidMask(valid)


def sample_field_bilinear(g: MotionField, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    """Edge-clamped bilinear sample of a field at float coordinates."""
    sx = np.clip(sx, 0.0, g.width - 1.0)
    sy = np.clip(sy, 0.0, g.height - 1.0)
    return _bilinear_gather(g.data, sx, sy)


def invert_field(g: MotionField, iters: int = 10, tol: float = 1e-3) -> MotionField:
    """Numerical inverse of a displacement field.

    Iterates v <- -G(p + v) from v = 0 so that remapping by the result
    synthesizes an image that ``g`` maps back. Stops after ``iters``
    iterations or when the largest per-pixel update drops below ``tol``
    pixels; raises NonContractiveFieldError if the update grows three
    iterations in a row.
    """
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    xg, yg = _grid(g.width, g.height)
    v = np.zeros_like(g.data)
    prev_delta = np.inf
    growth = 0
    for _ in range(iters):
        pulled = sample_field_bilinear(g, xg + v[:, :, 0], yg + v[:, :, 1])
        v_new = -pulled
        delta = float(np.abs(v_new - v).max())
        if delta > prev_delta:
            growth += 1
            if growth >= 3:
                raise NonContractiveFieldError(
                    f"field inversion diverging (update grew to {delta:.3g} px)"
                )
        else:
            growth = 0
        prev_delta = delta
        v = v_new
        if delta < tol:
            break
    return MotionField(v)


def composition_residual(g: MotionField, g_inv: MotionField) -> float:
    """Mean |G_inv(p) + G(p + G_inv(p))| in pixels; 0 for a perfect inverse."""
    xg, yg = _grid(g.width, g.height)
    pulled = sample_field_bilinear(g, xg + g_inv.data[:, :, 0], yg + g_inv.data[:, :, 1])
    res = g_inv.data + pulled
    return float(np.sqrt((res**2).sum(axis=2)).mean())


def _resize_axis_coords(old: int, new: int) -> np.ndarray:
    if new == 1:
        return np.array([(old - 1) / 2.0])
    return np.linspace(0.0, old - 1.0, new)


def _bilinear_resize(data: np.ndarray, new_w: int, new_h: int) -> np.ndarray:
    """Corner-aligned bilinear resize of (H, W, C) data; identity when sizes match."""
    xs = _resize_axis_coords(data.shape[1], new_w)
    ys = _resize_axis_coords(data.shape[0], new_h)
    sx, sy = np.meshgrid(xs, ys)
    return _bilinear_gather(data, sx, sy)


def upsample_field(g: MotionField, new_w: int, new_h: int) -> MotionField:
    """Resize a field; displacements are rescaled into target-grid pixels."""
    if new_w < 1 or new_h < 1:
        raise ValueError(f"target size must be >= 1, got {new_w}x{new_h}")
    resized = _bilinear_resize(g.data, new_w, new_h)
    resized[:, :, 0] *= new_w / g.width
    resized[:, :, 1] *= new_h / g.height
    return MotionField(resized)


def _area_weights(old: int, new: int) -> np.ndarray:
    """(new, old) row-stochastic matrix averaging source cells over target cells."""
    ratio = old / new
    w = np.zeros((new, old))
    for j in range(new):
        lo = j * ratio
        hi = (j + 1) * ratio
        i0 = int(np.floor(lo))
        i1 = min(int(np.ceil(hi)), old)
        for i in range(i0, i1):
            w[j, i] = min(hi, i + 1) - max(lo, i)
    return w / w.sum(axis=1, keepdims=True)


def downsample_image(img: ImageBuffer, new_w: int, new_h: int) -> ImageBuffer:
    """Area-average resize; exact block means for integer shrink factors."""
    if new_w < 1 or new_h < 1:
        raise ValueError(f"target size must be >= 1, got {new_w}x{new_h}")
    if (new_w, new_h) == (img.width, img.height):
        return ImageBuffer(img.data.copy())
    wy = _area_weights(img.height, new_h)
    wx = _area_weights(img.width, new_w)
    out = np.einsum("ij,jkc->ikc", wy, img.data)
    out = np.einsum("kj,ijc->ikc", wx, out)
    return ImageBuffer(np.clip(out, 0.0, 1.0))


def resize_image(img: ImageBuffer, new_w: int, new_h: int) -> ImageBuffer:
    """Resize an image: area averaging when shrinking, bilinear otherwise."""
    if (new_w, new_h) == (img.width, img.height):
        return ImageBuffer(img.data.copy())
    if new_w <= img.width and new_h <= img.height:
        return downsample_image(img, new_w, new_h)
    return ImageBuffer(np.clip(_bilinear_resize(img.data, new_w, new_h), 0.0, 1.0))
