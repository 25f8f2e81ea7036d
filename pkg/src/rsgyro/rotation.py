"""Exact SO(3) math: gyro integration, axis-angle conversion, SLERP, and
rotation-only homographies.

Conventions used throughout the toolkit:

* camera axes are right-handed with x to the right, y down, z along the
  optical axis;
* angular velocity is expressed in the camera body frame, so integration
  composes increments on the right: R(t+dt) = R(t) * exp([w dt]x);
* rotations are stored as unit quaternions (w, x, y, z).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import CoverageError, InvalidTraceError, PointAtInfinityError, RangeError

# Below this rotation angle (radians) the axis direction is numerically
# meaningless; axis-angle conversion returns the identity.
_TINY_ANGLE = 1e-12

# Projective points with |w| at or below this are treated as at infinity.
_W_EPS = 1e-9


def _qmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def _q_from_axis_angle(v: np.ndarray) -> np.ndarray:
    theta = math.sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
    if theta < _TINY_ANGLE:
        return np.array([1.0, 0.0, 0.0, 0.0])
    half = 0.5 * theta
    s = math.sin(half) / theta
    return np.array([math.cos(half), v[0] * s, v[1] * s, v[2] * s])


class Rotation:
    """A 3D rotation stored as a unit quaternion (w, x, y, z)."""

    __slots__ = ("q",)

    def __init__(self, q):
        q = np.asarray(q, dtype=np.float64)
        if q.shape != (4,) or not np.all(np.isfinite(q)):
            raise ValueError("quaternion must be four finite components (w, x, y, z)")
        n = math.sqrt(float(np.dot(q, q)))
        if n < _TINY_ANGLE:
            raise ValueError("quaternion norm is zero")
        self.q = q / n

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_axis_angle(cls, axis_angle) -> "Rotation":
        """Rotation by ``|axis_angle|`` radians about ``axis_angle / |axis_angle|``."""
        v = np.asarray(axis_angle, dtype=np.float64)
        if v.shape != (3,) or not np.all(np.isfinite(v)):
            raise ValueError("axis-angle vector must be three finite components")
        return cls(_q_from_axis_angle(v))

    def matrix(self) -> np.ndarray:
        """The equivalent 3x3 rotation matrix."""
        w, x, y, z = self.q
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
                [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
                [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
            ]
        )

    def __mul__(self, other: "Rotation") -> "Rotation":
        """Composition; (a * b).matrix() == a.matrix() @ b.matrix()."""
        return Rotation(_qmul(self.q, other.q))

    def inverse(self) -> "Rotation":
        w, x, y, z = self.q
        return Rotation(np.array([w, -x, -y, -z]))

    def angle(self) -> float:
        """Total rotation angle in radians, in [0, pi]."""
        # atan2 form stays well-conditioned near the identity, unlike acos
        w, x, y, z = self.q
        return 2.0 * math.atan2(math.sqrt(x * x + y * y + z * z), abs(w))

    def angle_to(self, other: "Rotation") -> float:
        """Geodesic distance to ``other`` in radians."""
        return (self.inverse() * other).angle()

    def rotate(self, vec3) -> np.ndarray:
        return self.matrix() @ np.asarray(vec3, dtype=np.float64)

    def __repr__(self) -> str:
        return f"Rotation(q={self.q!r})"


def rodrigues(axis_angle) -> Rotation:
    """Convert an axis-angle vector to a Rotation (identity below 1e-12 rad)."""
    return Rotation.from_axis_angle(axis_angle)


def slerp(a: Rotation, b: Rotation, u: float) -> Rotation:
    """Geodesic interpolation from ``a`` (u=0) to ``b`` (u=1), shortest arc."""
    if not 0.0 <= u <= 1.0:
        raise RangeError(f"interpolation parameter u={u} outside [0, 1]")
    q1 = a.q
    q2 = b.q
    dot = float(np.dot(q1, q2))
    if dot < 0.0:
        q2 = -q2
        dot = -dot
    if dot > 1.0 - 1e-10:
        # nearly identical rotations: linear blend, renormalized by Rotation()
        return Rotation(q1 + u * (q2 - q1))
    theta = math.acos(min(dot, 1.0))
    s = math.sin(theta)
    return Rotation((math.sin((1.0 - u) * theta) / s) * q1 + (math.sin(u * theta) / s) * q2)


@dataclass(frozen=True)
class GyroSample:
    """One angular-velocity reading: time in nanoseconds, rad/s about (x, y, z)."""

    t_ns: int
    omega: tuple

    def __post_init__(self):
        if self.t_ns < 0:
            raise ValueError(f"sample time {self.t_ns} ns is negative")
        w = np.asarray(self.omega, dtype=np.float64)
        if w.shape != (3,) or not np.all(np.isfinite(w)):
            raise ValueError("omega must be three finite rad/s components")
        object.__setattr__(self, "omega", (float(w[0]), float(w[1]), float(w[2])))


class GyroTrace:
    """An ordered sequence of gyro samples covering [0, duration_ns].

    Angular velocity is held constant between consecutive samples (zero-order
    hold); the last sample's value extends to ``duration_ns``.
    """

    def __init__(self, samples, duration_ns: int):
        samples = list(samples)
        if len(samples) < 2:
            raise InvalidTraceError(f"trace needs at least 2 samples, got {len(samples)}")
        self.samples = samples
        self.times_ns = np.array([s.t_ns for s in samples], dtype=np.int64)
        if np.any(np.diff(self.times_ns) <= 0):
            raise InvalidTraceError("sample times must be strictly increasing")
        if duration_ns < int(self.times_ns[-1]):
            raise InvalidTraceError(
                f"duration {duration_ns} ns precedes the last sample at {self.times_ns[-1]} ns"
            )
        self.duration_ns = int(duration_ns)
        self.omegas = np.array([s.omega for s in samples], dtype=np.float64)

    def __len__(self) -> int:
        return len(self.samples)

    def cumulative_rotations(self) -> list:
        """Rotation at each sample time relative to the pose at the first sample."""
        qs = [np.array([1.0, 0.0, 0.0, 0.0])]
        dts = np.diff(self.times_ns) * 1e-9
        for k, dt in enumerate(dts):
            step = _q_from_axis_angle(self.omegas[k] * dt)
            qs.append(_qmul(qs[-1], step))
        return qs


def _rotation_at(trace: GyroTrace, cum_quats: list, t_query: float) -> Rotation:
    if not 0 <= t_query <= trace.duration_ns:
        raise RangeError(
            f"query time {t_query} ns outside trace span [0, {trace.duration_ns}] ns"
        )
    i = int(np.searchsorted(trace.times_ns, t_query, side="right")) - 1
    i = max(i, 0)
    dt = (t_query - float(trace.times_ns[i])) * 1e-9
    if dt == 0.0:
        return Rotation(cum_quats[i])
    partial = _q_from_axis_angle(trace.omegas[min(i, len(trace) - 1)] * dt)
    return Rotation(_qmul(cum_quats[i], partial))


def integrate_trace(trace: GyroTrace, t_query: float) -> Rotation:
    """Camera rotation at ``t_query`` ns relative to its pose at t = 0.

    Piecewise-constant angular velocity between samples; a query inside a
    sample interval integrates the partial interval exactly (equivalent to
    SLERP between the bracketing sample poses).
    """
    return _rotation_at(trace, trace.cumulative_rotations(), t_query)


def integrate_trace_many(trace: GyroTrace, t_queries) -> list:
    """``integrate_trace`` for many query times, sharing one integration pass."""
    cum = trace.cumulative_rotations()
    return [_rotation_at(trace, cum, t) for t in t_queries]


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def inverse_matrix(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )


class Homography:
    """A 3x3 projective map, normalized so element (2,2) is 1 when nonzero."""

    __slots__ = ("m",)

    def __init__(self, m):
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (3, 3) or not np.all(np.isfinite(m)):
            raise ValueError("homography must be a finite 3x3 matrix")
        if abs(m[2, 2]) > _TINY_ANGLE:
            m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= 1e-12:
            raise ValueError("homography is not invertible")
        self.m = m

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.m))

    def __matmul__(self, other: "Homography") -> "Homography":
        return Homography(self.m @ other.m)

    def __repr__(self) -> str:
        return f"Homography(m={self.m!r})"


def homography_from_rotation(k: CameraIntrinsics, r: Rotation) -> Homography:
    """Rotation-only homography K R K^-1 (normalized at (2,2))."""
    return Homography(k.matrix() @ r.matrix() @ k.inverse_matrix())


def apply_homography(h: Homography, p) -> np.ndarray:
    """Project pixel coordinates ``p = (x, y)`` through ``h``."""
    x, y = float(p[0]), float(p[1])
    m = h.m
    # Same association order as the dense grid transform in field.build_igf,
    # so per-pixel and per-row evaluation agree bit for bit.
    u = m[0, 0] * x + m[0, 1] * y + m[0, 2]
    v = m[1, 0] * x + m[1, 1] * y + m[1, 2]
    w = m[2, 0] * x + m[2, 1] * y + m[2, 2]
    if abs(w) <= _W_EPS:
        raise PointAtInfinityError(f"point ({x}, {y}) maps to infinity (w={w})")
    return np.array([u / w, v / w])


def require_coverage(trace: GyroTrace, t0_ns: float, t1_ns: float) -> None:
    """Raise CoverageError unless the trace spans [t0_ns, t1_ns]."""
    if t0_ns < 0 or t1_ns > trace.duration_ns:
        raise CoverageError(
            f"trace spans [0, {trace.duration_ns}] ns but [{t0_ns}, {t1_ns}] ns is required"
        )
