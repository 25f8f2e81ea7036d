"""Noise schedules, forward diffusion, x0-parameterized DDIM sampling,
classifier-free guidance, and the training losses.

All tensor operations work on plain float64 ndarrays of shape (2, H, W)
holding the normalized motion field (pixel displacements divided by
``norm_scale``). The denoiser is any callable

    denoiser(x_t: ndarray, t: int, condition: ImageBuffer | None) -> ndarray

that returns an x0 estimate of the same shape and is deterministic for
identical inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegenerateMaskError, ShapeError, StepOrderError
from .field import ImageBuffer, MotionField, remap

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02
DEFAULT_NORM_SCALE = 8.0
DEFAULT_STEPS = 8


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step beta/alpha/alpha_bar tables for a T-step diffusion."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        if self.beta.shape != (self.T,):
            raise ShapeError(f"beta must have length T={self.T}, got {self.beta.shape}")
        if np.any(self.beta <= 0.0) or np.any(self.beta >= 1.0):
            raise ValueError("beta values must lie in (0, 1)")
        if np.any(np.diff(self.beta) < 0.0):
            raise ValueError("beta must be nondecreasing")
        if np.any(np.diff(self.alpha_bar) >= 0.0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if self.alpha_bar[0] > 1.0 or self.alpha_bar[-1] <= 0.0:
            raise ValueError("alpha_bar must stay in (0, 1]")

    def alpha_bar_at(self, t: int) -> float:
        """alpha_bar[t], with the t = -1 boundary defined as 1."""
        if t == -1:
            return 1.0
        return float(self.alpha_bar[t])


def make_schedule(
    T: int = DEFAULT_T,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    """Linear beta schedule from ``beta_start`` to ``beta_end`` inclusive."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    beta = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def q_sample(x0: np.ndarray, t: int, eps: np.ndarray, s: NoiseSchedule) -> np.ndarray:
    """Forward diffusion: x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    _check_same_shape(x0, eps, "q_sample")
    if not 0 <= t < s.T:
        raise ValueError(f"step {t} outside [0, {s.T})")
    ab = s.alpha_bar_at(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def ddim_step(
    x_t: np.ndarray,
    x0_hat: np.ndarray,
    t: int,
    t_prev: int,
    eta: float,
    s: NoiseSchedule,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    """One reverse DDIM step from x_t (at step t) to x_{t_prev}.

    Recovers eps_hat = (x_t - sqrt(ab_t) x0_hat) / sqrt(1 - ab_t) and moves to

        sqrt(ab_prev) x0_hat + sqrt(1 - ab_prev - sigma^2) eps_hat + sigma noise,

    with sigma = eta sqrt((1-ab_prev)/(1-ab_t)) sqrt(1 - ab_t/ab_prev).
    ``t_prev = -1`` is the boundary step where ab_prev = 1, so the output is
    x0_hat exactly. Deterministic when eta = 0.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    x0_hat = np.asarray(x0_hat, dtype=np.float64)
    _check_same_shape(x_t, x0_hat, "ddim_step")
    if t_prev >= t:
        raise StepOrderError(f"t_prev={t_prev} must be below t={t}")
    if t_prev < -1:
        raise ValueError(f"t_prev={t_prev} below the boundary step -1")
    if eta < 0.0:
        raise ValueError(f"eta must be >= 0, got {eta}")
    if eta > 0.0 and noise is None:
        raise ValueError("eta > 0 requires a noise tensor")
    ab_t = s.alpha_bar_at(t)
    ab_prev = s.alpha_bar_at(t_prev)
    eps_hat = (x_t - math.sqrt(ab_t) * x0_hat) / math.sqrt(1.0 - ab_t)
    if eta > 0.0:
        sigma = (
            eta
            * math.sqrt((1.0 - ab_prev) / (1.0 - ab_t))
            * math.sqrt(1.0 - ab_t / ab_prev)
        )
    else:
        sigma = 0.0
    out = math.sqrt(ab_prev) * x0_hat
    out = out + math.sqrt(max(1.0 - ab_prev - sigma * sigma, 0.0)) * eps_hat
    if sigma > 0.0:
        noise = np.asarray(noise, dtype=np.float64)
        _check_same_shape(x_t, noise, "ddim_step noise")
        out = out + sigma * noise
    return out


def cfg_combine(uncond: np.ndarray, cond: np.ndarray, w: float) -> np.ndarray:
    """Classifier-free guidance: uncond + w (cond - uncond); w = 1 gives cond."""
    uncond = np.asarray(uncond, dtype=np.float64)
    cond = np.asarray(cond, dtype=np.float64)
    _check_same_shape(uncond, cond, "cfg_combine")
    if w == 1.0:
        return cond.copy()
    return uncond + w * (cond - uncond)


def step_subsequence(T: int, steps: int) -> list:
    """Evenly spaced decreasing step indices from T-1 down to 0."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must lie in [1, T={T}], got {steps}")
    taus = np.round(np.linspace(T - 1, 0, steps)).astype(int)
    out = []
    for t in taus:
        if not out or t < out[-1]:
            out.append(int(t))
    return out


def sample_field(
    den,
    condition: ImageBuffer,
    steps: int,
    eta: float,
    w: float,
    seed: int,
    s: NoiseSchedule,
) -> np.ndarray:
    """Draw a normalized field with DDIM, conditioned on an image.

    Starts from seeded unit-normal noise shaped (2, condition.height,
    condition.width) and walks an evenly spaced decreasing step subsequence
    ending at 0; when w != 1 the denoiser also runs with a null condition and
    the two estimates are combined by ``cfg_combine``. Deterministic given
    (seed, denoiser, condition, steps).
    """
    taus = step_subsequence(s.T, steps)
    rng = np.random.default_rng(seed)
    shape = (2, condition.height, condition.width)
    x = rng.standard_normal(shape)
    for i, t in enumerate(taus):
        t_prev = taus[i + 1] if i + 1 < len(taus) else -1
        x0_cond = np.asarray(den(x, t, condition))
        if x0_cond.shape != shape:
            raise ContractError(
                f"denoiser returned shape {x0_cond.shape}, expected {shape}"
            )
        if w != 1.0:
            x0_uncond = np.asarray(den(x, t, None))
            if x0_uncond.shape != shape:
                raise ContractError(
                    f"denoiser returned shape {x0_uncond.shape}, expected {shape}"
                )
            x0_hat = cfg_combine(x0_uncond, x0_cond, w)
        else:
            x0_hat = x0_cond
        noise = rng.standard_normal(shape) if eta > 0.0 else None
        x = ddim_step(x, x0_hat, t, t_prev, eta, s, noise)
    return x


def loss_mse(x0_hat: np.ndarray, x0: np.ndarray) -> float:
    """Mean squared error over all elements."""
    x0_hat = np.asarray(x0_hat, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    _check_same_shape(x0_hat, x0, "loss_mse")
    return float(np.mean((x0_hat - x0) ** 2))


def loss_photometric(
    x0_hat: np.ndarray,
    i_rs: ImageBuffer,
    i_gs: ImageBuffer,
    norm_scale: float = DEFAULT_NORM_SCALE,
) -> float:
    """Mean absolute error between the field-corrected RS image and the GS image.

    The predicted field is denormalized to pixels, used to remap ``i_rs``,
    and compared to ``i_gs`` over the remap validity mask.
    """
    warped, mask = remap(i_rs, denormalize_field(x0_hat, norm_scale))
    if mask.count() == 0:
        raise DegenerateMaskError("photometric loss has no valid pixels")
    diff = np.abs(warped.data - i_gs.data)
    return float(diff[mask.data].mean())


def loss_overall(l_mse: float, l_pl: float) -> float:
    """Dynamically weighted sum: l_mse + (l_mse / l_pl) * l_pl.

    The weight ratio is a constant for gradient purposes (trainers must
    detach it); the value is 2 * l_mse whenever l_pl is meaningfully
    positive, and the weight is defined as 0 when l_pl < 1e-12.
    """
    if l_mse < 0.0 or l_pl < 0.0:
        raise ValueError(f"losses must be >= 0, got ({l_mse}, {l_pl})")
    if l_pl < 1e-12:
        return l_mse
    return l_mse + (l_mse / l_pl) * l_pl


def normalize_field(g: MotionField, norm_scale: float = DEFAULT_NORM_SCALE) -> np.ndarray:
    """MotionField (H, W, 2) in pixels -> tensor (2, H, W) in scaled units."""
    if norm_scale <= 0.0:
        raise ValueError(f"norm_scale must be positive, got {norm_scale}")
    return np.ascontiguousarray(g.data.transpose(2, 0, 1)) / norm_scale


def denormalize_field(x: np.ndarray, norm_scale: float = DEFAULT_NORM_SCALE) -> MotionField:
    """Tensor (2, H, W) in scaled units -> MotionField (H, W, 2) in pixels."""
    if norm_scale <= 0.0:
        raise ValueError(f"norm_scale must be positive, got {norm_scale}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != 2:
        raise ShapeError(f"field tensor must have shape (2, H, W), got {x.shape}")
    return MotionField(x.transpose(1, 2, 0) * norm_scale)


def fixed_x0_denoiser(x0_star: np.ndarray):
    """Denoiser that ignores its input and always reports ``x0_star``."""

    def den(x_t, t, condition):
        return x0_star.copy()

    return den


def gaussian_posterior_denoiser(mu: float, sigma: float, s: NoiseSchedule):
    """Exact posterior-mean denoiser for a scalar Gaussian prior x0 ~ N(mu, sigma^2)."""

    def den(x_t, t, condition):
        ab = s.alpha_bar_at(t)
        var = sigma * sigma
        return (math.sqrt(ab) * var * x_t + (1.0 - ab) * mu) / (ab * var + 1.0 - ab)

    return den
