"""Noise schedule and DDIM arithmetic, reimplemented independently of the
field toolkit and cross-checked against its exported test-vector file.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class Schedule:
    T: int
    beta_start: float
    beta_end: float
    alpha_bar: torch.Tensor  # float64, length T

    def alpha_bar_at(self, t: int) -> float:
        if t == -1:
            return 1.0
        return float(self.alpha_bar[t])


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> Schedule:
    if T < 1 or not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"bad schedule parameters T={T}, beta=({beta_start}, {beta_end})")
    beta = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    return Schedule(T=T, beta_start=beta_start, beta_end=beta_end,
                    alpha_bar=torch.cumprod(1.0 - beta, dim=0))


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, s: Schedule) -> torch.Tensor:
    """Forward diffusion; ``t`` may be an int or a per-sample long tensor."""
    if isinstance(t, int):
        ab = torch.tensor(s.alpha_bar_at(t), dtype=x0.dtype)
        return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps
    ab = s.alpha_bar.to(x0.dtype)[t].view(-1, *([1] * (x0.dim() - 1)))
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


def ddim_step(
    x_t: torch.Tensor,
    x0_hat: torch.Tensor,
    t: int,
    t_prev: int,
    eta: float,
    s: Schedule,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """Reverse update in the x0 parameterization; t_prev = -1 returns x0_hat."""
    if t_prev >= t:
        raise ValueError(f"t_prev={t_prev} must be below t={t}")
    ab_t = s.alpha_bar_at(t)
    ab_p = s.alpha_bar_at(t_prev)
    eps_hat = (x_t - math.sqrt(ab_t) * x0_hat) / math.sqrt(1.0 - ab_t)
    if eta > 0.0:
        if noise is None:
            raise ValueError("eta > 0 requires noise")
        sigma = eta * math.sqrt((1 - ab_p) / (1 - ab_t)) * math.sqrt(1 - ab_t / ab_p)
    else:
        sigma = 0.0
    out = math.sqrt(ab_p) * x0_hat + math.sqrt(max(1.0 - ab_p - sigma * sigma, 0.0)) * eps_hat
    if sigma > 0.0:
        out = out + sigma * noise
    return out


def step_subsequence(T: int, steps: int) -> list:
    """Evenly spaced decreasing step indices from T-1 down to 0."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must lie in [1, T], got {steps}")
    raw = torch.linspace(T - 1, 0, steps).round().to(torch.long).tolist()
    out = []
    for t in raw:
        if not out or t < out[-1]:
            out.append(int(t))
    return out


def check_vectors(path, tol: float = 1e-9) -> float:
    """Verify this module against an exported test-vector JSON.

    Returns the worst deviation; raises if any alpha_bar probe or DDIM case
    disagrees beyond ``tol``.
    """
    with open(path) as f:
        payload = json.load(f)
    s = make_schedule(payload["T"], payload["beta_start"], payload["beta_end"])
    worst = 0.0
    for t, value in payload["alpha_bar"]:
        worst = max(worst, abs(s.alpha_bar_at(int(t)) - value))
    for case in payload["ddim_cases"]:
        got = ddim_step(
            torch.tensor([case["x_t"]], dtype=torch.float64),
            torch.tensor([case["x0_hat"]], dtype=torch.float64),
            case["t"], case["t_prev"], 0.0, s,
        )
        worst = max(worst, abs(float(got[0]) - case["expected"]))
    if worst > tol:
        raise ValueError(f"schedule disagrees with test vectors by {worst:.3e} (> {tol})")
    return worst
