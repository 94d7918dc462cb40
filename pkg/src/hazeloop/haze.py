"""Atmospheric scattering model: haze synthesis and its analytic inverse.

J_hazy = J * t + A * (1 - t) with transmission t = exp(-beta * depth).
The inverse is the testing oracle for everything downstream.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import DegenerateTransmissionError, InputError

T_MIN = 0.05  # inversion guard; keeps quantization-noise amplification <= 20x


@dataclass(frozen=True)
class HazeParams:
    beta: float
    atmosphere: tuple  # (A_r, A_g, A_b), each in [0,1]

    def __post_init__(self):
        if self.beta < 0:
            raise InputError(f"beta must be >= 0, got {self.beta}")
        if len(self.atmosphere) != 3 or not all(0 <= a <= 1 for a in self.atmosphere):
            raise InputError(f"atmospheric light must be a 3-vector in [0,1]: {self.atmosphere}")

    def light(self) -> torch.Tensor:
        return torch.tensor(self.atmosphere, dtype=torch.float32).view(3, 1, 1)


def _check_depth(depth: torch.Tensor):
    if not torch.isfinite(depth).all():
        raise InputError("depth map contains non-finite values")
    if (depth <= 0).any():
        raise InputError("depth map must be strictly positive")


def transmission(depth: torch.Tensor, beta: float) -> torch.Tensor:
    """t(x) = exp(-beta * d(x)), same shape as depth, values in (0,1]."""
    _check_depth(depth)
    if beta < 0:
        raise InputError(f"beta must be >= 0, got {beta}")
    return torch.exp(-beta * depth)


def synthesize_haze(image: torch.Tensor, depth: torch.Tensor, params: HazeParams) -> torch.Tensor:
    """Blend scene radiance with airlight: J*t + A*(1-t)."""
    if image.shape[-2:] != depth.shape:
        raise InputError(f"image {tuple(image.shape)} and depth {tuple(depth.shape)} disagree")
    t = transmission(depth, params.beta).unsqueeze(0)
    return image * t + params.light() * (1.0 - t)


def invert_haze(
    hazy: torch.Tensor,
    depth: torch.Tensor,
    params: HazeParams,
    t_min: float = T_MIN,
) -> torch.Tensor:
    """Exact algebraic inverse of synthesize_haze, clamped to [0,1].

    Refuses inputs where any transmission falls below t_min.
    """
    if hazy.shape[-2:] != depth.shape:
        raise InputError(f"image {tuple(hazy.shape)} and depth {tuple(depth.shape)} disagree")
    t = transmission(depth, params.beta)
    bad = (t < t_min).float().mean().item()
    if bad > 0:
        raise DegenerateTransmissionError(bad, t_min)
    t = t.unsqueeze(0)
    restored = (hazy - params.light() * (1.0 - t)) / t
    return restored.clamp(0.0, 1.0)


def sample_params(rng: torch.Generator, beta_range=(0.4, 1.6), a_range=(0.7, 1.0)) -> HazeParams:
    """Per-image haze parameters spanning light to dense haze."""
    beta = float(torch.empty(1).uniform_(*beta_range, generator=rng))
    a = torch.empty(3).uniform_(*a_range, generator=rng)
    return HazeParams(beta=beta, atmosphere=tuple(float(v) for v in a))
