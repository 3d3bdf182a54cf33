"""Backbone-independent diffusion math.

Forward noising, the mask-weighted denoising loss, classifier-free guidance,
and a deterministic (eta = 0) sampler.  Everything here is pure given a
backbone handle.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np
import torch

from .concepts import build_concept_edits


class SamplingDivergedError(RuntimeError):
    def __init__(self, step_index: int):
        super().__init__(f"non-finite latent at sampling step {step_index}")
        self.step_index = step_index


@dataclass
class NoiseSchedule:
    """Per-step alpha and cumulative alpha-bar over T steps."""

    alpha: torch.Tensor
    alpha_bar: torch.Tensor
    validate: bool = True

    def __post_init__(self):
        self.alpha = torch.as_tensor(self.alpha, dtype=torch.float64)
        self.alpha_bar = torch.as_tensor(self.alpha_bar, dtype=torch.float64)
        if self.alpha.shape != self.alpha_bar.shape or self.alpha.ndim != 1:
            raise ValueError("alpha and alpha_bar must be 1-D and equally long")
        if self.validate:
            if not torch.all((self.alpha > 0) & (self.alpha <= 1)):
                raise ValueError("alpha values must lie in (0, 1]")
            if not torch.all((self.alpha_bar > 0) & (self.alpha_bar <= 1)):
                raise ValueError("alpha_bar values must lie in (0, 1]")
            if not torch.all(self.alpha_bar[1:] < self.alpha_bar[:-1]):
                raise ValueError("alpha_bar must be strictly decreasing")
            if not torch.allclose(
                self.alpha_bar, torch.cumprod(self.alpha, dim=0), atol=1e-6
            ):
                raise ValueError("alpha_bar must be the cumulative product of alpha")

    @property
    def T(self) -> int:
        return self.alpha.shape[0]


def linear_schedule(T: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    beta = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(alpha, torch.cumprod(alpha, dim=0))


def q_sample(z0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Forward diffusion: sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    if z0.shape != eps.shape:
        raise ValueError(f"z0 shape {tuple(z0.shape)} != eps shape {tuple(eps.shape)}")
    t = torch.as_tensor(t)
    if torch.any(t < 0) or torch.any(t >= sched.T):
        raise ValueError(f"timestep out of range [0, {sched.T})")
    abar = sched.alpha_bar[t].to(z0.dtype)
    while abar.ndim < z0.ndim:
        abar = abar.unsqueeze(-1)
    return torch.sqrt(abar) * z0 + torch.sqrt(1.0 - abar) * eps


def masked_loss(
    eps: torch.Tensor,
    eps_hat: torch.Tensor,
    mask: torch.Tensor,
    reduction: str = "area",
) -> torch.Tensor:
    """Squared error on unmasked cells, weighted by the latent mask.

    ``reduction="area"`` divides by the effective unmasked cell count so the
    loss scale is independent of the mask ratio; ``"sum"`` keeps the raw
    masked sum.
    """
    if reduction not in ("area", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    mask = torch.as_tensor(mask, dtype=eps.dtype)
    if torch.any(mask < 0) or torch.any(mask > 1):
        raise ValueError("mask entries must lie in [0, 1]")
    try:
        weights = mask.expand_as(eps) if mask.shape != eps.shape else mask
        diff = eps - eps_hat
    except RuntimeError as exc:
        raise ValueError(f"shapes not broadcast-compatible: {exc}") from exc
    total = (weights * diff * diff).sum()
    if not mask.any():
        warnings.warn("mask is all-zero; masked loss degenerates to 0", RuntimeWarning)
        return eps_hat.sum() * 0.0
    if reduction == "sum":
        return total
    denom = torch.clamp(weights.sum(), min=1.0)
    return total / denom


def cfg_predict(
    backbone,
    z_t: torch.Tensor,
    t,
    cond,
    uncond,
    w: float,
    edits=None,
    adapter_features=None,
) -> torch.Tensor:
    """eps_u + w * (eps_c - eps_u); edits and adapter apply on the cond branch only."""
    if w < 0:
        raise ValueError(f"guidance scale must be >= 0, got {w}")
    eps_u = backbone.unet_predict(z_t, t, uncond.t_p)
    eps_c = backbone.unet_predict(z_t, t, cond.t_p, edits, adapter_features)
    return eps_u + w * (eps_c - eps_u)


@dataclass
class SampleConfig:
    steps: int = 50
    cfg_scale: float = 9.0
    scale_overrides: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


@dataclass
class SampleResult:
    image: torch.Tensor
    latent: torch.Tensor


def sample(
    backbone,
    cond,
    uncond,
    sketch: Optional[torch.Tensor],
    config: SampleConfig,
    seed: int,
    progress_cb=None,
) -> SampleResult:
    """Deterministic generation: seeded Gaussian start, eta-0 denoising updates.

    z_{t-1} = sqrt(abar_prev) * z0_hat + sqrt(1 - abar_prev) * eps_hat with
    z0_hat = (z_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t).
    """
    sched = backbone.noise_schedule
    edits = build_concept_edits(cond.concept_slots, config.scale_overrides)
    adapter_features = None
    if sketch is not None:
        adapter_features = backbone.extract_adapter_features(sketch)

    r = backbone.latent_resolution
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(
        (backbone.latent_channels, r, r), generator=gen, dtype=torch.float32
    )

    timesteps = np.linspace(sched.T - 1, 0, config.steps).round().astype(int)
    with torch.no_grad():
        for i, t in enumerate(timesteps):
            eps_hat = cfg_predict(
                backbone, z, int(t), cond, uncond, config.cfg_scale, edits, adapter_features
            )
            abar_t = float(sched.alpha_bar[t])
            abar_prev = float(sched.alpha_bar[timesteps[i + 1]]) if i + 1 < len(timesteps) else 1.0
            z0_hat = (z - (1.0 - abar_t) ** 0.5 * eps_hat) / abar_t**0.5
            z = abar_prev**0.5 * z0_hat + (1.0 - abar_prev) ** 0.5 * eps_hat
            if not torch.isfinite(z).all():
                raise SamplingDivergedError(i)
            if progress_cb is not None:
                progress_cb(i + 1, len(timesteps))
        image = backbone.vae_decode(z)
    return SampleResult(image=image, latent=z)
