"""Flow-matching noise schedule, training loss, and deterministic Euler
sampler.

The forward path is the linear interpolation z_t = (1 - sigma_t) z0 +
sigma_t * eps on a uniform sigma grid sigma_t = t / T, which makes the
exact-noise-oracle sampler property analytic: with the true eps the Euler
update follows the straight line back to z0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from .backbone import DenoiserOutput
from .codec import ShapeError, TextLatent
from .config import DiffusionConfig


class NumericalError(RuntimeError):
    """Non-finite values produced where finite math was required."""


@dataclass
class NoiseSchedule:
    """sigma_t and loss weight w_t over integer timesteps 0..T.

    sigma runs from 1 at t = T (pure noise) down to 0 at t = 0 along the
    sampling direction; weights are finite and positive.
    """

    total_steps: int
    sigma: np.ndarray
    weight: np.ndarray

    @classmethod
    def from_config(cls, cfg: DiffusionConfig) -> "NoiseSchedule":
        T = cfg.num_steps
        if cfg.schedule != "linear":
            raise ValueError(f"unknown schedule {cfg.schedule!r}")
        sigma = np.arange(T + 1, dtype=np.float64) / T
        if cfg.weight == "unit":
            weight = np.ones(T + 1)
        elif cfg.weight == "sd3-like":
            # logistic-normal density over sigma, clipped away from the
            # endpoints to stay finite and positive
            s = np.clip(sigma, 1 / (4 * T), 1 - 1 / (4 * T))
            logit = np.log(s / (1 - s))
            weight = np.exp(-0.5 * logit**2) / (s * (1 - s) * math.sqrt(2 * math.pi))
        else:
            raise ValueError(f"unknown weight mode {cfg.weight!r}")
        if not (np.isfinite(weight).all() and (weight > 0).all()):
            raise NumericalError("schedule weights must be finite and positive")
        return cls(total_steps=T, sigma=sigma, weight=weight)

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 0 <= t <= self.total_steps:
            raise ValueError(f"timestep {t} outside [0, {self.total_steps}]")
        return t


@dataclass
class TimestepSampler:
    """Training timesteps from a logit-normal distribution mapped onto [0, T)."""

    total_steps: int
    loc: float = 0.0
    scale: float = 1.0

    def sample(self, rng: np.random.Generator, n: int = 1) -> np.ndarray:
        u = 1.0 / (1.0 + np.exp(-rng.normal(self.loc, self.scale, size=n)))
        return np.minimum((u * self.total_steps).astype(np.int64), self.total_steps - 1)


@dataclass
class DenoiseState:
    """Per-timestep sampler bundle. `features` belong to the forward pass
    that produced `z_t` (None before the first step)."""

    timestep: int
    z_t: torch.Tensor
    z_lq: torch.Tensor
    z_text: TextLatent
    guidance: object = None  # GuidanceRecord once the pipeline is driving
    features: Optional[list[torch.Tensor]] = None
    tsm_ocr: Optional[str] = None


def make_noisy(z0: torch.Tensor, eps: torch.Tensor, t: int, sched: NoiseSchedule) -> torch.Tensor:
    """Exact affine mix (1 - sigma_t) z0 + sigma_t eps; inputs untouched."""
    z0 = torch.as_tensor(z0)
    eps = torch.as_tensor(eps)
    if z0.shape != eps.shape:
        raise ShapeError(f"z0 shape {tuple(z0.shape)} != eps shape {tuple(eps.shape)}")
    s = float(sched.sigma[sched.check_t(t)])
    return (1.0 - s) * z0 + s * eps


def diffusion_loss(model, z0, z_lq, z_text, t, eps, sched: NoiseSchedule) -> torch.Tensor:
    """w_t-weighted mean-squared error between true and predicted noise.

    Accepts a single sample or a batch; `t` may be per-sample. The result is
    differentiable w.r.t. model parameters.
    """
    z0 = torch.as_tensor(z0)
    eps = torch.as_tensor(eps)
    batched = z0.ndim == 3
    ts = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if batched:
        if len(ts) == 1:
            ts = np.repeat(ts, z0.shape[0])
        sig = torch.as_tensor(sched.sigma[ts], dtype=z0.dtype)[:, None, None]
        z_t = (1.0 - sig) * z0 + sig * eps
        out = model(z_t, z_lq, z_text, torch.as_tensor(ts))
        if not torch.isfinite(out.predicted_noise).all():
            raise NumericalError("model produced non-finite noise prediction")
        per = ((eps - out.predicted_noise) ** 2).mean(dim=(1, 2))
        w = torch.as_tensor(sched.weight[ts], dtype=z0.dtype)
        return (w * per).mean()
    z_t = make_noisy(z0, eps, int(ts[0]), sched)
    out = model(z_t, z_lq, z_text, int(ts[0]))
    if not torch.isfinite(out.predicted_noise).all():
        raise NumericalError("model produced non-finite noise prediction")
    w = float(sched.weight[sched.check_t(int(ts[0]))])
    return w * ((eps - out.predicted_noise) ** 2).mean()


def sample_step(state: DenoiseState, model, sched: NoiseSchedule) -> DenoiseState:
    """One deterministic Euler step from timestep t to t - 1.

    The implied clean latent is (z_t - sigma_t * eps_hat) / (1 - sigma_t);
    at the initial pure-noise state (sigma = 1) that ratio is undefined, so
    the LQ latent stands in as the only available clean-state prior there.
    """
    t = state.timestep
    if t <= 0:
        raise ValueError("sample_step called at timestep 0")
    sched.check_t(t)
    out: DenoiserOutput = model(state.z_t, state.z_lq, state.z_text, t)
    eps_hat = out.predicted_noise
    if not torch.isfinite(eps_hat).all():
        raise NumericalError("model produced non-finite noise prediction")
    s_t = float(sched.sigma[t])
    s_prev = float(sched.sigma[t - 1])
    if s_t >= 1.0:
        z0_implied = state.z_lq
    else:
        z0_implied = (state.z_t - s_t * eps_hat) / (1.0 - s_t)
    z_next = state.z_t + (s_prev - s_t) * (eps_hat - z0_implied)
    return DenoiseState(
        timestep=t - 1, z_t=z_next, z_lq=state.z_lq, z_text=state.z_text,
        guidance=state.guidance, features=out.features, tsm_ocr=None,
    )


def full_denoise(
    z_lq: torch.Tensor,
    guidance_provider: Callable[[int], TextLatent],
    model,
    sched: NoiseSchedule,
    num_steps: int,
    *,
    z_init: Optional[torch.Tensor] = None,
    seed: Optional[int] = None,
    observer: Optional[Callable[[int, DenoiseState], None]] = None,
) -> torch.Tensor:
    """Run the full T-step loop from pure noise down to z_0.

    `guidance_provider(k)` supplies the text latent for iteration k (k counts
    denoising iterations from the start, 0..T-1). `observer(k, state)` sees
    every post-step state; the returned latent is z_0.
    """
    if num_steps != sched.total_steps:
        raise ValueError(f"num_steps {num_steps} != schedule total_steps {sched.total_steps}")
    z_lq = torch.as_tensor(z_lq)
    if z_init is not None:
        z_t = torch.as_tensor(z_init).clone()
    else:
        gen = torch.Generator()
        gen.manual_seed(0 if seed is None else int(seed))
        z_t = torch.randn(z_lq.shape, generator=gen, dtype=z_lq.dtype)
    state = DenoiseState(
        timestep=num_steps, z_t=z_t, z_lq=z_lq, z_text=guidance_provider(0),
    )
    for k in range(num_steps):
        state.z_text = guidance_provider(k)
        state = sample_step(state, model, sched)
        if observer is not None:
            observer(k, state)
    return state.z_t
