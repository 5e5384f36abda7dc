"""Noise schedules, forward corruption, the epsilon-MSE training objective
with classifier-free condition dropout, and ancestral/deterministic samplers.

Images live in [0, 1] at module boundaries and [-1, 1] inside the model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import numcore


class InvalidT(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class NoiseSchedule:
    kind: str
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def to_meta(self) -> dict:
        return {"kind": self.kind, "T": self.T}


@dataclass
class SamplerConfig:
    method: str = "deterministic"  # or "ancestral"
    steps_used: int = 50
    guidance_scale: float = 3.0
    style_weight: float = 1.0

    def validate(self, schedule: NoiseSchedule):
        if self.method not in ("ancestral", "deterministic"):
            raise ValueError(f"unknown sampler method {self.method!r}")
        if not (1 <= self.steps_used <= schedule.T):
            raise ValueError("steps_used must lie in [1, T]")
        if self.guidance_scale < 0 or self.style_weight < 0:
            raise ValueError("guidance_scale and style_weight must be >= 0")


def make_schedule(kind: str = "cosine", T: int = 400) -> NoiseSchedule:
    if not (50 <= T <= 1000):
        raise InvalidT(f"T={T} outside [50, 1000]")
    if kind == "linear":
        beta = np.linspace(1e-4, 2e-2, T)
    elif kind == "cosine":
        s = 0.008
        ts = np.arange(T + 1) / T
        f = np.cos((ts + s) / (1 + s) * math.pi / 2) ** 2
        alpha_bar = f / f[0]
        beta = np.clip(1 - alpha_bar[1:] / alpha_bar[:-1], 1e-8, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sched = NoiseSchedule(kind, T, beta, alpha, alpha_bar)
    assert np.all(np.diff(alpha_bar) < 0), "alpha_bar must strictly decrease"
    assert alpha_bar[0] >= 0.99
    return sched


def q_sample(x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor,
             schedule: NoiseSchedule) -> torch.Tensor:
    """Forward corruption x_t = sqrt(ab) x0 + sqrt(1-ab) eps."""
    if eps.shape != x0.shape:
        raise numcore.ShapeMismatch(tuple(x0.shape), tuple(eps.shape))
    ab = torch.from_numpy(schedule.alpha_bar).to(x0.dtype)[t]
    while ab.dim() < x0.dim():
        ab = ab.unsqueeze(-1)
    return ab.sqrt() * x0 + (1 - ab).sqrt() * eps


def training_step(model, batch: torch.Tensor, conditions: dict,
                  schedule: NoiseSchedule, drop_prob: float = 0.1,
                  generator: torch.Generator | None = None) -> torch.Tensor:
    """One epsilon-MSE objective evaluation with classifier-free dropout.

    `batch` holds images in [-1, 1]. `conditions` carries 'text' (B,5,d),
    'style' (B,k,d) and 'control' (B,1,H,W). Text and style are each
    independently replaced by the null encoding with probability drop_prob;
    the control input is never dropped.
    """
    b = batch.shape[0]
    t = torch.randint(0, schedule.T, (b,), generator=generator)
    eps = torch.randn(batch.shape, generator=generator)
    x_t = q_sample(batch, t, eps, schedule)

    text = conditions.get("text")
    style = conditions.get("style")
    if drop_prob > 0:
        if text is not None:
            drop = torch.rand(b, generator=generator) < drop_prob
            text = torch.where(drop[:, None, None], torch.zeros_like(text), text)
        if style is not None:
            drop = torch.rand(b, generator=generator) < drop_prob
            style = torch.where(drop[:, None, None], torch.zeros_like(style), style)

    eps_hat = model(x_t, t, text, style, conditions.get("control"))
    loss = numcore.mse_loss(eps_hat, eps)
    if not torch.isfinite(loss):
        raise NonFiniteLoss(float(loss))
    return loss


def guided_eps(model, x_t, t, cond: dict, w: float) -> torch.Tensor:
    """Classifier-free guidance: eps_u + w (eps_c - eps_u); w=1 is the
    conditional prediction exactly, w=0 the unconditional one."""
    control = cond.get("control")
    if w == 1.0:
        return model(x_t, t, cond.get("text"), cond.get("style"), control)
    eps_u = model(x_t, t, None, None, control)
    if w == 0.0:
        return eps_u
    eps_c = model(x_t, t, cond.get("text"), cond.get("style"), control)
    return eps_u + w * (eps_c - eps_u)


def _to_model_range(img01):
    return img01 * 2.0 - 1.0


def _from_model_range(x):
    return (x.clamp(-1.0, 1.0) + 1.0) / 2.0


@torch.no_grad()
def sample(model, cond: dict, sampler: SamplerConfig, schedule: NoiseSchedule,
           generator: torch.Generator, shape=None) -> torch.Tensor:
    """Generate a batch of images in [0, 1].

    Ancestral: full-length DDPM posterior steps with fresh noise.
    Deterministic: DDIM (eta=0) over an evenly spaced step subset.
    """
    sampler.validate(schedule)
    if shape is None:
        n = cond["text"].shape[0] if cond.get("text") is not None else 1
        s = model.cfg.image_size
        shape = (n, 1, s, s)
    x = torch.randn(shape, generator=generator)
    w = sampler.guidance_scale
    prev_style_weight = model.style_weight
    model.style_weight = sampler.style_weight
    try:
        if sampler.method == "ancestral":
            for ti in reversed(range(schedule.T)):
                t = torch.full((shape[0],), ti, dtype=torch.long)
                eps = guided_eps(model, x, t, cond, w)
                a = schedule.alpha[ti]
                ab = schedule.alpha_bar[ti]
                x = (x - (1 - a) / math.sqrt(1 - ab) * eps) / math.sqrt(a)
                if ti > 0:
                    sigma = math.sqrt(schedule.beta[ti])
                    x = x + sigma * torch.randn(shape, generator=generator)
        else:
            steps = np.linspace(0, schedule.T - 1, sampler.steps_used).round().astype(int)
            steps = np.unique(steps)[::-1]
            for j, ti in enumerate(steps):
                t = torch.full((shape[0],), int(ti), dtype=torch.long)
                eps = guided_eps(model, x, t, cond, w)
                ab = schedule.alpha_bar[ti]
                x0 = (x - math.sqrt(1 - ab) * eps) / math.sqrt(ab)
                x0 = x0.clamp(-1.5, 1.5)
                if j + 1 < len(steps):
                    ab_prev = schedule.alpha_bar[steps[j + 1]]
                    x = math.sqrt(ab_prev) * x0 + math.sqrt(1 - ab_prev) * eps
                else:
                    x = x0
    finally:
        model.style_weight = prev_style_weight
    return _from_model_range(x)
