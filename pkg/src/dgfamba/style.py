"""Per-channel feature style (mean, std), random style sampling and AdaIN."""
from __future__ import annotations

from dataclasses import dataclass

import torch

EPS = 1e-5


@dataclass
class StyleStats:
    """Per-channel style. ``mu``/``sigma`` are (C,) or batched (B, C)."""
    mu: torch.Tensor
    sigma: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise ValueError(f"mu {tuple(self.mu.shape)} / sigma {tuple(self.sigma.shape)} mismatch")
        if (self.sigma < 0).any():
            raise ValueError("sigma must be non-negative")

    @property
    def channels(self) -> int:
        return self.mu.shape[-1]


def compute_style_stats(f: torch.Tensor) -> StyleStats:
    """Mean and population std over spatial positions of a (B, C, H, W) map."""
    mu = f.mean(dim=(2, 3))
    var = (f - mu[:, :, None, None]).pow(2).mean(dim=(2, 3))
    # sqrt'(0) is infinite; the clamp keeps gradients finite for flat channels
    sigma = torch.sqrt(var.clamp_min(1e-24))
    return StyleStats(mu, sigma)


def sample_style(channels: int, generator: torch.Generator | int | None = None,
                 batch: int | None = None, dtype=torch.float32) -> StyleStats:
    """Target style with every entry drawn i.i.d. from U[0, 1]."""
    if channels < 1:
        raise ValueError("channels must be >= 1")
    if isinstance(generator, int):
        generator = torch.Generator().manual_seed(generator)
    shape = (channels,) if batch is None else (batch, channels)
    mu = torch.rand(shape, generator=generator, dtype=dtype)
    sigma = torch.rand(shape, generator=generator, dtype=dtype)
    return StyleStats(mu, sigma)


def _expand(v: torch.Tensor, f: torch.Tensor) -> torch.Tensor:
    if v.dim() == 1:
        v = v.unsqueeze(0)
    return v[:, :, None, None].to(f.dtype)


def stylize(f: torch.Tensor, original: StyleStats, target: StyleStats, eps: float = EPS) -> torch.Tensor:
    """Re-normalize ``f`` from its own style to ``target`` (AdaIN)."""
    if original.channels != f.shape[1] or target.channels != f.shape[1]:
        raise ValueError(f"channel mismatch: feature has {f.shape[1]}, "
                         f"styles have {original.channels}/{target.channels}")
    normalized = (f - _expand(original.mu, f)) / _expand(original.sigma, f).clamp_min(eps)
    return _expand(target.sigma, f) * normalized + _expand(target.mu, f)


def randomize_style(f: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
    """AdaIN ``f`` to an independently sampled U[0,1] style per sample."""
    target = sample_style(f.shape[1], generator, batch=f.shape[0], dtype=f.dtype)
    return stylize(f, compute_style_stats(f), target)
