"""Finite-difference spot checks of autograd gradients on sampled coordinates."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch


@dataclass
class GradSample:
    name: str
    index: int
    analytic: float
    numeric: float

    def rel_error(self, floor: float = 1e-3) -> float:
        return abs(self.analytic - self.numeric) / max(abs(self.numeric), floor)


def sampled_gradient_check(loss_fn: Callable[[], torch.Tensor], named_params: Sequence[tuple[str, torch.Tensor]],
                           n: int = 10, h: float = 1e-6, seed: int = 0) -> list[GradSample]:
    """Compare autograd with central differences on ``n`` random coordinates.

    ``loss_fn`` must be a deterministic function of the parameters. Parameters
    with no autograd path to the loss count as zero gradient.
    """
    names = [k for k, _ in named_params]
    params = [p for _, p in named_params]
    grads = torch.autograd.grad(loss_fn(), params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    gen = torch.Generator().manual_seed(seed)
    sizes = torch.tensor([p.numel() for p in params], dtype=torch.float64)
    out = []
    for _ in range(n):
        # size-weighted choice of tensor, then a uniform coordinate inside it
        k = int(torch.multinomial(sizes, 1, generator=gen))
        idx = int(torch.randint(0, params[k].numel(), (1,), generator=gen))
        flat = params[k].data.view(-1)
        orig = flat[idx].item()
        flat[idx] = orig + h
        up = loss_fn().item()
        flat[idx] = orig - h
        down = loss_fn().item()
        flat[idx] = orig
        out.append(GradSample(names[k], idx, grads[k].reshape(-1)[idx].item(), (up - down) / (2 * h)))
    return out
