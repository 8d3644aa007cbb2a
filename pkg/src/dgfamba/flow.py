"""Latent flow space: feature VAE, potential networks and factorized flow paths.

A stylized latent is advected by the gradient of a learned potential,
``z_t = z_{t-1} + grad_z u(z_{t-1}, t-1)``, and its log-density is tracked by
the change of variables ``log q_t(z_t) = log q_{t-1}(z_{t-1}) - log|det(I + H_u)|``.
The prior path uses the diffusion potential ``psi = -D log p`` instead.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import SingularFlowError

LOGVAR_RANGE = (-10.0, 10.0)
SINGULAR_DET = 1e-12
LOG_2PI = math.log(2 * math.pi)


@dataclass
class LatentState:
    """Batch of latent points ``z`` (B, d) at flow step ``step``."""
    z: torch.Tensor
    step: int = 0
    log_density: Optional[torch.Tensor] = None
    mean: Optional[torch.Tensor] = None
    logvar: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.step < 0:
            raise ValueError("step must be >= 0")


@dataclass
class FlowPath:
    states: list[LatentState]
    logdet_terms: list[torch.Tensor] = field(default_factory=list)
    total_log_prob: Optional[torch.Tensor] = None

    @property
    def T(self) -> int:
        return len(self.states) - 1

    def check(self):
        assert [s.step for s in self.states] == list(range(len(self.states)))
        assert len(self.logdet_terms) == self.T


def gaussian_log_pdf(z, mean, logvar):
    """Diagonal Gaussian log-density, summed over the last axis."""
    return -0.5 * (LOG_2PI + logvar + (z - mean).pow(2) * torch.exp(-logvar)).sum(-1)


def gaussian_kl(mean, logvar):
    """KL(N(mean, exp(logvar)) || N(0, I)) per sample."""
    return 0.5 * (torch.exp(logvar) + mean.pow(2) - 1.0 - logvar).sum(-1)


# --------------------------------------------------------------------- VAE

class FeatureVAE(nn.Module):
    """Two strided conv stages, linear Gaussian heads and a mirrored decoder.

    The ``cond_head`` variant appends a conditioning latent to the pooled
    code; it encodes the stylized map given the original map's latent.
    """

    def __init__(self, shape: tuple[int, int, int], latent_dim: int = 8, width: int = 16):
        super().__init__()
        c, h, w = shape
        self.shape = (c, h, w)
        self.latent_dim = latent_dim
        self.width = width
        self.sizes = [(h, w)]
        for _ in range(2):
            h, w = (h + 1) // 2, (w + 1) // 2
            self.sizes.append((h, w))
        feat = width * h * w
        self.enc = nn.Sequential(
            nn.Conv2d(c, width, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(width, width, 3, stride=2, padding=1), nn.SiLU(),
            nn.Flatten(),
        )
        self.head = nn.Linear(feat, 2 * latent_dim)
        self.cond_head = nn.Linear(feat + latent_dim, 2 * latent_dim)
        self.dec_fc = nn.Linear(latent_dim, feat)
        self.dec_mid = nn.Conv2d(width, width, 3, padding=1)
        self.dec_out = nn.Conv2d(width, c, 3, padding=1)

    def encode_stats(self, f, condition=None):
        return self.heads(self.enc(f), condition)

    def heads(self, h, condition=None):
        if condition is None:
            out = self.head(h)
        else:
            out = self.cond_head(torch.cat([h, condition], dim=-1))
        mean, logvar = out.chunk(2, dim=-1)
        return mean, logvar.clamp(*LOGVAR_RANGE)

    def decode(self, z):
        h2, w2 = self.sizes[2]
        x = self.dec_fc(z).view(-1, self.width, h2, w2)
        x = F.interpolate(x, size=self.sizes[1], mode="nearest")
        x = F.silu(self.dec_mid(x))
        x = F.interpolate(x, size=self.sizes[0], mode="nearest")
        return self.dec_out(x)


def vae_encode(f, vae: FeatureVAE, generator=None, condition=None, sample=True) -> LatentState:
    """Reparameterized latent of ``f``; ``sample=False`` returns the mean."""
    return reparameterize(*vae.encode_stats(f, condition), generator, sample)


def reparameterize(mean, logvar, generator=None, sample=True) -> LatentState:
    if sample:
        xi = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        z = mean + torch.exp(0.5 * logvar) * xi
    else:
        z = mean
    return LatentState(z, 0, gaussian_log_pdf(z, mean, logvar), mean, logvar)


def vae_decode(state, vae: FeatureVAE):
    z = state.z if isinstance(state, LatentState) else state
    return vae.decode(z)


# ------------------------------------------------------------- potentials

class ScalarMLP(nn.Module):
    """Scalar tanh MLP on ``[z; t / horizon]``.

    ``jet`` propagates first and second derivatives forward through the
    layers, so value, grad_z, du/dt and the z-Hessian come out of a single
    pass and stay differentiable w.r.t. the parameters.
    """

    def __init__(self, dim: int, hidden: int = 32, depth: int = 2, horizon: int = 8,
                 out_std: float = 0.02):
        super().__init__()
        self.dim = dim
        self.horizon = horizon
        sizes = [dim + 1] + [hidden] * depth
        self.hidden = nn.ModuleList(nn.Linear(a, b) for a, b in zip(sizes[:-1], sizes[1:]))
        self.out = nn.Linear(hidden, 1)
        nn.init.trunc_normal_(self.out.weight, std=out_std, a=-2 * out_std, b=2 * out_std)
        nn.init.zeros_(self.out.bias)

    def _time(self, z, t):
        t = torch.as_tensor(t, dtype=z.dtype)
        return t.expand(z.shape[:-1]) if t.dim() == 0 else t

    def forward(self, z, t):
        x = torch.cat([z, (self._time(z, t) / self.horizon).unsqueeze(-1)], dim=-1)
        for layer in self.hidden:
            x = torch.tanh(layer(x))
        return self.out(x).squeeze(-1)

    def jet(self, z, t, hessian: bool = True):
        d = self.dim
        x = torch.cat([z, (self._time(z, t) / self.horizon).unsqueeze(-1)], dim=-1)
        scale = torch.ones(d + 1, dtype=z.dtype)
        scale[d] = 1.0 / self.horizon
        J = H = None
        for k, layer in enumerate(self.hidden):
            a = layer(x)
            if k == 0:
                J = (layer.weight * scale).expand(a.shape[0], -1, -1)
            else:
                J = torch.einsum("ij,bjn->bin", layer.weight, J)
                if hessian:
                    H = torch.einsum("ij,bjkl->bikl", layer.weight, H)
            x = torch.tanh(a)
            s1 = 1.0 - x * x
            if hessian:
                s2 = -2.0 * x * s1
                Jz = J[..., :d]
                H_new = s2[..., None, None] * Jz.unsqueeze(-1) * Jz.unsqueeze(-2)
                H = H_new if H is None else H_new + s1[..., None, None] * H
            J = s1.unsqueeze(-1) * J
        w = self.out.weight[0]
        value = x @ w + self.out.bias[0]
        grad = torch.einsum("j,bjn->bn", w, J)
        hess = torch.einsum("j,bjkl->bkl", w, H) if hessian else None
        return value, grad[:, :d], grad[:, d], hess


def autograd_jet(u: Callable, z, t):
    """Reference derivatives of any scalar ``u(z, t)`` via nested autograd."""
    with torch.enable_grad():
        z = z if z.requires_grad else z.detach().requires_grad_(True)
        t = torch.as_tensor(t, dtype=z.dtype)
        t = t.expand(z.shape[:-1]).clone().requires_grad_(True)
        value = u(z, t)
        gz, gt = torch.autograd.grad(value.sum(), (z, t), create_graph=True, allow_unused=True)
        if gz is None:
            gz = torch.zeros_like(z)
        if gt is None:
            gt = torch.zeros_like(t)
        rows = []
        for k in range(z.shape[-1]):
            if gz.requires_grad:
                (row,) = torch.autograd.grad(gz[:, k].sum(), z, create_graph=True, allow_unused=True)
            else:
                row = None
            rows.append(torch.zeros_like(z) if row is None else row)
        hess = torch.stack(rows, dim=-2)
    return value, gz, gt, hess


def potential_jet(u, z, t, hessian: bool = True):
    """(value, grad_z, du/dt, hessian_zz) of a potential at (z, t)."""
    if hasattr(u, "jet"):
        return u.jet(z, t, hessian)
    return autograd_jet(u, z, t)


# -------------------------------------------------------------- posterior

def _check_det(sign, logabsdet, what):
    if (logabsdet < math.log(SINGULAR_DET)).any() or not torch.isfinite(logabsdet).all():
        worst = logabsdet.min().item()
        raise SingularFlowError(f"{what}: |det J| = {math.exp(worst) if worst > -700 else 0.0:.3g} "
                                f"below {SINGULAR_DET}")


def evolve_posterior_step(state: LatentState, u) -> tuple[LatentState, torch.Tensor]:
    """One step ``z_{t-1} -> z_{t-1} + grad_z u(z_{t-1}, t)`` with its log|det(I + H_u)|.

    The step arriving at time t uses the velocity field at time t, so the
    residual terms for t = 1..T constrain exactly the velocities that move
    the path and t = 0 only carries the boundary condition.
    """
    _, grad, _, hess = potential_jet(u, state.z, float(state.step + 1))
    eye = torch.eye(state.z.shape[-1], dtype=state.z.dtype)
    sign, logdet = torch.linalg.slogdet(eye + hess)
    _check_det(sign, logdet, f"posterior step {state.step}")
    log_density = None if state.log_density is None else state.log_density - logdet
    return LatentState(state.z + grad, state.step + 1, log_density), logdet


def posterior_path_logprob(start: LatentState, u, T: int) -> tuple[FlowPath, torch.Tensor]:
    """Advect ``start`` (carrying log q(z~_0 | z_0)) for T steps.

    Each step contributes the Jacobian factor of its conditional, so the
    returned value telescopes to ``log q(z~_0|z_0) - sum_t logdet_t``,
    the log-density of the endpoint under the transported posterior.
    """
    if T < 0:
        raise ValueError("T must be >= 0")
    if start.log_density is None:
        raise ValueError("start state needs log_density = log q(z~_0 | z_0)")
    states, logdets = [start], []
    state = start
    for _ in range(T):
        state, ld = evolve_posterior_step(state, u)
        states.append(state)
        logdets.append(ld)
    path = FlowPath(states, logdets, state.log_density)
    return path, path.total_log_prob


# ------------------------------------------------------------------ prior

class GaussianDensity:
    """Diagonal Gaussian that can be advanced exactly under the diffusion flow."""

    def __init__(self, mean, std):
        self.mean = torch.as_tensor(mean)
        self.std = torch.as_tensor(std)
        if (self.std <= 0).any():
            raise ValueError("std must be positive")

    @classmethod
    def standard(cls, dim: int, dtype=torch.float32):
        return cls(torch.zeros(dim, dtype=dtype), torch.ones(dim, dtype=dtype))

    def log_prob(self, z):
        m, s = self.mean.to(z.dtype), self.std.to(z.dtype)
        return gaussian_log_pdf(z, m, 2 * torch.log(s).expand_as(z))

    def score(self, z):
        m, s = self.mean.to(z.dtype), self.std.to(z.dtype)
        return -(z - m) / s**2

    def score_jacobian(self, z):
        s = self.std.to(z.dtype).expand_as(z)
        return torch.diag_embed(-1.0 / s**2)

    def advance(self, D: float) -> "GaussianDensity":
        # z -> z + D (z - m) / s^2 is affine, so the pushforward stays Gaussian
        return GaussianDensity(self.mean, self.std * (1.0 + D / self.std**2))


Emission = Callable[[torch.Tensor, int], torch.Tensor]


def prior_path_logprob(z0, density, D: float, T: int,
                       emission: Emission | None = None) -> tuple[FlowPath, torch.Tensor]:
    """Diffusion-driven prior path from ``z0`` with psi = -D log p.

    ``density`` needs ``log_prob``, ``score`` and ``score_jacobian``; if it
    also has ``advance(D)`` the density is pushed forward after every step,
    otherwise it is held fixed. ``emission(z_t, t)`` adds the per-step
    decoding terms log p(z_t | z~_t); without it those terms are zero.
    """
    if D <= 0:
        raise ValueError("D must be positive")
    if T < 0:
        raise ValueError("T must be >= 0")
    z = z0.z if isinstance(z0, LatentState) else z0
    eye = torch.eye(z.shape[-1], dtype=z.dtype)
    logp = density.log_prob(z)
    emit = emission(z, 0) if emission is not None else torch.zeros_like(logp)
    states = [LatentState(z, 0, logp)]
    logdets = []
    for t in range(1, T + 1):
        jac = eye - D * density.score_jacobian(z)
        sign, logdet = torch.linalg.slogdet(jac)
        _check_det(sign, logdet, f"prior step {t}")
        z = z - D * density.score(z)
        logp = logp - logdet
        if hasattr(density, "advance"):
            density = density.advance(D)
        if emission is not None:
            emit = emit + emission(z, t)
        states.append(LatentState(z, t, logp))
        logdets.append(logdet)
    path = FlowPath(states, logdets, logp)
    return path, logp + emit
