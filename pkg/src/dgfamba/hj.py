"""Hamilton-Jacobi constraint on the posterior flow, plus W2 validation oracles.

The potential should satisfy ``du/dt + |grad u|^2 / 2 = f`` with a
non-positive external force ``f = -net(z, t)^2``; the PINN loss is the mean
squared residual along a flow path plus the squared initial velocity.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .flow import FlowPath, potential_jet


@dataclass
class HjLossTerms:
    residual_sq_mean: torch.Tensor
    initial_term: torch.Tensor
    total: torch.Tensor

    @classmethod
    def from_parts(cls, residual_sq_mean, initial_term):
        return cls(residual_sq_mean, initial_term, residual_sq_mean + initial_term)


def external_force(z, t, force_net) -> torch.Tensor:
    """f(z, t) = -net(z, t)^2, non-positive by construction."""
    return -force_net(z, t).pow(2)


def hj_residual(u, force_net, z, t) -> torch.Tensor:
    _, grad, du_dt, _ = potential_jet(u, z, t, hessian=False)
    return du_dt + 0.5 * grad.pow(2).sum(-1) - external_force(z, t, force_net)


def hj_loss(path: FlowPath, u, force_net) -> HjLossTerms:
    """Residual at the path states z~_1..z~_T and ``|grad u(z~_0, 0)|^2``.

    All T + 1 states go through the potential in one batched evaluation.
    Both terms are averaged over the batch.
    """
    T = path.T
    if T < 1:
        raise ValueError("hj_loss needs a path with T >= 1 steps")
    z = torch.cat([s.z for s in path.states])
    b = path.states[0].z.shape[0]
    t = torch.arange(T + 1, dtype=z.dtype).repeat_interleave(b)
    _, grad, du_dt, _ = potential_jet(u, z, t, hessian=False)
    res = du_dt[b:] + 0.5 * grad[b:].pow(2).sum(-1) - external_force(z[b:], t[b:], force_net)
    residual_sq_mean = res.pow(2).mean()
    initial = grad[:b].pow(2).sum(-1).mean()
    return HjLossTerms.from_parts(residual_sq_mean, initial)


def path_action(path: FlowPath) -> torch.Tensor:
    """Kinetic action of a discrete path rescaled to unit time.

    Steps of length 1/T with displacement dz have velocity T dz, so the
    action is ``T * sum_t mean |dz_t|^2``; a constant-speed straight path
    between two translated Gaussians attains W2^2 exactly.
    """
    T = path.T
    steps = [(b.z - a.z).pow(2).sum(-1).mean() for a, b in zip(path.states[:-1], path.states[1:])]
    return T * torch.stack(steps).sum()


# ---------------------------------------------------------------- oracles

def w2_gaussian_oracle(m0, s0, m1, s1) -> float:
    """W2 between isotropic Gaussians N(m0, s0^2 I) and N(m1, s1^2 I)."""
    m0, m1 = np.atleast_1d(np.asarray(m0, float)), np.atleast_1d(np.asarray(m1, float))
    if m0.shape != m1.shape:
        raise ValueError("mean dimensions differ")
    if s0 <= 0 or s1 <= 0:
        raise ValueError("standard deviations must be positive")
    d = m0.size
    return float(np.sqrt(np.sum((m0 - m1) ** 2) + d * (s0 - s1) ** 2))


def w2_discrete_oracle(x, y) -> float:
    """Exact W2 between two uniform point clouds by optimal assignment."""
    x = np.asarray(x, float).reshape(len(x), -1)
    y = np.asarray(y, float).reshape(len(y), -1)
    if x.shape != y.shape:
        raise ValueError(f"point clouds must have equal size and dimension, got {x.shape} vs {y.shape}")
    cost = ((x[:, None, :] - y[None, :, :]) ** 2).sum(-1)
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))
