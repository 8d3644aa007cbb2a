"""Miniature VMamba-style encoder.

Four blocks of SS2D layers over a patch grid, with a 2x strided patch merge
between blocks. Every layer output (the state embedding) can be captured
through ``hooks`` and optionally replaced through ``transform``, which is how
the trainer injects style randomization into the forward pass.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NumericError


@dataclass
class BackboneConfig:
    block_layer_counts: list[int] = field(default_factory=lambda: [2, 2, 4, 2])
    channels_per_block: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    state_dim: int = 8
    patch_size: int = 4
    num_classes: int = 4
    image_size: int = 32

    def __post_init__(self):
        if len(self.block_layer_counts) != 4 or len(self.channels_per_block) != 4:
            raise ConfigError("block_layer_counts and channels_per_block need 4 entries")
        dims = [*self.block_layer_counts, *self.channels_per_block,
                self.state_dim, self.patch_size, self.num_classes, self.image_size]
        if any(int(v) <= 0 for v in dims):
            raise ConfigError(f"all backbone dimensions must be positive, got {dims}")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")

    @property
    def num_layers(self) -> int:
        return sum(self.block_layer_counts)

    def block_of(self, layer_index: int) -> int:
        """0-based block containing the 1-based ``layer_index``."""
        if not 1 <= layer_index <= self.num_layers:
            raise ConfigError(f"layer index {layer_index} outside [1, {self.num_layers}]")
        upper = 0
        for b, n in enumerate(self.block_layer_counts):
            upper += n
            if layer_index <= upper:
                return b
        raise AssertionError("unreachable")

    def last_layer_of_blocks(self) -> list[int]:
        out, upper = [], 0
        for n in self.block_layer_counts:
            upper += n
            out.append(upper)
        return out

    def grid_size(self, block: int) -> int:
        """Spatial side length of the feature maps in ``block``."""
        side = self.image_size // self.patch_size
        for _ in range(block):
            side = max(1, (side + 1) // 2)
        return side


@dataclass
class ScanParams:
    """Discretization inputs of one selective scan.

    A: (C, N) diagonal continuous-time transition, one row per channel.
    delta: (..., L, C) positive step sizes.
    B, C: (..., L, N) input-dependent input/readout projections.
    """
    A: torch.Tensor
    delta: torch.Tensor
    B: torch.Tensor
    C: torch.Tensor

    def check(self):
        for name in ("A", "delta", "B", "C"):
            if not torch.isfinite(getattr(self, name)).all():
                raise NumericError(f"non-finite scan parameter {name}")
        if (self.delta <= 0).any():
            raise NumericError("scan step sizes must be positive")


def _discretize(x, p: ScanParams):
    # zero-order hold on diagonal A; a, b: (..., L, C, N)
    dA = p.delta.unsqueeze(-1) * p.A
    a = torch.exp(dA)
    b = p.delta.unsqueeze(-1) * p.B.unsqueeze(-2) * x.unsqueeze(-1)
    return a, b


def selective_scan(x: torch.Tensor, params: ScanParams) -> torch.Tensor:
    """y_t = C_t h_t with h_t = exp(delta_t A) h_{t-1} + delta_t B_t x_t.

    ``x`` is (..., L, C). The linear recurrence is evaluated with a
    Hillis-Steele inclusive scan (log2 L rounds of the associative combine),
    which only ever multiplies decay factors in (0, 1].
    """
    params.check()
    a, b = _discretize(x, params)
    L = x.shape[-2]
    k = 1
    while k < L:
        pad_a = torch.ones_like(a[..., :k, :, :])
        pad_b = torch.zeros_like(b[..., :k, :, :])
        a_prev = torch.cat([pad_a, a[..., :-k, :, :]], dim=-3)
        b_prev = torch.cat([pad_b, b[..., :-k, :, :]], dim=-3)
        b = b + a * b_prev
        a = a * a_prev
        k *= 2
    return torch.einsum("...lcn,...ln->...lc", b, params.C)


def selective_scan_reference(x: torch.Tensor, params: ScanParams) -> torch.Tensor:
    """Step-by-step recurrence. Slow; used as the oracle for ``selective_scan``."""
    params.check()
    a, b = _discretize(x, params)
    h = torch.zeros_like(b[..., 0, :, :])
    ys = []
    for t in range(x.shape[-2]):
        h = a[..., t, :, :] * h + b[..., t, :, :]
        ys.append((h * params.C[..., t, None, :]).sum(-1))
    return torch.stack(ys, dim=-2)


# Four traversal orders of an H x W grid: row-major, reversed row-major,
# column-major, reversed column-major.
def cross_scan(x: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> (B, 4, L, C) directional sequences."""
    rows = x.flatten(2)
    cols = x.transpose(2, 3).flatten(2)
    seqs = torch.stack([rows, rows.flip(-1), cols, cols.flip(-1)], dim=1)
    return seqs.transpose(2, 3)


def cross_merge(y: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Inverse of :func:`cross_scan` followed by a sum over the directions."""
    y = y.transpose(2, 3)  # B, 4, C, L
    b, _, c, _ = y.shape
    rows = y[:, 0] + y[:, 1].flip(-1)
    cols = y[:, 2] + y[:, 3].flip(-1)
    out = rows.view(b, c, height, width)
    out = out + cols.view(b, c, width, height).transpose(2, 3)
    return out


def _trunc_normal(module: nn.Module, std: float = 0.02):
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d)):
            nn.init.trunc_normal_(m.weight, std=std, a=-2 * std, b=2 * std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class SS2D(nn.Module):
    """Cross-scan selective SSM with projections shared across directions."""

    def __init__(self, channels: int, state_dim: int, dt_min=1e-3, dt_max=1e-1):
        super().__init__()
        self.channels = channels
        self.state_dim = state_dim
        self.dt_proj = nn.Linear(channels, channels)
        self.B_proj = nn.Linear(channels, state_dim, bias=False)
        self.C_proj = nn.Linear(channels, state_dim, bias=False)
        self.A_log = nn.Parameter(torch.empty(channels, state_dim))
        self.D = nn.Parameter(torch.ones(channels))
        _trunc_normal(self)
        with torch.no_grad():
            self.A_log.uniform_(0.0, math.log(state_dim + 1.0))
            dt = torch.exp(torch.empty(channels).uniform_(math.log(dt_min), math.log(dt_max)))
            self.dt_proj.bias.copy_(dt + torch.log(-torch.expm1(-dt)))  # softplus^-1

    def scan_params(self, seq: torch.Tensor) -> ScanParams:
        return ScanParams(
            A=-torch.exp(self.A_log),
            delta=F.softplus(self.dt_proj(seq)),
            B=self.B_proj(seq),
            C=self.C_proj(seq),
        )

    def scan(self, seq: torch.Tensor) -> torch.Tensor:
        """One directional scan of a (..., L, C) sequence, skip term included."""
        return selective_scan(seq, self.scan_params(seq)) + seq * self.D

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _, _, h, w = x.shape
        y = self.scan(cross_scan(x))
        return cross_merge(y, h, w)


def ss2d_block_forward(f: torch.Tensor, ss2d: SS2D) -> torch.Tensor:
    """Merged (summed) four-direction scan of a (B, C, H, W) feature map."""
    return ss2d(f)


class ChannelNorm(nn.LayerNorm):
    """LayerNorm over the channel axis of a (B, C, H, W) tensor."""

    def forward(self, x):
        return super().forward(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class VSSLayer(nn.Module):
    def __init__(self, channels: int, state_dim: int):
        super().__init__()
        self.norm = ChannelNorm(channels)
        self.in_proj = nn.Conv2d(channels, 2 * channels, 1)
        self.dwconv = nn.Conv2d(channels, channels, 3, padding=1, groups=channels)
        self.ss2d = SS2D(channels, state_dim)
        self.out_norm = ChannelNorm(channels)
        self.out_proj = nn.Conv2d(channels, channels, 1)
        _trunc_normal(self.in_proj)
        _trunc_normal(self.out_proj)

    def forward(self, x):
        h, gate = self.in_proj(self.norm(x)).chunk(2, dim=1)
        h = F.silu(self.dwconv(h))
        y = self.out_norm(ss2d_block_forward(h, self.ss2d))
        return x + self.out_proj(y * F.silu(gate))


class PatchMerge(nn.Module):
    """2x spatial reduction as a linear map of each 2x2 patch."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.proj = nn.Conv2d(c_in, c_out, 2, stride=2)
        self.norm = ChannelNorm(c_out)
        _trunc_normal(self.proj)

    def forward(self, x):
        if x.shape[-1] % 2 or x.shape[-2] % 2:
            x = F.pad(x, (0, x.shape[-1] % 2, 0, x.shape[-2] % 2))
        return self.norm(self.proj(x))


def patch_embed(image: torch.Tensor, proj: nn.Conv2d, patch_size: int) -> torch.Tensor:
    """Non-overlapping linear patch projection of a (B, 3, S, S) image."""
    s = image.shape[-1]
    if s % patch_size or image.shape[-2] % patch_size:
        raise ConfigError(f"image size {tuple(image.shape[-2:])} not divisible by patch {patch_size}")
    return proj(image)


Transform = Callable[[int, torch.Tensor], torch.Tensor]


class MiniVMamba(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        ch = config.channels_per_block
        self.patch_proj = nn.Conv2d(3, ch[0], config.patch_size, stride=config.patch_size)
        _trunc_normal(self.patch_proj)
        self.blocks = nn.ModuleList()
        self.merges = nn.ModuleList()
        for b in range(4):
            self.blocks.append(nn.ModuleList(
                VSSLayer(ch[b], config.state_dim) for _ in range(config.block_layer_counts[b])))
            if b < 3:
                self.merges.append(PatchMerge(ch[b], ch[b + 1]))
        self.head_norm = nn.LayerNorm(ch[3])
        self.head = nn.Linear(ch[3], config.num_classes)
        _trunc_normal(self.head)

    def forward(self, image, hooks: Iterable[int] = (), transform: Transform | None = None):
        """Returns ``(logits, features)`` with ``features[i]`` the output of layer i.

        ``transform(i, f)`` (if given) replaces layer i's output before it is
        fed to the next layer; ``features`` always holds the untransformed map.
        """
        hooks = set(hooks)
        n = self.config.num_layers
        bad = [i for i in hooks if not 1 <= i <= n]
        if bad:
            raise ConfigError(f"hook layers {sorted(bad)} outside [1, {n}]")
        x = patch_embed(image, self.patch_proj, self.config.patch_size)
        features = {}
        i = 0
        for b, layers in enumerate(self.blocks):
            if b > 0:
                x = self.merges[b - 1](x)
            for layer in layers:
                i += 1
                x = layer(x)
                if i in hooks:
                    features[i] = x
                if transform is not None:
                    x = transform(i, x)
        pooled = self.head_norm(x.mean(dim=(2, 3)))
        return self.head(pooled), features

    def embed(self, image) -> torch.Tensor:
        """Pooled pre-head embedding of the final block."""
        n = self.config.num_layers
        _, feats = self.forward(image, hooks=[n])
        return self.head_norm(feats[n].mean(dim=(2, 3)))


def encode_image(model: MiniVMamba, image: torch.Tensor, hooks: Iterable[int] = ()):
    return model(image, hooks=hooks)
