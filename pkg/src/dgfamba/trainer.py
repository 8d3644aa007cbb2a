"""Training with style randomization, latent flow encoding and the HJ constraint.

Per iteration and per hooked layer ``i`` of an enabled block::

    f_i --(ssr)--> f~_i = AdaIN(f_i, random style)    # f~_i replaces f_i downstream
                                                       # for a random share of samples
    (sfe) z_0 ~ q(z | f_i), z~_0 ~ q(z~ | f~_i, z_0), posterior path z~_0..z~_T
    (sfc) + hj_loss(path)

The loss is ``CE + sum_i L_HJ^i + lambda_recon * recon + lambda_kl * kl``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import tomli
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import BackboneConfig, MiniVMamba
from .data import DomainDataset, load_batches, load_dataset, to_float
from .errors import ConfigError, NumericError
from .fileio import atomic_write_bytes, atomic_write_text
from .flow import (FeatureVAE, GaussianDensity, ScalarMLP, gaussian_kl,
                   posterior_path_logprob, prior_path_logprob, reparameterize)
from .hj import HjLossTerms, hj_loss
from .style import compute_style_stats, sample_style, stylize

log = logging.getLogger(__name__)

ABLATION_ROWS = ("baseline", "ssr", "ssr+sfe", "ssr+sfe+sfc")
T_GRID = (2, 4, 6, 8, 10, 12)


@dataclass
class AblationFlags:
    ssr: bool = True
    sfe: bool = True
    sfc: bool = True
    block_mask: list[bool] = field(default_factory=lambda: [True, True, True, True])
    T: int = 8

    def __post_init__(self):
        if self.sfc and not self.sfe:
            raise ConfigError("sfc requires sfe")
        if self.sfe and not self.ssr:
            raise ConfigError("sfe requires ssr")
        if len(self.block_mask) != 4:
            raise ConfigError("block_mask needs 4 entries")
        if self.T < 1:
            raise ConfigError("T must be a positive integer")
        self.block_mask = [bool(b) for b in self.block_mask]

    @classmethod
    def row(cls, name: str, **kw) -> "AblationFlags":
        """Cumulative component rows: baseline, ssr, ssr+sfe, ssr+sfe+sfc."""
        if name not in ABLATION_ROWS:
            raise ConfigError(f"unknown ablation row {name!r}")
        k = ABLATION_ROWS.index(name)
        return cls(ssr=k >= 1, sfe=k >= 2, sfc=k >= 3, **kw)

    @property
    def name(self) -> str:
        parts = [n for n in ("ssr", "sfe", "sfc") if getattr(self, n)]
        return "+".join(parts) or "baseline"

    @property
    def any(self) -> bool:
        return self.ssr or self.sfe or self.sfc


@dataclass
class TrainConfig:
    iterations: int = 3000
    lr: float = 3e-4
    momentum: float = 0.9
    weight_decay: float = 0.05
    cosine: bool = True
    seed: int = 0
    target_domain: str = "sketch"
    hooked_layers: Optional[list[int]] = None  # None: last layer of every block
    lambda_recon: float = 1.0
    lambda_kl: float = 0.01
    lambda_path: float = 0.0
    # share of samples whose stylized map replaces the original downstream
    ssr_propagate_prob: float = 0.5
    # maps with fewer spatial positions have no usable style and stay as is
    ssr_min_positions: int = 2
    batch_per_domain: int = 16
    latent_dim: int = 8
    diffusion: float = 0.5
    vae_width: int = 16
    potential_hidden: int = 32
    block_layer_counts: list[int] = field(default_factory=lambda: [2, 2, 4, 2])
    channels_per_block: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    state_dim: int = 8
    patch_size: int = 4
    image_size: int = 32
    eval_batch_size: int = 250
    data_dir: str = "data"

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.iterations <= 0:
            raise ConfigError("iterations must be positive")
        if self.diffusion <= 0:
            raise ConfigError("diffusion must be positive")
        if not 0.0 <= self.ssr_propagate_prob <= 1.0:
            raise ConfigError("ssr_propagate_prob must lie in [0, 1]")

    def backbone(self, num_classes: int) -> BackboneConfig:
        return BackboneConfig(list(self.block_layer_counts), list(self.channels_per_block),
                              self.state_dim, self.patch_size, num_classes, self.image_size)

    def hooks(self) -> list[int]:
        cfg = self.backbone(2)
        return sorted(self.hooked_layers) if self.hooked_layers is not None else cfg.last_layer_of_blocks()


# ------------------------------------------------------------ config io

def config_to_text(config: TrainConfig, flags: AblationFlags) -> str:
    """Flat ``key = value`` text (valid TOML) covering both dataclasses."""
    lines = []
    for obj in (config, flags):
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if v is not None:
                lines.append(f"{f.name} = {json.dumps(v)}")
    return "\n".join(lines) + "\n"


def parse_config_text(text: str, base: TrainConfig | None = None,
                      base_flags: AblationFlags | None = None) -> tuple[TrainConfig, AblationFlags]:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"cannot parse config: {e}") from e
    tkeys = {f.name for f in dataclasses.fields(TrainConfig)}
    fkeys = {f.name for f in dataclasses.fields(AblationFlags)}
    unknown = set(raw) - tkeys - fkeys
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    cfg = dataclasses.asdict(base or TrainConfig())
    flg = dataclasses.asdict(base_flags or AblationFlags())
    cfg.update({k: v for k, v in raw.items() if k in tkeys})
    flg.update({k: v for k, v in raw.items() if k in fkeys})
    try:
        return TrainConfig(**cfg), AblationFlags(**flg)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def load_config(path) -> tuple[TrainConfig, AblationFlags]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    return parse_config_text(path.read_text())


def config_hash(config: TrainConfig, flags: AblationFlags) -> str:
    blob = json.dumps([dataclasses.asdict(config), dataclasses.asdict(flags)], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# --------------------------------------------------------------- model

class DGFamba(nn.Module):
    """Backbone plus one VAE / potential / force network per block.

    Flow networks are shared by all hooked layers within a block. The
    backbone is initialized from ``seed`` before anything else, so all
    ablation rows with the same seed start from identical backbone weights.
    """

    def __init__(self, config: TrainConfig, flags: AblationFlags, num_classes: int):
        super().__init__()
        self.config = config
        self.flags = flags
        bcfg = config.backbone(num_classes)
        torch.manual_seed(config.seed)
        self.backbone = MiniVMamba(bcfg)
        torch.manual_seed(config.seed + 7919)
        self.vaes = nn.ModuleList()
        self.potentials = nn.ModuleList()
        self.forces = nn.ModuleList()
        for b in range(4):
            side = bcfg.grid_size(b)
            shape = (bcfg.channels_per_block[b], side, side)
            self.vaes.append(FeatureVAE(shape, config.latent_dim, config.vae_width))
            self.potentials.append(ScalarMLP(config.latent_dim, config.potential_hidden, horizon=flags.T))
            self.forces.append(ScalarMLP(config.latent_dim, config.potential_hidden, horizon=flags.T))

    def active_hooks(self) -> list[int]:
        if not self.flags.any:
            return []
        bcfg = self.backbone.config
        return [i for i in self.config.hooks() if self.flags.block_mask[bcfg.block_of(i)]]

    def forward(self, image):
        return self.backbone(image)[0]

    def _posterior(self, block: int, f, f_t, generator=None):
        vae, u = self.vaes[block], self.potentials[block]
        b = f.shape[0]
        h = vae.enc(torch.cat([f, f_t]))
        s0 = reparameterize(*vae.heads(h[:b]), generator)
        s1 = reparameterize(*vae.heads(h[b:], s0.z), generator)
        path, logq = posterior_path_logprob(s1, u, self.flags.T)
        return s0, s1, path, logq

    def flow_terms(self, block: int, f, f_t, generator=None):
        """VAE, path and (optionally) HJ terms for one hooked layer.

        The VAE terms are computed on detached features, so they train the
        flow networks without pulling on the backbone. The HJ term is
        computed on a second pass over the live features with the same
        noise; it is the only flow signal that reaches the backbone.
        """
        T = self.flags.T
        b = f.shape[0]
        noise_state = generator.get_state() if generator is not None else None
        fd = f.detach()
        s0, s1, path, logq = self._posterior(block, fd, f_t.detach(), generator)
        # both the original latent and the transported stylized latent decode to f
        rec = self.vaes[block].decode(torch.cat([s0.z, path.states[-1].z]))
        recon = F.mse_loss(rec[:b], fd) + F.mse_loss(rec[b:], fd)
        kl = gaussian_kl(s0.mean, s0.logvar).mean() + gaussian_kl(s1.mean, s1.logvar).mean()
        path_kl = torch.zeros((), dtype=f.dtype)
        if self.config.lambda_path > 0:
            prior = GaussianDensity.standard(self.config.latent_dim, f.dtype)
            _, logp = prior_path_logprob(s1.z, prior, self.config.diffusion, T)
            path_kl = (logq - logp).mean()
        hj = None
        if self.flags.sfc:
            if generator is not None:
                generator.set_state(noise_state)
            path = self._posterior(block, f, f_t, generator)[2]
            hj = hj_loss(path, self.potentials[block], self.forces[block])
        return {"recon": recon, "kl": kl, "path_kl": path_kl, "hj": hj, "path": path}

    def training_forward(self, image, style_gen=None, noise_gen=None):
        """Logits plus the list of per-layer flow terms."""
        hooks = set(self.active_hooks())
        bcfg = self.backbone.config
        terms = []

        def transform(i, f):
            if i not in hooks:
                return f
            f_t = f
            if self.flags.ssr and f.shape[2] * f.shape[3] >= self.config.ssr_min_positions:
                target = sample_style(f.shape[1], style_gen, batch=f.shape[0], dtype=f.dtype)
                f_t = stylize(f, compute_style_stats(f), target)
            if self.flags.sfe:
                terms.append(self.flow_terms(bcfg.block_of(i), f, f_t, noise_gen))
            p = self.config.ssr_propagate_prob
            if p >= 1.0 or not self.flags.ssr:
                return f_t
            keep = (torch.rand(f.shape[0], generator=style_gen) < p).to(f.dtype)[:, None, None, None]
            return keep * f_t + (1 - keep) * f

        logits, _ = self.backbone(image, transform=transform)
        return logits, terms


@dataclass
class VaeTerms:
    recon: torch.Tensor
    kl: torch.Tensor
    path_kl: Optional[torch.Tensor] = None


def total_loss(logits, labels, hj_terms: Sequence[HjLossTerms] = (), vae_terms: Sequence[VaeTerms] = (),
               lambda_recon: float = 1.0, lambda_kl: float = 0.01, lambda_path: float = 0.0):
    """Combined objective and its weighted components.

    Returns ``(total, parts)`` where ``total`` equals the sum of ``parts``.
    """
    zero = logits.new_zeros(())
    parts = {"ce": F.cross_entropy(logits, labels)}
    parts["hj"] = sum((h.total for h in hj_terms), zero)
    parts["recon"] = lambda_recon * sum((v.recon for v in vae_terms), zero)
    parts["kl"] = lambda_kl * sum((v.kl for v in vae_terms), zero)
    if lambda_path:
        parts["path_kl"] = lambda_path * sum((v.path_kl for v in vae_terms if v.path_kl is not None), zero)
    total = zero
    for v in parts.values():
        total = total + v
    return total, parts


def cosine_lr(lr0: float, it: int, total: int) -> float:
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * it / total))


# ------------------------------------------------------------ training

@dataclass
class TrainResult:
    model: DGFamba
    log: list[dict]
    checkpoint: Optional[Path] = None

    @property
    def final_loss(self) -> float:
        return self.log[-1]["total"]


def _dump_nan(out_dir, it, parts):
    info = {"iteration": it, "terms": {k: float(v.detach()) for k, v in parts.items()}}
    bad = [k for k, v in info["terms"].items() if not math.isfinite(v)]
    if out_dir is not None:
        atomic_write_text(Path(out_dir) / "nan_dump.json", json.dumps(info, indent=1))
    raise NumericError(f"non-finite loss at iteration {it}; offending terms: {bad}; all: {info['terms']}")


def train_run(config: TrainConfig, flags: AblationFlags, dataset: DomainDataset | None = None,
              out_dir=None, dtype=torch.float32) -> TrainResult:
    if dataset is None:
        dataset = load_dataset(config.data_dir)
    if config.target_domain not in dataset.domain_ids:
        raise ConfigError(f"unknown target domain {config.target_domain!r}; "
                          f"available: {', '.join(dataset.domain_ids)}")
    sources = [d for d in dataset.domain_ids if d != config.target_domain]
    target_idx = dataset.index_of(config.target_domain)

    model = DGFamba(config, flags, len(dataset.classes)).to(dtype)
    model.train()
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=config.lr, betas=(config.momentum, 0.999),
                            weight_decay=config.weight_decay)
    data_gen = torch.Generator().manual_seed(config.seed + 1)
    style_gen = torch.Generator().manual_seed(config.seed + 2)
    noise_gen = torch.Generator().manual_seed(config.seed + 3)
    batches = load_batches(dataset, sources, config.batch_per_domain, data_gen)

    history = []
    t0 = time.time()
    for it in range(config.iterations):
        lr = cosine_lr(config.lr, it, config.iterations) if config.cosine else config.lr
        for g in opt.param_groups:
            g["lr"] = lr
        images, labels, doms = next(batches)
        assert not (doms == target_idx).any(), "target-domain sample leaked into training batch"
        logits, terms = model.training_forward(to_float(images, dtype), style_gen, noise_gen)
        hj_terms = [t["hj"] for t in terms if t["hj"] is not None]
        vae_terms = [VaeTerms(t["recon"], t["kl"], t["path_kl"]) for t in terms]
        loss, parts = total_loss(logits, labels, hj_terms, vae_terms, config.lambda_recon,
                                 config.lambda_kl, config.lambda_path)
        if not torch.isfinite(loss):
            _dump_nan(out_dir, it, parts)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        row = {"iteration": it, "lr": lr, "total": loss.item()}
        row.update({k: v.item() for k, v in parts.items()})
        history.append(row)
        if it % 100 == 0 or it == config.iterations - 1:
            log.info("it %d loss %.4f ce %.4f hj %.4f (%.1fs)", it, row["total"], row["ce"],
                     row["hj"], time.time() - t0)

    ckpt = None
    if out_dir is not None:
        ckpt = save_checkpoint(out_dir, model, config.iterations)
        atomic_write_text(Path(out_dir) / "train_log.jsonl",
                          "".join(json.dumps(r, sort_keys=True) + "\n" for r in history))
    model.eval()
    return TrainResult(model, history, ckpt)


# -------------------------------------------------------- checkpointing

def save_checkpoint(out_dir, model: DGFamba, iteration: int) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(model.state_dict(), buf)
    path = atomic_write_bytes(out_dir / "model.pt", buf.getvalue())
    sidecar = {
        "config_hash": config_hash(model.config, model.flags),
        "iteration": iteration,
        "seed": model.config.seed,
        "num_classes": model.backbone.config.num_classes,
        "config": dataclasses.asdict(model.config),
        "flags": dataclasses.asdict(model.flags),
    }
    atomic_write_text(out_dir / "model.json", json.dumps(sidecar, indent=1, sort_keys=True))
    return path


def load_checkpoint(path) -> DGFamba:
    path = Path(path)
    if path.is_dir():
        path = path / "model.pt"
    sidecar = path.with_suffix(".json")
    if not path.exists() or not sidecar.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    meta = json.loads(sidecar.read_text())
    config, flags = TrainConfig(**meta["config"]), AblationFlags(**meta["flags"])
    if config_hash(config, flags) != meta["config_hash"]:
        raise ValueError(f"config hash mismatch in {sidecar}")
    model = DGFamba(config, flags, meta["num_classes"])
    model.load_state_dict(torch.load(path, weights_only=True))
    model.eval()
    return model


# ----------------------------------------------------------- evaluation

@torch.no_grad()
def predict(model: DGFamba, images: torch.Tensor, batch_size: int = 250) -> torch.Tensor:
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    for k in range(0, len(images), batch_size):
        out.append(model(to_float(images[k:k + batch_size], dtype)).argmax(-1))
    return torch.cat(out)


def evaluate(model, dataset: DomainDataset, domain: str, batch_size: int = 250) -> float:
    """Accuracy in percent over every sample of ``domain``."""
    if not isinstance(model, nn.Module):
        model = load_checkpoint(model)
    sub = dataset.subset(domain)
    pred = predict(model, sub.images, batch_size)
    return 100.0 * (pred == sub.labels).sum().item() / len(sub)


@torch.no_grad()
def domain_embeddings(model: DGFamba, dataset: DomainDataset, per_domain: int = 100,
                      batch_size: int = 250):
    """Pooled final-block embeddings of the first ``per_domain`` samples of each domain."""
    model.eval()
    dtype = next(model.parameters()).dtype
    feats, doms, labels = [], [], []
    for d in dataset.domain_ids:
        sub = dataset.subset(d)
        n = min(per_domain, len(sub))
        for k in range(0, n, batch_size):
            x = to_float(sub.images[k:min(n, k + batch_size)], dtype)
            feats.append(model.backbone.embed(x))
        doms.append(sub.domain_index[:n])
        labels.append(sub.labels[:n])
    return torch.cat(feats).double(), torch.cat(doms), torch.cat(labels)


# -------------------------------------------------------------- tables

@dataclass
class MetricsTable:
    rows: dict[str, float]
    flags: Optional[dict] = None
    T: Optional[int] = None
    seed: Optional[int] = None

    @property
    def average(self) -> float:
        return sum(self.rows.values()) / len(self.rows)

    def to_csv(self) -> str:
        lines = ["target_domain,accuracy"]
        lines += [f"{k},{v!r}" for k, v in self.rows.items()]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows, "average": self.average, "flags": self.flags,
                           "T": self.T, "seed": self.seed}, indent=1, sort_keys=True) + "\n"

    def write(self, out_dir, stem: str = "metrics") -> None:
        atomic_write_text(Path(out_dir) / f"{stem}.csv", self.to_csv())
        atomic_write_text(Path(out_dir) / f"{stem}.json", self.to_json())

    @classmethod
    def mean(cls, tables: Sequence["MetricsTable"]) -> "MetricsTable":
        keys = list(tables[0].rows)
        rows = {k: sum(t.rows[k] for t in tables) / len(tables) for k in keys}
        return cls(rows, tables[0].flags, tables[0].T, None)


@dataclass
class LodoResult:
    table: MetricsTable
    models: dict[str, DGFamba] = field(default_factory=dict)


def run_leave_one_out(config: TrainConfig, flags: AblationFlags, dataset: DomainDataset,
                      targets: Sequence[str] | None = None, out_dir=None,
                      keep_models: bool = False) -> LodoResult:
    """Train once per held-out domain and evaluate on it."""
    rows, models = {}, {}
    for target in targets or dataset.domain_ids:
        cfg = dataclasses.replace(config, target_domain=target)
        run_dir = None if out_dir is None else Path(out_dir) / target
        res = train_run(cfg, flags, dataset, run_dir)
        rows[target] = evaluate(res.model, dataset, target, config.eval_batch_size)
        log.info("%s seed %d target %s: %.2f%%", flags.name, config.seed, target, rows[target])
        if keep_models:
            models[target] = res.model
    table = MetricsTable(rows, dataclasses.asdict(flags), flags.T, config.seed)
    if out_dir is not None:
        table.write(out_dir)
    return LodoResult(table, models)


def run_ablation(config: TrainConfig, dataset: DomainDataset, seeds: Sequence[int] = (0,),
                 out_dir=None, T: int = 8, keep_models: bool = False) -> dict[str, list[LodoResult]]:
    """The cumulative component rows, each as a leave-one-domain-out table per seed."""
    out = {}
    for name in ABLATION_ROWS:
        out[name] = []
        for seed in seeds:
            cfg = dataclasses.replace(config, seed=seed)
            run_dir = None if out_dir is None else Path(out_dir) / name / f"seed{seed}"
            out[name].append(run_leave_one_out(cfg, AblationFlags.row(name, T=T), dataset,
                                               out_dir=run_dir, keep_models=keep_models))
    return out


def sweep_seed(seed: int, T: int) -> int:
    return 1000 * seed + T


def sweep_factorization_steps(config: TrainConfig, dataset: DomainDataset,
                              T_values: Sequence[int] = T_GRID, out_dir=None) -> dict[int, MetricsTable]:
    """Full model, one leave-one-domain-out table per factorization step count."""
    out = {}
    for T in T_values:
        cfg = dataclasses.replace(config, seed=sweep_seed(config.seed, T))
        run_dir = None if out_dir is None else Path(out_dir) / f"T{T}"
        out[T] = run_leave_one_out(cfg, AblationFlags(T=T), dataset, out_dir=run_dir).table
    return out
