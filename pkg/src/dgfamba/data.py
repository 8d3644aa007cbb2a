"""Procedural four-domain shape dataset with a style-only domain shift.

Every domain draws shape geometry from the same sampler; domains differ in
palette, texture, background and stroke. Layout on disk::

    <root>/<domain>/<class>/<index>.png
    <root>/manifest.json
"""
from __future__ import annotations

import colorsys
import hashlib
import io
import json
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from matplotlib.colors import rgb_to_hsv
from PIL import Image

from .errors import ConfigError

IMAGE_SIZE = 32
SUPERSAMPLE = 3
CLASSES = ("circle", "square", "triangle", "cross")
TEXTURES = ("flat", "noise", "stripes", "gradient")
BACKGROUNDS = ("solid", "gradient")
STROKES = ("filled", "outline")
HUE_JITTER = 0.02
ACHROMATIC_SAT = 0.1
BACKGROUND_SAT = (0.25, 0.4)


@dataclass(frozen=True)
class DomainSpec:
    domain_id: str
    hue_palette: tuple[float, ...]  # base hues; empty means grayscale
    texture: str
    background: str
    stroke: str
    saturation: tuple[float, float] = (0.4, 0.8)

    def __post_init__(self):
        if self.texture not in TEXTURES:
            raise ConfigError(f"unknown texture {self.texture!r}")
        if self.background not in BACKGROUNDS:
            raise ConfigError(f"unknown background {self.background!r}")
        if self.stroke not in STROKES:
            raise ConfigError(f"unknown stroke {self.stroke!r}")

    def hue_interval(self) -> tuple[float, float] | None:
        if not self.hue_palette:
            return None
        return min(self.hue_palette) - HUE_JITTER, max(self.hue_palette) + HUE_JITTER


DEFAULT_DOMAINS = (
    DomainSpec("photo", (0.04, 0.09, 0.14, 0.19), "flat", "solid", "filled", (0.35, 0.7)),
    DomainSpec("art", (0.29, 0.34, 0.39, 0.44), "gradient", "gradient", "filled", (0.4, 0.8)),
    DomainSpec("cartoon", (0.54, 0.59, 0.64, 0.69), "stripes", "solid", "filled", (0.85, 1.0)),
    DomainSpec("sketch", (), "noise", "solid", "outline", (0.0, 0.0)),
)


def check_domains_disjoint(domains: Sequence[DomainSpec]):
    """Raise if two domains' palettes could produce the same hue."""
    seen = []
    for d in domains:
        iv = d.hue_interval()
        key = iv if iv is not None else "achromatic"
        for other_id, other in seen:
            if key == "achromatic" or other == "achromatic":
                if key == other:
                    raise ConfigError(f"domains {other_id} and {d.domain_id} are both achromatic")
                continue
            if key[0] < other[1] and other[0] < key[1]:
                raise ConfigError(f"hue ranges of {other_id} and {d.domain_id} overlap")
        seen.append((d.domain_id, key))
    if len({(d.texture, d.background, d.stroke) for d in domains}) != len(domains):
        raise ConfigError("two domains share texture/background/stroke")


# ------------------------------------------------------------- rendering

def sample_geometry(rng: np.random.Generator) -> dict:
    """Shape parameters; identical distribution for every domain and class."""
    return {
        "cx": rng.uniform(12.0, 20.0),
        "cy": rng.uniform(12.0, 20.0),
        "radius": rng.uniform(7.0, 11.0),
        "angle": rng.uniform(0.0, 2 * np.pi),
    }


def shape_mask(cls: str, geom: dict, scale: float = 1.0, size: int = IMAGE_SIZE) -> np.ndarray:
    """Anti-aliased coverage in [0, 1] of shape ``cls``."""
    n = size * SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / SUPERSAMPLE
    X, Y = np.meshgrid(coords, coords)
    c, s = np.cos(geom["angle"]), np.sin(geom["angle"])
    dx, dy = X - geom["cx"], Y - geom["cy"]
    u, v = c * dx + s * dy, -s * dx + c * dy
    r = geom["radius"] * scale
    if cls == "circle":
        m = u**2 + v**2 <= r**2
    elif cls == "square":
        h = 0.78 * r
        m = (np.abs(u) <= h) & (np.abs(v) <= h)
    elif cls == "triangle":
        m = np.ones_like(u, dtype=bool)
        for k in range(3):
            a = 2 * np.pi * k / 3
            m &= np.cos(a) * u + np.sin(a) * v <= 0.5 * r
    elif cls == "cross":
        w = 0.3 * geom["radius"] * (1.0 if scale >= 1.0 else 0.45)
        m = ((np.abs(u) <= w) & (np.abs(v) <= r)) | ((np.abs(v) <= w) & (np.abs(u) <= r))
    else:
        raise ConfigError(f"unknown shape class {cls!r}")
    return m.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))


def _hsv(h, s, v):
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))


def _pick_color(spec: DomainSpec, rng, value_range, saturation=None):
    v = rng.uniform(*value_range)
    if not spec.hue_palette:
        return np.full(3, v)
    h = rng.choice(spec.hue_palette) + rng.uniform(-HUE_JITTER, HUE_JITTER)
    return _hsv(h, rng.uniform(*(saturation or spec.saturation)), v)


def _ramp(rng, size=IMAGE_SIZE):
    a = rng.uniform(0, 2 * np.pi)
    X, Y = np.meshgrid(np.arange(size), np.arange(size))
    t = np.cos(a) * X + np.sin(a) * Y
    return ((t - t.min()) / (np.ptp(t) + 1e-9))[..., None]


def render(cls: str, spec: DomainSpec, geom: dict, rng: np.random.Generator) -> np.ndarray:
    """(32, 32, 3) float image in [0, 1]."""
    size = IMAGE_SIZE
    # background: light, same palette as the foreground
    bg1 = _pick_color(spec, rng, (0.75, 0.95), BACKGROUND_SAT)
    if spec.background == "gradient":
        bg2 = _pick_color(spec, rng, (0.75, 0.95), BACKGROUND_SAT)
        bg = bg1 + (bg2 - bg1) * _ramp(rng)
    else:
        bg = np.broadcast_to(bg1, (size, size, 3)).copy()

    fg1 = _pick_color(spec, rng, (0.2, 0.55))
    if spec.texture == "gradient":
        fg2 = _pick_color(spec, rng, (0.2, 0.55))
        fg = fg1 + (fg2 - fg1) * _ramp(rng)
    elif spec.texture == "stripes":
        a = rng.uniform(0, np.pi)
        period = rng.uniform(3.0, 6.0)
        X, Y = np.meshgrid(np.arange(size), np.arange(size))
        wave = 0.5 + 0.5 * np.sin(2 * np.pi * (np.cos(a) * X + np.sin(a) * Y) / period)
        fg = fg1 * (0.6 + 0.4 * wave)[..., None]
    else:
        fg = np.broadcast_to(fg1, (size, size, 3)).copy()

    cover = shape_mask(cls, geom)
    if spec.stroke == "outline":
        cover = np.clip(cover - shape_mask(cls, geom, scale=0.72), 0.0, 1.0)
    img = bg * (1 - cover[..., None]) + fg * cover[..., None]
    if spec.texture == "noise":
        img = img + rng.normal(0.0, 0.06, size=(size, size, 1))
    return np.clip(img, 0.0, 1.0)


def hue_histogram(images: np.ndarray, bins: int = 8) -> np.ndarray:
    """Normalized hue histogram with an extra trailing bin for achromatic pixels.

    ``images`` is (..., H, W, 3) in [0, 1].
    """
    rgb = images.reshape(-1, 3)
    mx, mn = rgb.max(1), rgb.min(1)
    sat = (mx - mn) / np.maximum(mx, 1e-9)
    chroma = sat >= ACHROMATIC_SAT
    hsv_h = rgb_to_hsv(rgb[chroma])[:, 0] if chroma.any() else np.zeros(0)
    hist = np.histogram(hsv_h, bins=bins, range=(0.0, 1.0))[0].astype(float)
    hist = np.append(hist, (~chroma).sum())
    return hist / hist.sum()


def chi_square_distance(p, q) -> float:
    p, q = np.asarray(p, float), np.asarray(q, float)
    den = p + q
    nz = den > 0
    return float(0.5 * np.sum((p[nz] - q[nz]) ** 2 / den[nz]))


# ------------------------------------------------------------ generation

def _png_bytes(img: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray((img * 255.0 + 0.5).astype(np.uint8), mode="RGB").save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def generate_dataset(root, seed: int = 0, domains: Sequence[DomainSpec] = DEFAULT_DOMAINS,
                     classes: Sequence[str] = CLASSES, n_per_cell: int = 250, force: bool = False) -> Path:
    """Render ``len(domains) * len(classes) * n_per_cell`` PNGs plus a manifest.

    Output is a pure function of the arguments. The tree is built in a
    sibling temp directory and renamed into place.
    """
    root = Path(root)
    if len(classes) < 2:
        raise ConfigError("need at least 2 classes")
    if n_per_cell < 1:
        raise ConfigError("n_per_cell must be >= 1")
    check_domains_disjoint(domains)
    if root.exists():
        if not force:
            raise FileExistsError(f"{root} exists; pass force=True (--force) to overwrite")
        shutil.rmtree(root)
    root.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=root.name + ".", dir=root.parent))

    entries = []
    for di, spec in enumerate(domains):
        for ci, cls in enumerate(classes):
            cell = tmp / spec.domain_id / cls
            cell.mkdir(parents=True)
            # geometry stream depends on (seed, class) only, never the domain
            geo_rng = np.random.default_rng([seed, 1, ci])
            sty_rng = np.random.default_rng([seed, 2, di, ci])
            for k in range(n_per_cell):
                geom = sample_geometry(geo_rng)
                data = _png_bytes(render(cls, spec, geom, sty_rng))
                rel = f"{spec.domain_id}/{cls}/{k:05d}.png"
                (tmp / rel).write_bytes(data)
                entries.append({"path": rel, "label": ci, "domain": spec.domain_id,
                                "sha256": hashlib.sha256(data).hexdigest()})
    manifest = {
        "seed": seed,
        "image_size": IMAGE_SIZE,
        "classes": list(classes),
        "domains": [asdict(d) for d in domains],
        "n_per_cell": n_per_cell,
        "samples": entries,
    }
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    os.replace(tmp, root)
    return root


# --------------------------------------------------------------- loading

@dataclass
class DomainDataset:
    images: torch.Tensor  # (N, 3, 32, 32) uint8
    labels: torch.Tensor  # (N,) int64
    domain_index: torch.Tensor  # (N,) int64
    domain_ids: list[str]
    classes: list[str]

    def __len__(self):
        return len(self.labels)

    def index_of(self, domain: str) -> int:
        if domain not in self.domain_ids:
            raise ConfigError(f"unknown domain {domain!r}; available: {', '.join(self.domain_ids)}")
        return self.domain_ids.index(domain)

    def subset(self, domain: str) -> "DomainDataset":
        mask = self.domain_index == self.index_of(domain)
        return DomainDataset(self.images[mask], self.labels[mask], self.domain_index[mask],
                             self.domain_ids, self.classes)


def to_float(images: torch.Tensor, dtype=torch.float32) -> torch.Tensor:
    return images.to(dtype) / 255.0


def load_dataset(root, verify: bool = True) -> DomainDataset:
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no dataset at {root} (missing manifest.json); run generate-data first")
    manifest = json.loads(mpath.read_text())
    domain_ids = [d["domain_id"] for d in manifest["domains"]]
    imgs, labels, doms = [], [], []
    for e in manifest["samples"]:
        data = (root / e["path"]).read_bytes()
        if verify and hashlib.sha256(data).hexdigest() != e["sha256"]:
            raise ValueError(f"checksum mismatch for {e['path']}")
        imgs.append(np.asarray(Image.open(io.BytesIO(data)).convert("RGB")))
        labels.append(e["label"])
        doms.append(domain_ids.index(e["domain"]))
    images = torch.from_numpy(np.stack(imgs)).permute(0, 3, 1, 2).contiguous()
    return DomainDataset(images, torch.tensor(labels), torch.tensor(doms), domain_ids,
                         list(manifest["classes"]))


def load_batches(dataset: DomainDataset, sources: Sequence[str], batch_per_domain: int = 16,
                 generator: torch.Generator | int | None = None) -> Iterator[tuple[torch.Tensor, ...]]:
    """Endless stream of ``(images uint8, labels, domain_index)`` batches.

    Every batch holds exactly ``batch_per_domain`` samples of each source
    domain, drawn without replacement from per-domain reshuffled epochs.
    """
    if isinstance(generator, int):
        generator = torch.Generator().manual_seed(generator)
    if not sources:
        raise ConfigError("need at least one source domain")
    pools = []
    for d in sources:
        idx = torch.nonzero(dataset.domain_index == dataset.index_of(d)).squeeze(1)
        if len(idx) < batch_per_domain:
            raise ConfigError(f"domain {d!r} has {len(idx)} samples < batch_per_domain")
        pools.append(idx)
    orders = [p[torch.randperm(len(p), generator=generator)] for p in pools]
    cursors = [0] * len(pools)
    while True:
        picks = []
        for k, pool in enumerate(pools):
            if cursors[k] + batch_per_domain > len(pool):
                orders[k] = pool[torch.randperm(len(pool), generator=generator)]
                cursors[k] = 0
            picks.append(orders[k][cursors[k]:cursors[k] + batch_per_domain])
            cursors[k] += batch_per_domain
        sel = torch.cat(picks)
        yield dataset.images[sel], dataset.labels[sel], dataset.domain_index[sel]
