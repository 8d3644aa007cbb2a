"""Text tables, 2-D embedding exports and the domain-mixing score."""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from matplotlib.figure import Figure
from scipy.spatial import cKDTree

from .data import DomainDataset, to_float
from .fileio import atomic_write_bytes, atomic_write_text
from .trainer import DGFamba, MetricsTable, load_checkpoint

AVG_LABEL = "Avg."


# --------------------------------------------------------------- tables

def format_metrics_table(rows: Sequence[tuple[str, float]], precision: int = 1,
                         header: tuple[str, str] = ("target_domain", "accuracy")) -> str:
    """Markdown table of ``rows`` plus an average row.

    The average is taken over the unrounded values; rounding happens only
    when rendering.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("cannot format an empty metrics table")
    avg = sum(v for _, v in rows) / len(rows)
    width = max(len(header[0]), len(AVG_LABEL), *(len(k) for k, _ in rows))
    lines = [f"| {header[0]:<{width}} | {header[1]} |", f"|{'-' * (width + 2)}|{'-' * (len(header[1]) + 2)}|"]
    for k, v in rows + [(AVG_LABEL, avg)]:
        lines.append(f"| {k:<{width}} | {v:.{precision}f} |")
    return "\n".join(lines) + "\n"


def parse_metrics_table(text: str) -> tuple[list[tuple[str, float]], float]:
    """Inverse of :func:`format_metrics_table`: ``(rows, average)``."""
    body = [ln for ln in text.strip().splitlines() if ln.startswith("|") and not ln.startswith("|-")]
    cells = [[c.strip() for c in ln.strip("|").split("|")] for ln in body[1:]]
    if not cells or cells[-1][0] != AVG_LABEL:
        raise ValueError("table has no average row")
    rows = [(k, float(v)) for k, v in cells[:-1]]
    return rows, float(cells[-1][1])


def verify_table_text(text: str, precision: int = 1) -> bool:
    """True when the printed average is consistent with the printed rows.

    Each printed row may be off by half a unit in the last place, so the
    recomputed mean carries the same slack.
    """
    rows, avg = parse_metrics_table(text)
    slack = 0.5 * 10 ** -precision
    return abs(sum(v for _, v in rows) / len(rows) - avg) <= 2 * slack + 1e-9


# ----------------------------------------------------------- embeddings

@dataclass
class EmbeddingExport:
    points: np.ndarray  # (n, 2)
    domains: list[str]
    classes: list[str]
    explained_variance: np.ndarray  # (2,)
    csv_path: Optional[Path] = None
    plot_path: Optional[Path] = None

    def to_csv(self) -> str:
        lines = ["x,y,domain,class"]
        lines += [f"{x!r},{y!r},{d},{c}" for (x, y), d, c in zip(self.points.tolist(), self.domains, self.classes)]
        return "\n".join(lines) + "\n"


def principal_projection(features: np.ndarray, k: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Project centered features onto their top-``k`` variance axes.

    Axis signs are fixed so the largest-magnitude loading is positive, which
    makes the output a deterministic function of the input.
    """
    x = np.asarray(features, dtype=np.float64)
    x = x - x.mean(0)
    _, s, vt = np.linalg.svd(x, full_matrices=False)
    axes = vt[:k]
    signs = np.sign(axes[np.arange(len(axes)), np.abs(axes).argmax(1)])
    axes = axes * signs[:, None]
    var = s[:k] ** 2 / max(len(x) - 1, 1)
    return x @ axes.T, var


@torch.no_grad()
def layer_features(model: DGFamba, images: torch.Tensor, layer: Optional[int] = None,
                   batch_size: int = 250) -> torch.Tensor:
    """Spatially pooled features of ``layer`` (final embedding when None)."""
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    for k in range(0, len(images), batch_size):
        x = to_float(images[k:k + batch_size], dtype)
        if layer is None:
            out.append(model.backbone.embed(x))
        else:
            _, feats = model.backbone(x, hooks=[layer])
            out.append(feats[layer].mean((2, 3)))
    return torch.cat(out).double()


def select_per_domain(dataset: DomainDataset, per_domain: int) -> torch.Tensor:
    idx = []
    for k in range(len(dataset.domain_ids)):
        idx.append(torch.nonzero(dataset.domain_index == k).squeeze(1)[:per_domain])
    return torch.cat(idx)


def export_embeddings_2d(model, dataset: DomainDataset, layer: Optional[int] = None,
                         out_dir=None, per_domain: int = 100, title: str = "") -> EmbeddingExport:
    """PCA scatter of per-sample features colored by domain; CSV and PNG when ``out_dir`` is set."""
    if not isinstance(model, torch.nn.Module):
        model = load_checkpoint(model)
    idx = select_per_domain(dataset, per_domain)
    if len(idx) < 3:
        raise ValueError(f"need at least 3 samples for a 2-D projection, got {len(idx)}")
    feats = layer_features(model, dataset.images[idx], layer).numpy()
    points, var = principal_projection(feats)
    domains = [dataset.domain_ids[i] for i in dataset.domain_index[idx].tolist()]
    classes = [dataset.classes[i] for i in dataset.labels[idx].tolist()]
    export = EmbeddingExport(points, domains, classes, var)
    if out_dir is not None:
        out_dir = Path(out_dir)
        export.csv_path = atomic_write_text(out_dir / "embeddings.csv", export.to_csv())
        export.plot_path = atomic_write_bytes(out_dir / "embeddings.png", scatter_png(export, title))
    return export


def scatter_png(export: EmbeddingExport, title: str = "") -> bytes:
    fig = Figure(figsize=(4.5, 4.5), dpi=100)
    ax = fig.add_subplot()
    for d in dict.fromkeys(export.domains):
        m = np.array([x == d for x in export.domains])
        ax.scatter(export.points[m, 0], export.points[m, 1], s=8, label=d, alpha=0.7)
    ax.set_xlabel("axis 1")
    ax.set_ylabel("axis 2")
    score = domain_mixing_score(export.points, export.domains)
    ax.set_title(f"{title} domain 1-NN acc {score:.2f}".strip(), fontsize=9)
    ax.legend(fontsize=7, markerscale=1.5)
    fig.tight_layout()
    buf = io.BytesIO()
    fig.savefig(buf, format="png", metadata={"Software": None})
    return buf.getvalue()


def domain_mixing_score(points, domains: Sequence) -> float:
    """Leave-one-out 1-nearest-neighbour domain accuracy; lower means better mixed.

    This is a local separability measure of our own, not a standard metric.
    """
    pts = np.asarray(points, dtype=np.float64)
    labels = np.asarray(domains)
    if len(pts) < 2:
        raise ValueError("need at least 2 points")
    _, nn_idx = cKDTree(pts).query(pts, k=2)
    # column 0 is the point itself unless an exact duplicate shadows it
    self_first = nn_idx[:, 0] == np.arange(len(pts))
    neighbor = np.where(self_first, nn_idx[:, 1], nn_idx[:, 0])
    return float(np.mean(labels[neighbor] == labels))


# --------------------------------------------------------------- bundle

@dataclass
class ReportBundle:
    tables: dict[str, MetricsTable] = field(default_factory=dict)
    embedding_export: Optional[EmbeddingExport] = None
    plot_files: list[Path] = field(default_factory=list)

    def check(self, tol: float = 1e-9) -> None:
        for name, t in self.tables.items():
            if abs(t.average - sum(t.rows.values()) / len(t.rows)) > tol:
                raise ValueError(f"table {name}: average does not recompute from rows")

    def to_markdown(self) -> str:
        self.check()
        parts = []
        for name, t in self.tables.items():
            parts.append(f"## {name}\n\n" + format_metrics_table(list(t.rows.items())))
        if self.embedding_export is not None:
            e = self.embedding_export
            parts.append("## embedding\n\ndomain-mixing score (1-NN domain accuracy, lower is better): "
                         f"{domain_mixing_score(e.points, e.domains):.3f}\n")
        for p in self.plot_files:
            parts.append(f"![{p.stem}]({p.name})\n")
        return "\n".join(parts)

    def write(self, out_dir) -> Path:
        return atomic_write_text(Path(out_dir) / "report.md", self.to_markdown())


def load_tables(root) -> dict[str, MetricsTable]:
    """Every ``metrics.json`` under ``root``, keyed by its relative directory."""
    root = Path(root)
    out = {}
    for p in sorted(root.rglob("metrics.json")):
        blob = json.loads(p.read_text())
        name = str(p.parent.relative_to(root)) or "."
        out[name] = MetricsTable(blob["rows"], blob.get("flags"), blob.get("T"), blob.get("seed"))
    return out
