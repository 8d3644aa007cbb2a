import hashlib
import itertools
import json
from pathlib import Path

import numpy as np
import pytest
import torch

from dgfamba.data import (CLASSES, DEFAULT_DOMAINS, DomainSpec, check_domains_disjoint,
                          chi_square_distance, generate_dataset, hue_histogram, load_batches,
                          load_dataset, sample_geometry, shape_mask)
from dgfamba.errors import ConfigError


def tree_digest(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def full_root(tmp_path_factory):
    return generate_dataset(tmp_path_factory.mktemp("full") / "data", seed=0)


@pytest.fixture(scope="module")
def full(full_root):
    return load_dataset(full_root)


@pytest.fixture(scope="module")
def small_root(tmp_path_factory):
    return generate_dataset(tmp_path_factory.mktemp("small") / "data", seed=5, n_per_cell=20)


def test_default_counts_and_layout(full_root, full):
    assert len(full) == 4 * 4 * 250
    for d, c in itertools.product(full.domain_ids, full.classes):
        assert len(list((full_root / d / c).glob("*.png"))) == 250
    assert full.images.shape[1:] == (3, 32, 32) and full.images.dtype == torch.uint8
    counts = torch.bincount(full.labels * 4 + full.domain_index)
    assert torch.all(counts == 250)


def test_generation_is_bit_identical(tmp_path, small_root):
    again = generate_dataset(tmp_path / "again", seed=5, n_per_cell=20)
    assert tree_digest(again) == tree_digest(small_root)
    other = generate_dataset(tmp_path / "other", seed=6, n_per_cell=20)
    assert tree_digest(other) != tree_digest(small_root)


def test_domain_hue_histograms_are_separated(full):
    images = full.images.permute(0, 2, 3, 1).numpy() / 255.0
    hists = {d: hue_histogram(images[(full.domain_index == k).numpy()])
             for k, d in enumerate(full.domain_ids)}
    for a, b in itertools.combinations(full.domain_ids, 2):
        assert chi_square_distance(hists[a], hists[b]) > 0
        # palette bins (mass above 1%) never overlap
        assert not np.any((hists[a] > 0.01) & (hists[b] > 0.01)), (a, b)


def test_geometry_distribution_is_domain_free(full):
    # the same (seed, class) geometry stream drives every domain, so the
    # object's pixel footprint is identical in distribution across domains
    sketch = full.subset("sketch")
    assert len(sketch) == 1000
    g1 = sample_geometry(np.random.default_rng([0, 1, 2]))
    g2 = sample_geometry(np.random.default_rng([0, 1, 2]))
    assert g1 == g2
    for cls in CLASSES:
        assert shape_mask(cls, g1).any()


def test_refuses_existing_directory(small_root):
    with pytest.raises(FileExistsError):
        generate_dataset(small_root, seed=5, n_per_cell=20)


def test_force_overwrites(tmp_path):
    root = generate_dataset(tmp_path / "d", seed=1, n_per_cell=2)
    (root / "stray.txt").write_text("x")
    generate_dataset(root, seed=1, n_per_cell=2, force=True)
    assert not (root / "stray.txt").exists()
    assert len(load_dataset(root)) == 32


def test_invalid_generation_arguments(tmp_path):
    with pytest.raises(ConfigError):
        generate_dataset(tmp_path / "a", classes=("circle",))
    with pytest.raises(ConfigError):
        generate_dataset(tmp_path / "b", n_per_cell=0)
    clash = (DEFAULT_DOMAINS[0], DomainSpec("copy", (0.1,), "noise", "gradient", "outline"))
    with pytest.raises(ConfigError):
        check_domains_disjoint(clash)
    with pytest.raises(ConfigError):
        DomainSpec("x", (), "plaid", "solid", "filled")


def test_checksum_validation(tmp_path):
    root = generate_dataset(tmp_path / "d", seed=2, n_per_cell=2)
    manifest = json.loads((root / "manifest.json").read_text())
    victim = root / manifest["samples"][3]["path"]
    victim.write_bytes(victim.read_bytes() + b"\0")
    with pytest.raises(ValueError, match="checksum"):
        load_dataset(root)
    assert len(load_dataset(root, verify=False)) == 32


def test_missing_dataset(tmp_path):
    with pytest.raises(FileNotFoundError, match="generate-data"):
        load_dataset(tmp_path / "nothing")


def test_batches_hold_fixed_quota_per_source(small_root):
    ds = load_dataset(small_root)
    sources = ["photo", "art", "cartoon"]
    stream = load_batches(ds, sources, 16, generator=0)
    for _ in range(5):
        images, labels, doms = next(stream)
        assert images.shape == (48, 3, 32, 32) and labels.shape == (48,)
        counts = torch.bincount(doms, minlength=4)
        assert counts.tolist() == [16, 16, 16, 0]


def test_single_source_batches(small_root):
    ds = load_dataset(small_root)
    stream = load_batches(ds, ["sketch"], 16, generator=1)
    for _ in range(8):
        _, _, doms = next(stream)
        assert torch.all(doms == ds.index_of("sketch"))


def test_batch_sequence_is_seeded(small_root):
    ds = load_dataset(small_root)
    a = load_batches(ds, ["photo", "art"], 8, generator=3)
    b = load_batches(ds, ["photo", "art"], 8, generator=3)
    c = load_batches(ds, ["photo", "art"], 8, generator=4)
    first = [next(a) for _ in range(12)]
    assert all(torch.equal(x[0], y[0]) for x, y in zip(first, (next(b) for _ in range(12))))
    assert not all(torch.equal(x[0], y[0]) for x, y in zip(first, (next(c) for _ in range(12))))


def test_unknown_domain_lists_available(small_root):
    ds = load_dataset(small_root)
    with pytest.raises(ConfigError, match="photo, art, cartoon, sketch"):
        next(load_batches(ds, ["clipart"], 4))
