"""Embedded datasets, label manifests and seeded splits."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".bmp", ".gif", ".webp"}


def substream(seed: int, name: str) -> int:
    """Named child seed derived from the root seed."""
    digest = hashlib.sha256(f"{seed}/{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass
class EmbeddedDataset:
    labels: tuple[str, ...]
    features: np.ndarray  # (n, d), unit rows
    targets: np.ndarray  # (n,) label indices
    ids: tuple[str, ...]
    superclasses: tuple[str | None, ...] | None = None

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, index: Sequence[int]) -> "EmbeddedDataset":
        index = np.asarray(index, dtype=int)
        return EmbeddedDataset(
            self.labels, self.features[index], self.targets[index], tuple(self.ids[i] for i in index), self.superclasses
        )

    def indices_of(self, label_index: int) -> np.ndarray:
        return np.flatnonzero(self.targets == label_index)

    def label_means(self) -> np.ndarray:
        return np.stack([self.features[self.indices_of(j)].mean(0) for j in range(len(self.labels))])

    @classmethod
    def from_groups(cls, groups: dict[str, np.ndarray], superclasses=None, prefix: str = "") -> "EmbeddedDataset":
        labels = tuple(groups)
        feats, targets, ids = [], [], []
        for j, label in enumerate(labels):
            feats.append(np.asarray(groups[label], dtype=np.float64))
            targets += [j] * len(groups[label])
            ids += [f"{prefix}{label}/{i}" for i in range(len(groups[label]))]
        return cls(labels, np.concatenate(feats), np.asarray(targets), tuple(ids),
                   tuple(superclasses) if superclasses is not None else None)


def stratified_split(targets: np.ndarray, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per label, the first ``round(fraction * n)`` of a seeded shuffle go to the second part.

    Every label keeps at least one sample in the first part.
    """
    rng = np.random.default_rng(seed)
    first, second = [], []
    for j in np.unique(targets):
        idx = rng.permutation(np.flatnonzero(targets == j))
        cut = min(int(round(fraction * len(idx))), len(idx) - 1)
        second += list(idx[:cut])
        first += list(idx[cut:])
    return np.sort(np.asarray(first, dtype=int)), np.sort(np.asarray(second, dtype=int))


def read_label_manifest(path: str | Path) -> tuple[list[str], list[str | None]]:
    """``labels.csv`` with a ``name`` column and an optional ``superclass`` column."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"label manifest not found: {path}")
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "name" not in rows[0]:
        raise ValueError(f"{path} needs a header row with a 'name' column")
    names = [r["name"].strip() for r in rows]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate label names in {path}")
    return names, [(r.get("superclass") or "").strip() or None for r in rows]


def list_images(root: str | Path, labels: Sequence[str]) -> list[tuple[str, int]]:
    """(relative path, label index) for every image under ``root/<label>/``."""
    root = Path(root)
    items = []
    for j, label in enumerate(labels):
        folder = root / label
        if not folder.is_dir():
            raise FileNotFoundError(f"missing image directory for label {label!r}: {folder}")
        for p in sorted(folder.iterdir()):
            if p.suffix.lower() in IMAGE_SUFFIXES:
                items.append((str(p.relative_to(root)), j))
    return items
