"""Reader for the action-window CSV interchange format.

The layout is one row per aggregated action window: the feature columns
(named in the header) followed by a ``label`` column (1 malicious,
0 benign) and a ``strain_id`` column naming the workload variant for
malicious rows.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


@dataclass
class WindowDataset:
    feature_names: list[str]
    X: np.ndarray
    y: np.ndarray
    strain_ids: list[str]

    def __len__(self) -> int:
        return len(self.X)

    @property
    def single_class(self) -> bool:
        return len(np.unique(self.y)) < 2


def read_window_csv(path) -> WindowDataset:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[-2:] != ["label", "strain_id"]:
            raise ValueError(f"{path}: unexpected window CSV header")
        names = header[:-2]
        rows, labels, strains = [], [], []
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append([float(v) for v in row[: len(names)]])
                labels.append(int(row[len(names)]))
                strains.append(row[len(names) + 1])
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed row: {exc}") from exc
    X = np.array(rows, dtype=np.float64)
    if X.size and np.isnan(X).any():
        raise ValueError(f"{path}: NaN feature value")
    return WindowDataset(names, X, np.array(labels, dtype=np.int64), strains)


def split_dataset(data: WindowDataset, seed: int,
                  train_fraction: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic shuffled train/test row-index split."""
    order = np.random.default_rng(seed).permutation(len(data))
    cut = int(len(data) * train_fraction)
    return order[:cut], order[cut:]
