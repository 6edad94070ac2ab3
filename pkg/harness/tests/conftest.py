import csv

import numpy as np
import pytest

FEATURE_NAMES = [f"feat_{i}" for i in range(6)]


def write_window_csv(path, feature_names, X, y, strains=None):
    strains = strains or ["" for _ in y]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(feature_names) + ["label", "strain_id"])
        for row, label, strain in zip(X, y, strains):
            writer.writerow([repr(float(v)) for v in row] + [str(int(label)), strain])


def separable_dataset(n=60, n_features=6, seed=0):
    """Labels follow feature 0 with a wide margin, so every family can
    reach high accuracy."""
    rng = np.random.default_rng(seed)
    X = rng.random((n, n_features))
    y = (X[:, 0] > 0.5).astype(int)
    X[:, 0] += y * 2.0
    return X, y


@pytest.fixture()
def dataset_csv(tmp_path):
    X, y = separable_dataset()
    path = tmp_path / "windows.csv"
    write_window_csv(path, FEATURE_NAMES, X, y)
    return path
