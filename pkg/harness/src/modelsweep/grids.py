"""Hyperparameter grids for the six classifier families.

Each grid is an ordered mapping from parameter name to the candidate
values tried for that parameter; a sweep cell is one point of the cross
product.  A tree depth of -1 or ``None`` means unlimited depth; the
estimator builder normalizes both to the library's convention.
"""

from __future__ import annotations

import itertools

GRIDS: dict[str, dict[str, list]] = {
    "knn": {
        "n_neighbors": [1, 3, 5, 7, 10, 15, 25],
        "weights": ["uniform", "distance"],
        "metric": ["euclidean", "manhattan", "minkowski"],
    },
    "gbm": {
        "n_estimators": [20, 50, 100, 200, 300],
        "learning_rate": [0.01, 0.1, 1.5, 0.2, 0.3, 0.5],
        "max_depth": [-1, 3, 5, 8, 12],
    },
    "random_forest": {
        "n_estimators": [20, 50, 100, 200, 300],
        "max_depth": [None, 10, 20, 30, 40],
        "bootstrap": [True, False],
    },
    "svm": {
        "C": [0.1, 1, 10, 100],
        "gamma": ["scale", "auto"],
        "kernel": ["rbf", "linear"],
    },
    "adaboost": {
        "n_estimators": [20, 50, 100, 150, 200],
        "learning_rate": [0.1, 0.3, 0.5, 0.7, 1.0, 1.2],
    },
    "naive_bayes": {
        "var_smoothing": [1e-9, 1e-8, 1e-7],
    },
}

FAMILIES = tuple(GRIDS)


def grid_cells(family: str) -> list[dict]:
    """All parameter combinations for one family, in grid order."""
    grid = GRIDS[family]
    names = list(grid)
    return [
        dict(zip(names, combo))
        for combo in itertools.product(*(grid[n] for n in names))
    ]


def grid_size(family: str) -> int:
    size = 1
    for values in GRIDS[family].values():
        size *= len(values)
    return size
