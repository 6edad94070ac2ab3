"""Grid sweep of classifier families over action-window datasets.

``run_sweep`` fits one estimator per (window config, family, parameter
combination) cell and reports held-out accuracy, precision, recall and
F1 for each, one result row per cell.  Cells are independent; the only
shared state is the read-only datasets.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field

from sklearn.ensemble import (
    AdaBoostClassifier,
    GradientBoostingClassifier,
    RandomForestClassifier,
)
from sklearn.metrics import (
    accuracy_score,
    f1_score,
    precision_score,
    recall_score,
)
from sklearn.naive_bayes import GaussianNB
from sklearn.neighbors import KNeighborsClassifier
from sklearn.svm import SVC

from . import grids
from .data import WindowDataset, read_window_csv, split_dataset


@dataclass(frozen=True)
class SweepSpec:
    """One sweep: window-config datasets crossed with classifier grids.

    ``datasets`` maps (window, stride) to a window CSV path.  ``families``
    defaults to every grid; ``objective`` selects binary labels or
    multiclass strain labels as the prediction target.
    """

    datasets: dict[tuple[int, int], str] = field(default_factory=dict)
    families: tuple[str, ...] = grids.FAMILIES
    split_seed: int = 0
    train_fraction: float = 0.8
    objective: str = "binary"

    def __post_init__(self):
        unknown = set(self.families) - set(grids.FAMILIES)
        if unknown:
            raise ValueError(f"unknown classifier families {sorted(unknown)}")
        if self.objective not in ("binary", "multiclass"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train_fraction {self.train_fraction}")


@dataclass
class CellResult:
    family: str
    params: dict
    window: int
    stride: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    estimator: object = field(repr=False, compare=False, default=None)
    feature_names: list[str] = field(default_factory=list, repr=False,
                                     compare=False)
    training_labels: object = field(repr=False, compare=False, default=None)


def build_estimator(family: str, params: dict, seed: int = 0):
    """Instantiate one sweep cell's classifier."""
    params = dict(params)
    if family == "knn":
        return KNeighborsClassifier(**params)
    if family == "gbm":
        if params.get("max_depth") == -1:
            params["max_depth"] = None  # -1 is the "unlimited" spelling
        return GradientBoostingClassifier(random_state=seed, **params)
    if family == "random_forest":
        return RandomForestClassifier(random_state=seed, **params)
    if family == "svm":
        return SVC(random_state=seed, **params)
    if family == "adaboost":
        return AdaBoostClassifier(random_state=seed, **params)
    if family == "naive_bayes":
        return GaussianNB(**params)
    raise ValueError(f"unknown classifier family {family!r}")


def _fit_cell(family: str, params: dict, data: WindowDataset,
              train_idx, test_idx, objective: str, seed: int) -> CellResult | None:
    if objective == "multiclass":
        y = [s or "benign" for s in data.strain_ids]
        y_train = [y[i] for i in train_idx]
        y_test = [y[i] for i in test_idx]
        average = "macro"
    else:
        y_train = data.y[train_idx]
        y_test = data.y[test_idx]
        average = "binary"
    if len(set(map(str, y_train))) < 2:
        warnings.warn(f"single-class training split, skipping {family} cells")
        return None
    clf = build_estimator(family, params, seed)
    clf.fit(data.X[train_idx], y_train)
    pred = clf.predict(data.X[test_idx])
    kwargs = {"average": average, "zero_division": 0}
    if average == "binary":
        kwargs["pos_label"] = 1
    return CellResult(
        family=family,
        params=dict(params),
        window=0,
        stride=0,
        accuracy=float(accuracy_score(y_test, pred)),
        precision=float(precision_score(y_test, pred, **kwargs)),
        recall=float(recall_score(y_test, pred, **kwargs)),
        f1=float(f1_score(y_test, pred, **kwargs)),
        estimator=clf,
        feature_names=list(data.feature_names),
        training_labels=y_train,
    )


def run_sweep(spec: SweepSpec) -> list[CellResult]:
    """One result row per (dataset, family, parameter combination).

    Missing dataset files and single-class datasets are skipped with a
    warning rather than failing the whole sweep.
    """
    results: list[CellResult] = []
    for (window, stride), path in sorted(spec.datasets.items()):
        try:
            data = read_window_csv(path)
        except FileNotFoundError:
            warnings.warn(f"dataset {path} missing, skipping window "
                          f"{window}/{stride}")
            continue
        if len(data) < 2:
            warnings.warn(f"dataset {path} too small, skipping")
            continue
        train_idx, test_idx = split_dataset(data, spec.split_seed,
                                            spec.train_fraction)
        for family in spec.families:
            for params in grids.grid_cells(family):
                cell = _fit_cell(family, params, data, train_idx, test_idx,
                                 spec.objective, spec.split_seed)
                if cell is None:
                    break  # same split stays single-class for every cell
                cell.window = window
                cell.stride = stride
                results.append(cell)
    return results


def best_cell(results: list[CellResult],
              family: str | None = None) -> CellResult:
    candidates = [r for r in results if family is None or r.family == family]
    if not candidates:
        raise ValueError("no sweep results to choose from")
    return max(candidates, key=lambda r: (r.accuracy, r.f1))


def write_results_csv(path, results: list[CellResult]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["family", "params", "window", "stride",
                         "accuracy", "precision", "recall", "f1"])
        for r in results:
            writer.writerow([
                r.family,
                json.dumps(r.params, sort_keys=True),
                r.window,
                r.stride,
                f"{r.accuracy:.6f}",
                f"{r.precision:.6f}",
                f"{r.recall:.6f}",
                f"{r.f1:.6f}",
            ])
