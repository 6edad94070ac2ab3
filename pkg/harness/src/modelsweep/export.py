"""Export boosted-tree sweep winners to the portable model format.

The format is a JSON document (version 1) holding a base score and a
list of binary trees whose leaf margins sum with the base score; the
probability is the logistic of that margin.  Only the gradient-boosted
family decomposes this way, so everything else is refused with
``NotExportable``.
"""

from __future__ import annotations

import json

import numpy as np
from sklearn.ensemble import GradientBoostingClassifier

from .sweep import CellResult

MODEL_FORMAT_VERSION = 1


class NotExportable(Exception):
    pass


def _tree_to_dict(tree, scale: float, node: int = 0) -> dict:
    left = tree.children_left[node]
    if left == -1:
        return {"value": float(scale * tree.value[node][0][0])}
    return {
        "feature_index": int(tree.feature[node]),
        "threshold": float(tree.threshold[node]),
        "left": _tree_to_dict(tree, scale, left),
        "right": _tree_to_dict(tree, scale, node=tree.children_right[node]),
    }


def _prior_log_odds(clf: GradientBoostingClassifier) -> float:
    # Mirror the library's own raw-score initialization: the clipped
    # log odds of the positive-class prior.
    eps = np.finfo(np.float32).eps
    prior = float(np.clip(clf.init_.class_prior_[1], eps, 1 - eps))
    return float(np.log(prior / (1 - prior)))


def _class_log_priors(clf: GradientBoostingClassifier) -> list[float]:
    # The library centers the per-class log priors around zero; matching
    # that keeps exported class margins identical to its raw scores.
    eps = np.finfo(np.float32).eps
    log_priors = np.log(np.clip(clf.init_.class_prior_, eps, 1 - eps))
    centered = log_priors - log_priors.mean()
    return [float(v) for v in centered]


def export_model(cell: CellResult, path,
                 feature_names: list[str] | None = None,
                 feature_set: str = "full",
                 threshold: float = 0.5) -> None:
    """Write one sweep cell's model to ``path`` in the shared format.

    ``feature_names``, when given, must match the dataset header the cell
    was trained on; a mismatch is refused rather than silently reordered.
    """
    if not isinstance(cell.estimator, GradientBoostingClassifier):
        raise NotExportable(
            f"{cell.family} models have no additive tree-margin form; "
            "only the gradient-boosted family exports to the shared format"
        )
    clf = cell.estimator
    if feature_names is not None and list(feature_names) != list(cell.feature_names):
        raise NotExportable(
            f"feature names {list(feature_names)} do not match the training "
            f"dataset header {list(cell.feature_names)}"
        )

    doc = {
        "version": MODEL_FORMAT_VERSION,
        "feature_names": list(cell.feature_names),
        "feature_set": feature_set,
        "training_window": [cell.window, cell.stride],
        "threshold": threshold,
    }
    lr = clf.learning_rate
    if clf.n_classes_ == 2:
        doc["objective"] = "binary-logistic"
        doc["base_score"] = _prior_log_odds(clf)
        doc["trees"] = [
            _tree_to_dict(stage[0].tree_, lr) for stage in clf.estimators_
        ]
    else:
        # Per-class priors become one constant tree per class so a single
        # scalar base score suffices; per-class margins then accumulate
        # exactly as the library computes its raw scores.
        doc["objective"] = "multiclass-softmax"
        doc["base_score"] = 0.0
        doc["classes"] = [str(c) for c in clf.classes_]
        trees = [{"value": v} for v in _class_log_priors(clf)]
        tree_class = list(range(clf.n_classes_))
        for stage in clf.estimators_:
            for k, est in enumerate(stage):
                trees.append(_tree_to_dict(est.tree_, lr))
                tree_class.append(k)
        doc["trees"] = trees
        doc["tree_class"] = tree_class

    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
