"""Tree-ensemble model format, inference, training and scoring.

The model file is a JSON document with explicit feature names so that
feature-order mismatches fail loudly.  The built-in trainer fits gradient
boosted CART trees with logistic loss using Newton leaf estimates; it is
deterministic for a fixed dataset order and parameter set.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateDataset,
    FeatureMismatch,
    SchemaViolation,
    VersionMismatch,
)

MODEL_FORMAT_VERSION = 1

# Raw score magnitude that saturates the logistic exactly in float64.
_SATURATING_SCORE = 750.0


def logistic(margin: float) -> float:
    if margin >= 0:
        return 1.0 / (1.0 + math.exp(-margin))
    e = math.exp(margin)
    return e / (1.0 + e)


@dataclass
class TreeNode:
    """Internal node (feature_index/threshold/left/right) or leaf (value)."""

    value: float | None = None
    feature_index: int | None = None
    threshold: float | None = None
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.value is not None

    def evaluate(self, x) -> float:
        node = self
        while not node.is_leaf:
            if x[node.feature_index] <= node.threshold:
                node = node.left
            else:
                node = node.right
        return node.value

    def to_dict(self) -> dict:
        if self.is_leaf:
            return {"value": self.value}
        return {
            "feature_index": self.feature_index,
            "threshold": self.threshold,
            "left": self.left.to_dict(),
            "right": self.right.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict, n_features: int) -> "TreeNode":
        keys = set(data)
        if keys == {"value"}:
            return cls(value=float(data["value"]))
        if keys != {"feature_index", "threshold", "left", "right"}:
            raise SchemaViolation(f"unexpected node fields {sorted(keys)}")
        idx = int(data["feature_index"])
        if not 0 <= idx < n_features:
            raise SchemaViolation(f"feature_index {idx} out of range")
        return cls(
            feature_index=idx,
            threshold=float(data["threshold"]),
            left=cls.from_dict(data["left"], n_features),
            right=cls.from_dict(data["right"], n_features),
        )

    def count_splits(self, counts: dict[int, int]) -> None:
        if not self.is_leaf:
            counts[self.feature_index] = counts.get(self.feature_index, 0) + 1
            self.left.count_splits(counts)
            self.right.count_splits(counts)


@dataclass
class EnsembleModel:
    trees: list[TreeNode]
    base_score: float
    feature_names: list[str]
    objective: str = "binary-logistic"
    feature_set: str = "full"
    training_window: tuple[int, int] = (1, 1)
    threshold: float = 0.5
    classes: list[str] = field(default_factory=list)
    tree_class: list[int] = field(default_factory=list)  # multiclass only
    degenerate: bool = False

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def check_features(self, feature_names) -> None:
        if list(feature_names) != list(self.feature_names):
            raise FeatureMismatch(
                f"model expects {self.feature_names}, got {list(feature_names)}"
            )

    def raw_margin(self, x) -> float:
        return self.base_score + sum(t.evaluate(x) for t in self.trees)

    def class_margins(self, x) -> np.ndarray:
        margins = np.full(len(self.classes), self.base_score)
        for tree, cls in zip(self.trees, self.tree_class):
            margins[cls] += tree.evaluate(x)
        return margins


def predict_score(model: EnsembleModel, x) -> float:
    """Probability of the malicious class for one feature vector."""
    if len(x) != model.n_features:
        raise FeatureMismatch(f"vector has {len(x)} features, model wants "
                              f"{model.n_features}")
    return logistic(model.raw_margin(x))


def predict_scores(model: EnsembleModel, X: np.ndarray) -> np.ndarray:
    return np.array([predict_score(model, row) for row in X])


def predict_class(model: EnsembleModel, x) -> int:
    """Argmax class index for a multiclass model."""
    if model.objective != "multiclass-softmax":
        raise FeatureMismatch("model is not multiclass")
    return int(np.argmax(model.class_margins(x)))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainParams:
    n_estimators: int = 60
    learning_rate: float = 0.3
    max_depth: int = 3
    min_samples_leaf: int = 1
    reg_lambda: float = 1.0


def _best_split(X, grad, hess, idx, min_leaf, reg):
    """Best (feature, threshold) by Newton gain; ties go to the lowest feature
    index, then the lowest threshold."""
    g_total = grad[idx].sum()
    h_total = hess[idx].sum()
    parent = g_total * g_total / (h_total + reg)
    best = None  # (gain, feature, threshold, left_mask)
    for f in range(X.shape[1]):
        x = X[idx, f]
        order = np.argsort(x, kind="stable")
        xs = x[order]
        gs = np.cumsum(grad[idx][order])
        hs = np.cumsum(hess[idx][order])
        n = len(idx)
        # Split after position i (0-based): left = [0..i], right = (i..n).
        distinct = xs[:-1] != xs[1:]
        for i in np.nonzero(distinct)[0]:
            if i + 1 < min_leaf or n - i - 1 < min_leaf:
                continue
            gl, hl = gs[i], hs[i]
            gr, hr = g_total - gl, h_total - hl
            gain = gl * gl / (hl + reg) + gr * gr / (hr + reg) - parent
            if best is None or gain > best[0] + 1e-12:
                threshold = (xs[i] + xs[i + 1]) / 2.0
                left = idx[order[: i + 1]]
                right = idx[order[i + 1 :]]
                best = (gain, f, threshold, left, right)
    return best


def _grow_tree(X, grad, hess, idx, depth, params: TrainParams) -> TreeNode:
    reg = params.reg_lambda
    g, h = grad[idx].sum(), hess[idx].sum()
    leaf_value = -params.learning_rate * g / (h + reg)
    if (params.max_depth is not None and depth >= params.max_depth) or len(idx) < 2:
        return TreeNode(value=leaf_value)
    best = _best_split(X, grad, hess, idx, params.min_samples_leaf, reg)
    if best is None or best[0] <= 0:
        return TreeNode(value=leaf_value)
    _gain, f, threshold, left_idx, right_idx = best
    return TreeNode(
        feature_index=f,
        threshold=float(threshold),
        left=_grow_tree(X, grad, hess, left_idx, depth + 1, params),
        right=_grow_tree(X, grad, hess, right_idx, depth + 1, params),
    )


def train_cart(X: np.ndarray, y: np.ndarray, feature_names: list[str],
               params: TrainParams = TrainParams(),
               feature_set: str = "full",
               training_window: tuple[int, int] = (1, 1)) -> EnsembleModel:
    """Gradient boosted CART with logistic loss.

    A single-class dataset yields a constant model whose probability equals
    the class prior, with the ``degenerate`` flag set.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(X) < 1:
        raise DegenerateDataset("empty dataset")
    if np.isnan(X).any():
        raise ValueError("NaN feature values in training data")

    prior = float(y.mean())
    common = dict(feature_names=list(feature_names), feature_set=feature_set,
                  training_window=tuple(training_window))
    if prior in (0.0, 1.0):
        base = _SATURATING_SCORE if prior == 1.0 else -_SATURATING_SCORE
        return EnsembleModel(trees=[], base_score=base, degenerate=True, **common)
    if len(X) < 2:
        raise DegenerateDataset("need at least 2 samples")

    base = math.log(prior / (1.0 - prior))
    margins = np.full(len(y), base)
    trees: list[TreeNode] = []
    all_idx = np.arange(len(y))
    for _ in range(params.n_estimators):
        p = 1.0 / (1.0 + np.exp(-margins))
        grad = p - y
        hess = p * (1.0 - p)
        tree = _grow_tree(X, grad, hess, all_idx, 0, params)
        trees.append(tree)
        margins += np.array([tree.evaluate(row) for row in X])
    return EnsembleModel(trees=trees, base_score=base, **common)


def training_log_loss(model: EnsembleModel, X, y, n_trees: int | None = None) -> float:
    """Mean logistic loss using the first n_trees trees (all when None)."""
    trees = model.trees if n_trees is None else model.trees[:n_trees]
    losses = []
    for x, target in zip(X, y):
        margin = model.base_score + sum(t.evaluate(x) for t in trees)
        p = logistic(margin)
        p = min(max(p, 1e-15), 1.0 - 1e-15)
        losses.append(-(target * math.log(p) + (1 - target) * math.log(1 - p)))
    return float(np.mean(losses))


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int
    per_class: dict[str, dict[str, int]] = field(default_factory=dict)

    def summary(self) -> str:
        lines = [
            f"accuracy  {self.accuracy:.4f}",
            f"precision {self.precision:.4f}",
            f"recall    {self.recall:.4f}",
            f"f1        {self.f1:.4f}",
            f"confusion tp={self.tp} fp={self.fp} fn={self.fn} tn={self.tn}",
        ]
        for name, row in self.per_class.items():
            lines.append(f"class {name}: {row}")
        return "\n".join(lines)


def evaluate(model: EnsembleModel, X: np.ndarray, y: np.ndarray,
             threshold: float | None = None,
             strain_ids: list[str] | None = None) -> EvalReport:
    if len(X) == 0:
        raise ValueError("empty dataset")
    cutoff = model.threshold if threshold is None else threshold

    if model.objective == "multiclass-softmax":
        return _evaluate_multiclass(model, X, strain_ids)

    scores = predict_scores(model, X)
    pred = (scores >= cutoff).astype(int)
    y = np.asarray(y, dtype=int)
    tp = int(((pred == 1) & (y == 1)).sum())
    fp = int(((pred == 1) & (y == 0)).sum())
    fn = int(((pred == 0) & (y == 1)).sum())
    tn = int(((pred == 0) & (y == 0)).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    accuracy = (tp + tn) / len(y)
    report = EvalReport(accuracy, precision, recall, f1, tp, fp, fn, tn)

    if strain_ids is not None:
        for strain in sorted(set(strain_ids)):
            mask = np.array([s == strain for s in strain_ids])
            report.per_class[strain or "benign"] = {
                "correct": int((pred[mask] == y[mask]).sum()),
                "total": int(mask.sum()),
            }
    return report


def _evaluate_multiclass(model: EnsembleModel, X, strain_ids) -> EvalReport:
    if strain_ids is None:
        raise FeatureMismatch("multiclass evaluation needs strain labels")
    class_index = {name: i for i, name in enumerate(model.classes)}
    correct = 0
    per_class: dict[str, dict[str, int]] = {
        name: {"correct": 0, "total": 0} for name in model.classes
    }
    for x, strain in zip(X, strain_ids):
        truth = class_index.get(strain)
        pred = predict_class(model, x)
        if truth is None:
            continue
        per_class[strain]["total"] += 1
        if pred == truth:
            per_class[strain]["correct"] += 1
            correct += 1
    total = sum(row["total"] for row in per_class.values())
    accuracy = correct / total if total else 0.0
    return EvalReport(accuracy, accuracy, accuracy, accuracy, 0, 0, 0, 0,
                      per_class=per_class)


def feature_importance(model: EnsembleModel) -> list[tuple[str, int]]:
    """Split counts per feature, descending; empty for constant models."""
    counts: dict[int, int] = {}
    for tree in model.trees:
        tree.count_splits(counts)
    ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    return [(model.feature_names[i], n) for i, n in ranked]


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_KNOWN_FIELDS = {
    "version", "objective", "base_score", "feature_names", "feature_set",
    "training_window", "threshold", "trees", "classes", "tree_class",
    "degenerate",
}


def save_model(model: EnsembleModel, path) -> None:
    doc = {
        "version": MODEL_FORMAT_VERSION,
        "objective": model.objective,
        "base_score": model.base_score,
        "feature_names": model.feature_names,
        "feature_set": model.feature_set,
        "training_window": list(model.training_window),
        "threshold": model.threshold,
        "trees": [t.to_dict() for t in model.trees],
    }
    if model.classes:
        doc["classes"] = model.classes
        doc["tree_class"] = model.tree_class
    if model.degenerate:
        doc["degenerate"] = True
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)


def load_model(path) -> EnsembleModel:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    unknown = set(doc) - _KNOWN_FIELDS
    if unknown:
        raise SchemaViolation(f"unknown model fields {sorted(unknown)}")
    version = doc.get("version")
    if version != MODEL_FORMAT_VERSION:
        raise VersionMismatch(f"model format version {version}")
    if doc.get("objective") not in ("binary-logistic", "multiclass-softmax"):
        raise SchemaViolation(f"unknown objective {doc.get('objective')!r}")
    names = list(doc["feature_names"])
    trees = [TreeNode.from_dict(t, len(names)) for t in doc["trees"]]
    model = EnsembleModel(
        trees=trees,
        base_score=float(doc["base_score"]),
        feature_names=names,
        objective=doc["objective"],
        feature_set=doc.get("feature_set", "full"),
        training_window=tuple(doc.get("training_window", (1, 1))),
        threshold=float(doc.get("threshold", 0.5)),
        classes=list(doc.get("classes", [])),
        tree_class=list(doc.get("tree_class", [])),
        degenerate=bool(doc.get("degenerate", False)),
    )
    if model.objective == "multiclass-softmax":
        if len(model.tree_class) != len(model.trees) or not model.classes:
            raise SchemaViolation("multiclass model missing class assignments")
        if any(not 0 <= c < len(model.classes) for c in model.tree_class):
            raise SchemaViolation("tree class index out of range")
    return model
