"""Binary NLoS detector: gradient-boosted shallow regression trees, logistic loss.

Self-contained and deterministic; the model serializes to versioned JSON with
a bit-exact round-trip.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import DegenerateLabels, DimensionMismatch, InsufficientData

MODEL_FORMAT_VERSION = 1

LOS = 0
NLOS = 1

FEATURE_NAMES = (
    "cir_le_peak_delay",
    "cir_peak_amplitude",
    "cir_total_energy",
    "snr_db",
    "rssi_dbm",
    "first_path_amplitude",
)


@dataclass
class TrainConfig:
    n_rounds: int = 100
    learning_rate: float = 0.1
    max_depth: int = 3
    min_samples_leaf: int = 5


@dataclass
class _TreeNode:
    # leaf when feature < 0
    feature: int = -1
    threshold: float = 0.0
    left: Optional["_TreeNode"] = None
    right: Optional["_TreeNode"] = None
    value: float = 0.0

    def predict(self, x: np.ndarray) -> float:
        node = self
        while node.feature >= 0:
            node = node.left if x[node.feature] <= node.threshold else node.right
        return node.value

    def predict_batch(self, X: np.ndarray) -> np.ndarray:
        if self.feature < 0:
            return np.full(X.shape[0], self.value)
        mask = X[:, self.feature] <= self.threshold
        out = np.empty(X.shape[0])
        out[mask] = self.left.predict_batch(X[mask])
        out[~mask] = self.right.predict_batch(X[~mask])
        return out

    def to_dict(self) -> dict:
        if self.feature < 0:
            return {"value": self.value}
        return {
            "feature": self.feature,
            "threshold": self.threshold,
            "left": self.left.to_dict(),
            "right": self.right.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "_TreeNode":
        if "value" in d:
            return cls(value=float(d["value"]))
        return cls(
            feature=int(d["feature"]),
            threshold=float(d["threshold"]),
            left=cls.from_dict(d["left"]),
            right=cls.from_dict(d["right"]),
        )


@dataclass
class NlosDetectorModel:
    """Ensemble of shallow trees; raw score 0 -> probability 0.5 exactly."""

    feature_dim: int
    trees: List[_TreeNode] = field(default_factory=list)
    learning_rate: float = 0.1
    threshold: float = 0.5

    def raw_score(self, X: np.ndarray) -> np.ndarray:
        score = np.zeros(X.shape[0])
        for tree in self.trees:
            score += self.learning_rate * tree.predict_batch(X)
        return score

    def predict_proba(self, f) -> float:
        f = self._check(f)
        return float(_sigmoid(self.raw_score(f[None, :]))[0])

    def predict_proba_batch(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape[1] != self.feature_dim:
            raise DimensionMismatch(f"expected {self.feature_dim} features, got {X.shape[1]}")
        return _sigmoid(self.raw_score(X))

    def is_nlos(self, f) -> bool:
        return self.predict_proba(f) > self.threshold

    def _check(self, f) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        if f.shape != (self.feature_dim,):
            raise DimensionMismatch(f"expected {self.feature_dim} features, got shape {f.shape}")
        return f

    def to_json(self) -> str:
        return json.dumps(
            {
                "format_version": MODEL_FORMAT_VERSION,
                "feature_dim": self.feature_dim,
                "learning_rate": self.learning_rate,
                "threshold": self.threshold,
                "trees": [t.to_dict() for t in self.trees],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "NlosDetectorModel":
        d = json.loads(text)
        if d.get("format_version") != MODEL_FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {d.get('format_version')}")
        return cls(
            feature_dim=int(d["feature_dim"]),
            trees=[_TreeNode.from_dict(t) for t in d["trees"]],
            learning_rate=float(d["learning_rate"]),
            threshold=float(d["threshold"]),
        )

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "NlosDetectorModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.clip(x, -500, 500)))


def _fit_tree(X, grad, hess, depth, min_leaf) -> _TreeNode:
    """Fit one regression tree on (gradient, hessian); leaves take Newton steps."""
    n = X.shape[0]
    if depth == 0 or n < 2 * min_leaf:
        return _TreeNode(value=_leaf_value(grad, hess))

    best_gain = 0.0
    best = None
    g_tot, h_tot = grad.sum(), hess.sum()
    parent_score = g_tot * g_tot / (h_tot + 1e-16)
    for feat in range(X.shape[1]):
        order = np.argsort(X[:, feat], kind="stable")
        xs = X[order, feat]
        gs = np.cumsum(grad[order])
        hs = np.cumsum(hess[order])
        for cut in range(min_leaf - 1, n - min_leaf):
            if xs[cut] == xs[cut + 1]:
                continue
            gl, hl = gs[cut], hs[cut]
            gr, hr = g_tot - gl, h_tot - hl
            gain = gl * gl / (hl + 1e-16) + gr * gr / (hr + 1e-16) - parent_score
            if gain > best_gain + 1e-12:
                best_gain = gain
                best = (feat, (xs[cut] + xs[cut + 1]) / 2.0)
    if best is None:
        return _TreeNode(value=_leaf_value(grad, hess))

    feat, thr = best
    mask = X[:, feat] <= thr
    return _TreeNode(
        feature=feat,
        threshold=thr,
        left=_fit_tree(X[mask], grad[mask], hess[mask], depth - 1, min_leaf),
        right=_fit_tree(X[~mask], grad[~mask], hess[~mask], depth - 1, min_leaf),
    )


def _leaf_value(grad, hess) -> float:
    return float(grad.sum() / (hess.sum() + 1e-16))


def log_loss(y: np.ndarray, p: np.ndarray) -> float:
    p = np.clip(p, 1e-12, 1 - 1e-12)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def train_detector(
    features: np.ndarray,
    labels,
    cfg: Optional[TrainConfig] = None,
    seed: int = 0,
) -> NlosDetectorModel:
    """Boosted-tree training with logistic loss; deterministic given inputs.

    Labels are 0 (LoS) / 1 (NLoS); both classes must be present and there
    must be at least 20 samples.
    """
    cfg = cfg or TrainConfig()
    X = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise DimensionMismatch("features and labels must align")
    if X.shape[0] < 20:
        raise InsufficientData(f"need >= 20 samples, got {X.shape[0]}")
    if len(np.unique(y)) < 2:
        raise DegenerateLabels("both classes must be present")

    model = NlosDetectorModel(feature_dim=X.shape[1], learning_rate=cfg.learning_rate)
    score = np.zeros(X.shape[0])
    for _ in range(cfg.n_rounds):
        p = _sigmoid(score)
        grad = y - p  # negative gradient of logistic loss
        hess = p * (1 - p)
        tree = _fit_tree(X, grad, hess, cfg.max_depth, cfg.min_samples_leaf)
        model.trees.append(tree)
        score += cfg.learning_rate * tree.predict_batch(X)
    return model


def classify(model: NlosDetectorModel, f) -> int:
    """Threshold the ensemble probability; ties break to LoS."""
    return NLOS if model.is_nlos(f) else LOS
