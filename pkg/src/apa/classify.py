"""
Imbalance-aware boosting of weighted decision trees and one-vs-all ECOC.

The binary learner trains ``J + 1`` trees.  Round ``j`` sees the whole
minority class, the ``j``-th disjoint slice of the majority class and the
instances the previous tree got wrong.  Majority-slice instances carry the
penalty weight ``1 - |corr(mean(small), mean(large))|``; everything else
has weight 1.  The ensemble predicts by unweighted majority vote.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)


class ZeroVarianceWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        X = np.array(self.features, dtype=np.float64, copy=True)
        y = np.array(self.labels, copy=True).astype(np.int64).ravel()
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise ValueError(f"features {X.shape} and labels {y.shape} disagree")
        if not np.all(np.isfinite(X)):
            raise ValueError("features contain non-finite values")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.shape[0]

    def take(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx])


@dataclass(frozen=True)
class TreeConfig:
    max_depth: int = 8
    min_leaf_weight: float = 1.0

    def __post_init__(self):
        if self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.min_leaf_weight < 0:
            raise ValueError("min_leaf_weight must be >= 0")


class WeightedTree:
    """Binary-split CART on weighted Gini impurity.

    Thresholds sit midway between consecutive distinct feature values; a
    sample goes left when ``x[feature] <= threshold``.  Both children of a
    split must hold at least ``min_leaf_weight`` training samples, counted
    without weights, and the split must lower the weighted impurity.  Sample
    weights only scale impurity and leaf votes; counting them against the
    leaf minimum would forbid any leaf made of heavily penalized samples.
    Leaf ties go to the larger label (so +1 beats -1).
    """

    def __init__(self, max_depth: int = 8, min_leaf_weight: float = 1.0):
        self.max_depth = max_depth
        self.min_leaf_weight = min_leaf_weight
        self.root = None
        self.n_features = None

    def fit(self, X, y, sample_weight=None) -> "WeightedTree":
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y).astype(np.int64)
        if X.ndim != 2 or X.shape[0] != y.shape[0] or X.shape[0] == 0:
            raise ValueError("tree needs a non-empty (n, L) matrix and n labels")
        w = np.ones(len(y)) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
        if w.shape != y.shape or np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("sample weights must be finite, non-negative and one per sample")
        # descending so argmax ties resolve to the larger label
        self.classes_ = np.unique(y)[::-1]
        codes = np.searchsorted(-self.classes_, -y)
        self.n_features = X.shape[1]
        self.root = self._grow(X, codes, w, depth=0)
        return self

    def _leaf(self, codes, w):
        k = len(self.classes_)
        cw = np.bincount(codes, weights=w, minlength=k)
        if cw.sum() <= 0:
            cw = np.bincount(codes, minlength=k).astype(np.float64)
        return {"label": int(self.classes_[int(np.argmax(cw))])}

    @staticmethod
    def _gini_mass(cw, total):
        # total * gini = total - sum(cw^2)/total
        with np.errstate(divide="ignore", invalid="ignore"):
            g = total - np.sum(cw ** 2, axis=-1) / total
        return np.where(total > 0, g, 0.0)

    def _grow(self, X, codes, w, depth):
        k = len(self.classes_)
        cw = np.bincount(codes, weights=w, minlength=k)
        total = cw.sum()
        if depth >= self.max_depth or len(codes) < 2 or np.count_nonzero(cw) <= 1:
            return self._leaf(codes, w)
        parent = float(self._gini_mass(cw, total))
        best = None
        onehot = np.zeros((len(codes), k))
        onehot[np.arange(len(codes)), codes] = w
        for f in range(X.shape[1]):
            order = np.argsort(X[:, f], kind="stable")
            xs = X[order, f]
            cum = np.cumsum(onehot[order], axis=0)
            # candidate cut after position i where xs[i] < xs[i+1]
            cut = np.flatnonzero(xs[1:] > xs[:-1])
            if cut.size == 0:
                continue
            left = cum[cut]
            right = cw - left
            wl, wr = left.sum(axis=1), right.sum(axis=1)
            nl = cut + 1.0
            ok = (nl >= self.min_leaf_weight) & (len(codes) - nl >= self.min_leaf_weight)
            if not ok.any():
                continue
            child = self._gini_mass(left, wl) + self._gini_mass(right, wr)
            child = np.where(ok, child, np.inf)
            i = int(np.argmin(child))
            gain = parent - child[i]
            if best is None or gain > best[0]:
                thr = 0.5 * (xs[cut[i]] + xs[cut[i] + 1])
                best = (gain, f, thr)
        if best is None or best[0] <= 1e-12 * max(total, 1.0):
            return self._leaf(codes, w)
        _, f, thr = best
        go_left = X[:, f] <= thr
        return {
            "feature": int(f),
            "threshold": float(thr),
            "left": self._grow(X[go_left], codes[go_left], w[go_left], depth + 1),
            "right": self._grow(X[~go_left], codes[~go_left], w[~go_left], depth + 1),
        }

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if self.root is None:
            raise RuntimeError("tree is not fitted")
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        out = np.empty(X.shape[0], dtype=np.int64)
        for i, x in enumerate(X):
            node = self.root
            while "label" not in node:
                node = node["left"] if x[node["feature"]] <= node["threshold"] else node["right"]
            out[i] = node["label"]
        return out

    def depth(self) -> int:
        def _d(node):
            return 0 if "label" in node else 1 + max(_d(node["left"]), _d(node["right"]))
        return _d(self.root)

    def to_dict(self) -> dict:
        return {"max_depth": self.max_depth, "min_leaf_weight": self.min_leaf_weight,
                "n_features": self.n_features, "classes": [int(c) for c in self.classes_],
                "root": self.root}

    @classmethod
    def from_dict(cls, d: dict) -> "WeightedTree":
        t = cls(d["max_depth"], d["min_leaf_weight"])
        t.n_features = d["n_features"]
        t.classes_ = np.asarray(d["classes"], dtype=np.int64)
        t.root = d["root"]
        return t


@dataclass(frozen=True)
class ClassSplit:
    small: LabeledDataset
    large: LabeledDataset
    j_parts: int
    small_label: int
    large_label: int
    small_index: np.ndarray
    large_index: np.ndarray


def split_classes(train: LabeledDataset) -> ClassSplit:
    """Minority/majority partition and ``J = max(1, floor(|large| / |small|))``.

    On equal sizes the +1 class (or the larger label) is called small.
    """
    labels = np.unique(train.labels)
    if labels.size != 2:
        raise ValueError(f"binary training needs exactly two classes, got {labels.tolist()}")
    counts = {int(c): int(np.sum(train.labels == c)) for c in labels}
    lo, hi = int(labels[0]), int(labels[1])
    small_label = hi if counts[hi] <= counts[lo] else lo
    large_label = lo if small_label == hi else hi
    s_idx = np.flatnonzero(train.labels == small_label)
    l_idx = np.flatnonzero(train.labels == large_label)
    J = max(1, len(l_idx) // len(s_idx))
    return ClassSplit(train.take(s_idx), train.take(l_idx), J, small_label, large_label, s_idx, l_idx)


def pearson(a, b) -> float | None:
    """Pearson correlation, or None when either input has zero variance."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    da, db = a - a.mean(), b - b.mean()
    na, nb = np.sqrt(da @ da), np.sqrt(db @ db)
    if na == 0 or nb == 0:
        return None
    return float(np.clip((da @ db) / (na * nb), -1.0, 1.0))


def penalty_weight(small: LabeledDataset, large: LabeledDataset) -> float:
    """``1 - |corr|`` between the two classes' mean feature vectors."""
    if len(small) == 0 or len(large) == 0:
        raise ValueError("penalty weight needs two non-empty classes")
    r = pearson(small.features.mean(axis=0), large.features.mean(axis=0))
    if r is None:
        warnings.warn("class mean vector has zero variance; correlation taken as 0",
                      ZeroVarianceWarning, stacklevel=2)
        return 1.0
    return 1.0 - abs(r)


@dataclass
class RoundRecord:
    """Bookkeeping of one boosting round, indices into the training set."""

    large_part: np.ndarray
    carry_over: np.ndarray
    members: np.ndarray
    weights: np.ndarray
    misclassified: np.ndarray


@dataclass
class EnsembleClassifier:
    members: list
    small_label: int = 1
    large_label: int = -1
    j_parts: int = 1
    penalty: float = 1.0
    config: dict = field(default_factory=dict)
    history: list = field(default_factory=list, repr=False)

    @property
    def n_features(self) -> int:
        return self.members[0].n_features

    def votes(self, X) -> np.ndarray:
        """(n_members, n) array of member predictions."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return np.vstack([m.predict(X) for m in self.members])

    def decision(self, X):
        """Majority label and margin ``(votes+ - votes-) / members`` for each row.

        ``+`` is the small label; a tied vote goes to the small label.
        """
        v = self.votes(X)
        n = v.shape[0]
        pos = np.sum(v == self.small_label, axis=0)
        margin = (2.0 * pos - n) / n
        label = np.where(margin >= 0, self.small_label, self.large_label)
        return label, margin

    def to_dict(self) -> dict:
        return {"type": "imbalance_adaboost", "small_label": self.small_label,
                "large_label": self.large_label, "j_parts": self.j_parts,
                "penalty": self.penalty, "config": self.config,
                "members": [m.to_dict() for m in self.members]}

    @classmethod
    def from_dict(cls, d: dict) -> "EnsembleClassifier":
        return cls([WeightedTree.from_dict(m) for m in d["members"]], d["small_label"],
                   d["large_label"], d["j_parts"], d["penalty"], d.get("config", {}))


def train_imbalance_adaboost(train: LabeledDataset, tree_cfg: TreeConfig = TreeConfig(),
                             rng_seed=0) -> EnsembleClassifier:
    split = split_classes(train)
    if min(len(split.small), len(split.large)) < 2:
        raise ValueError("each class needs at least two training samples")
    J = split.j_parts
    w_large = penalty_weight(split.small, split.large)
    rng = np.random.default_rng(rng_seed)
    parts = np.array_split(rng.permutation(split.large_index), J)
    X, y = train.features, train.labels
    members, history = [], []
    carry = np.empty(0, dtype=np.int64)
    for j in range(J + 1):
        part = parts[j] if j < J else np.empty(0, dtype=np.int64)
        idx = np.concatenate([split.small_index, part, carry])
        weights = np.concatenate([np.ones(len(split.small_index)),
                                  np.full(len(part), w_large), np.ones(len(carry))])
        tree = WeightedTree(tree_cfg.max_depth, tree_cfg.min_leaf_weight)
        try:
            tree.fit(X[idx], y[idx], weights)
        except ValueError as exc:
            raise RuntimeError(f"tree training failed in round {j + 1}: {exc}") from exc
        wrong = np.unique(idx[tree.predict(X[idx]) != y[idx]])
        members.append(tree)
        history.append(RoundRecord(part, carry, idx, weights, wrong))
        carry = wrong
    cfg = {"max_depth": tree_cfg.max_depth, "min_leaf_weight": tree_cfg.min_leaf_weight,
           "rng_seed": rng_seed if np.isscalar(rng_seed) else list(rng_seed)}
    return EnsembleClassifier(members, split.small_label, split.large_label, J, w_large, cfg, history)


def predict_binary(model: EnsembleClassifier, x):
    """Label (+1 / -1 for one-vs-all models) and vote margin for one vector."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.shape[0] != model.n_features:
        raise ValueError(f"expected {model.n_features} features, got {x.shape[0]}")
    label, margin = model.decision(x[None, :])
    return int(label[0]), float(margin[0])


@dataclass(frozen=True)
class ClassifierConfig:
    seed: int = 0
    max_depth: int = 8
    min_leaf_weight: float = 1.0

    @property
    def tree(self) -> TreeConfig:
        return TreeConfig(self.max_depth, self.min_leaf_weight)


@dataclass
class EcocModel:
    classifiers: list
    codebook: np.ndarray
    categories: tuple
    config: dict = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return len(self.classifiers)

    @property
    def n_features(self) -> int:
        return self.classifiers[0].n_features

    def outputs(self, X):
        """Per-classifier labels (+1/-1) and margins, each shaped (n, P)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        labs, margs = zip(*(c.decision(X) for c in self.classifiers))
        o = np.stack(labs, axis=1)
        # margins count votes for each member's small label; turn them towards +1
        sign = np.array([c.small_label for c in self.classifiers], dtype=np.float64)
        m = np.stack(margs, axis=1) * sign
        return o, m

    def class_scores(self, X) -> np.ndarray:
        """Summed margins agreeing with each codeword, shape (n, P)."""
        _, m = self.outputs(X)
        return m @ self.codebook.T

    def predict(self, X) -> np.ndarray:
        o, m = self.outputs(X)
        return np.array([hamming_decode(oi, mi, self.codebook) for oi, mi in zip(o, m)], dtype=np.int64)

    def to_dict(self) -> dict:
        return {"type": "ecoc_one_vs_all", "categories": list(self.categories),
                "codebook": self.codebook.astype(int).tolist(), "config": self.config,
                "classifiers": [c.to_dict() for c in self.classifiers]}

    @classmethod
    def from_dict(cls, d: dict) -> "EcocModel":
        return cls([EnsembleClassifier.from_dict(c) for c in d["classifiers"]],
                   np.asarray(d["codebook"], dtype=np.int64), tuple(d["categories"]), d.get("config", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "EcocModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def one_vs_all_codebook(n_classes: int) -> np.ndarray:
    return 2 * np.eye(n_classes, dtype=np.int64) - 1


def _tie_break(candidates, margins, codebook) -> int:
    if len(candidates) == 1:
        return int(candidates[0])
    agree = codebook[candidates] @ margins
    top = candidates[np.flatnonzero(agree == agree.max())]
    return int(top.min())


def hamming_decode(outputs, margins, codebook) -> int:
    """Row of ``codebook`` nearest to ``outputs`` in Hamming distance.

    Ties go to the largest summed margin along the codeword, then the lowest index.
    """
    outputs = np.asarray(outputs)
    margins = np.asarray(margins, dtype=np.float64)
    dist = np.sum(codebook != outputs[None, :], axis=1)
    return _tie_break(np.flatnonzero(dist == dist.min()), margins, codebook)


def vote_decode(outputs, margins, codebook) -> int:
    """Category whose own one-vs-all classifier fired; same tie rule as Hamming."""
    fired = (np.asarray(outputs) == 1).astype(int)
    return _tie_break(np.flatnonzero(fired == fired.max()), np.asarray(margins, dtype=np.float64), codebook)


def train_ecoc_ova(train: LabeledDataset, cfg: ClassifierConfig = ClassifierConfig(),
                   categories: Sequence[str] | None = None) -> EcocModel:
    """One imbalance ensemble per category: +1 for the category, -1 for the rest."""
    classes = np.unique(train.labels)
    P = int(classes.max()) + 1 if classes.size else 0
    if classes.size < 2:
        raise ValueError("multi-class training needs at least two classes")
    if not np.array_equal(classes, np.arange(P)):
        raise ValueError(f"labels must cover 0..{P - 1}, got {classes.tolist()}")
    names = tuple(categories) if categories else tuple(str(p) for p in range(P))
    for p in range(P):
        if np.sum(train.labels == p) < 2:
            raise ValueError(f"category {names[p]!r} has fewer than 2 training samples")
    classifiers = []
    for p in range(P):
        y = np.where(train.labels == p, 1, -1)
        model = train_imbalance_adaboost(LabeledDataset(train.features, y), cfg.tree, rng_seed=(cfg.seed, p))
        classifiers.append(model)
    config = {"seed": cfg.seed, "max_depth": cfg.max_depth, "min_leaf_weight": cfg.min_leaf_weight}
    return EcocModel(classifiers, one_vs_all_codebook(P), names, config)


def predict_ecoc(model: EcocModel, x) -> int:
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.shape[0] != model.n_features:
        raise ValueError(f"expected {model.n_features} features, got {x.shape[0]}")
    return int(model.predict(x[None, :])[0])
