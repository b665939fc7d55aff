"""
Subject-level leave-one-out cross validation, accuracy, ROC AUC, confusion
matrices and row-correlation dumps of feature tables.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from apa.classify import (ClassifierConfig, LabeledDataset, WeightedTree, train_ecoc_ova,
                          train_imbalance_adaboost)
from apa.extract import FeatureTable
from apa.parallel import parallel_map


class ZeroVarianceRowWarning(UserWarning):
    pass


@dataclass(frozen=True)
class CvPlan:
    folds: tuple  # ((train subject ids), held-out subject id)

    def __len__(self) -> int:
        return len(self.folds)


def make_loo_plan(table: FeatureTable) -> CvPlan:
    """One fold per subject, subjects in sorted order."""
    subjects = sorted(set(table.subjects.tolist()))
    if len(subjects) < 2:
        raise ValueError(f"leave-one-subject-out needs >= 2 subjects, got {subjects}")
    return CvPlan(tuple((tuple(s for s in subjects if s != held), held) for held in subjects))


def accuracy(pred, truth) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"pred {pred.shape} and truth {truth.shape} differ")
    if pred.size == 0:
        raise ValueError("accuracy of an empty set")
    return 100.0 * np.count_nonzero(pred == truth) / pred.size


def auc_roc(scores, truth) -> float:
    """Mann-Whitney AUC in percent; ``truth`` > 0 marks positives, ties count 1/2."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    pos = np.asarray(truth).ravel() > 0
    if s.shape != pos.shape:
        raise ValueError("scores and labels differ in length")
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(s)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return 100.0 * u / (n_pos * n_neg)


def roc_curve(scores, truth):
    """False/true positive rates at every distinct threshold, starting at (0, 0)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    pos = np.asarray(truth).ravel() > 0
    order = np.argsort(-s, kind="stable")
    s, pos = s[order], pos[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(pos)[last]
    fp = np.cumsum(~pos)[last]
    tpr = np.r_[0.0, tp / max(pos.sum(), 1)]
    fpr = np.r_[0.0, fp / max((~pos).sum(), 1)]
    return fpr, tpr, np.r_[np.inf, s[last]]


def confusion(pred, truth, n_classes: int) -> np.ndarray:
    """Counts with rows = true class and columns = predicted class."""
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(m, (np.asarray(truth, dtype=np.int64), np.asarray(pred, dtype=np.int64)), 1)
    return m


def row_correlation(X) -> np.ndarray:
    """Pearson correlation between rows; zero-variance rows correlate 0 (diagonal 1)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("correlation dump needs at least two rows")
    Z = X - X.mean(axis=1, keepdims=True)
    norm = np.sqrt(np.sum(Z * Z, axis=1))
    flat = norm == 0
    if flat.any():
        warnings.warn(f"{int(flat.sum())} zero-variance row(s); their correlations set to 0",
                      ZeroVarianceRowWarning, stacklevel=2)
    Z[~flat] /= norm[~flat, None]
    C = np.clip(Z @ Z.T, -1.0, 1.0)
    C[flat, :] = 0.0
    C[:, flat] = 0.0
    np.fill_diagonal(C, 1.0)
    return C


def correlation_dump(table: FeatureTable, path=None) -> np.ndarray:
    C = row_correlation(table.X)
    if path is not None:
        write_matrix_csv(path, C, [f"{table.categories[r.category_index]}:{r.subject_id}:{r.condition_index}"
                                   for r in table.rows])
    return C


def within_between(C, labels):
    """Mean off-diagonal correlation within and between label groups."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(labels), dtype=bool)
    return float(C[same & off].mean()), float(C[~same].mean())


def write_matrix_csv(path, M, names: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([""] + list(names))
        for name, row in zip(names, M):
            w.writerow([name] + [repr(float(v)) if np.asarray(M).dtype.kind == "f" else int(v) for v in row])


def _mean_std(values) -> tuple:
    v = np.asarray([x for x in values if x is not None and np.isfinite(x)], dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std())


@dataclass
class MetricsReport:
    method: str
    mode: str
    categories: list
    accuracy_mean: float
    accuracy_std: float
    auc_mean: float
    auc_std: float
    confusion: list
    fold_subjects: list
    fold_accuracy: list
    fold_auc: list
    notes: list = field(default_factory=list)
    predictions: list = field(default_factory=list, repr=False)

    @property
    def confusion_matrix(self) -> np.ndarray:
        return np.asarray(self.confusion, dtype=np.int64)

    @property
    def recall(self) -> np.ndarray:
        """Per-class recall in percent from the pooled confusion matrix."""
        m = self.confusion_matrix
        totals = m.sum(axis=1)
        return np.divide(100.0 * np.diag(m), totals, out=np.full(len(m), np.nan), where=totals > 0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("predictions")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    def format_table(self) -> str:
        lines = [f"method: {self.method} ({self.mode})",
                 f"accuracy: {self.accuracy_mean:.2f} +/- {self.accuracy_std:.2f}",
                 f"auc:      {self.auc_mean:.2f} +/- {self.auc_std:.2f}",
                 "",
                 f"{'subject':<12}{'accuracy':>10}{'auc':>10}"]
        for s, a, u in zip(self.fold_subjects, self.fold_accuracy, self.fold_auc):
            u_txt = "n/a" if u is None or not np.isfinite(u) else f"{u:.2f}"
            lines.append(f"{s:<12}{a:>10.2f}{u_txt:>10}")
        width = max(len(c) for c in self.categories) + 2
        lines += ["", "confusion (rows true, columns predicted)",
                  " " * width + "".join(f"{c:>{width}}" for c in self.categories)]
        for c, row in zip(self.categories, self.confusion):
            lines.append(f"{c:<{width}}" + "".join(f"{v:>{width}}" for v in row))
        lines += [f"note: {n}" for n in self.notes]
        return "\n".join(lines)


def _fit_predict(X_tr, y_tr, X_te, mode, method, cfg: ClassifierConfig, n_classes):
    """Predicted labels and (n, P) or (n,) scores for one fold."""
    if method == "tree":
        tree = WeightedTree(cfg.max_depth, cfg.min_leaf_weight).fit(X_tr, y_tr)
        pred = tree.predict(X_te)
        if mode == "binary":
            return pred, pred.astype(np.float64)
        return pred, np.eye(n_classes)[pred]
    if mode == "binary":
        model = train_imbalance_adaboost(LabeledDataset(X_tr, y_tr), cfg.tree, rng_seed=cfg.seed)
        label, margin = model.decision(X_te)
        return label, margin * model.small_label
    model = train_ecoc_ova(LabeledDataset(X_tr, y_tr), cfg)
    return model.predict(X_te), model.class_scores(X_te)


def _run_fold(args):
    return _fit_predict(*args)


def cross_validate(table: FeatureTable, cfg: ClassifierConfig = ClassifierConfig(),
                   mode: str = "multiclass", method: str = "apa", positive: str | None = None,
                   plan: CvPlan | None = None, n_workers: int | None = None) -> MetricsReport:
    """Leave-one-subject-out evaluation of the ensemble (``apa``) or one plain tree (``tree``).

    In ``binary`` mode the table must hold two categories; ``positive`` names
    the +1 category (default: the rarer one, first on ties).
    """
    if mode not in ("multiclass", "binary"):
        raise ValueError(f"unknown mode {mode!r}")
    if method not in ("apa", "tree"):
        raise ValueError(f"unknown method {method!r}")
    plan = plan or make_loo_plan(table)
    X, y, subj = table.X, table.y, table.subjects
    P = len(table.categories)
    notes = []
    if mode == "binary":
        if P != 2:
            raise ValueError(f"binary mode needs 2 categories, table has {P}")
        counts = np.bincount(y, minlength=2)
        pos_idx = table.categories.index(positive) if positive else int(np.argmin(counts))
        y_fit = np.where(y == pos_idx, 1, -1)
        categories = [table.categories[1 - pos_idx], table.categories[pos_idx]]
    else:
        y_fit = y
        categories = list(table.categories)
        notes.append("multi-class AUC is the macro one-vs-all average of per-class summed margins")

    jobs = []
    for train_subjects, held in plan.folds:
        tr = np.isin(subj, train_subjects)
        te = subj == held
        jobs.append((X[tr], y_fit[tr], X[te], mode, method, cfg, P))
    results = parallel_map(_run_fold, jobs, n_workers)

    cm = np.zeros((P, P), dtype=np.int64)
    fold_acc, fold_auc, subjects, preds = [], [], [], []
    for (train_subjects, held), (pred, scores) in zip(plan.folds, results):
        te = subj == held
        truth = y_fit[te]
        fold_acc.append(accuracy(pred, truth))
        subjects.append(held)
        if mode == "binary":
            fold_auc.append(auc_roc(scores, truth) if len(np.unique(truth)) == 2 else None)
            cm += confusion((pred > 0).astype(int), (truth > 0).astype(int), 2)
        else:
            aucs = [auc_roc(scores[:, p], truth == p) for p in range(P)
                    if 0 < np.sum(truth == p) < len(truth)]
            fold_auc.append(float(np.mean(aucs)) if aucs else None)
            cm += confusion(pred, truth, P)
        rows = [r for r, keep in zip(table.rows, te) if keep]
        for r, t, p_, s in zip(rows, truth, pred, scores):
            preds.append({"subject": r.subject_id, "session": r.session_id, "condition": r.condition_index,
                          "truth": int(t), "pred": int(p_), "scores": np.atleast_1d(s).tolist()})
    if any(a is None for a in fold_auc):
        notes.append("AUC skipped for folds whose held-out subject has a single class")
    am, asd = _mean_std(fold_acc)
    um, usd = _mean_std(fold_auc)
    return MetricsReport(method, mode, categories, am, asd, um, usd, cm.tolist(), subjects,
                         fold_acc, fold_auc, notes, preds)


def write_roc_csv(report: MetricsReport, path) -> None:
    """Pooled out-of-fold ROC points; one curve per class in multi-class mode."""
    truth = np.array([p["truth"] for p in report.predictions])
    scores = np.array([p["scores"] for p in report.predictions], dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "threshold", "fpr", "tpr"])
        if report.mode == "binary":
            curves = [(report.categories[1], scores[:, 0], truth > 0)]
        else:
            curves = [(c, scores[:, p], truth == p) for p, c in enumerate(report.categories)]
        for name, s, t in curves:
            if t.all() or not t.any():
                continue
            fpr, tpr, thr = roc_curve(s, t)
            for a, b, c in zip(thr, fpr, tpr):
                w.writerow([name, repr(float(a)), repr(float(b)), repr(float(c))])
