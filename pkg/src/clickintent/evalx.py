"""Classification metrics, prior-matched thresholds, ROC/AUC and baselines."""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import DataError


@dataclass
class EvalReport:
    tp: int
    fp: int
    tn: int
    fn: int
    n_pos: int
    n_neg: int
    threshold: float
    balanced_accuracy: float
    precision: float
    recall: float
    auc: Optional[float] = None
    positive_rate: float = 0.0
    roc: list = field(default_factory=list)  # (threshold, fpr, tpr)

    def to_dict(self, with_roc=False):
        d = asdict(self)
        if not with_roc:
            d.pop("roc")
        return d

    def roc_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for th, fpr, tpr in self.roc:
            w.writerow([repr(float(th)), repr(float(fpr)), repr(float(tpr))])
        return buf.getvalue()


def _scored(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape or s.size == 0:
        raise DataError(f"need equal-length non-empty scores/labels, got {s.shape} and {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise DataError("labels must be 0 or 1")
    return s, y.astype(np.int64)


def _rank_k(n, target_rate):
    if not 0.0 < target_rate < 1.0:
        raise ValueError(f"target_rate must lie in (0, 1), got {target_rate}")
    if n == 0:
        raise DataError("cannot select a threshold from zero scores")
    return min(max(int(round(target_rate * n)), 1), n)


def select_threshold(scores, target_rate):
    """Score of rank ``k = round(target_rate * N)`` (1-based, descending).

    Predicting positive for ``score >= threshold`` then marks about
    ``target_rate`` of the rows positive.
    """
    s = np.sort(np.asarray(scores, dtype=np.float64).reshape(-1))[::-1]
    k = _rank_k(s.size, target_rate)
    if s[0] == s[-1]:
        warnings.warn("all scores are equal; the threshold does not separate any rows", stacklevel=2)
    return float(s[k - 1])


def top_k_predictions(scores, target_rate):
    """Mark exactly the ``k`` best-ranked rows positive.

    Every row scoring above the selected threshold is positive. Rows tied with
    it are taken in their original order until ``k`` rows are marked, so a
    large group of identical scores cannot push the positive rate off target.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    k = _rank_k(s.size, target_rate)
    pred = np.zeros(s.size, dtype=bool)
    pred[np.argsort(-s, kind="stable")[:k]] = True
    return pred


def confusion_metrics(scores, labels, threshold, predictions=None) -> EvalReport:
    """Counts, balanced accuracy ``TP/(2N+) + TN/(2N-)``, precision and recall.

    Rows are positive when ``score >= threshold`` unless explicit
    ``predictions`` are passed.
    """
    s, y = _scored(scores, labels)
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        missing = "positive" if n_pos == 0 else "negative"
        raise DataError(f"balanced accuracy undefined: no {missing} labels")
    if predictions is None:
        pred = s >= threshold
    else:
        pred = np.asarray(predictions, dtype=bool).reshape(-1)
        if pred.shape != s.shape:
            raise DataError(f"need one prediction per score, got {pred.shape} for {s.shape}")
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    tn = n_neg - fp
    fn = n_pos - tp
    ba = tp / (2 * n_pos) + tn / (2 * n_neg)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn)
    return EvalReport(tp, fp, tn, fn, n_pos, n_neg, float(threshold), ba, precision, recall,
                      positive_rate=float(pred.mean()))


def roc_curve_points(scores, labels):
    """ROC vertices, one per distinct score, from (0, 0) to (1, 1)."""
    s, y = _scored(scores, labels)
    n_pos = y.sum()
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC undefined: need both classes")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tps = np.cumsum(y)[last_of_group]
    fps = (last_of_group + 1) - tps
    points = [(np.inf, 0.0, 0.0)]
    points += [(float(s[i]), fp / n_neg, tp / n_pos) for i, tp, fp in zip(last_of_group, tps, fps)]
    return points


def roc_auc(scores, labels):
    """Trapezoidal AUC over the tie-grouped ROC; equals Mann-Whitney with ties as 1/2."""
    points = roc_curve_points(scores, labels)
    fpr = np.array([p[1] for p in points])
    tpr = np.array([p[2] for p in points])
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return auc, points


def evaluate(scores, labels, target_rate=None, threshold=None) -> EvalReport:
    """Full report at a given threshold, or at ``target_rate`` of these scores.

    A given threshold predicts ``score >= threshold``. A threshold selected on
    ``scores`` itself marks exactly the top-ranked rows (see ``top_k_predictions``).
    """
    if threshold is None:
        threshold = select_threshold(scores, target_rate)
        report = confusion_metrics(scores, labels, threshold, top_k_predictions(scores, target_rate))
    else:
        report = confusion_metrics(scores, labels, threshold)
    report.auc, report.roc = roc_auc(scores, labels)
    return report


class MostFrequentClassifier(ClassifierMixin, BaseEstimator):
    """Scores every row with the training majority label."""

    def fit(self, X, y):
        y = np.asarray(y)
        self.majority_ = int(y.mean() > 0.5)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "majority_")
        p = np.full(len(X), float(self.majority_))
        return np.column_stack([1 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)


class StratifiedClassifier(ClassifierMixin, BaseEstimator):
    """Scores are Bernoulli draws at the training prevalence."""

    def __init__(self, seed=0):
        self.seed = seed

    def fit(self, X, y):
        self.prevalence_ = float(np.mean(y))
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "prevalence_")
        rng = np.random.default_rng(self.seed)
        p = (rng.random(len(X)) < self.prevalence_).astype(np.float64)
        return np.column_stack([1 - p, p])

    def predict(self, X):
        return self.predict_proba(X)[:, 1].astype(int)


class LengthClassifier(ClassifierMixin, BaseEstimator):
    """Logistic regression on session length alone."""

    def __init__(self, max_iter=200, tol=1e-10):
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, lengths, y):
        x = np.asarray(lengths, dtype=np.float64).reshape(-1)
        y = np.asarray(y, dtype=np.float64)
        self.mean_, self.sd_ = x.mean(), x.std() or 1.0
        z = (x - self.mean_) / self.sd_
        A = np.column_stack([np.ones_like(z), z])
        w = np.zeros(2)
        # Newton iterations on the (convex) log-likelihood
        for _ in range(self.max_iter):
            p = 1.0 / (1.0 + np.exp(-(A @ w)))
            grad = A.T @ (p - y)
            hess = A.T @ (A * (p * (1 - p))[:, None]) + 1e-9 * np.eye(2)
            step = np.linalg.solve(hess, grad)
            w -= step
            if np.max(np.abs(step)) < self.tol:
                break
        self.coef_ = w
        return self

    def predict_proba(self, lengths):
        check_is_fitted(self, "coef_")
        z = (np.asarray(lengths, dtype=np.float64).reshape(-1) - self.mean_) / self.sd_
        p = 1.0 / (1.0 + np.exp(-(self.coef_[0] + self.coef_[1] * z)))
        return np.column_stack([1 - p, p])

    def predict(self, lengths):
        return (self.predict_proba(lengths)[:, 1] >= 0.5).astype(int)


def run_baselines(train_labels, test_labels, train_lengths, test_lengths, target_rate=None, seed=0):
    """Most-frequent, stratified and length baselines evaluated on the test rows.

    Thresholds follow the prior-matched rule at ``target_rate`` (train prevalence
    when omitted). AUC is left as ``None`` when it is undefined.
    """
    train_labels = np.asarray(train_labels)
    test_labels = np.asarray(test_labels)
    rate = float(train_labels.mean()) if target_rate is None else target_rate
    reports = {}

    mf = MostFrequentClassifier().fit(train_lengths, train_labels)
    s = mf.predict_proba(test_lengths)[:, 1]
    # constant score: threshold above it so the majority (negative) is predicted
    th = 0.5 if mf.majority_ == 0 else 0.0
    rep = confusion_metrics(s, test_labels, th)
    rep.auc, rep.roc = roc_auc(s, test_labels)
    reports["most_frequent"] = rep

    st = StratifiedClassifier(seed).fit(train_lengths, train_labels)
    s = st.predict_proba(test_lengths)[:, 1]
    rep = confusion_metrics(s, test_labels, 1.0)
    rep.auc, rep.roc = roc_auc(s, test_labels)
    reports["stratified"] = rep

    lm = LengthClassifier().fit(train_lengths, train_labels)
    s = lm.predict_proba(test_lengths)[:, 1]
    reports["length"] = evaluate(s, test_labels, target_rate=rate)
    return reports


def report_to_json(report: EvalReport, with_roc=False):
    return json.dumps(report.to_dict(with_roc), sort_keys=True)
