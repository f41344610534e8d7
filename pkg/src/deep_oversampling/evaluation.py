"""Class-wise retrieval metrics and deep-feature probe classifiers."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .dualhead_net import DataError


def confusion_matrix(predictions, truths, n: int) -> np.ndarray:
    """``cm[true, predicted]`` counts."""
    predictions = np.asarray(predictions, dtype=np.int64)
    truths = np.asarray(truths, dtype=np.int64)
    if predictions.shape != truths.shape:
        raise DataError(f"{len(predictions)} predictions for {len(truths)} truths")
    cm = np.zeros((n, n), dtype=np.int64)
    np.add.at(cm, (truths, predictions), 1)
    return cm


def predict_labels(posteriors) -> np.ndarray:
    # np.argmax returns the first maximum: ties go to the lowest class
    return np.argmax(np.asarray(posteriors), axis=1)


def _safe_div(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0)
    return out


def class_metrics(cm) -> tuple:
    """Per-class ``(precision, recall, f1)`` arrays; zero denominators give 0."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    precision = _safe_div(tp, cm.sum(axis=0))
    recall = _safe_div(tp, cm.sum(axis=1))
    f1 = _safe_div(2 * precision * recall, precision + recall)
    return precision, recall, f1


def pr_curve(scores, truths) -> tuple:
    """Step-wise one-vs-rest precision-recall points from a descending sweep.

    Tied scores form a single threshold. Returns ``(recall, precision,
    thresholds)`` with recall nondecreasing.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths).astype(bool)
    n_pos = int(truths.sum())
    if n_pos == 0:
        raise DataError("precision-recall curve needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    s, t = scores[order], truths[order]
    # last position of every run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(t)[ends]
    predicted = ends + 1
    return tp / n_pos, tp / predicted, s[ends]


def auprc(scores, truths) -> float:
    """Area under the step-wise PR curve: ``sum (R_i - R_{i-1}) * P_i``."""
    recall, precision, _ = pr_curve(scores, truths)
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def _sq_dists(train, query):
    diff = train - query[None, :]
    return np.einsum("ij,ij->i", diff, diff)


def knn_classify(train_embeddings, train_labels, query, k_nn: int = 5,
                 n_classes: int = None) -> tuple:
    """Majority vote among the ``k_nn`` nearest training embeddings.

    Returns ``(label, posterior)`` where the posterior holds vote fractions.
    Distance ties go to the lower training index, vote ties to the lower class.
    """
    train = np.asarray(train_embeddings, dtype=np.float64)
    labels = np.asarray(train_labels, dtype=np.int64)
    if len(train) == 0:
        raise DataError("kNN needs a nonempty training set")
    if not 1 <= k_nn <= len(train):
        raise ValueError(f"k_nn={k_nn} not in [1, {len(train)}]")
    n = int(labels.max()) + 1 if n_classes is None else n_classes
    d = _sq_dists(train, np.asarray(query, dtype=np.float64))
    nearest = np.argsort(d, kind="stable")[:k_nn]
    posterior = np.bincount(labels[nearest], minlength=n) / k_nn
    return int(np.argmax(posterior)), posterior


def knn_posteriors(train_embeddings, train_labels, queries, k_nn: int = 5,
                   n_classes: int = None, chunk: int = 16) -> np.ndarray:
    """Vectorized :func:`knn_classify` posteriors for many queries."""
    train = np.asarray(train_embeddings, dtype=np.float64)
    labels = np.asarray(train_labels, dtype=np.int64)
    queries = np.asarray(queries, dtype=np.float64)
    if len(train) == 0:
        raise DataError("kNN needs a nonempty training set")
    n = int(labels.max()) + 1 if n_classes is None else n_classes
    out = np.zeros((len(queries), n))
    for s in range(0, len(queries), chunk):
        q = queries[s:s + chunk]
        diff = q[:, None, :] - train[None, :, :]
        d = np.einsum("qik,qik->qi", diff, diff)
        nearest = np.argsort(d, axis=1, kind="stable")[:, :k_nn]
        votes = labels[nearest]
        for c in range(n):
            out[s:s + chunk, c] = np.sum(votes == c, axis=1)
    return out / k_nn


@dataclass
class LogisticProbe:
    """Multinomial logistic regression on standardized features, fit by
    full-batch gradient descent with a fixed step budget."""
    steps: int = 500
    learning_rate: float = 0.1
    mean_: np.ndarray = None
    scale_: np.ndarray = None
    coef_: np.ndarray = None
    intercept_: np.ndarray = None

    def fit(self, x, y, n_classes: int = None) -> "LogisticProbe":
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if len(np.unique(y)) < 2:
            raise DataError("logistic probe needs at least two classes")
        n = int(y.max()) + 1 if n_classes is None else n_classes
        self.mean_ = x.mean(axis=0)
        std = x.std(axis=0)
        self.scale_ = np.where(std > 0, std, 1.0)
        z = (x - self.mean_) / self.scale_
        onehot = np.eye(n)[y]
        w = np.zeros((z.shape[1], n))
        b = np.zeros(n)
        m = len(y)
        for _ in range(self.steps):
            err = (nx.softmax(z @ w + b) - onehot) / m
            w -= self.learning_rate * (z.T @ err)
            b -= self.learning_rate * err.sum(axis=0)
        self.coef_, self.intercept_ = w, b
        return self

    def predict_proba(self, x) -> np.ndarray:
        z = (np.asarray(x, dtype=np.float64) - self.mean_) / self.scale_
        return nx.softmax(z @ self.coef_ + self.intercept_)


def logistic_probe(train_embeddings, train_labels, test_embeddings,
                   n_classes: int = None, steps: int = 500,
                   learning_rate: float = 0.1) -> np.ndarray:
    probe = LogisticProbe(steps, learning_rate).fit(train_embeddings, train_labels,
                                                    n_classes)
    return probe.predict_proba(test_embeddings)


def in_class_variance(store) -> dict:
    """Mean squared distance to the class centroid, per class."""
    out = {}
    for label, (_, v) in store.classes.items():
        v = np.asarray(v, dtype=np.float64)
        out[label] = float(np.mean(np.sum((v - v.mean(axis=0)) ** 2, axis=1)))
    return out


@dataclass
class MetricsReport:
    evaluator: str
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    auprc: np.ndarray
    confusion: np.ndarray
    minority_classes: tuple = ()
    timings: dict = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return len(self.precision)

    def group_mask(self, minority: bool) -> np.ndarray:
        mask = np.isin(np.arange(self.n_classes), self.minority_classes)
        return mask if minority else ~mask

    def group_means(self) -> dict:
        """``{group: (precision, recall, f1, auprc)}`` for minority/majority/all."""
        out = {}
        for name, mask in (("minority", self.group_mask(True)),
                           ("majority", self.group_mask(False)),
                           ("all", np.ones(self.n_classes, dtype=bool))):
            if mask.any():
                out[name] = tuple(float(np.nanmean(a[mask])) for a in
                                  (self.precision, self.recall, self.f1, self.auprc))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "precision", "recall", "f1", "auprc", "group"])
        for c in range(self.n_classes):
            group = "minority" if c in self.minority_classes else "majority"
            w.writerow([c] + [f"{float(a[c]):.6f}" for a in
                              (self.precision, self.recall, self.f1, self.auprc)]
                       + [group])
        return buf.getvalue()

    def to_table(self) -> str:
        lines = [f"[{self.evaluator}]",
                 f"{'class':>8} {'prec':>7} {'recall':>7} {'f1':>7} {'auprc':>7}"]
        for c in range(self.n_classes):
            star = "*" if c in self.minority_classes else " "
            lines.append(f"{c:>7}{star} {self.precision[c]:7.3f} {self.recall[c]:7.3f} "
                         f"{self.f1[c]:7.3f} {self.auprc[c]:7.3f}")
        for name, vals in self.group_means().items():
            lines.append(f"{name:>8} " + " ".join(f"{v:7.3f}" for v in vals))
        for name, secs in self.timings.items():
            lines.append(f"{name}: {secs:.3f}s")
        return "\n".join(lines) + "\n"


def evaluate_posteriors(evaluator: str, posteriors, truths, n_classes: int,
                        minority_classes=()) -> MetricsReport:
    """Confusion-matrix metrics from argmax predictions plus per-class AUPRC.

    AUPRC for a class absent from ``truths`` is NaN.
    """
    posteriors = np.asarray(posteriors)
    truths = np.asarray(truths)
    cm = confusion_matrix(predict_labels(posteriors), truths, n_classes)
    precision, recall, f1 = class_metrics(cm)
    ap = np.full(n_classes, np.nan)
    for c in range(n_classes):
        if np.any(truths == c):
            ap[c] = auprc(posteriors[:, c], truths == c)
    return MetricsReport(evaluator, precision, recall, f1, ap, cm,
                         tuple(minority_classes))
