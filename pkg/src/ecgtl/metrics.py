"""Evaluation metrics and comparison baselines.

Accuracy = (TP + TN) / (TP + FP + TN + FN)
Sensitivity = TP / (TP + FN)
Specificity = TN / (TN + FP)

Metrics with a zero denominator are reported as undefined ("n/a"), never
as zero, and are excluded from fold means with a warning flag.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .errors import DataError

METRIC_NAMES = ("accuracy", "sensitivity", "specificity")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(predictions, labels) -> ConfusionMatrix:
    """Binary confusion counts; class 1 (responder) is positive."""
    preds = np.asarray(predictions, dtype=np.int64)
    truth = np.asarray(labels, dtype=np.int64)
    if preds.shape != truth.shape or preds.ndim != 1:
        raise DataError("predictions and labels must be 1-D and equal length")
    if preds.size == 0:
        raise DataError("cannot build a confusion matrix from zero samples")
    return ConfusionMatrix(
        tp=int(np.sum((preds == 1) & (truth == 1))),
        fp=int(np.sum((preds == 1) & (truth == 0))),
        tn=int(np.sum((preds == 0) & (truth == 0))),
        fn=int(np.sum((preds == 0) & (truth == 1))),
    )


def accuracy(cm: ConfusionMatrix) -> float | None:
    return (cm.tp + cm.tn) / cm.total if cm.total else None


def sensitivity(cm: ConfusionMatrix) -> float | None:
    d = cm.tp + cm.fn
    return cm.tp / d if d else None


def specificity(cm: ConfusionMatrix) -> float | None:
    d = cm.tn + cm.fp
    return cm.tn / d if d else None


def format_metric(mean: float | None, std: float | None = None) -> str:
    """Render "0.721 ± 0.015" (3 decimals) or "n/a" when undefined."""
    if mean is None:
        return "n/a"
    if std is None:
        return f"{mean:.3f}"
    return f"{mean:.3f} ± {std:.3f}"


@dataclass
class MetricsReport:
    """Per-fold metrics plus mean and sample standard deviation."""

    folds: list[dict] = field(default_factory=list)
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)
    undefined_warnings: list[str] = field(default_factory=list)

    @classmethod
    def from_folds(cls, fold_cms: list[ConfusionMatrix]) -> "MetricsReport":
        report = cls()
        for i, cm in enumerate(fold_cms):
            row = {
                "fold": i,
                "tp": cm.tp, "fp": cm.fp, "tn": cm.tn, "fn": cm.fn,
                "accuracy": accuracy(cm),
                "sensitivity": sensitivity(cm),
                "specificity": specificity(cm),
            }
            report.folds.append(row)
            for m in METRIC_NAMES:
                if row[m] is None:
                    report.undefined_warnings.append(
                        f"fold {i}: {m} undefined (zero denominator)"
                    )
        for m in METRIC_NAMES:
            defined = [f[m] for f in report.folds if f[m] is not None]
            if not defined:
                report.mean[m] = None
                report.std[m] = None
                continue
            report.mean[m] = float(np.mean(defined))
            report.std[m] = float(np.std(defined, ddof=1)) if len(defined) > 1 else 0.0
        if report.undefined_warnings:
            warnings.warn("; ".join(report.undefined_warnings), stacklevel=2)
        return report

    def to_dict(self) -> dict:
        return {
            "folds": self.folds,
            "mean": self.mean,
            "std": self.std,
            "undefined": self.undefined_warnings,
        }

    def summary_line(self, name: str = "model") -> str:
        cells = "\t".join(
            format_metric(self.mean[m], self.std[m]) for m in METRIC_NAMES
        )
        return f"{name}\t{cells}"


def render_table(rows: dict[str, MetricsReport]) -> str:
    """Plain-text table: method x accuracy/sensitivity/specificity."""
    header = "Method\tAccuracy\tSensitivity\tSpecificity"
    return "\n".join([header] + [r.summary_line(n) for n, r in rows.items()])


@dataclass(frozen=True)
class ClinicalCovariates:
    qrs_ms: float
    lbbb: bool
    lvef_pct: float

    def __post_init__(self):
        if self.qrs_ms <= 0:
            raise DataError("qrs_ms must be positive")
        if not 0 < self.lvef_pct < 100:
            raise DataError("lvef_pct must lie in (0, 100)")


def guideline_predict(cov: ClinicalCovariates) -> int:
    """Class IA selection rule: responder iff LBBB and QRS >= 150 ms.

    (LVEF <= 35% holds for every enrolled patient, so it does not
    discriminate within a cohort.)
    """
    return int(cov.lbbb and cov.qrs_ms >= 150.0)


@dataclass
class LinearClassifier:
    weights: np.ndarray
    bias: float

    def decision(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.weights + self.bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        return (self.decision(x) > 0).astype(np.int64)

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.decision(x)))


def _check_binary(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or len(x) != len(y):
        raise DataError("need a 2-D feature matrix and matching labels")
    if len(np.unique(y)) < 2:
        raise DataError("both classes must be present")
    return x, y


def logistic_fit(
    x: np.ndarray, y: np.ndarray, l2: float = 1e-4, seed: int = 0
) -> LinearClassifier:
    """L2-regularized logistic regression via L-BFGS to gradient norm
    below 1e-6 (or the iteration cap). Deterministic: zero init."""
    x, y = _check_binary(x, y)
    n, d = x.shape
    t = y.astype(np.float64)

    def objective(theta):
        w, b = theta[:d], theta[d]
        z = x @ w + b
        # log(1 + e^z) - t*z, numerically stable
        loss = np.sum(np.logaddexp(0.0, z) - t * z) / n + 0.5 * l2 * w @ w
        p = 1.0 / (1.0 + np.exp(-z))
        grad_w = x.T @ (p - t) / n + l2 * w
        grad_b = np.sum(p - t) / n
        return loss, np.concatenate([grad_w, [grad_b]])

    result = minimize(
        objective,
        np.zeros(d + 1),
        jac=True,
        method="L-BFGS-B",
        options={"gtol": 1e-6, "ftol": 0.0, "maxiter": 5000},
    )
    return LinearClassifier(result.x[:d], float(result.x[d]))


def logistic_predict(classifier: LinearClassifier, x: np.ndarray) -> np.ndarray:
    """Class-1 probabilities from a fitted logistic classifier."""
    return classifier.predict_proba(x)


def linear_svm_fit(
    x: np.ndarray, y: np.ndarray, c: float = 1.0, seed: int = 0,
    iterations: int = 5000,
) -> LinearClassifier:
    """Linear SVM: mean hinge loss + (1/(2c))*||w||^2 minimized by
    full-batch subgradient descent with a 1/(lam*t) step schedule.

    Full-batch descent over the mean loss makes the iterates invariant
    to duplicating every training point.
    """
    x, y = _check_binary(x, y)
    n, d = x.shape
    s = np.where(y == 1, 1.0, -1.0)
    lam = 1.0 / c
    w = np.zeros(d)
    b = 0.0
    for t in range(1, iterations + 1):
        eta = 1.0 / (lam * t)
        margin = s * (x @ w + b)
        active = margin < 1.0
        grad_w = lam * w - (s[active, None] * x[active]).sum(axis=0) / n
        grad_b = -s[active].sum() / n
        w = w - eta * grad_w
        b = b - eta * grad_b
    return LinearClassifier(w, b)
