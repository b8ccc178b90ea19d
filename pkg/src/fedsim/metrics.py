"""Confusion matrices, support-weighted precision/recall/F1 and functional tests."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import BinaryMapping, hash_features
from .errors import DataError
from .model import FeaturizedExample, ModelSpec, predict

logger = logging.getLogger(__name__)

GOLD_VALUES = ("hate", "not-hate")


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # rows = true class, cols = predicted class

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


@dataclass(frozen=True)
class MetricsReport:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float

    def summary(self) -> dict[str, float]:
        return {"precision": self.weighted_precision, "recall": self.weighted_recall,
                "weighted_f1": self.weighted_f1}


def confusion(true_labels: Sequence[int], predicted_labels: Sequence[int], num_classes: int) -> ConfusionMatrix:
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(predicted_labels, dtype=np.int64)
    if t.shape != p.shape:
        raise ValueError(f"length mismatch: {t.size} true vs {p.size} predicted labels")
    for arr in (t, p):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"label outside [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts)


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros(num.shape, dtype=np.float64)
    np.divide(num, den, out=out, where=den != 0)
    return out


def weighted_metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Per-class scores (0 on zero division) and their support-weighted means."""
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(counts)
    support = counts.sum(axis=1)
    predicted = counts.sum(axis=0)
    precision = _safe_div(tp, predicted)
    recall = _safe_div(tp, support)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    w = support / total
    return MetricsReport(
        precision=precision, recall=recall, f1=f1, support=cm.counts.sum(axis=1),
        weighted_precision=float(w @ precision),
        weighted_recall=float(w @ recall),
        weighted_f1=float(w @ f1),
    )


# -- functional (HateCheck-style) evaluation --------------------------------

@dataclass(frozen=True)
class FunctionalCase:
    text: str
    functionality: str
    gold: str

    def __post_init__(self):
        if not self.functionality:
            raise DataError("functional case with empty functionality")
        if self.gold not in GOLD_VALUES:
            raise DataError(f"gold must be one of {GOLD_VALUES}, got {self.gold!r}")


@dataclass(frozen=True)
class GroupResult:
    n_cases: int
    n_correct: int

    @property
    def accuracy(self) -> float:
        return self.n_correct / self.n_cases


@dataclass(frozen=True)
class CasePrediction:
    text: str
    functionality: str
    gold: str
    predicted_class: str
    predicted: str

    @property
    def correct(self) -> bool:
        return self.predicted == self.gold


def load_suite(path) -> list[FunctionalCase]:
    cases = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                cases.append(FunctionalCase(str(rec["text"]), str(rec["functionality"]), rec["gold"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed functional case ({exc})") from None
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return cases


def functional_eval(cases: Sequence[FunctionalCase],
                    classify: Callable[[list[str]], Sequence[str]],
                    mapping: BinaryMapping,
                    class_order: Sequence[str],
                    functionalities: Iterable[str] | None = None,
                    ) -> tuple[dict[str, GroupResult], list[CasePrediction]]:
    """Score ``cases`` per functionality under a binary hate/not-hate mapping.

    ``classify`` maps a list of texts to predicted class names from
    ``class_order``.  Groups listed in ``functionalities`` that have no cases
    are dropped with a warning.  Returns the per-group tallies (sorted by name)
    and the per-case predictions in input order.
    """
    mapping.validate(class_order)
    predicted = list(classify([c.text for c in cases]))
    preds = []
    for case, cls in zip(cases, predicted):
        if cls not in class_order:
            raise DataError(f"model predicted unknown class {cls!r}")
        binary = "hate" if mapping.is_hate(cls) else "not-hate"
        preds.append(CasePrediction(case.text, case.functionality, case.gold, cls, binary))

    tally: dict[str, list[int]] = {}
    for p in preds:
        t = tally.setdefault(p.functionality, [0, 0])
        t[0] += 1
        t[1] += p.correct
    for name in functionalities or ():
        if name not in tally:
            logger.warning("functionality %r has no cases; excluded", name)
    results = {name: GroupResult(n, k) for name, (n, k) in sorted(tally.items())}
    return results, preds


def model_classifier(spec: ModelSpec, params: np.ndarray, class_order: Sequence[str]) -> Callable[[list[str]], list[str]]:
    """Wrap a trained model as ``texts -> class names`` using the hashing featurizer."""
    def classify(texts: list[str]) -> list[str]:
        if not texts:
            return []
        examples = [FeaturizedExample(hash_features(t, spec.feature_dim), 0) for t in texts]
        return [class_order[i] for i in predict(spec, params, examples)]

    return classify
