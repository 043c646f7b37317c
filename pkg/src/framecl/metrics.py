"""Multi-label evaluation: pooled (micro) and per-label (macro) F1.

Convention for empty ratios: a precision, recall or F1 whose numerator and
denominator are both zero is 1.0 when nothing at all was predicted or
expected, and 0.0 otherwise.  Corpus micro-F1 with TP = FP = FN = 0 is 1.0.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import UsageError
from .model import predict_feature_set
from .thresholds import apply_threshold

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Counts:
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return _ratio(self.tp, self.tp + self.fp, self.fn == 0)

    @property
    def recall(self) -> float:
        return _ratio(self.tp, self.tp + self.fn, self.fp == 0)

    @property
    def f1(self) -> float:
        den = 2 * self.tp + self.fp + self.fn
        return 1.0 if den == 0 else 2 * self.tp / den


def _ratio(num: int, den: int, empty_ok: bool) -> float:
    if den == 0:
        return 1.0 if empty_ok else 0.0
    return num / den


def _check(preds: Sequence, gold: Sequence) -> None:
    if len(preds) != len(gold):
        raise UsageError(f"{len(preds)} predictions for {len(gold)} gold label sets")


def counts(preds: Sequence, gold: Sequence) -> Counts:
    _check(preds, gold)
    tp = fp = fn = 0
    for p, g in zip(preds, gold):
        p, g = frozenset(p), frozenset(g)
        tp += len(p & g)
        fp += len(p - g)
        fn += len(g - p)
    return Counts(tp, fp, fn)


def micro_f1(preds: Sequence, gold: Sequence) -> float:
    return counts(preds, gold).f1


def micro_precision(preds: Sequence, gold: Sequence) -> float:
    return counts(preds, gold).precision


def micro_recall(preds: Sequence, gold: Sequence) -> float:
    return counts(preds, gold).recall


@dataclass(frozen=True)
class LabelScore:
    label: int
    precision: float
    recall: float
    f1: float
    support: int
    predicted: int


def per_label(preds: Sequence, gold: Sequence, num_labels: int) -> list[LabelScore]:
    _check(preds, gold)
    out = []
    for j in range(num_labels):
        c = counts([{j} & frozenset(p) for p in preds], [{j} & frozenset(g) for g in gold])
        out.append(LabelScore(j, c.precision, c.recall, c.f1, c.tp + c.fn, c.tp + c.fp))
    return out


def macro_f1(preds: Sequence, gold: Sequence, num_labels: int) -> float:
    """Mean F1 over labels that occur in the gold data or the predictions."""
    scores = [s.f1 for s in per_label(preds, gold, num_labels) if s.support or s.predicted]
    return float(np.mean(scores)) if scores else 1.0


@dataclass
class EvalReport:
    micro_f1: float
    macro_f1: float
    counts: dict[str, int]
    per_label: list[dict]
    per_language: dict[str, float]
    routes: dict[str, dict]
    examples: int
    failures: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def table(self) -> str:
        """Tab-separated rows: language, route, threshold, examples, micro_f1."""
        buf = io.StringIO()
        w = csv.writer(buf, delimiter="\t", lineterminator="\n")
        w.writerow(["language", "route", "threshold", "examples", "micro_f1"])
        for lang in sorted(self.per_language):
            r = self.routes[lang]
            w.writerow([lang, r["route"], f"{r['threshold']:.2f}", r["examples"], f"{self.per_language[lang]:.6f}"])
        w.writerow(["ALL", "-", "-", self.examples, f"{self.micro_f1:.6f}"])
        return buf.getvalue()


def build_report(preds: Sequence, gold: Sequence, languages: Sequence[str], routes: dict, num_labels: int,
                 failures: list | None = None) -> EvalReport:
    c = counts(preds, gold)
    per_language = {}
    for lang in sorted(set(languages)):
        rows = [i for i, x in enumerate(languages) if x == lang]
        per_language[lang] = micro_f1([preds[i] for i in rows], [gold[i] for i in rows])
    return EvalReport(
        micro_f1=c.f1,
        macro_f1=macro_f1(preds, gold, num_labels),
        counts={"tp": c.tp, "fp": c.fp, "fn": c.fn},
        per_label=[asdict(s) for s in per_label(preds, gold, num_labels)],
        per_language=per_language,
        routes=routes,
        examples=len(preds),
        failures=list(failures or []),
    )


def evaluate(checkpoint, examples: Sequence, features, thresholds=None) -> EvalReport:
    """Score ``examples`` with the checkpoint's model and per-language thresholds.

    Languages missing from the table are scored with its zero-shot
    threshold; ``routes`` records which threshold each language used.
    Examples without a feature row are reported in ``failures`` and left
    out of the scores.
    """
    table = thresholds if thresholds is not None else checkpoint.thresholds
    if table is None:
        raise UsageError("no threshold table: tune thresholds first or pass one explicitly")
    failures, kept, rows = [], [], []
    for ex in examples:
        try:
            rows.append(features.positions([ex.id])[0])
            kept.append(ex)
        except KeyError:
            failures.append({"id": ex.id, "error": "no feature row"})
    if failures:
        log.warning("%d example(s) had no features and were skipped", len(failures))
    probs = predict_feature_set(features.subset(rows), checkpoint.params, checkpoint.model_config)
    preds, routes = [], {}
    for ex, p in zip(kept, probs):
        theta, route = table.lookup(ex.language)
        preds.append(apply_threshold(p, theta, table.inclusive)[0])
        r = routes.setdefault(ex.language, {"route": route, "threshold": theta, "examples": 0})
        r["examples"] += 1
    return build_report(preds, [ex.labels for ex in kept], [ex.language for ex in kept], routes,
                        checkpoint.model_config.num_labels, failures)
