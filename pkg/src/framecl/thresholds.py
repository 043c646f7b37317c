"""Per-language decision thresholds over sigmoid probabilities.

Thresholds live on the grid ``{k * step : k = 1 .. K-1}`` with ``K = 1/step``
and are handled internally as integer grid indices, so table values compare
exactly.  A label is predicted when its probability reaches the threshold
(``prob >= theta``); pass ``inclusive=False`` for a strict ``prob > theta``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, UsageError

DEFAULT_STEP = 0.01


def grid_size(step: float) -> int:
    """Number of grid intervals on [0, 1]; ``step`` must divide 1."""
    if not 0.0 < step < 0.5:
        raise ConfigError(f"grid step must be in (0, 0.5), got {step}")
    k = round(1.0 / step)
    if abs(k * step - 1.0) > 1e-9:
        raise ConfigError(f"grid step {step} does not divide 1")
    return k


def grid(step: float = DEFAULT_STEP) -> np.ndarray:
    k = grid_size(step)
    return np.arange(1, k) / k


def grid_index(theta: float, step: float = DEFAULT_STEP) -> int:
    k = grid_size(step)
    idx = round(theta * k)
    if abs(idx - theta * k) > 1e-6 or not 1 <= idx <= k - 1:
        raise ConfigError(f"threshold {theta} is not an interior point of the {step} grid")
    return idx


def _predict_mask(probs: np.ndarray, theta, inclusive: bool) -> np.ndarray:
    return probs >= theta if inclusive else probs > theta


def apply_threshold(probs, theta: float, inclusive: bool = True) -> list[frozenset]:
    """Predicted label sets, one per row of ``probs``; empty sets allowed."""
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    mask = _predict_mask(p, theta, inclusive)
    return [frozenset(int(j) for j in np.flatnonzero(row)) for row in mask]


def _gold_matrix(gold: Sequence, num_labels: int) -> np.ndarray:
    out = np.zeros((len(gold), num_labels), dtype=bool)
    for i, labels in enumerate(gold):
        for j in labels:
            if not 0 <= j < num_labels:
                raise UsageError(f"gold label {j} outside 0..{num_labels - 1}")
            out[i, j] = True
    return out


def micro_f1_curve(probs, gold: Sequence, step: float = DEFAULT_STEP, inclusive: bool = True) -> np.ndarray:
    """Micro-F1 at every grid threshold, in grid order."""
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    if p.shape[0] != len(gold):
        raise UsageError(f"{p.shape[0]} probability rows for {len(gold)} gold label sets")
    g = _gold_matrix(gold, p.shape[1])
    thetas = grid(step)
    pred = _predict_mask(p[None, :, :], thetas[:, None, None], inclusive)
    tp = np.sum(pred & g[None], axis=(1, 2))
    fp = np.sum(pred & ~g[None], axis=(1, 2))
    fn = np.sum(~pred & g[None], axis=(1, 2))
    den = 2 * tp + fp + fn
    return np.where(den == 0, 1.0, 2 * tp / np.maximum(den, 1))


def tune_threshold(probs, gold: Sequence, grid_step: float = DEFAULT_STEP, inclusive: bool = True) -> float:
    """Smallest grid threshold that maximizes micro-F1 on (probs, gold)."""
    if len(gold) == 0:
        raise UsageError("tune_threshold needs at least one example")
    scores = micro_f1_curve(probs, gold, grid_step, inclusive)
    # argmax returns the first (smallest-theta) maximum
    return float(grid(grid_step)[int(np.argmax(scores))])


def zero_shot_threshold(per_language: Mapping[str, float], grid_step: float = DEFAULT_STEP) -> float:
    """Mean of the per-language thresholds, rounded to the grid (ties down)."""
    if not per_language:
        raise UsageError("zero_shot_threshold needs at least one language")
    k = grid_size(grid_step)
    total = sum(grid_index(t, grid_step) for t in per_language.values())
    n = len(per_language)
    lower, rem = divmod(total, n)
    idx = lower + 1 if 2 * rem > n else lower
    return idx / k


@dataclass
class ThresholdTable:
    per_language: dict[str, float]
    zero_shot: float
    grid_step: float = DEFAULT_STEP
    inclusive: bool = True
    skipped: list[str] = field(default_factory=list)

    def __post_init__(self):
        k = grid_size(self.grid_step)
        self.per_language = {lang: grid_index(t, self.grid_step) / k for lang, t in sorted(self.per_language.items())}
        self.zero_shot = grid_index(self.zero_shot, self.grid_step) / k
        if self.per_language and self.zero_shot != zero_shot_threshold(self.per_language, self.grid_step):
            raise ConfigError(
                f"zero_shot {self.zero_shot} is not the grid-rounded mean of the per-language thresholds"
            )

    @classmethod
    def from_thresholds(cls, per_language: Mapping[str, float], grid_step: float = DEFAULT_STEP, **kw):
        return cls(dict(per_language), zero_shot_threshold(per_language, grid_step), grid_step, **kw)

    def lookup(self, language: str) -> tuple[float, str]:
        """Threshold for ``language`` and the route that chose it."""
        if language in self.per_language:
            return self.per_language[language], "tuned"
        return self.zero_shot, "zero_shot"

    def to_dict(self) -> dict:
        return {
            "per_language": dict(self.per_language),
            "zero_shot": self.zero_shot,
            "grid_step": self.grid_step,
            "inclusive": self.inclusive,
            "skipped": list(self.skipped),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ThresholdTable":
        try:
            return cls(
                per_language=dict(d["per_language"]),
                zero_shot=float(d["zero_shot"]),
                grid_step=float(d.get("grid_step", DEFAULT_STEP)),
                inclusive=bool(d.get("inclusive", True)),
                skipped=list(d.get("skipped", [])),
            )
        except KeyError as exc:
            raise ConfigError(f"threshold table is missing {exc}") from None

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ThresholdTable":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def tune_table(
    probs,
    gold: Sequence,
    languages: Sequence[str],
    grid_step: float = DEFAULT_STEP,
    inclusive: bool = True,
) -> ThresholdTable:
    """Tune one threshold per language and derive the zero-shot value."""
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    if not (p.shape[0] == len(gold) == len(languages)):
        raise UsageError("probs, gold and languages must have the same length")
    per_language = {}
    for lang in sorted(set(languages)):
        rows = [i for i, x in enumerate(languages) if x == lang]
        per_language[lang] = tune_threshold(p[rows], [gold[i] for i in rows], grid_step, inclusive)
    return ThresholdTable.from_thresholds(per_language, grid_step, inclusive=inclusive)
