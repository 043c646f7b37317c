"""Contrastive and classification objectives.

All contrastive losses share one graph construction: cosine similarities
divided by the temperature, a per-anchor weighted log-sum-exp over the
denominator set, minus the mean similarity to the anchor's positives.  Each
anchor's logits are shifted by their maximum over its denominator set
before exponentiation; the shift cancels exactly between numerator and
denominator and keeps any temperature finite.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np

from . import dcore
from .dcore import DArray
from .errors import ConfigError, UsageError

log = logging.getLogger(__name__)

LabelSet = frozenset
"""A multi-label target: a frozenset of label indices."""

WeightSpec = Union[str, Sequence[float]]

NEGATIVES_ONLY = "negatives_only"
ALL_OTHERS = "all_others"


def labelset(members: Iterable[int], num_labels: int | None = None) -> frozenset:
    out = frozenset(int(m) for m in members)
    if num_labels is not None:
        bad = sorted(m for m in out if not 0 <= m < num_labels)
        if bad:
            raise UsageError(f"label indices {bad} outside 0..{num_labels - 1}")
    return out


def delta(a: Iterable[int], b: Iterable[int]) -> int:
    """Number of labels in exactly one of ``a`` and ``b``."""
    return len(frozenset(a) ^ frozenset(b))


def resolve_weight_table(weight_fn: WeightSpec, max_delta: int) -> np.ndarray:
    """Weights for Δ = 0..max_delta as a lookup array.

    ``"identity"`` maps Δ to Δ, ``"constant"`` maps every Δ to 1, and a
    sequence is used as an explicit table indexed by Δ.
    """
    if isinstance(weight_fn, str):
        if weight_fn == "identity":
            return np.arange(max_delta + 1, dtype=np.float64)
        if weight_fn == "constant":
            return np.ones(max_delta + 1, dtype=np.float64)
        raise ConfigError(f"unknown weight_fn {weight_fn!r}; expected 'identity', 'constant' or a table")
    table = np.asarray(weight_fn, dtype=np.float64)
    if table.ndim != 1 or table.size < max_delta + 1:
        raise ConfigError(f"weight table needs entries for Δ=0..{max_delta}, got {table.size}")
    return table[: max_delta + 1]


def _validate_weights(weight_fn: WeightSpec) -> None:
    if isinstance(weight_fn, str):
        resolve_weight_table(weight_fn, 1)
        return
    table = np.asarray(weight_fn, dtype=np.float64)
    if table.ndim != 1 or table.size < 2:
        raise ConfigError("weight table must list weights for Δ = 0, 1, ...")
    if not np.all(np.isfinite(table)):
        raise ConfigError("weight table has non-finite entries")
    if np.any(np.diff(table) < 0):
        raise ConfigError("weight table must be non-decreasing in Δ")
    if np.any(table[1:] <= 0):
        raise ConfigError("weight table must be positive for Δ >= 1")


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.1
    weight_fn: WeightSpec = "identity"
    denominator_convention: str = NEGATIVES_ONLY
    anchor_reduction: str = "mean"
    # what to do with an anchor that has no positive in the batch
    on_empty_positives: str = "skip"

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.denominator_convention not in (NEGATIVES_ONLY, ALL_OTHERS):
            raise ConfigError(f"unknown denominator_convention {self.denominator_convention!r}")
        if self.anchor_reduction not in ("mean", "sum"):
            raise ConfigError(f"unknown anchor_reduction {self.anchor_reduction!r}")
        if self.on_empty_positives not in ("skip", "error"):
            raise ConfigError(f"unknown on_empty_positives {self.on_empty_positives!r}")
        if not isinstance(self.weight_fn, str):
            object.__setattr__(self, "weight_fn", tuple(float(w) for w in self.weight_fn))
        _validate_weights(self.weight_fn)


@dataclass
class AnchorPlan:
    """Masks that define one contrastive loss on a batch of ``m`` rows.

    ``positive`` is row-normalised (1/|P(i)| on positives), ``weights`` holds
    the denominator weight of every (anchor, other) pair and ``coef`` the
    per-anchor factor of the final reduction.  Skipped anchors get a zero
    coefficient.
    """

    positive: np.ndarray
    weights: np.ndarray
    coef: np.ndarray
    skipped_no_positive: list[int] = field(default_factory=list)
    skipped_no_denominator: list[int] = field(default_factory=list)

    @property
    def active(self) -> int:
        return int(np.count_nonzero(self.coef))


def _plan(pos: np.ndarray, weights: np.ndarray, cfg: ContrastiveConfig) -> AnchorPlan:
    m = pos.shape[0]
    npos = pos.sum(axis=1)
    no_pos = [i for i in range(m) if npos[i] == 0]
    if no_pos and cfg.on_empty_positives == "error":
        raise UsageError(f"anchors {no_pos} have no positive in the batch")
    no_den = [i for i in range(m) if npos[i] > 0 and not np.any(weights[i] > 0)]
    if no_den:
        log.debug("skipping %d anchor(s) with an empty denominator", len(no_den))
    active = (npos > 0) & np.any(weights > 0, axis=1)
    positive = np.where(active[:, None], pos / np.maximum(npos, 1)[:, None], 0.0)
    weights = weights.copy()
    for i in np.flatnonzero(~active):
        # keeps log() finite; the anchor's coefficient is zero
        weights[i] = 0.0
        weights[i, i] = 1.0
    n_active = int(active.sum())
    if cfg.anchor_reduction == "mean":
        coef = active / max(n_active, 1)
    else:
        coef = active.astype(np.float64)
    return AnchorPlan(positive, weights, coef.astype(np.float64), no_pos, no_den)


def _contrastive(z, plan: AnchorPlan, temperature: float) -> DArray:
    sim = dcore.pairwise_cosine_similarity(dcore.lift(z))
    logits = dcore.scale(sim, 1.0 / temperature)
    # per-anchor log-sum-exp shift, a constant that cancels exactly
    in_den = plan.weights > 0
    shift = np.max(np.where(in_den, logits.data, -np.inf), axis=1)
    shifted = dcore.add(logits, -shift[:, None])
    # pairs outside the denominator are zeroed before exp so they cannot overflow
    den = dcore.sum_rows(dcore.mul(dcore.exp(dcore.mul(shifted, in_den.astype(np.float64))), plan.weights))
    pos = dcore.sum_rows(dcore.mul(shifted, plan.positive))
    per_anchor = dcore.add(dcore.log(den), dcore.scale(pos, -1.0))
    return dcore.sum_all(dcore.mul(per_anchor, plan.coef))


def _rows(z) -> int:
    shape = z.shape if isinstance(z, DArray) else np.shape(z)
    if len(shape) != 2:
        raise UsageError(f"embeddings must be 2-d, got shape {tuple(shape)}")
    return shape[0]


def nt_xent_plan(m: int, cfg: ContrastiveConfig) -> AnchorPlan:
    if m % 2 or m == 0:
        raise UsageError(f"nt_xent needs an even, non-zero row count (view pairs), got {m}")
    idx = np.arange(m)
    pos = np.zeros((m, m))
    pos[idx, idx ^ 1] = 1.0
    weights = 1.0 - np.eye(m)
    return _plan(pos, weights, cfg)


def nt_xent(z, cfg: ContrastiveConfig = ContrastiveConfig()) -> DArray:
    """SimCLR loss: rows (2k, 2k+1) are views of one example.

    The denominator always runs over every row except the anchor, whatever
    ``cfg.denominator_convention`` says.
    """
    return _contrastive(z, nt_xent_plan(_rows(z), cfg), cfg.temperature)


def _as_keys(labels: Sequence) -> list[frozenset]:
    return [frozenset(lab) if not isinstance(lab, (int, np.integer)) else frozenset((int(lab),)) for lab in labels]


def supcon_plan(labels: Sequence, cfg: ContrastiveConfig) -> AnchorPlan:
    keys = _as_keys(labels)
    for i, k in enumerate(keys):
        if len(k) != 1:
            raise UsageError(f"supcon expects single-label rows; row {i} has {sorted(k)}")
    m = len(keys)
    flat = np.array([next(iter(k)) for k in keys])
    same = flat[:, None] == flat[None, :]
    off_diag = ~np.eye(m, dtype=bool)
    pos = (same & off_diag).astype(np.float64)
    if cfg.denominator_convention == NEGATIVES_ONLY:
        weights = (~same).astype(np.float64)
    else:
        weights = off_diag.astype(np.float64)
    return _plan(pos, weights, cfg)


def supcon(z, labels: Sequence, cfg: ContrastiveConfig = ContrastiveConfig()) -> DArray:
    """Supervised contrastive loss with one label per row."""
    m = _rows(z)
    if len(labels) != m:
        raise UsageError(f"{len(labels)} labels for {m} rows")
    return _contrastive(z, supcon_plan(labels, cfg), cfg.temperature)


def multilabel_plan(labels: Sequence, cfg: ContrastiveConfig) -> AnchorPlan:
    keys = _as_keys(labels)
    m = len(keys)
    if m < 2:
        raise UsageError("multilabel_supcon needs at least 2 rows")
    dist = np.array([[len(a ^ b) for b in keys] for a in keys], dtype=np.int64)
    table = resolve_weight_table(cfg.weight_fn, int(dist.max()))
    off_diag = ~np.eye(m, dtype=bool)
    same = dist == 0
    pos = (same & off_diag).astype(np.float64)
    weights = np.where(same, 0.0, table[dist])
    if cfg.denominator_convention == ALL_OTHERS:
        # positives enter the denominator unweighted
        weights = weights + pos
    return _plan(pos, weights, cfg)


def multilabel_supcon(z, labels: Sequence, cfg: ContrastiveConfig = ContrastiveConfig()) -> DArray:
    """Contrastive loss over label sets with Δ-weighted negatives.

    Rows are positives of each other iff their label sets are identical.
    Every negative pair's denominator term is scaled by the configured
    weight of the number of labels the two sets disagree on.
    """
    m = _rows(z)
    if len(labels) != m:
        raise UsageError(f"{len(labels)} label sets for {m} rows")
    return _contrastive(z, multilabel_plan(labels, cfg), cfg.temperature)


def bce_with_logits(logits, targets) -> DArray:
    """Mean binary cross-entropy over every (row, label) cell.

    Uses ``softplus(x) - t*x``, which equals the textbook form and never
    evaluates ``log`` of a saturated sigmoid.
    """
    x_shape = logits.shape if isinstance(logits, DArray) else np.shape(logits)
    t = np.asarray(targets, dtype=np.float64)
    if tuple(x_shape) != t.shape:
        raise UsageError(f"bce_with_logits: logits {tuple(x_shape)} vs targets {t.shape}")
    if not np.all((t == 0.0) | (t == 1.0)):
        raise UsageError("bce_with_logits: targets must be 0/1")
    logits = dcore.lift(logits)
    cells = dcore.add(dcore.softplus(logits), dcore.scale(dcore.mul(logits, t), -1.0))
    return dcore.scale(dcore.sum_all(cells), 1.0 / t.size)


@dataclass
class LossBreakdown:
    l_cl: DArray
    l_ce: DArray
    combined: DArray
    alpha: float

    def as_floats(self) -> dict[str, float]:
        return {
            "loss": self.combined.item(),
            "l_cl": self.l_cl.item(),
            "l_ce": self.l_ce.item(),
        }


def combined_loss(l_ce: DArray, l_cl: DArray, alpha: float) -> LossBreakdown:
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    total = dcore.add(dcore.scale(l_ce, alpha), dcore.scale(l_cl, 1.0 - alpha))
    return LossBreakdown(l_cl=l_cl, l_ce=l_ce, combined=total, alpha=float(alpha))
