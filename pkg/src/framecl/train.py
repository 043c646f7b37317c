"""Adam training over the mixed contrastive/cross-entropy objective."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import dcore
from .data import Example, FeatureSet, batch_iter
from .errors import ConfigError, FrameclError
from .losses import ContrastiveConfig, LossBreakdown, bce_with_logits, combined_loss, multilabel_supcon
from .metrics import micro_f1
from .model import (
    PARAM_NAMES,
    Checkpoint,
    ModelConfig,
    forward_batch,
    init_params,
    predict_feature_set,
    view_masks,
)
from .thresholds import ThresholdTable, apply_threshold, tune_table

log = logging.getLogger(__name__)

PROFILES = {
    # published fine-tuning rate for a large pretrained encoder
    "plm-parity": {"learning_rate": 1e-6},
    # the toy encoder starts from scratch and needs a much larger step
    "synthetic": {"learning_rate": 1e-2},
}


class NumericError(FrameclError, FloatingPointError):
    def __init__(self, epoch: int, batch: int, detail: str):
        self.epoch, self.batch = epoch, batch
        super().__init__(f"non-finite value at epoch {epoch}, batch {batch}: {detail}")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    learning_rate: float = 1e-6
    alpha: float = 0.5
    epochs: int = 20
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    early_stop_patience: int = 10
    grid_step: float = 0.01

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2: a contrastive batch needs two examples")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("invalid Adam hyperparameters")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1")

    @classmethod
    def from_profile(cls, profile: str, **overrides) -> "TrainConfig":
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        return cls(**{**PROFILES[profile], **overrides})


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params, grads, state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update; returns new (params, state)."""
    t = state.t + 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise FrameclError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_params[name] = p - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        new_m[name], new_v[name] = m, v
    return type(params)(new_params), AdamState(new_m, new_v, t)


def adam_step_inplace(params, grads, state: AdamState, cfg: TrainConfig) -> None:
    """Same update as :func:`adam_step`, mutating ``params`` and ``state``.

    The bias corrections are folded into the step size and the epsilon, so
    results agree with :func:`adam_step` to rounding, not bit for bit.
    """
    state.t += 1
    t = state.t
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1**t
    c2 = np.sqrt(1.0 - b2**t)
    step = cfg.learning_rate / c1
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise FrameclError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v)
        denom /= c2
        denom += cfg.adam_eps
        np.divide(m, denom, out=denom)
        denom *= step
        p -= denom


def batch_objective(out, targets: np.ndarray, con_cfg: ContrastiveConfig, alpha: float) -> LossBreakdown:
    """Combined loss of one training forward pass.

    The contrastive term uses the projected embeddings of both views; the
    cross-entropy term averages over the logits of both views.
    """
    l_cl = multilabel_supcon(out.y1, out.labelsets, con_cfg)
    l_ce = bce_with_logits(out.y2, targets[out.view_of])
    return combined_loss(l_ce, l_cl, alpha)


def loss_and_grads(feats, labels, params, model_cfg, con_cfg, alpha, masks):
    out = forward_batch(feats, params, model_cfg, mode="train", labelsets=labels, masks=masks)
    targets = label_matrix(labels, model_cfg.num_labels)
    losses = batch_objective(out, targets, con_cfg, alpha)
    grads = dcore.backward(out.graph, losses.combined)
    return losses, {name: grads[out.nodes[name].node_id] for name in PARAM_NAMES}


def label_matrix(labels: Sequence, num_labels: int) -> np.ndarray:
    out = np.zeros((len(labels), num_labels))
    for i, ls in enumerate(labels):
        out[i, list(ls)] = 1.0
    return out


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    l_cl: float
    l_ce: float
    batches: int
    dev_micro_f1: dict[str, float]
    dev_mean_micro_f1: float
    thresholds: dict[str, float]
    selected: bool = False


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    selected_epoch: int = -1
    best_dev_mean_micro_f1: float = float("nan")
    stopped_early: bool = False

    def records(self) -> list[dict]:
        out = [{"type": "epoch", **asdict(r)} for r in self.epochs]
        out.append(
            {
                "type": "summary",
                "epochs_run": len(self.epochs),
                "selected_epoch": self.selected_epoch,
                "best_dev_mean_micro_f1": self.best_dev_mean_micro_f1,
                "stopped_early": self.stopped_early,
            }
        )
        return out


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    report: TrainReport


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def dev_scores(probs, dev: Sequence[Example], grid_step: float) -> tuple[ThresholdTable, dict[str, float]]:
    """Per-language tuned thresholds and the micro-F1 each one reaches."""
    gold = [ex.labels for ex in dev]
    langs = [ex.language for ex in dev]
    table = tune_table(probs, gold, langs, grid_step)
    scores = {}
    for lang, theta in table.per_language.items():
        rows = [i for i, x in enumerate(langs) if x == lang]
        preds = apply_threshold(probs[rows], theta, table.inclusive)
        scores[lang] = micro_f1(preds, [gold[i] for i in rows])
    return table, scores


def train(
    train_split: Sequence[Example],
    train_features: FeatureSet,
    dev_split: Sequence[Example],
    dev_features: FeatureSet,
    model_cfg: ModelConfig,
    con_cfg: ContrastiveConfig,
    train_cfg: TrainConfig,
    labels: Sequence[str] | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Train from scratch and keep the epoch with the best mean dev micro-F1.

    Thresholds are re-tuned per language on dev after every epoch; the
    selection score is the mean over dev languages of the micro-F1 at the
    tuned thresholds.
    """
    if not train_split:
        raise ConfigError("training split is empty")
    if not dev_split:
        raise ConfigError("dev split is empty; it is needed for threshold tuning and model selection")
    train_rows = np.asarray(train_features.positions(ex.id for ex in train_split))
    dev_rows = np.asarray(dev_features.positions(ex.id for ex in dev_split))
    params = init_params(model_cfg)
    state = AdamState.zeros_like(params)
    report = TrainReport()
    best = (params.copy(), None)
    stale = 0
    for epoch in range(train_cfg.epochs):
        sums = np.zeros(3)
        batches = batch_iter(len(train_split), train_cfg.batch_size, epoch_seed(train_cfg.seed, epoch))
        for b, idx in enumerate(batches):
            rng = np.random.default_rng([train_cfg.seed, epoch, b])
            masks = view_masks(rng, idx.size, model_cfg)
            feats = train_features.rows(train_rows[idx])
            batch_labels = [train_split[i].labels for i in idx]
            try:
                losses, grads = loss_and_grads(feats, batch_labels, params, model_cfg, con_cfg, train_cfg.alpha, masks)
            except (dcore.DomainError, FloatingPointError) as exc:
                raise NumericError(epoch, b, str(exc)) from None
            vals = losses.as_floats()
            if not all(np.isfinite(list(vals.values()))) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise NumericError(epoch, b, f"losses {vals}")
            sums += (vals["loss"], vals["l_cl"], vals["l_ce"])
            adam_step_inplace(params, grads, state, train_cfg)
        probs = predict_feature_set(dev_features.subset(dev_rows), params, model_cfg)
        table, scores = dev_scores(probs, dev_split, train_cfg.grid_step)
        mean_f1 = float(np.mean(list(scores.values())))
        rec = EpochRecord(
            epoch=epoch,
            loss=float(sums[0] / len(batches)),
            l_cl=float(sums[1] / len(batches)),
            l_ce=float(sums[2] / len(batches)),
            batches=len(batches),
            dev_micro_f1=scores,
            dev_mean_micro_f1=mean_f1,
            thresholds=dict(table.per_language),
        )
        if best[1] is None or mean_f1 > report.best_dev_mean_micro_f1:
            best = (params.copy(), table)
            report.best_dev_mean_micro_f1 = mean_f1
            report.selected_epoch = epoch
            stale = 0
        else:
            stale += 1
        report.epochs.append(rec)
        log.info(
            "epoch %d loss %.4f (cl %.4f, ce %.4f) dev micro-F1 %.4f",
            epoch, rec.loss, rec.l_cl, rec.l_ce, mean_f1,
        )
        if on_epoch is not None:
            on_epoch(rec)
        if stale >= train_cfg.early_stop_patience:
            report.stopped_early = True
            break
    for rec in report.epochs:
        rec.selected = rec.epoch == report.selected_epoch
    params, table = best
    ckpt = Checkpoint(
        model_config=model_cfg,
        params=params,
        labels=list(labels) if labels is not None else [f"F{i + 1:02d}" for i in range(model_cfg.num_labels)],
        seed=train_cfg.seed,
        thresholds=table,
        features={"kind": "external" if train_features.external else "hashed", "dim": train_features.dim},
        extra={"contrastive": _con_dict(con_cfg), "train": asdict(train_cfg), "selected_epoch": report.selected_epoch},
    )
    return TrainResult(ckpt, report)


def _con_dict(cfg: ContrastiveConfig) -> dict:
    d = asdict(cfg)
    if not isinstance(d["weight_fn"], str):
        d["weight_fn"] = list(d["weight_fn"])
    return d
