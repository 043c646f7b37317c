"""Two-input encoder with a contrastive head and a classification head.

A shared one-layer tanh encoder maps the title and body feature vectors;
the two codes are concatenated into the article representation.  During
training a second view of that representation is made with inverted
dropout, and both views go through both heads.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import dcore
from .dcore import DArray, Graph
from .errors import ConfigError, DataError, UsageError
from .thresholds import ThresholdTable

PARAM_NAMES = (
    "encoder.weight",
    "encoder.bias",
    "contrastive_head.weight",
    "contrastive_head.bias",
    "classification_head.weight",
    "classification_head.bias",
)

CHECKPOINT_FORMAT = "framecl-checkpoint"
CHECKPOINT_VERSION = 1

# floor for head-output norms; only reached by degenerate (all-zero) heads
_NORM_EPS = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    d_in: int
    d_h: int = 64
    d_p: int = 32
    num_labels: int = 14
    view_dropout: float = 0.1
    single_input: bool = False
    init_seed: int = 0

    def __post_init__(self):
        for name in ("d_in", "d_h", "d_p", "num_labels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d_p < 2:
            raise ConfigError("d_p must be at least 2")
        if not 0.0 < self.view_dropout < 1.0:
            raise ConfigError(f"view_dropout must be in (0, 1), got {self.view_dropout}")

    @property
    def keep_prob(self) -> float:
        return 1.0 - self.view_dropout

    def shapes(self) -> dict[str, tuple[int, ...]]:
        h2 = 2 * self.d_h
        return {
            "encoder.weight": (self.d_in, self.d_h),
            "encoder.bias": (self.d_h,),
            "contrastive_head.weight": (h2, self.d_p),
            "contrastive_head.bias": (self.d_p,),
            "classification_head.weight": (h2, self.num_labels),
            "classification_head.bias": (self.num_labels,),
        }


class ModelParams(dict):
    """Parameter arrays keyed by the names in ``PARAM_NAMES``."""

    def check(self, cfg: ModelConfig) -> "ModelParams":
        for name, shape in cfg.shapes().items():
            if name not in self:
                raise ConfigError(f"missing parameter {name}")
            if self[name].shape != shape:
                raise ConfigError(f"{name} has shape {self[name].shape}, expected {shape}")
            if not np.all(np.isfinite(self[name])):
                raise ConfigError(f"{name} has non-finite entries")
        return self

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.items()})

    @classmethod
    def zeros(cls, cfg: ModelConfig) -> "ModelParams":
        return cls({k: np.zeros(s) for k, s in cfg.shapes().items()})


def init_params(cfg: ModelConfig) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(cfg.init_seed)
    out = ModelParams()
    for name, shape in cfg.shapes().items():
        if name.endswith(".bias"):
            out[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            out[name] = rng.uniform(-bound, bound, size=shape)
    return out


class BatchFeatures(NamedTuple):
    title: np.ndarray
    body: np.ndarray
    whole: np.ndarray


@dataclass
class ForwardOutput:
    y1: DArray
    y2: DArray
    labelsets: list
    view_of: np.ndarray
    graph: Graph
    nodes: dict[str, DArray]
    x1: DArray
    masks: np.ndarray | None = None


def _bind(graph: Graph, params: ModelParams, trainable: bool) -> dict[str, DArray]:
    make = graph.param if trainable else graph.constant
    return {name: make(params[name]) for name in PARAM_NAMES}


def _encoder(x, nodes):
    return dcore.tanh(dcore.add(dcore.matmul(x, nodes["encoder.weight"]), nodes["encoder.bias"]))


def _x1(feats: BatchFeatures, nodes, cfg: ModelConfig, graph: Graph) -> DArray:
    if cfg.single_input:
        h = _encoder(graph.constant(feats.whole), nodes)
        return dcore.concat(h, h)
    return dcore.concat(_encoder(graph.constant(feats.title), nodes), _encoder(graph.constant(feats.body), nodes))


def _as_batch(feats) -> BatchFeatures:
    title, body, whole = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in feats)
    if not (title.shape == body.shape == whole.shape):
        raise UsageError(f"feature shapes disagree: {title.shape}, {body.shape}, {whole.shape}")
    return BatchFeatures(title, body, whole)


def _check_width(feats: BatchFeatures, cfg: ModelConfig) -> None:
    if feats.title.shape[1] != cfg.d_in:
        raise UsageError(f"features have width {feats.title.shape[1]}, model expects d_in={cfg.d_in}")


def encode_pair(title_vec, body_vec, params: ModelParams, cfg: ModelConfig) -> np.ndarray:
    """Article representation of width 2*d_h for one or more examples.

    With ``cfg.single_input`` the caller passes the whole-article vector as
    both arguments' stand-in: the title argument is encoded and duplicated.
    """
    title = np.asarray(title_vec, dtype=np.float64)
    body = np.asarray(body_vec, dtype=np.float64)
    squeeze = title.ndim == 1
    feats = _as_batch((title, body, title))
    _check_width(feats, cfg)
    graph = Graph()
    x1 = _x1(feats, _bind(graph, params, trainable=False), cfg, graph).data
    return x1[0] if squeeze else x1


def make_views(x1, mask, cfg: ModelConfig):
    """(original, dropout view) of ``x1``; without a mask both are ``x1``."""
    if mask is None:
        return x1, x1
    m = np.broadcast_to(np.asarray(mask, dtype=np.float64), x1.shape)
    return x1, dcore.masked_dropout(x1, m, cfg.keep_prob)


def view_masks(rng: np.random.Generator, batch: int, cfg: ModelConfig) -> np.ndarray:
    return (rng.random((batch, 2 * cfg.d_h)) >= cfg.view_dropout).astype(np.float64)


def _interleave(a: DArray, b: DArray) -> DArray:
    n = a.shape[0]
    ra = np.zeros((2 * n, n))
    rb = np.zeros((2 * n, n))
    ra[2 * np.arange(n), np.arange(n)] = 1.0
    rb[2 * np.arange(n) + 1, np.arange(n)] = 1.0
    return dcore.add(dcore.matmul(ra, a), dcore.matmul(rb, b))


def forward_batch(
    feats,
    params: ModelParams,
    cfg: ModelConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    labelsets: Sequence | None = None,
    masks: np.ndarray | None = None,
) -> ForwardOutput:
    """Run both heads on a batch.

    In ``train`` mode the output has 2B rows: row 2k is example k and row
    2k+1 its dropout view.  Dropout masks come from ``masks`` if given,
    else from ``rng``.  In ``eval`` mode the output has B rows and no
    dropout is applied.
    """
    feats = _as_batch(feats)
    b = feats.title.shape[0]
    if b == 0:
        raise UsageError("empty batch")
    _check_width(feats, cfg)
    if mode not in ("train", "eval"):
        raise UsageError(f"mode must be 'train' or 'eval', got {mode!r}")
    graph = Graph()
    nodes = _bind(graph, params, trainable=True)
    x1 = _x1(feats, nodes, cfg, graph)
    labels = list(labelsets) if labelsets is not None else [None] * b
    if mode == "train":
        if masks is None:
            if rng is None:
                raise UsageError("train mode needs an rng or explicit masks")
            masks = view_masks(rng, b, cfg)
        view_a, view_b = make_views(x1, masks, cfg)
        x = _interleave(view_a, view_b)
        view_of = np.repeat(np.arange(b), 2)
        labels = [labels[k] for k in view_of]
    else:
        masks = None
        x = x1
        view_of = np.arange(b)
    h1 = dcore.add(dcore.matmul(x, nodes["contrastive_head.weight"]), nodes["contrastive_head.bias"])
    y1 = dcore.l2_normalize_rows(h1, eps=_NORM_EPS)
    y2 = dcore.add(dcore.matmul(x, nodes["classification_head.weight"]), nodes["classification_head.bias"])
    return ForwardOutput(y1=y1, y2=y2, labelsets=labels, view_of=view_of, graph=graph, nodes=nodes, x1=x1, masks=masks)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return dcore.PRIMITIVES["sigmoid"].forward([x], {})


def predict_probabilities(feats, params: ModelParams, cfg: ModelConfig, chunk: int = 128) -> np.ndarray:
    """Sigmoid label probabilities from the clean (eval) view, one row per example."""
    feats = _as_batch(feats)
    out = []
    for start in range(0, feats.title.shape[0], chunk):
        part = BatchFeatures(*(a[start : start + chunk] for a in feats))
        out.append(_sigmoid(forward_batch(part, params, cfg, mode="eval").y2.data))
    return np.concatenate(out, axis=0) if out else np.zeros((0, cfg.num_labels))


def predict_feature_set(fs, params: ModelParams, cfg: ModelConfig, chunk: int = 128) -> np.ndarray:
    """Probabilities for every row of a :class:`~framecl.data.FeatureSet`."""
    out = []
    for start in range(0, len(fs), chunk):
        idx = np.arange(start, min(start + chunk, len(fs)))
        out.append(predict_probabilities(fs.rows(idx), params, cfg, chunk))
    return np.concatenate(out, axis=0) if out else np.zeros((0, cfg.num_labels))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    """Everything needed to reproduce predictions from a trained model.

    Stored as an uncompressed zip (readable with ``numpy.load``) holding
    ``meta.json`` and one ``<parameter name>.npy`` per array.  ``meta.json``
    carries ``format``, ``format_version``, the model/training configs, the
    label vocabulary, the feature description, the seed, and the threshold
    table (or null).  Entries are written in a fixed order with a fixed
    timestamp, so equal contents give byte-identical files.
    """

    model_config: ModelConfig
    params: ModelParams
    labels: list[str]
    seed: int = 0
    thresholds: ThresholdTable | None = None
    features: dict = field(default_factory=lambda: {"kind": "hashed"})
    extra: dict = field(default_factory=dict)

    def meta(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "format_version": CHECKPOINT_VERSION,
            "model_config": asdict(self.model_config),
            "labels": list(self.labels),
            "seed": self.seed,
            "features": self.features,
            "thresholds": self.thresholds.to_dict() if self.thresholds is not None else None,
            "extra": self.extra,
            "params": {name: list(self.params[name].shape) for name in PARAM_NAMES},
        }

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
            def put(name: str, payload: bytes) -> None:
                info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
                info.external_attr = 0o644 << 16
                zf.writestr(info, payload)

            put("meta.json", json.dumps(self.meta(), indent=2, sort_keys=True).encode("utf-8"))
            for name in PARAM_NAMES:
                arr = io.BytesIO()
                np.lib.format.write_array(arr, np.ascontiguousarray(self.params[name], dtype="<f8"), allow_pickle=False)
                put(f"{name}.npy", arr.getvalue())
        return buf.getvalue()

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            with zipfile.ZipFile(path) as zf:
                meta = json.loads(zf.read("meta.json").decode("utf-8"))
                if meta.get("format") != CHECKPOINT_FORMAT:
                    raise DataError(f"{path}: not a {CHECKPOINT_FORMAT} file")
                if meta.get("format_version") != CHECKPOINT_VERSION:
                    raise DataError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
                params = ModelParams()
                for name in PARAM_NAMES:
                    params[name] = np.lib.format.read_array(io.BytesIO(zf.read(f"{name}.npy")), allow_pickle=False)
        except (zipfile.BadZipFile, KeyError) as exc:
            raise DataError(f"{path}: unreadable checkpoint ({exc})") from None
        cfg = ModelConfig(**meta["model_config"])
        table = ThresholdTable.from_dict(meta["thresholds"]) if meta.get("thresholds") else None
        return cls(
            model_config=cfg,
            params=params.check(cfg),
            labels=list(meta["labels"]),
            seed=int(meta.get("seed", 0)),
            thresholds=table,
            features=meta.get("features", {"kind": "hashed"}),
            extra=meta.get("extra", {}),
        )
