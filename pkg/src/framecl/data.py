"""Corpora, features, and the synthetic multilingual generator.

Corpus files are JSON lines with the fields ``id``, ``language``, ``title``,
``body`` and ``labels`` (a list of vocabulary names).  Text is turned into
hashed bag-of-n-gram vectors; precomputed sentence embeddings can replace
those vectors via :func:`load_embeddings`.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

DEFAULT_DIM = 2**14
NGRAM_RANGE = (3, 5)


# ---------------------------------------------------------------------------
# vocabulary and examples
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LabelVocabulary:
    names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(self.names) < 2:
            raise DataError("a label vocabulary needs at least 2 labels")
        if len(set(self.names)) != len(self.names):
            dupes = sorted({n for n in self.names if self.names.count(n) > 1})
            raise DataError(f"duplicate label names: {dupes}")
        object.__setattr__(self, "_index", {n: i for i, n in enumerate(self.names)})

    @classmethod
    def default(cls, size: int = 14) -> "LabelVocabulary":
        return cls(tuple(f"F{i + 1:02d}" for i in range(size)))

    @classmethod
    def load(cls, path) -> "LabelVocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tuple(line.strip() for line in lines if line.strip()))

    def save(self, path) -> None:
        Path(path).write_text("".join(n + "\n" for n in self.names), encoding="utf-8")

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self._index[name]

    def __contains__(self, name) -> bool:
        return name in self._index

    def encode(self, names: Iterable[str]) -> frozenset:
        return frozenset(self._index[n] for n in names)

    def decode(self, labels: Iterable[int]) -> list[str]:
        return [self.names[i] for i in sorted(labels)]


@dataclass(frozen=True)
class Example:
    id: str
    language: str
    title: str
    body: str
    labels: frozenset

    def to_record(self, vocab: LabelVocabulary) -> dict:
        return {
            "id": self.id,
            "language": self.language,
            "title": self.title,
            "body": self.body,
            "labels": vocab.decode(self.labels),
        }


def _parse_record(rec, lineno: int, vocab: LabelVocabulary, allow_empty_labels: bool) -> Example:
    if not isinstance(rec, dict):
        raise DataError(f"line {lineno}: expected a JSON object")
    missing = [k for k in ("id", "language", "title", "body", "labels") if k not in rec]
    if missing:
        raise DataError(f"line {lineno}: missing field(s) {missing}")
    if not isinstance(rec["labels"], list):
        raise DataError(f"line {lineno}: 'labels' must be a list of label names")
    for name in rec["labels"]:
        if name not in vocab:
            raise DataError(f"line {lineno}: unknown label {name!r}")
    if not rec["labels"] and not allow_empty_labels:
        raise DataError(f"line {lineno}: empty label list (pass allow_empty_labels to admit it)")
    language = str(rec["language"])
    if not language:
        raise DataError(f"line {lineno}: empty language tag")
    return Example(
        id=str(rec["id"]),
        language=language,
        title=str(rec["title"] or ""),
        body=str(rec["body"] or ""),
        labels=vocab.encode(rec["labels"]),
    )


def load_jsonl(path, vocab: LabelVocabulary, allow_empty_labels: bool = False) -> list[Example]:
    """Read and validate one corpus split."""
    examples: list[Example] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            ex = _parse_record(rec, lineno, vocab, allow_empty_labels)
            if ex.id in seen:
                raise DataError(f"line {lineno}: duplicate id {ex.id!r} (first seen on line {seen[ex.id]})")
            seen[ex.id] = lineno
            examples.append(ex)
    if not examples:
        log.warning("%s: no examples", path)
    return examples


def write_jsonl(path, examples: Sequence[Example], vocab: LabelVocabulary) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_record(vocab), ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# featurization
# ---------------------------------------------------------------------------


def feature_hash(feature: str) -> int:
    """64-bit BLAKE2b digest of the UTF-8 feature string, little-endian."""
    return int.from_bytes(hashlib.blake2b(feature.encode("utf-8"), digest_size=8).digest(), "little")


@lru_cache(maxsize=1 << 16)
def _word_buckets(word: str, dim: int) -> tuple[int, ...]:
    feats = ["w\x1f" + word]
    padded = f"<{word}>"
    lo, hi = NGRAM_RANGE
    for n in range(lo, hi + 1):
        feats.extend("c\x1f" + padded[i : i + n] for i in range(len(padded) - n + 1))
    mask = dim - 1
    return tuple(feature_hash(f) & mask for f in feats)


def _check_dim(dim: int) -> None:
    if dim < 1 or dim & (dim - 1):
        raise ConfigError(f"feature dimension must be a power of two, got {dim}")


def hashed_counts(text: str, dim: int = DEFAULT_DIM) -> dict[int, float]:
    """Raw bucket counts of word unigrams and character 3-5-grams."""
    _check_dim(dim)
    counts: dict[int, float] = {}
    for word in text.lower().split():
        for b in _word_buckets(word, dim):
            counts[b] = counts.get(b, 0.0) + 1.0
    return counts


def _normalized(counts: dict[int, float], dim: int) -> tuple[np.ndarray, np.ndarray]:
    if not counts:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    idx = np.array(sorted(counts), dtype=np.int64)
    val = np.array([counts[i] for i in idx], dtype=np.float64)
    return idx, val / math.sqrt(float(np.dot(val, val)))


def featurize(text: str, dim: int = DEFAULT_DIM) -> np.ndarray:
    """L2-normalized hashed n-gram vector of ``text``; zero vector if empty.

    Words are whitespace tokens of the lowercased text.  Each word ``w``
    contributes the feature ``"w\\x1f" + w`` and, for n = 3..5, every
    character n-gram ``g`` of ``"<" + w + ">"`` as ``"c\\x1f" + g``.  A
    feature lands in bucket ``feature_hash(feature) & (dim - 1)``.
    """
    idx, val = _normalized(hashed_counts(text, dim), dim)
    out = np.zeros(dim)
    out[idx] = val
    return out


@dataclass
class FeatureSet:
    """Title, body and whole-article feature rows aligned with ``ids``."""

    ids: list[str]
    title: object
    body: object
    whole: object
    dim: int
    external: bool = False

    def __post_init__(self):
        self._pos = {i: k for k, i in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    def positions(self, ids: Iterable[str]) -> list[int]:
        return [self._pos[i] for i in ids]

    def subset(self, rows: Sequence[int]) -> "FeatureSet":
        rows = np.asarray(rows, dtype=np.int64)
        if np.array_equal(rows, np.arange(len(self))):
            return self
        return FeatureSet(
            [self.ids[i] for i in rows], self.title[rows], self.body[rows], self.whole[rows], self.dim, self.external
        )

    def rows(self, idx: Sequence[int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        idx = np.asarray(idx, dtype=np.int64)

        def take(m):
            part = m[idx]
            return part.toarray() if sparse.issparse(part) else np.array(part, dtype=np.float64)

        return take(self.title), take(self.body), take(self.whole)


def _csr(rows: list[tuple[np.ndarray, np.ndarray]], dim: int) -> sparse.csr_matrix:
    indptr = np.zeros(len(rows) + 1, dtype=np.int64)
    for k, (idx, _) in enumerate(rows):
        indptr[k + 1] = indptr[k] + idx.size
    indices = np.concatenate([r[0] for r in rows]) if rows else np.zeros(0, dtype=np.int64)
    data = np.concatenate([r[1] for r in rows]) if rows else np.zeros(0)
    return sparse.csr_matrix((data, indices, indptr), shape=(len(rows), dim))


def featurize_split(examples: Sequence[Example], dim: int = DEFAULT_DIM) -> FeatureSet:
    titles, bodies, wholes = [], [], []
    for ex in examples:
        tc = hashed_counts(ex.title, dim)
        bc = hashed_counts(ex.body, dim)
        wc = dict(tc)
        for k, v in bc.items():
            wc[k] = wc.get(k, 0.0) + v
        titles.append(_normalized(tc, dim))
        bodies.append(_normalized(bc, dim))
        wholes.append(_normalized(wc, dim))
    return FeatureSet(
        ids=[ex.id for ex in examples],
        title=_csr(titles, dim),
        body=_csr(bodies, dim),
        whole=_csr(wholes, dim),
        dim=dim,
    )


def load_embeddings(path, examples: Sequence[Example]) -> FeatureSet:
    """Feature rows from a JSON-lines file of ``{id, title_vec, body_vec}``.

    Every example must have an entry and all vectors must share one length,
    which becomes the model's input dimension.  The whole-article row is
    the mean of the title and body vectors.
    """
    vecs: dict[str, tuple[list, list]] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                key, tv, bv = str(rec["id"]), rec["title_vec"], rec["body_vec"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path} line {lineno}: malformed embedding record ({exc})") from None
            for name, v in (("title_vec", tv), ("body_vec", bv)):
                if dim is None:
                    dim = len(v)
                if len(v) != dim:
                    raise DataError(
                        f"{path} line {lineno}: {name} has dimension {len(v)}, expected {dim}"
                    )
            vecs[key] = (tv, bv)
    missing = [ex.id for ex in examples if ex.id not in vecs]
    if missing:
        raise DataError(f"no embeddings for id(s): {', '.join(missing)}")
    if dim is None or dim == 0:
        raise DataError(f"{path}: no embedding vectors")
    title = np.array([vecs[ex.id][0] for ex in examples], dtype=np.float64).reshape(len(examples), dim)
    body = np.array([vecs[ex.id][1] for ex in examples], dtype=np.float64).reshape(len(examples), dim)
    if not (np.all(np.isfinite(title)) and np.all(np.isfinite(body))):
        raise DataError(f"{path}: non-finite embedding values")
    return FeatureSet(
        ids=[ex.id for ex in examples],
        title=title,
        body=body,
        whole=0.5 * (title + body),
        dim=dim,
        external=True,
    )


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def batch_iter(n: int, batch_size: int, epoch_seed: int) -> list[np.ndarray]:
    """Shuffled index batches over ``n`` items.

    A trailing batch of one is merged into the batch before it, so no batch
    ever holds a single example (unless ``n`` is 1).
    """
    if batch_size < 2:
        raise ConfigError(f"batch_size must be >= 2, got {batch_size}")
    order = np.random.default_rng(epoch_seed).permutation(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and batches[-1].size == 1:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

# (tag, train, dev, test) at the scale of the shared-task release
PRESET_LANGUAGES = (
    ("en", 433, 83, 54),
    ("fr", 158, 53, 50),
    ("de", 132, 45, 50),
    ("it", 227, 76, 61),
    ("pl", 145, 49, 47),
    ("ru", 143, 48, 72),
)
ZERO_SHOT_LANGUAGES = (("es", 0, 0, 30), ("ka", 0, 0, 29), ("el", 0, 0, 64))

# one letter range per synthetic language, so token alphabets are disjoint
_SCRIPTS = (
    (0x61, 0x7A),  # latin
    (0x3B1, 0x3C9),  # greek
    (0x430, 0x44F),  # cyrillic
    (0x561, 0x586),  # armenian
    (0x10D0, 0x10F0),  # georgian
    (0x5D0, 0x5EA),  # hebrew
    (0x905, 0x939),  # devanagari
    (0xE01, 0xE2E),  # thai
    (0x1100, 0x1112),  # hangul jamo
    (0x3041, 0x3093),  # hiragana
)

DEFAULT_MARGINALS = (0.42, 0.36, 0.32, 0.28, 0.25, 0.22, 0.2, 0.18, 0.16, 0.14, 0.12, 0.1, 0.09, 0.08)


@dataclass(frozen=True)
class SynthConfig:
    languages: tuple[tuple[str, int, int, int], ...] = PRESET_LANGUAGES
    num_labels: int = 14
    marginals: tuple[float, ...] = DEFAULT_MARGINALS
    # (a, b, coupling): log-linear bonus for a and b co-occurring
    correlations: tuple[tuple[int, int, float], ...] = ()
    signature_size: int = 4
    filler_size: int = 60
    title_tokens: int = 8
    body_tokens: int = 48
    filler_rate: float = 0.25
    noise: float = 0.1
    allow_empty: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "languages", tuple(tuple(x) for x in self.languages))
        object.__setattr__(self, "marginals", tuple(float(p) for p in self.marginals))
        object.__setattr__(self, "correlations", tuple(tuple(c) for c in self.correlations))
        if not self.languages:
            raise ConfigError("at least one language is required")
        if len(self.languages) > len(_SCRIPTS):
            raise ConfigError(f"at most {len(_SCRIPTS)} synthetic languages are supported")
        tags = [lang[0] for lang in self.languages]
        if len(set(tags)) != len(tags):
            raise ConfigError(f"duplicate language tags: {tags}")
        for tag, *counts in self.languages:
            if any(c < 0 for c in counts) or sum(counts) == 0:
                raise ConfigError(f"language {tag!r}: counts must be >= 0 and not all zero")
        if not 2 <= self.num_labels <= 16:
            raise ConfigError("num_labels must be in 2..16 (label sets are enumerated exactly)")
        if len(self.marginals) != self.num_labels:
            raise ConfigError(f"{len(self.marginals)} marginals for {self.num_labels} labels")
        if not all(0.0 < p < 1.0 for p in self.marginals):
            raise ConfigError("marginals must lie in (0, 1)")
        if not 0.0 <= self.noise < 0.5:
            raise ConfigError(f"noise must be in [0, 0.5), got {self.noise}")
        if not 0.0 <= self.filler_rate < 1.0:
            raise ConfigError("filler_rate must be in [0, 1)")
        for a, b, _ in self.correlations:
            if not (0 <= a < self.num_labels and 0 <= b < self.num_labels and a != b):
                raise ConfigError(f"bad correlation pair ({a}, {b})")

    def to_dict(self) -> dict:
        return {
            "languages": [list(x) for x in self.languages],
            "num_labels": self.num_labels,
            "marginals": list(self.marginals),
            "correlations": [list(c) for c in self.correlations],
            "signature_size": self.signature_size,
            "filler_size": self.filler_size,
            "title_tokens": self.title_tokens,
            "body_tokens": self.body_tokens,
            "filler_rate": self.filler_rate,
            "noise": self.noise,
            "allow_empty": self.allow_empty,
            "seed": self.seed,
        }


def _subset_matrix(num_labels: int) -> np.ndarray:
    codes = np.arange(1 << num_labels)
    return ((codes[:, None] >> np.arange(num_labels)[None, :]) & 1).astype(bool)


def label_prior(cfg: SynthConfig) -> np.ndarray:
    """Probability of every label set, indexed by its bit code.

    The per-label log-odds are fitted so that the prior's marginals equal
    ``cfg.marginals`` even after excluding the empty set and adding the
    pairwise couplings.
    """
    members = _subset_matrix(cfg.num_labels)
    target = np.asarray(cfg.marginals)
    coupling = np.zeros(members.shape[0])
    for a, b, gamma in cfg.correlations:
        coupling = coupling + gamma * (members[:, a] & members[:, b])
    theta = np.log(target) - np.log1p(-target)

    def distribution(theta):
        logw = members @ theta + coupling
        if not cfg.allow_empty:
            logw[0] = -np.inf
        w = np.exp(logw - logw.max())
        return w / w.sum()

    for _ in range(200):
        prior = distribution(theta)
        marg = np.clip(prior @ members, 1e-12, 1 - 1e-12)
        step = (np.log(target) - np.log1p(-target)) - (np.log(marg) - np.log1p(-marg))
        theta = theta + step
        if np.max(np.abs(step)) < 1e-13:
            break
    return distribution(theta)


def _token_log_probs(num_labels: int, noise: float) -> np.ndarray:
    """log P(signature token comes from label j | label set), sets x labels."""
    members = _subset_matrix(num_labels)
    size = members.sum(axis=1, keepdims=True).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        present = np.where(size < num_labels, (1.0 - noise) / size, 1.0 / num_labels)
        absent = np.where(size < num_labels, noise / (num_labels - size), 0.0)
        probs = np.where(members, present, absent)
        probs[0] = 1.0 / num_labels  # empty set: every label equally likely
        return np.log(probs)


def _make_token(rng: np.random.Generator, script: tuple[int, int], taken: set[str]) -> str:
    lo, hi = script
    while True:
        length = int(rng.integers(4, 8))
        tok = "".join(chr(int(c)) for c in rng.integers(lo, hi + 1, size=length))
        if tok not in taken and tok.lower() == tok and len(tok.split()) == 1:
            taken.add(tok)
            return tok


@dataclass
class SynthCorpus:
    train: list[Example]
    dev: list[Example]
    test: list[Example]
    vocab: LabelVocabulary
    manifest: dict
    bayes: dict[str, frozenset] = field(default_factory=dict)

    def splits(self) -> dict[str, list[Example]]:
        return {"train": self.train, "dev": self.dev, "test": self.test}


def _build_alphabets(cfg: SynthConfig, rng: np.random.Generator) -> dict:
    out = {}
    for k, (tag, *_rest) in enumerate(cfg.languages):
        taken: set[str] = set()
        sigs = [[_make_token(rng, _SCRIPTS[k], taken) for _ in range(cfg.signature_size)] for _ in range(cfg.num_labels)]
        filler = [_make_token(rng, _SCRIPTS[k], taken) for _ in range(cfg.filler_size)]
        out[tag] = {"signatures": sigs, "filler": filler}
    return out


def _draw_tokens(n: int, labels: list[int], cfg: SynthConfig, alpha: dict, rng: np.random.Generator) -> list[str]:
    absent = [j for j in range(cfg.num_labels) if j not in labels]
    present = labels if labels else list(range(cfg.num_labels))
    out = []
    for _ in range(n):
        if rng.random() < cfg.filler_rate:
            out.append(alpha["filler"][int(rng.integers(len(alpha["filler"])))])
            continue
        pool = absent if (absent and labels and rng.random() < cfg.noise) else present
        j = pool[int(rng.integers(len(pool)))]
        sig = alpha["signatures"][j]
        out.append(sig[int(rng.integers(len(sig)))])
    return out


def synth_generate(cfg: SynthConfig = SynthConfig()) -> SynthCorpus:
    """Generate train/dev/test splits with planted label signatures.

    Each language owns a disjoint token alphabet.  A document's label set is
    drawn from the prior; every token is filler with probability
    ``filler_rate``, otherwise a signature token of a uniformly chosen
    present label, or with probability ``noise`` of an absent one.
    """
    rng = np.random.default_rng(cfg.seed)
    alphabets = _build_alphabets(cfg, rng)
    prior = label_prior(cfg)
    members = _subset_matrix(cfg.num_labels)
    vocab = LabelVocabulary.default(cfg.num_labels)
    manifest = {"generator": "framecl.synth", "version": 1, "config": cfg.to_dict(), "alphabets": alphabets}
    splits: dict[str, list[Example]] = {"train": [], "dev": [], "test": []}
    for tag, *counts in cfg.languages:
        for split, n in zip(("train", "dev", "test"), counts):
            codes = rng.choice(prior.size, size=n, p=prior)
            for k, code in enumerate(codes):
                labels = [int(j) for j in np.flatnonzero(members[code])]
                title = _draw_tokens(cfg.title_tokens, labels, cfg, alphabets[tag], rng)
                body = _draw_tokens(cfg.body_tokens, labels, cfg, alphabets[tag], rng)
                splits[split].append(
                    Example(
                        id=f"{tag}-{split}-{k:04d}",
                        language=tag,
                        title=" ".join(title),
                        body=" ".join(body),
                        labels=frozenset(labels),
                    )
                )
    corpus = SynthCorpus(splits["train"], splits["dev"], splits["test"], vocab, manifest)
    model = BayesModel(manifest)
    for ex in corpus.train + corpus.dev + corpus.test:
        corpus.bayes[ex.id] = model.predict(ex)
    return corpus


class BayesModel:
    """Posterior-optimal label sets recomputed from a generator manifest."""

    def __init__(self, manifest: dict):
        cfg = SynthConfig(**{k: v for k, v in manifest["config"].items()})
        self.cfg = cfg
        prior = label_prior(cfg)
        with np.errstate(divide="ignore"):
            self.log_prior = np.log(prior)
        self.token_lp = _token_log_probs(cfg.num_labels, cfg.noise)
        # impossible token sources only ever meet non-zero counts
        self._finite_lp = np.where(np.isfinite(self.token_lp), self.token_lp, -1e30)
        self.members = _subset_matrix(cfg.num_labels)
        self.lookup = {
            tag: {tok: j for j, sig in enumerate(a["signatures"]) for tok in sig}
            for tag, a in manifest["alphabets"].items()
        }

    def signature_counts(self, ex: Example) -> np.ndarray:
        table = self.lookup[ex.language]
        counts = np.zeros(self.cfg.num_labels)
        for tok in (ex.title + " " + ex.body).split():
            j = table.get(tok)
            if j is not None:
                counts[j] += 1
        return counts

    def log_posterior(self, ex: Example) -> np.ndarray:
        return self.log_prior + self._finite_lp @ self.signature_counts(ex)

    def predict(self, ex: Example) -> frozenset:
        code = int(np.argmax(self.log_posterior(ex)))
        return frozenset(int(j) for j in np.flatnonzero(self.members[code]))
