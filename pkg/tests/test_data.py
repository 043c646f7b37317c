import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
from scipy import sparse

from framecl.data import (
    BayesModel,
    Example,
    LabelVocabulary,
    SynthConfig,
    batch_iter,
    feature_hash,
    featurize,
    featurize_split,
    label_prior,
    load_embeddings,
    load_jsonl,
    synth_generate,
    write_jsonl,
)
from framecl.errors import ConfigError, DataError
from framecl.metrics import micro_f1

FIXTURES = Path(__file__).parent / "fixtures"
VOCAB = LabelVocabulary(("econ", "health", "law"))


def ex(i, labels=("econ",), lang="en"):
    return Example(f"id{i}", lang, f"title {i}", f"body text number {i}", VOCAB.encode(labels))


def write_lines(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")


# -- vocabulary and corpus files -----------------------------------------------------------


def test_vocabulary():
    assert LabelVocabulary.default().names[0] == "F01" and len(LabelVocabulary.default()) == 14
    with pytest.raises(DataError):
        LabelVocabulary(("a",))
    with pytest.raises(DataError):
        LabelVocabulary(("a", "b", "a"))


def test_vocabulary_file_roundtrip(tmp_path):
    VOCAB.save(tmp_path / "v.txt")
    assert LabelVocabulary.load(tmp_path / "v.txt") == VOCAB


def test_jsonl_roundtrip(tmp_path):
    data = [ex(0), ex(1, ("law", "health"), "fr"), Example("x", "de", "", "Grüße ☃", VOCAB.encode(["law"]))]
    write_jsonl(tmp_path / "s.jsonl", data, VOCAB)
    assert load_jsonl(tmp_path / "s.jsonl", VOCAB) == data


def test_unknown_label_names_label_and_line(tmp_path):
    write_lines(tmp_path / "s.jsonl", [ex(0).to_record(VOCAB), {**ex(1).to_record(VOCAB), "labels": ["sports"]}])
    with pytest.raises(DataError, match=r"line 2.*'sports'"):
        load_jsonl(tmp_path / "s.jsonl", VOCAB)


def test_empty_labels_rejected_by_default(tmp_path):
    write_lines(tmp_path / "s.jsonl", [{**ex(0).to_record(VOCAB), "labels": []}])
    with pytest.raises(DataError, match="line 1"):
        load_jsonl(tmp_path / "s.jsonl", VOCAB)
    assert load_jsonl(tmp_path / "s.jsonl", VOCAB, allow_empty_labels=True)[0].labels == frozenset()


@pytest.mark.parametrize(
    "line,match",
    [("{not json", "line 1: malformed"), ('{"id": "a"}', "missing"), ("[1, 2]", "JSON object")],
)
def test_malformed_lines(tmp_path, line, match):
    (tmp_path / "s.jsonl").write_text(line + "\n")
    with pytest.raises(DataError, match=match):
        load_jsonl(tmp_path / "s.jsonl", VOCAB)


def test_duplicate_ids_rejected(tmp_path):
    write_jsonl(tmp_path / "s.jsonl", [ex(0), ex(0)], VOCAB)
    with pytest.raises(DataError, match="duplicate id"):
        load_jsonl(tmp_path / "s.jsonl", VOCAB)


def test_empty_file_warns(tmp_path, caplog):
    (tmp_path / "s.jsonl").write_text("")
    assert load_jsonl(tmp_path / "s.jsonl", VOCAB) == []
    assert "no examples" in caplog.text


# -- featurization ---------------------------------------------------------------------------


def test_featurize_abc_matches_reference_fixture():
    fixture = json.loads((FIXTURES / "featurize_abc.json").read_text())
    v = featurize("abc", 2**14)
    assert np.flatnonzero(v).tolist() == sorted(int(k) for k in fixture["nonzero"])
    for k, val in fixture["nonzero"].items():
        assert v[int(k)] == val
    for feat, h in fixture["hashes"].items():
        assert feature_hash(feat) == h


def test_reference_hash_is_blake2b_64():
    # independent recomputation of the documented feature list for "abc"
    feats = ["w\x1fabc"] + ["c\x1f" + g for n in (3, 4, 5) for g in ("<abc>"[i:i + n] for i in range(6 - n))]
    buckets = sorted(int.from_bytes(hashlib.blake2b(f.encode(), digest_size=8).digest(), "little") % 2**14
                     for f in feats)
    assert buckets == np.flatnonzero(featurize("abc")).tolist()


def test_featurize_properties():
    a = featurize("The quick brown fox", 1024)
    assert np.array_equal(a, featurize("The quick brown fox", 1024))
    assert np.array_equal(a, featurize("the QUICK  brown\tfox", 1024))
    assert np.linalg.norm(a) == pytest.approx(1.0, abs=1e-15)
    assert not np.any(featurize("", 1024)) and not np.any(featurize("   ", 1024))
    with pytest.raises(ConfigError):
        featurize("x", 1000)


def test_featurize_split_matches_featurize():
    data = [ex(0), Example("e", "en", "", "", VOCAB.encode(["law"])), ex(2)]
    fs = featurize_split(data, 512)
    assert sparse.issparse(fs.title)
    t, b, w = fs.rows([0, 1, 2])
    for k, e in enumerate(data):
        np.testing.assert_array_equal(t[k], featurize(e.title, 512))
        np.testing.assert_array_equal(b[k], featurize(e.body, 512))
        np.testing.assert_allclose(w[k], featurize(e.title + " " + e.body, 512), atol=1e-15)
    assert fs.positions(["id2", "id0"]) == [2, 0]
    assert fs.subset([2]).ids == ["id2"]


# -- embeddings ----------------------------------------------------------------------------------


def emb_file(path, rows):
    write_lines(path, [{"id": i, "title_vec": t, "body_vec": b} for i, t, b in rows])


def test_embeddings_loaded_and_flagged(tmp_path):
    emb_file(tmp_path / "e.jsonl", [("id0", [1.0, 0.0], [0.0, 1.0]), ("id1", [2.0, 2.0], [0.0, 0.0])])
    fs = load_embeddings(tmp_path / "e.jsonl", [ex(0), ex(1)])
    assert fs.external and fs.dim == 2
    t, b, w = fs.rows([0, 1])
    np.testing.assert_array_equal(w, [[0.5, 0.5], [1.0, 1.0]])


def test_embeddings_missing_id_listed(tmp_path):
    emb_file(tmp_path / "e.jsonl", [("id0", [1.0], [0.0])])
    with pytest.raises(DataError, match="id1"):
        load_embeddings(tmp_path / "e.jsonl", [ex(0), ex(1)])


def test_embeddings_mixed_dims_rejected(tmp_path):
    emb_file(tmp_path / "e.jsonl", [("id0", [0.1] * 768, [0.1] * 768), ("id1", [0.1] * 1024, [0.1] * 1024)])
    with pytest.raises(DataError, match="1024"):
        load_embeddings(tmp_path / "e.jsonl", [ex(0), ex(1)])


# -- batching ------------------------------------------------------------------------------------


def test_batch_merge_rule():
    assert [b.size for b in batch_iter(9, 4, 0)] == [4, 5]
    assert [b.size for b in batch_iter(8, 4, 0)] == [4, 4]
    assert [b.size for b in batch_iter(3, 2, 0)] == [3]


def test_batch_order_is_seeded():
    a, b, c = batch_iter(50, 4, 1), batch_iter(50, 4, 1), batch_iter(50, 4, 2)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))
    assert sorted(np.concatenate(a)) == sorted(np.concatenate(c)) == list(range(50))


@pytest.mark.parametrize("n", range(2, 30))
def test_no_singleton_batches(n):
    assert min(b.size for b in batch_iter(n, 4, n)) >= 2


def test_batch_size_validated():
    with pytest.raises(ConfigError):
        batch_iter(10, 1, 0)


# -- synthetic corpus ----------------------------------------------------------------------------


def test_synth_is_seeded():
    cfg = SynthConfig(languages=(("en", 30, 10, 10), ("fr", 20, 5, 5)))
    a, b = synth_generate(cfg), synth_generate(cfg)
    assert a.splits() == b.splits() and a.manifest == b.manifest
    assert synth_generate(SynthConfig(languages=cfg.languages, seed=1)).train != a.train


def test_synth_splits_disjoint_and_valid():
    corpus = synth_generate(SynthConfig(languages=(("en", 30, 10, 10), ("fr", 20, 5, 5))))
    ids = [e.id for split in corpus.splits().values() for e in split]
    assert len(ids) == len(set(ids)) == 80
    assert all(e.labels for split in corpus.splits().values() for e in split)


def test_synth_alphabets_are_disjoint():
    corpus = synth_generate(SynthConfig(languages=(("en", 20, 1, 1), ("fr", 20, 1, 1), ("de", 20, 1, 1))))
    chars = {lang: set("".join(e.title + e.body for e in corpus.train if e.language == lang)) - {" "}
             for lang in ("en", "fr", "de")}
    assert not (chars["en"] & chars["fr"]) and not (chars["fr"] & chars["de"]) and not (chars["en"] & chars["de"])


def test_prior_matches_marginals_exactly():
    cfg = SynthConfig(correlations=((0, 1, 1.0), (2, 5, -0.5)))
    prior = label_prior(cfg)
    assert prior[0] == 0.0
    codes = np.arange(prior.size)
    marg = [float(prior[(codes >> j) & 1 == 1].sum()) for j in range(cfg.num_labels)]
    np.testing.assert_allclose(marg, cfg.marginals, atol=1e-9)


def test_train_marginals_within_three_points():
    corpus = synth_generate(SynthConfig())
    assert len(corpus.train) >= 500
    for j, p in enumerate(SynthConfig().marginals):
        freq = np.mean([j in e.labels for e in corpus.train])
        assert abs(freq - p) <= 0.03, (j, freq, p)


def test_noiseless_signal_is_recovered_by_counting():
    corpus = synth_generate(SynthConfig(noise=0.0))
    model = BayesModel(corpus.manifest)
    for split in corpus.splits().values():
        preds = [frozenset(int(j) for j in np.flatnonzero(model.signature_counts(e) > 0)) for e in split]
        assert micro_f1(preds, [e.labels for e in split]) == 1.0


def test_bayes_predictor_at_default_noise():
    corpus = synth_generate(SynthConfig(noise=0.1))
    for split in corpus.splits().values():
        score = micro_f1([corpus.bayes[e.id] for e in split], [e.labels for e in split])
        assert score >= 0.95


def test_bayes_model_rebuilds_from_manifest():
    corpus = synth_generate(SynthConfig(languages=(("en", 40, 10, 10),)))
    manifest = json.loads(json.dumps(corpus.manifest))
    model = BayesModel(manifest)
    assert all(model.predict(e) == corpus.bayes[e.id] for e in corpus.test)


@pytest.mark.parametrize("kw", [{"noise": 0.5}, {"languages": ()}, {"num_labels": 3},
                                {"languages": (("en", 1, 1, 1), ("en", 1, 1, 1))}])
def test_synth_config_validation(kw):
    with pytest.raises(ConfigError):
        SynthConfig(**kw)
