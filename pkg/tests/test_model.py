import json
from pathlib import Path

import numpy as np
import pytest

from _tiny_run import tiny_run
from framecl import dcore
from framecl.errors import ConfigError, DataError, UsageError
from framecl.losses import ContrastiveConfig
from framecl.model import (
    Checkpoint,
    ModelConfig,
    ModelParams,
    encode_pair,
    forward_batch,
    init_params,
    make_views,
    predict_probabilities,
)
from framecl.thresholds import ThresholdTable
from framecl.train import batch_objective, label_matrix
from framecl.verify import check_model_gradient

FIXTURES = Path(__file__).parent / "fixtures"


def small(**kw):
    return ModelConfig(**{"d_in": 12, "d_h": 5, "d_p": 3, "num_labels": 4, **kw})


def batch(b=4, d_in=12, seed=0):
    rng = np.random.default_rng(seed)
    t, body = rng.normal(size=(b, d_in)), rng.normal(size=(b, d_in))
    return t, body, 0.5 * (t + body)


# -- config and init -------------------------------------------------------------


@pytest.mark.parametrize("kw", [{"d_p": 1}, {"d_h": 0}, {"view_dropout": 0.0}, {"view_dropout": 1.0}])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        small(**kw)


def test_init_is_deterministic():
    a, b = init_params(small(init_seed=7)), init_params(small(init_seed=7))
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["encoder.weight"], init_params(small(init_seed=8))["encoder.weight"])


def test_init_shapes_and_bounds():
    cfg = ModelConfig(d_in=16384)
    p = init_params(cfg)
    assert p["encoder.weight"].shape == (16384, 64)
    assert p["contrastive_head.weight"].shape == (128, 32)
    assert p["classification_head.weight"].shape == (128, 14)
    assert np.max(np.abs(p["encoder.weight"])) <= 1 / np.sqrt(16384)
    assert np.max(np.abs(p["classification_head.weight"])) <= 1 / np.sqrt(128)
    assert all(not np.any(p[k]) for k in p if k.endswith(".bias"))
    p.check(cfg)


def test_check_rejects_bad_params():
    cfg = small()
    p = init_params(cfg)
    p["encoder.bias"] = np.full(5, np.nan)
    with pytest.raises(ConfigError):
        p.check(cfg)
    with pytest.raises(ConfigError):
        ModelParams({"encoder.weight": np.zeros((12, 5))}).check(cfg)


# -- encode_pair / make_views -------------------------------------------------------


def test_zero_params_give_zero_codes():
    cfg = small()
    t, b, _ = batch()
    assert not np.any(encode_pair(t, b, ModelParams.zeros(cfg), cfg))


def test_shared_encoder_halves():
    cfg = small()
    p = init_params(cfg)
    t, b, _ = batch()
    same = encode_pair(t[0], t[0], p, cfg)
    assert np.array_equal(same[:5], same[5:])
    x, swapped = encode_pair(t, b, p, cfg), encode_pair(b, t, p, cfg)
    assert np.array_equal(x[:, :5], swapped[:, 5:]) and np.array_equal(x[:, 5:], swapped[:, :5])


def test_encode_pair_matches_direct_evaluation():
    cfg = small(init_seed=3)
    p = init_params(cfg)
    p["encoder.bias"] = np.random.default_rng(9).normal(size=5)
    t, b, _ = batch(seed=4)
    want = np.concatenate([np.tanh(t @ p["encoder.weight"] + p["encoder.bias"]),
                           np.tanh(b @ p["encoder.weight"] + p["encoder.bias"])], axis=1)
    np.testing.assert_allclose(encode_pair(t, b, p, cfg), want, rtol=0, atol=1e-14)


def test_single_input_duplicates_whole_code():
    cfg = small(single_input=True)
    p = init_params(cfg)
    t, b, w = batch()
    out = forward_batch((t, b, w), p, cfg).x1.data
    h = np.tanh(w @ p["encoder.weight"])
    np.testing.assert_allclose(out, np.concatenate([h, h], axis=1), atol=1e-14)


def test_encode_pair_width_mismatch():
    cfg = small()
    with pytest.raises(UsageError):
        encode_pair(np.ones(11), np.ones(11), init_params(cfg), cfg)


def test_views():
    cfg = small(view_dropout=0.25)
    x1 = dcore.lift(np.random.default_rng(0).normal(size=(2, 10)))
    a, b = make_views(x1, np.ones((2, 10)), cfg)
    assert a is x1
    np.testing.assert_allclose(b.data, x1.data / 0.75, rtol=1e-15)
    assert not np.any(make_views(x1, np.zeros((2, 10)), cfg)[1].data)
    a, b = make_views(x1, None, cfg)
    assert np.array_equal(a.data, b.data)


# -- forward_batch ------------------------------------------------------------------------


def test_train_mode_doubles_rows_and_interleaves():
    cfg = ModelConfig(d_in=12, d_h=5)
    labels = [frozenset({0}), frozenset({1, 2}), frozenset({3}), frozenset({0, 5})]
    out = forward_batch(batch(), init_params(cfg), cfg, "train", np.random.default_rng(0), labels)
    assert out.y1.shape == (8, 32) and out.y2.shape == (8, 14)
    assert list(out.view_of) == [0, 0, 1, 1, 2, 2, 3, 3]
    assert all(out.labelsets[2 * k] == out.labelsets[2 * k + 1] == labels[k] for k in range(4))
    np.testing.assert_allclose(np.linalg.norm(out.y1.data, axis=1), 1.0, atol=1e-9)
    # even rows are the clean view
    clean = forward_batch(batch(), init_params(cfg), cfg)
    np.testing.assert_allclose(out.y2.data[::2], clean.y2.data, atol=1e-14)


def test_eval_mode_is_deterministic_and_rng_free():
    cfg = small()
    p = init_params(cfg)
    a = forward_batch(batch(), p, cfg, "eval", np.random.default_rng(1))
    b = forward_batch(batch(), p, cfg, "eval", np.random.default_rng(2))
    assert a.y1.shape == (4, 3)
    assert np.array_equal(a.y1.data, b.y1.data) and np.array_equal(a.y2.data, b.y2.data)
    np.testing.assert_allclose(np.linalg.norm(a.y1.data, axis=1), 1.0, atol=1e-9)


def test_forward_errors():
    cfg = small()
    p = init_params(cfg)
    with pytest.raises(UsageError):
        forward_batch((np.zeros((0, 12)),) * 3, p, cfg)
    with pytest.raises(UsageError):
        forward_batch(batch(), p, cfg, "train")
    with pytest.raises(UsageError):
        forward_batch(batch(), p, cfg, "predict")


def test_zero_params_predict_one_half():
    cfg = small()
    np.testing.assert_array_equal(predict_probabilities(batch(), ModelParams.zeros(cfg), cfg), np.full((4, 4), 0.5))


def test_predict_sigmoid_of_logits():
    cfg = small()
    p = ModelParams.zeros(cfg)
    p["classification_head.bias"] = np.array([2.0, -2.0, 0.0, 0.0])
    np.testing.assert_allclose(predict_probabilities(batch(1), p, cfg)[0, :2], [0.8808, 0.1192], atol=5e-5)


def test_predict_is_chunk_invariant():
    cfg = small()
    p = init_params(cfg)
    feats = batch(7)
    np.testing.assert_allclose(predict_probabilities(feats, p, cfg, chunk=2), predict_probabilities(feats, p, cfg),
                               rtol=0, atol=1e-15)


def test_combined_gradient_matches_finite_differences():
    res = check_model_gradient(seeds=range(3))
    assert res.passed, res.detail


def test_alpha_one_zeroes_contrastive_head_gradient():
    cfg = small()
    p = init_params(cfg)
    labels = [frozenset({0}), frozenset({0, 1}), frozenset({2}), frozenset({1})]
    masks = np.random.default_rng(0).random((4, 10)) > 0.2
    for alpha, dead, live in ((1.0, "contrastive_head", "classification_head"),
                              (0.0, "classification_head", "contrastive_head")):
        out = forward_batch(batch(), p, cfg, "train", labelsets=labels, masks=masks.astype(float))
        loss = batch_objective(out, label_matrix(labels, 4), ContrastiveConfig(), alpha)
        grads = dcore.backward(out.graph, loss.combined)
        for part in ("weight", "bias"):
            assert not np.any(grads[out.nodes[f"{dead}.{part}"].node_id])
        assert np.any(grads[out.nodes[f"{live}.weight"].node_id])


# -- checkpoints and regression --------------------------------------------------------


def test_checkpoint_roundtrip_is_byte_stable(tmp_path):
    cfg = small()
    ck = Checkpoint(cfg, init_params(cfg), ["a", "b", "c", "d"], seed=3,
                    thresholds=ThresholdTable.from_thresholds({"en": 0.3}))
    ck.save(tmp_path / "a.zip")
    back = Checkpoint.load(tmp_path / "a.zip")
    assert back.model_config == cfg and back.thresholds == ck.thresholds and back.labels == ck.labels
    assert all(np.array_equal(back.params[k], ck.params[k]) for k in ck.params)
    back.save(tmp_path / "b.zip")
    assert (tmp_path / "a.zip").read_bytes() == (tmp_path / "b.zip").read_bytes()
    assert np.load(tmp_path / "a.zip")["encoder.weight"].shape == (12, 5)


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "x.zip").write_bytes(b"not a zip")
    with pytest.raises(DataError):
        Checkpoint.load(tmp_path / "x.zip")


def test_trained_probabilities_match_frozen_fixture():
    fixture = json.loads((FIXTURES / "tiny_run_probs.json").read_text())
    _, _, result, probs = tiny_run()
    assert result.report.selected_epoch == fixture["selected_epoch"]
    np.testing.assert_allclose(probs, np.array(fixture["probabilities"]), rtol=0, atol=1e-12)
