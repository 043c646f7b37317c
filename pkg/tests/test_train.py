import numpy as np
import pytest

from _tiny_run import tiny_run
from framecl.errors import ConfigError
from framecl.losses import ContrastiveConfig
from framecl.model import ModelConfig, init_params
from framecl.train import AdamState, TrainConfig, adam_step, adam_step_inplace, epoch_seed, train

TINY = ModelConfig(d_in=256, d_h=8, d_p=4, num_labels=4)


def params(seed=0):
    rng = np.random.default_rng(seed)
    return {"w": rng.normal(size=(3, 2)), "b": rng.normal(size=2)}


@pytest.mark.parametrize("kw", [{"batch_size": 1}, {"alpha": 1.5}, {"alpha": -0.1}, {"learning_rate": -1.0},
                                {"epochs": 0}, {"adam_beta1": 1.0}, {"early_stop_patience": 0}])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_profiles():
    assert TrainConfig().learning_rate == 1e-6
    assert TrainConfig.from_profile("synthetic").learning_rate == 1e-2
    assert TrainConfig.from_profile("synthetic", learning_rate=0.5).learning_rate == 0.5
    with pytest.raises(ConfigError):
        TrainConfig.from_profile("gpu")


def test_first_step_moves_by_lr_times_sign():
    cfg = TrainConfig(learning_rate=1e-3)
    p = params()
    g = {k: np.where(np.abs(v) < 0.05, 0.05, v) for k, v in params(1).items()}
    new, state = adam_step(p, g, AdamState.zeros_like(p), cfg)
    assert state.t == 1
    for k in p:
        np.testing.assert_allclose(new[k] - p[k], -1e-3 * np.sign(g[k]), rtol=0, atol=1e-3 * 1e-6)


def test_zero_gradient_leaves_params():
    p = params()
    new, _ = adam_step(p, {k: np.zeros_like(v) for k, v in p.items()}, AdamState.zeros_like(p), TrainConfig(learning_rate=0.1))
    assert all(np.array_equal(new[k], p[k]) for k in p)


def test_two_steps_match_scalar_recurrence():
    lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
    cfg = TrainConfig(learning_rate=lr)
    p0 = {"x": np.array([0.7, -1.2, 3.0])}
    grads = [{"x": np.array([0.3, -0.1, 2.0])}, {"x": np.array([-0.4, 0.5, 1.0])}]
    p, state = p0, AdamState.zeros_like(p0)
    for g in grads:
        p, state = adam_step(p, g, state, cfg)
    for i in range(3):
        x, m, v = float(p0["x"][i]), 0.0, 0.0
        for t, g in enumerate(grads, start=1):
            gi = float(g["x"][i])
            m = b1 * m + (1 - b1) * gi
            v = b2 * v + (1 - b2) * gi * gi
            x -= lr * (m / (1 - b1**t)) / ((v / (1 - b2**t)) ** 0.5 + eps)
        assert p["x"][i] == pytest.approx(x, abs=1e-15)


def test_inplace_agrees_with_functional():
    cfg = TrainConfig(learning_rate=0.01)
    a = params()
    b = {k: v.copy() for k, v in a.items()}
    sa, sb = AdamState.zeros_like(a), AdamState.zeros_like(b)
    for step in range(5):
        g = params(10 + step)
        a, sa = adam_step(a, g, sa, cfg)
        adam_step_inplace(b, g, sb, cfg)
    assert sb.t == 5
    for k in a:
        np.testing.assert_allclose(b[k], a[k], rtol=1e-13, atol=1e-15)


def test_epoch_seeds_differ():
    assert len({epoch_seed(0, e) for e in range(50)}) == 50
    assert epoch_seed(1, 0) != epoch_seed(0, 0)


# -- training loop ------------------------------------------------------------------


def test_zero_learning_rate_is_a_no_op():
    corpus, feats, _, _ = tiny_run(epochs=1)
    run = train(corpus.train, feats["train"], corpus.dev, feats["dev"], TINY, ContrastiveConfig(),
                TrainConfig(learning_rate=0.0, epochs=2))
    init = init_params(TINY)
    assert all(np.array_equal(run.checkpoint.params[k], init[k]) for k in init)
    e0, e1 = run.report.epochs
    assert e0.dev_micro_f1 == e1.dev_micro_f1


def test_training_is_deterministic():
    _, _, a, pa = tiny_run(epochs=2)
    _, _, b, pb = tiny_run(epochs=2)
    assert a.checkpoint.to_bytes() == b.checkpoint.to_bytes()
    assert a.report.records() == b.report.records()
    assert np.array_equal(pa, pb)


def test_report_structure():
    _, _, res, _ = tiny_run(epochs=3)
    recs = res.report.records()
    assert [r["type"] for r in recs] == ["epoch"] * 3 + ["summary"]
    assert sum(r["selected"] for r in recs[:-1]) == 1
    assert recs[-1]["selected_epoch"] == res.checkpoint.extra["selected_epoch"]
    assert res.checkpoint.thresholds is not None
    assert set(res.checkpoint.thresholds.per_language) == {"aa", "bb"}


def test_alpha_one_still_trains_classifier():
    _, _, res, _ = tiny_run(epochs=2, alpha=1.0)
    assert res.report.epochs[0].l_cl > 0
    init = init_params(res.checkpoint.model_config)
    # the contrastive head never moves when only cross-entropy is optimized
    assert np.array_equal(res.checkpoint.params["contrastive_head.weight"], init["contrastive_head.weight"])
    assert not np.array_equal(res.checkpoint.params["classification_head.weight"], init["classification_head.weight"])


def test_empty_splits_rejected():
    corpus, feats, _, _ = tiny_run(epochs=1)
    with pytest.raises(ConfigError):
        train([], feats["train"], corpus.dev, feats["dev"], TINY, ContrastiveConfig(), TrainConfig())
    with pytest.raises(ConfigError):
        train(corpus.train, feats["train"], [], feats["dev"], TINY, ContrastiveConfig(), TrainConfig())
