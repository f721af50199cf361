import logging

import numpy as np
import pytest

from attentive_saliency import metrics as M, model as Mo, optim as O, pipeline as P


def test_zero_gradient_decays_accumulator():
    p = {"w": np.array([1.0, -2.0])}
    st = O.OptimizerState({"w": np.array([4.0, 1.0])}, lr=0.1)
    new, st2 = O.rmsprop_step(p, {"w": np.zeros(2)}, st)
    np.testing.assert_array_equal(new["w"], p["w"])
    np.testing.assert_allclose(st2.acc["w"], [3.6, 0.9])
    assert st2.step == 1 and st.step == 0
    np.testing.assert_array_equal(st.acc["w"], [4.0, 1.0])  # input state untouched


def test_first_step_closed_form():
    g = np.array([3.0, -1e-3, 250.0])
    p = {"w": np.zeros(3)}
    new, _ = O.rmsprop_step(p, {"w": g}, O.OptimizerState.fresh(p, lr=1e-2))
    want = -1e-2 * g / (np.sqrt(0.1) * np.abs(g) + 1e-8)
    np.testing.assert_allclose(new["w"], want, rtol=1e-14)
    # large gradients move by about lr / sqrt(1 - rho)
    assert abs(new["w"][2]) == pytest.approx(1e-2 / np.sqrt(0.1), rel=1e-9)


def test_update_opposes_gradient():
    rng = np.random.default_rng(0)
    p = {"a": rng.normal(size=(3, 4))}
    st = O.OptimizerState.fresh(p, lr=1e-3)
    for _ in range(5):
        g = {"a": rng.normal(size=(3, 4))}
        new, st = O.rmsprop_step(p, g, st)
        assert np.all(np.sign(new["a"] - p["a"]) == -np.sign(g["a"]))
        assert np.all(st.acc["a"] >= 0)
        p = new


def test_rmsprop_rejects_mismatch():
    p = {"a": np.zeros(2)}
    with pytest.raises(ValueError):
        O.rmsprop_step(p, {"b": np.zeros(2)}, O.OptimizerState.fresh(p, 1.0))
    with pytest.raises(ValueError):
        O.rmsprop_step(p, {"a": np.zeros(3)}, O.OptimizerState.fresh(p, 1.0))


def test_schedule():
    cfg = O.TrainConfig()
    assert O.learning_rate(cfg, 0) == 1e-5
    assert O.learning_rate(cfg, 1) == 1e-5
    assert O.learning_rate(cfg, 2) == pytest.approx(1e-6, rel=1e-15)
    assert O.learning_rate(O.TrainConfig(decay_every=3), 5) == 1e-5 / 10


def test_config_parsing():
    cfg = O.TrainConfig.from_dict({"lr": 1e-3, "weights": [-1, 0, 0], "t_steps": 2,
                                   "model": {"width": 4}})
    assert cfg.weights == M.LossWeights(-1, 0, 0)
    assert cfg.model.t_steps == 2 and cfg.model.width == 4
    assert O.TrainConfig.from_dict({"weights": {"alpha": 0, "beta": 0, "gamma": 1}}).weights.gamma == 1
    with pytest.raises(ValueError):
        O.TrainConfig.from_dict({"momentum": 0.9})
    with pytest.raises(ValueError):
        O.TrainConfig(lr=0)
    with pytest.raises(ValueError):
        O.TrainConfig(batch_size=0)


@pytest.fixture(scope="module")
def tiny():
    cfg = O.TrainConfig(lr=1e-3, steps=6, batch_size=2, decay_every=2, t_steps=2,
                        model=Mo.ModelConfig(width=4, n_priors=4), seed=3)
    _, s = P.synth_dataset(2, 3, (18, 24))
    return cfg, P.samples_to_training(s)


def test_train_loop_deterministic_and_scheduled(tiny):
    cfg, data = tiny
    p1, h1 = O.train_loop(cfg, data)
    p2, h2 = O.train_loop(cfg, data)
    assert O.history_csv(h1) == O.history_csv(h2)
    assert all(np.array_equal(p1.tensors[k], p2.tensors[k]) for k in p1.names())
    # 3 samples in batches of 2 means 2 steps per epoch
    assert [r.epoch for r in h1] == [0, 0, 1, 1, 2, 2]
    assert [r.lr for r in h1] == [1e-3, 1e-3, 1e-3, 1e-3, 1e-4, 1e-4]
    assert O.history_csv(h1).splitlines()[0] == "step,epoch,lr,loss,nss,cc,kl"
    p3, _ = O.train_loop(cfg.__class__(**{**cfg.__dict__, "workers": 3}), data)
    assert all(np.array_equal(p1.tensors[k], p3.tensors[k]) for k in p1.names())


def test_batch_gradient_is_mean(tiny):
    cfg, data = tiny
    p = Mo.init_params(0, cfg.model)
    w = cfg.weights
    loss, comps, grads = O.batch_gradient(p, data[:2], w)
    singles = [Mo.loss_and_grads(p, *s, w) for s in data[:2]]
    assert loss == pytest.approx((singles[0][0] + singles[1][0]) / 2, abs=1e-14)
    k = "readout.weight"
    np.testing.assert_allclose(grads[k], (singles[0][2][k] + singles[1][2][k]) / 2, rtol=1e-14)


def test_degenerate_sample_skipped(tiny, caplog):
    cfg, data = tiny
    img, den, fix = data[0]
    bad = (img, den, np.zeros_like(fix))
    p = Mo.init_params(0, cfg.model)
    with caplog.at_level(logging.WARNING):
        res = O.batch_gradient(p, [bad, data[1]], cfg.weights)
    assert "degenerate" in caplog.text
    assert res[0] == pytest.approx(Mo.loss_and_grads(p, *data[1], cfg.weights)[0], abs=1e-14)
    assert O.batch_gradient(p, [bad], cfg.weights) is None
    with pytest.raises(ValueError):
        O.train_loop(cfg, [])


def test_dataset_scores(tiny):
    cfg, data = tiny
    p = Mo.init_params(0, cfg.model)
    s = O.dataset_scores(p, data)
    assert s["nss"] == pytest.approx(np.mean([M.nss(Mo.forward_model(p, d[0]), d[2]) for d in data]))
    assert set(s) == {"nss", "cc", "kl"}
