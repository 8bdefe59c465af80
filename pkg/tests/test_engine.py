import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cloth import engine
from cloth.data import SyntheticSpec, make_gaussian_shift
from cloth.errors import ConfigError, TrainingError
from cloth.numerics import softmax


def _small(seed=0, **kw):
    base = dict(seed=seed, iters=40, batch_size=16, log_interval=20, g_hidden=[8], latent_dim=4, d_hidden=[8])
    base.update(kw)
    return engine.TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_data():
    return make_gaussian_shift(SyntheticSpec(n=120, seed=0))


@given(st.integers(0, 2**32 - 1), st.integers(2, 30), st.integers(2, 8), st.sampled_from([0.1, 1.0, 30.0]))
def test_entropy_loss_within_bounds(seed, n, m, temp):
    t = softmax(np.random.default_rng(seed).normal(size=(n, m)) * temp)
    val, grad = engine.entropy_loss_outputs(t)
    assert -math.log(m) - 1e-9 <= val <= 1e-9
    assert grad.shape == t.shape


def test_entropy_loss_zero_for_identical_rows():
    t = np.tile(softmax(np.array([0.3, 1.2, -0.4])), (10, 1))
    assert abs(engine.entropy_loss_outputs(t)[0]) <= 1e-12


def test_apply_ablation_rows():
    cfg = engine.TrainConfig(seed=0)
    r1 = engine.apply_ablation(cfg, 1)
    assert not r1.adversarial and r1.alpha == r1.beta == r1.gamma == 0
    r7 = engine.apply_ablation(cfg, 7)
    assert r7.adversarial and (r7.alpha, r7.beta, r7.gamma) == (cfg.alpha, cfg.beta, cfg.gamma)
    with pytest.raises(ConfigError):
        engine.apply_ablation(cfg, 8)


def test_config_validation():
    with pytest.raises(ConfigError):
        engine.TrainConfig(seed=0, lr=0).validate()
    with pytest.raises(ConfigError):
        engine.TrainConfig(seed=0, binary_discriminator=True).validate()
    engine.TrainConfig(seed=0, binary_discriminator=True, alpha=0.0).validate()


def test_digest_tracks_fields():
    a = engine.TrainConfig(seed=0)
    assert a.digest() == engine.TrainConfig(seed=0).digest()
    assert a.digest() != dataclasses.replace(a, q=2).digest()


def test_training_is_deterministic(tiny_data):
    src, tgt = tiny_data
    logs = []
    for _ in range(2):
        log = engine.MetricsLog()
        engine.train(_small(log_wall_time=False), src, tgt, log)
        logs.append([engine.format_metrics_row(r) for r in log.rows])
    assert logs[0] == logs[1] and len(logs[0]) == 2


def test_metrics_csv_header(tiny_data, tmp_path):
    src, tgt = tiny_data
    log = engine.MetricsLog(tmp_path / "m.csv")
    engine.train(_small(), src, tgt, log)
    log.close()
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == ",".join(engine.METRIC_COLUMNS)
    assert len(lines) == 3


@pytest.mark.parametrize("variant", [dict(share_ct=True), dict(sinkhorn_mode=True),
                                     dict(binary_discriminator=True, alpha=0.0), dict(adversarial=False),
                                     dict(select_best=True), dict(dropout_adapted=True)])
def test_training_variants_run(tiny_data, variant):
    src, tgt = tiny_data
    model = engine.train(_small(**variant), src, tgt)
    assert 0.0 <= engine.evaluate(model, tgt).accuracy <= 1.0


def test_batch_larger_than_data_rejected(tiny_data):
    src, tgt = tiny_data
    with pytest.raises(ConfigError):
        engine.train(_small(batch_size=500), src, tgt)


def test_non_finite_step_raises_with_checkpoint(tiny_data, monkeypatch):
    src, tgt = tiny_data
    real = engine.generator_step
    calls = {"n": 0}

    def flaky(*a, **k):
        calls["n"] += 1
        if calls["n"] == 5:
            raise TrainingError("non-finite gradient")
        return real(*a, **k)

    monkeypatch.setattr(engine, "generator_step", flaky)
    with pytest.raises(TrainingError) as info:
        engine.train(_small(), src, tgt)
    assert info.value.iteration == 5
    assert info.value.checkpoint is not None


def test_model_save_load_round_trip(tiny_data, tmp_path):
    src, tgt = tiny_data
    model = engine.train(_small(iters=5), src, tgt)
    engine.save_model(tmp_path / "m.json", model, _small())
    back = engine.load_model(tmp_path / "m.json")
    np.testing.assert_array_equal(model.predict_proba(tgt.features), back.predict_proba(tgt.features))


def test_accuracy_report_confusion():
    rep = engine.accuracy_report(np.array([0, 1, 1, 2]), np.array([0, 1, 2, 2]), 3)
    assert rep.accuracy == 0.75
    assert rep.confusion[2, 1] == 1
    np.testing.assert_allclose(rep.per_class, [1.0, 1.0, 0.5])


def test_compare_plans_orders_objectives(gen):
    cost = gen.uniform(size=(40, 3))
    t = softmax(gen.normal(size=(40, 3)))
    rep = engine.compare_plans(t, cost)
    assert rep["amortized"] >= rep["exact_free_pi"] - 1e-12
    assert rep["sinkhorn_small"] <= rep["amortized"] + 1e-6


def test_fixed_cost_amortisation_recovers_row_argmin():
    x, cost = engine.fixed_cost_instance(n=32, num_classes=3, seed=1)
    net, trace = engine.amortize_fixed_cost(x, cost, iters=1500, seed=1, trace_every=500)
    rep = engine.compare_plans(net.run(x)[0], cost)
    assert rep["ratio_amortized_exact"] < 1.02
    assert trace[-1][1] < trace[0][1]
