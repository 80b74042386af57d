import csv
import math

import numpy as np
import pytest

from boxcorr.augmentation import ConfigError
from boxcorr.config import TrainConfig, apply_overrides, config_hash, from_dict, to_dict
from boxcorr.losses import match_groups
from boxcorr.synth import EVAL, TRAIN, SynthSpec, generate_synth, item_rng, render_scene
from boxcorr.tensor import NonFiniteError
from boxcorr.training import (
    METRIC_FIELDS,
    Optimizer,
    TrainingAborted,
    cosine_lr,
    ema_momentum,
    ema_update,
    feature_stats,
    lars_step,
    layout_batch,
    make_network,
    make_viewset,
    moving_average,
    read_metrics,
    retrieval_accuracy,
    run_training,
    sgd_step,
    train_batch,
    train_step,
)

from conftest import tiny_config

# ---------------------------------------------------------------- schedules


def test_cosine_lr_examples():
    peak = 0.1
    assert cosine_lr(0, 100, 10, peak) == 0.0
    assert cosine_lr(5, 100, 10, peak) == pytest.approx(0.05)
    assert cosine_lr(10, 100, 10, peak) == pytest.approx(peak)
    assert cosine_lr(55, 100, 10, peak) == pytest.approx(0.5 * peak, abs=1e-15)
    assert cosine_lr(100, 100, 10, peak) < 1e-8 * peak


def test_cosine_lr_is_monotone_after_warmup():
    vals = [cosine_lr(s, 50, 5, 1.0) for s in range(5, 51)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_peak_lr_scaling_rule():
    cfg = TrainConfig(base_lr=0.4, batch_size=64)
    assert cfg.peak_lr == pytest.approx(0.1)


def test_ema_momentum_ramp():
    assert ema_momentum(0, 200, 0.996) == pytest.approx(0.996)
    assert ema_momentum(100, 200, 0.996) == pytest.approx(0.998)
    assert ema_momentum(200, 200, 0.996) == 1.0


# ---------------------------------------------------------------- EMA


def test_ema_examples():
    for m, want in ((1.0, 0.0), (0.0, 1.0), (0.99, 0.01)):
        tgt = {"w": np.zeros(3)}
        ema_update({"w": np.ones(3)}, tgt, m)
        np.testing.assert_allclose(tgt["w"], want, atol=1e-15)


def test_ema_rejects_mismatched_registry():
    with pytest.raises(KeyError):
        ema_update({"a": np.ones(2)}, {"b": np.ones(2)}, 0.5)
    with pytest.raises(ValueError):
        ema_update({"a": np.ones(2)}, {"a": np.ones(3)}, 0.5)


def test_ema_contraction_and_online_untouched(rng):
    online = {"w": rng.normal(size=(4, 4)).astype(np.float32)}
    frozen = online["w"].copy()
    tgt = {"w": rng.normal(size=(4, 4))}
    for m in (0.0, 0.5, 0.97, 0.9999999):
        old = tgt["w"].copy()
        (lhs, rhs, slack), = ema_update(online, tgt, m).values()
        assert lhs <= rhs + slack
        assert np.linalg.norm(tgt["w"] - old) == pytest.approx(lhs)
    assert online["w"].tobytes() == frozen.tobytes()


# ---------------------------------------------------------------- optimizers


def test_lars_hand_example():
    w = np.array([[2.0, 0.0]])
    g = np.array([[0.0, 1.0]])
    lars_step({"w": w}, {"w": g}, lr=1.0, eta=0.001, eps=0.0)
    np.testing.assert_allclose(w, [[2.0, -0.002]], atol=1e-15)


def test_lars_gradient_scale_invariance(rng):
    w0 = rng.normal(size=(3, 5))
    g = rng.normal(size=(3, 5))
    a, b = w0.copy(), w0.copy()
    lars_step({"w": a}, {"w": g}, lr=0.5, eps=0.0)
    lars_step({"w": b}, {"w": 10 * g}, lr=0.5, eps=0.0)
    np.testing.assert_allclose(a, b, atol=1e-14)


def test_lars_zero_gradient_and_bias_exclusion():
    w = np.ones((2, 2))
    lars_step({"w": w}, {"w": np.zeros((2, 2))}, lr=1.0)
    np.testing.assert_array_equal(w, 1.0)
    b = np.ones(3)
    lars_step({"b": b}, {"b": np.full(3, 0.5)}, lr=0.1, weight_decay=1.0)
    np.testing.assert_allclose(b, 0.95)  # plain step, no trust ratio, no decay


def test_sgd_momentum_and_decay():
    w = np.array([[1.0]])
    bufs = {}
    sgd_step({"w": w}, {"w": np.array([[1.0]])}, lr=0.1, weight_decay=0.5, momentum=0.9, buffers=bufs)
    np.testing.assert_allclose(w, [[1.0 - 0.1 * 1.5]])
    sgd_step({"w": w}, {"w": np.array([[0.0]])}, lr=0.1, weight_decay=0.0, momentum=0.9, buffers=bufs)
    np.testing.assert_allclose(w, [[0.85 - 0.1 * 0.9 * 1.5]])


def test_non_finite_gradient_leaves_every_param_untouched():
    a, b = np.ones(2), np.ones((2, 2))
    for step in (lambda p, g: sgd_step(p, g, 0.1), lambda p, g: lars_step(p, g, 0.1)):
        with pytest.raises(NonFiniteError, match="b"):
            step({"a": a, "b": b}, {"a": np.ones(2), "b": np.array([[1.0, np.nan], [0.0, 0.0]])})
        np.testing.assert_array_equal(a, 1.0)
        np.testing.assert_array_equal(b, 1.0)


# ---------------------------------------------------------------- config


def test_config_round_trip_and_hash():
    cfg = apply_overrides(TrainConfig(), ["K=8", "lambda=0.05", "aux_mode=prediction", "roi=ra3"])
    assert cfg.aug.K == 8 and cfg.loss.lam == 0.05 and cfg.roi.name == "ra3"
    again = from_dict(to_dict(cfg))
    assert again == cfg and config_hash(again) == config_hash(cfg)
    assert config_hash(cfg) != config_hash(TrainConfig())


def test_config_errors_name_the_field():
    with pytest.raises(ConfigError) as err:
        apply_overrides(TrainConfig(), {"s_view": 0.4}).validate()
    assert err.value.field == "s_view"
    with pytest.raises(ConfigError, match="unknown"):
        apply_overrides(TrainConfig(), {"nonsense": 1})
    with pytest.raises(ConfigError, match="unknown field"):
        from_dict({"aug": {"bogus": 1}})
    with pytest.raises(ConfigError, match="ema_momentum"):
        TrainConfig(ema_momentum=1.5).validate()


def test_default_schedule_length():
    cfg = TrainConfig()
    assert cfg.total_steps == 200 and cfg.warmup_steps == 10 and cfg.batch_size == 16


# ---------------------------------------------------------------- synthetic data


def test_synth_determinism_and_metadata():
    spec = SynthSpec()
    imgs, meta = generate_synth(spec, 3)
    again, _ = generate_synth(spec, 3)
    assert imgs.tobytes() == again.tobytes()
    assert generate_synth(spec, 0)[0].shape == (0, 96, 96, 3)
    assert imgs.shape == (3, 96, 96, 3) and 0 <= imgs.min() and imgs.max() <= 1
    for shapes in meta:
        assert 2 <= len(shapes) <= 5
        for s in shapes:
            assert 0 <= s.box.x1 < s.box.x2 <= 1 and 0 <= s.box.y1 < s.box.y2 <= 1


def test_train_and_eval_splits_are_disjoint():
    cfg = TrainConfig()
    train = {render_scene(cfg.synth, item_rng(cfg.synth.seed, TRAIN, i))[0].tobytes() for i in range(20)}
    evals = {render_scene(cfg.synth, item_rng(cfg.eval_seed, EVAL, i))[0].tobytes() for i in range(20)}
    assert len(train) == 20 and not train & evals


def test_batches_are_stable_and_distinct():
    cfg = tiny_config()
    a, b = train_batch(cfg, 1), train_batch(cfg, 1)
    assert all(x.images[0].tobytes() == y.images[0].tobytes() for x, y in zip(a, b))
    assert a[0].images[0].tobytes() != train_batch(cfg, 2)[0].images[0].tobytes()
    assert make_viewset(cfg, EVAL, 0).images[0].tobytes() != a[0].images[0].tobytes()


# ---------------------------------------------------------------- train step


def test_exact_noop_step():
    # step 0 sits at the start of warmup (lr = 0); with m = 1 nothing may move
    cfg = tiny_config(ema_momentum=1.0)
    net = make_network(cfg)
    before = {k: v.tobytes() for k, v in net.registry().items()}
    res = train_step(net, Optimizer("sgd", 0.0, 0.0), train_batch(cfg, 1), cfg, 0)
    assert res.lr == 0.0 and res.m == 1.0
    assert {k: v.tobytes() for k, v in net.registry().items()} == before


def test_step_updates_online_and_leaves_target_grad_free():
    cfg = tiny_config()
    net = make_network(cfg)
    before = {k: v.data.copy() for k, v in net.online.items()}
    res = train_step(net, Optimizer("sgd", 0.9, 0.0), train_batch(cfg, 2), cfg, 2)
    assert res.breakdown.pair_count > 0 and res.ema_ratio <= 1.0 + 1e-6
    assert any(not np.array_equal(before[k], v.data) for k, v in net.online.items())
    assert all(t.grad is None for t in net.target.values())


def test_identical_fresh_steps_give_identical_breakdowns():
    cfg = tiny_config(**{"aux_mode": "prediction", "lambda": 0.05})
    results = []
    for _ in range(2):
        net = make_network(cfg)
        results.append(train_step(net, Optimizer("sgd", 0.9, 0.0), train_batch(cfg, 1), cfg, 1).breakdown)
    assert results[0] == results[1]


def test_all_degenerate_batch_is_skipped():
    cfg = tiny_config()
    batch = train_batch(cfg, 1)
    for vs in batch:
        vs.boxes_base = vs.boxes_base[:0]
    res = train_step(make_network(cfg), Optimizer("sgd", 0.0, 0.0), batch, cfg, 1)
    assert res.skipped and res.breakdown is None and res.fault is None


def test_layout_shapes_follow_the_contract():
    cfg = tiny_config(**{"aug.V": 3})
    layout = layout_batch(train_batch(cfg, 1), cfg.roi)
    assert layout.view_images.shape == (2 * 3, 32, 32, 3)
    assert layout.global_boxes.shape == (layout.n_global, 4)
    assert layout.groups.pair_count > 0


# ---------------------------------------------------------------- probes


def test_retrieval_mock_copy_is_perfect(rng):
    emb = rng.normal(size=(8, 16))
    table = np.concatenate([emb, emb])
    groups = match_groups([(0, 0, 1, list(range(8)), list(range(8, 16)))], 1)
    assert retrieval_accuracy(table, groups) == (1.0, 8)


def test_retrieval_random_embeddings_sit_at_chance(rng):
    k, trials = 8, 400
    matches = [(t, 0, 1, list(range(2 * k * t, 2 * k * t + k)), list(range(2 * k * t + k, 2 * k * (t + 1))))
               for t in range(trials)]
    acc, n = retrieval_accuracy(rng.normal(size=(2 * k * trials, 32)), match_groups(matches, trials))
    assert n >= 2000 and abs(acc - 1 / k) <= 0.05


def test_feature_stats_signatures():
    same = feature_stats(np.tile([[1.0, 2.0, 3.0]], (5, 1)))
    assert same["min_std"] == pytest.approx(0.0, abs=1e-15) and same["mean_cos"] == pytest.approx(1.0)
    ortho = feature_stats(np.eye(4))
    assert ortho["mean_cos"] == pytest.approx(0.0, abs=1e-15)


def test_moving_average():
    np.testing.assert_allclose(moving_average(np.arange(5.0), 2), [0.5, 1.5, 2.5, 3.5])
    assert moving_average(np.ones(3), 5).size == 0


# ---------------------------------------------------------------- full runs


def test_tiny_run_writes_artifacts(tmp_path):
    cfg = tiny_config()
    report = run_training(cfg, tmp_path)
    assert report["steps"] == 4 and report["faults"] == 0
    assert (tmp_path / "config.json").exists() and (tmp_path / "report.json").exists()
    ckpts = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
    assert ckpts == ["final.ckpt", "step_000002.ckpt"]
    with open(tmp_path / "metrics.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == METRIC_FIELDS and len(rows) == 5
    assert all(r[-1] == "0" for r in rows[1:])
    m = read_metrics(tmp_path / "metrics.csv")
    assert np.all(np.isfinite(m["l_byol"])) and np.all(m["pair_count"] > 0)
    assert 0.0 <= report["eval"]["retrieval_top1"] <= 1.0


def test_tiny_runs_are_bitwise_reproducible(tmp_path):
    cfg = tiny_config()
    run_training(cfg, tmp_path / "a")
    run_training(cfg, tmp_path / "b")
    for rel in ("metrics.csv", "checkpoints/final.ckpt", "report.json"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_three_consecutive_faults_abort(tmp_path, monkeypatch):
    import boxcorr.training as tr

    def poisoned(*args, **kwargs):
        raise NonFiniteError("log: non-finite output")

    monkeypatch.setattr(tr, "forward_losses", poisoned)
    with pytest.raises(TrainingAborted, match="3 consecutive"):
        run_training(tiny_config(), tmp_path)


def test_isolated_fault_is_recorded_and_skipped(tmp_path, monkeypatch):
    import boxcorr.training as tr

    real, calls = tr.forward_losses, []

    def flaky(*args, **kwargs):
        calls.append(1)
        if len(calls) == 2:
            raise NonFiniteError("div: non-finite output")
        return real(*args, **kwargs)

    monkeypatch.setattr(tr, "forward_losses", flaky)
    report = run_training(tiny_config(), tmp_path)
    assert report["faults"] == 1
    steps = read_metrics(tmp_path / "metrics.csv")["step"]
    assert list(steps) == [1.0, 3.0, 4.0]


def test_regression_and_local_modes_train(tmp_path):
    for i, extra in enumerate([
        {"aux_mode": "regression", "lambda": 0.05},
        {"aug.local_views": 4},
        {"roi": "grid2"},
        {"roi": "avg", "aug.V": 3},
    ]):
        report = run_training(tiny_config(**extra), tmp_path / str(i))
        assert report["faults"] == 0, extra
        assert math.isfinite(report["eval"]["min_std"])
