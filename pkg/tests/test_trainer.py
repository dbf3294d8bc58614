from dataclasses import replace
from itertools import islice

import numpy as np
import pytest

from namelink.datamodel import BoundingBox, ConfigurationError, FilterPolicy, filter_examples
from namelink.encoder import ModelConfig, init_parameters
from namelink.objective import TASK_1_1, TASK_M_N, build_loss_batch
from namelink.synthgen import generate_examples
from namelink.trainer import (PRESETS, OptimizerState, TrainConfig, TrainItem, adamw_update,
                              augment_spatial, learning_rate_at, make_batches, partition_tasks,
                              prepare_items, sample_negatives, train_loop, train_step)

from conftest import make_example


def single(example_id, identity):
    return make_example(example_id, names=1, xs=(0.3,), links=((0, 0),), identities=[identity])


def test_partition_by_one_name_one_box():
    a = single("a", "x")
    b = make_example("b", names=2, xs=(0.3,), links=((0, 0),))
    ones, rest = partition_tasks([a, b])
    assert ones == [a] and rest == [b]


def test_schedule_and_batches():
    cfg = TrainConfig(batch_size=2)
    stream = make_batches(([1], [2, 3]), cfg, np.random.default_rng(0))
    tags = [t for t, _ in islice(stream, 6)]
    assert tags == [TASK_1_1, TASK_M_N, TASK_M_N] * 2
    only = make_batches(([1], []), replace(cfg, task_ratio=(1, 0)), np.random.default_rng(0))
    assert {t for t, _ in islice(only, 5)} == {TASK_1_1}
    with pytest.raises(ConfigurationError):
        next(make_batches(([], [2]), cfg, np.random.default_rng(0)))
    s1 = [b for _, b in islice(make_batches(([1, 2], [3, 4]), cfg, np.random.default_rng(9)), 8)]
    s2 = [b for _, b in islice(make_batches(([1, 2], [3, 4]), cfg, np.random.default_rng(9)), 8)]
    assert s1 == s2


def test_negatives_never_reuse_own_identity():
    pool = [TrainItem(single(f"e{i}", f"id{i % 3}"), [(0, 0)], set()) for i in range(6)]
    items, labels, skipped = sample_negatives(pool, 1.0, np.random.default_rng(1))
    assert labels == [0] * 6 and skipped == 0
    by_id = {it.example.example_id: it for it in pool}
    for orig, neg in zip(pool, items):
        donor = next(p for p in pool if p.example.detections[0] is neg.example.detections[0])
        assert donor.identity != orig.identity
        assert neg.links == []
    assert by_id  # pool untouched
    kept, labels, _ = sample_negatives(pool, 0.0, np.random.default_rng(1))
    assert labels == [1] * 6 and kept == pool


def test_single_identity_pool_skips_negatives():
    pool = [TrainItem(single("a", "x"), [(0, 0)], set()), TrainItem(single("b", "x"), [(0, 0)], set())]
    _, labels, skipped = sample_negatives(pool, 1.0, np.random.default_rng(0))
    assert skipped == 2 and labels == [1, 1]


def test_flip_and_translate():
    ex = make_example(names=1, xs=(0.1,), links=((0, 0),))
    ex.detections[0].box = BoundingBox(0.1, 0.2, 0.3, 0.4)
    ex.detections[0].face_box = BoundingBox(0.15, 0.2, 0.25, 0.3)
    flipped = augment_spatial(ex, "flip")
    assert flipped.detections[0].box.as_list() == pytest.approx([0.7, 0.2, 0.9, 0.4])
    assert augment_spatial(flipped, "flip").detections[0].box.as_list() == pytest.approx(
        ex.detections[0].box.as_list())
    moved = augment_spatial(ex, "translate", np.random.default_rng(3))
    b0, b1 = ex.detections[0].box, moved.detections[0].box
    assert (b1.width, b1.height) == pytest.approx((b0.width, b0.height))
    assert moved.detections[0].visual_feature is ex.detections[0].visual_feature


def test_zero_gradient_step_applies_only_weight_decay():
    params = {"w.w": np.ones(3), "w.b": np.ones(3)}
    state = OptimizerState.zeros(params)
    cfg = TrainConfig(learning_rate=0.1, weight_decay=0.5)
    adamw_update(params, {}, state, 0.1, cfg)
    np.testing.assert_allclose(params["w.w"], 0.95)
    np.testing.assert_allclose(params["w.b"], 1.0)


def test_adam_first_step_moves_by_learning_rate():
    params = {"w.w": np.zeros(2)}
    state = OptimizerState.zeros(params)
    adamw_update(params, {"w.w": np.array([3.0, -0.5])}, state, 0.01, TrainConfig(weight_decay=0))
    np.testing.assert_allclose(params["w.w"], [-0.01, 0.01], rtol=1e-6)


def test_warmup():
    cfg = TrainConfig(learning_rate=1e-3, warmup_steps=10)
    assert learning_rate_at(5, cfg) == pytest.approx(5e-4)
    assert learning_rate_at(50, cfg) == 1e-3


def _overfit_setup():
    mcfg = ModelConfig(d_v=4, vocab_size=6, d_model=16, n_layers=1, n_heads=2, dropout_rate=0.0)
    batch = build_loss_batch(TASK_M_N, [make_example("a"), make_example("b", links=((0, 2), (1, 0)))],
                             mcfg, selected=[{2}, set()])
    return mcfg, batch, init_parameters(mcfg), TrainConfig(learning_rate=3e-3, weight_decay=0.0)


def test_fixed_batch_loss_decreases():
    mcfg, batch, params, cfg = _overfit_setup()
    state = OptimizerState.zeros(params)
    losses = [train_step(params, state, batch, mcfg, cfg)[2].total for _ in range(50)]
    rises = sum(b > a for a, b in zip(losses[:20], losses[1:20]))
    assert rises <= 2
    assert losses[-1] < 0.8 * losses[0]


def test_train_step_is_deterministic():
    runs = []
    for _ in range(2):
        mcfg, batch, params, cfg = _overfit_setup()
        mcfg = replace(mcfg, dropout_rate=0.2)
        state = OptimizerState.zeros(params)
        for _ in range(3):
            train_step(params, state, batch, mcfg, cfg)
        runs.append(params)
    for k in runs[0]:
        np.testing.assert_array_equal(runs[0][k], runs[1][k])


@pytest.fixture(scope="module")
def corpus(world):
    exs = filter_examples([e for e, _ in generate_examples(world, 300)], FilterPolicy())
    return prepare_items(exs[:240]), exs[240:]


def test_train_loop_logs_and_keeps_best(corpus, world):
    items, val = corpus
    cfg = replace(PRESETS["tiny"], max_steps=12, validate_every=5)
    res = train_loop(items, val, cfg, world.config.d_v, world.vocab_size)
    assert [r["step"] for r in res.log] == [5, 10]
    assert res.best_val_accuracy == max(r["val_accuracy"] for r in res.log)
    again = train_loop(items, val, cfg, world.config.d_v, world.vocab_size)
    for k in res.params:
        np.testing.assert_array_equal(res.params[k], again.params[k])


def test_zero_steps_returns_initial_parameters(corpus, world):
    items, val = corpus
    cfg = replace(PRESETS["tiny"], max_steps=0)
    res = train_loop(items, val, cfg, world.config.d_v, world.vocab_size)
    assert res.log == []
    init = init_parameters(cfg.model_config(world.config.d_v, world.vocab_size))
    for k in init:
        np.testing.assert_array_equal(res.params[k], init[k])


def test_config_round_trip_and_validation():
    cfg = PRESETS["desk"]
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
