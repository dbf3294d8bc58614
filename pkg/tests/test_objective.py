import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from namelink import autodiff as ad
from namelink.encoder import ModelConfig, NumericError, as_leaves, init_parameters
from namelink.objective import (TASK_1_1, TASK_M_N, LossWeights, build_loss_batch, loss_inter,
                                loss_intra, loss_null, name_pooling, pooling_matrix,
                                similarity_matrix, total_loss)
from namelink.datamodel import Mention, ReferredPerson

from conftest import make_example


def neg_log_sigmoid(z):
    return math.log1p(math.exp(-z))


def test_intra_two_by_two_fixture():
    s = np.array([[1.0, -1.0], [-1.0, 1.0]])
    loss, count = loss_intra(s, [(0, 0), (1, 1)])
    assert count == 2
    assert loss == pytest.approx(2 * math.log1p(math.exp(-2)), abs=1e-12)
    assert loss == pytest.approx(0.25386, abs=1e-5)


def test_intra_ignores_people_without_links():
    s = np.array([[1.0, -1.0], [0.3, 0.2]])
    full, _ = loss_intra(s, [(0, 0)])
    assert full > 0 and loss_intra(s, [])[1] == 0


def test_inter_closed_forms():
    assert loss_inter(1.0, "positive") == pytest.approx(neg_log_sigmoid(5.0), abs=1e-9)
    assert loss_inter(-0.2, "negative") == pytest.approx(neg_log_sigmoid(1.0), abs=1e-9)
    assert loss_inter(0.0, "positive", alpha=5.0, beta=2.0) == pytest.approx(
        neg_log_sigmoid(2.0), abs=1e-9)
    with pytest.raises(ValueError):
        loss_inter(np.ones((1, 2)), "positive")


def test_inter_tensor_form_matches_scalar_form():
    s = ad.Tensor(np.array([0.3, -0.4]).reshape(2, 1, 1))
    value = loss_inter(s, np.array([1, 0]), ad.Tensor(np.asarray(5.0)), ad.Tensor(np.asarray(0.0)))
    expect = (loss_inter(0.3, "positive") + loss_inter(-0.4, "negative")) / 2
    assert float(value.data) == pytest.approx(expect, abs=1e-12)


def test_null_closed_forms():
    loss, count = loss_null(np.array([1.0, 0.5, -0.3]), linked={2}, selected={0})
    assert count == 2
    expect = (neg_log_sigmoid(1.0) + neg_log_sigmoid(0.3)) / 2
    assert loss == pytest.approx(expect, abs=1e-9)
    single, _ = loss_null(np.array([1.0]), selected={0})
    assert single == pytest.approx(0.31326, abs=1e-5)
    with pytest.raises(ValueError):
        loss_null(np.zeros(2), linked={0}, selected={0})


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (3, 5), elements=st.floats(-5, 5)),
       hnp.arrays(np.float64, (4, 5), elements=st.floats(-5, 5)))
def test_cosine_similarities_are_bounded(names, boxes):
    if np.any(np.linalg.norm(names, axis=1) < 1e-3) or np.any(np.linalg.norm(boxes, axis=1) < 1e-3):
        return
    s = similarity_matrix(names, boxes)
    assert s.shape == (3, 4)
    assert np.all(np.abs(s) <= 1 + 1e-12)


def test_similarity_with_null_row_and_zero_norm():
    names = np.array([[1.0, 0.0]])
    boxes = np.array([[1.0, 0.0], [0.0, 2.0]])
    s = similarity_matrix(names, boxes, include_null=True, null_vector=np.array([0.0, 1.0]))
    np.testing.assert_allclose(s, [[1.0, 0.0], [0.0, 1.0]], atol=1e-12)
    with pytest.raises(NumericError):
        similarity_matrix(np.zeros((1, 2)), boxes)


def test_name_pooling_averages_mentions():
    person = ReferredPerson("a", (Mention(0, 1), Mention(2, 4)))
    pool = pooling_matrix([person], 5)
    np.testing.assert_allclose(pool, [[1 / 3, 0, 1 / 3, 1 / 3, 0]])
    hidden = np.arange(10.0).reshape(5, 2)
    np.testing.assert_allclose(name_pooling(hidden, [person]), [[(0 + 4 + 6) / 3, (1 + 5 + 7) / 3]])


def test_total_loss_respects_task_and_weights():
    cfg = ModelConfig(d_v=4, vocab_size=6, d_model=8, n_layers=1, n_heads=2, dropout_rate=0.0)
    leaves = as_leaves(init_parameters(cfg), False)
    mn = build_loss_batch(TASK_M_N, [make_example()], cfg, selected=[{2}])
    _, br = total_loss(leaves, mn, cfg)
    assert br.l_inter == 0 and br.link_count == 2 and br.null_count == 3
    assert br.total == pytest.approx(br.l_intra + br.l_null)
    _, br0 = total_loss(leaves, mn, cfg, LossWeights(intra=0.0))
    assert br0.total == pytest.approx(br.l_null)
    one = make_example(names=1, xs=(0.3,), links=((0, 0),))
    b11 = build_loss_batch(TASK_1_1, [one], cfg, labels=[1])
    _, br1 = total_loss(leaves, b11, cfg)
    assert br1.l_intra == 0 and br1.l_null == 0 and br1.pair_count == 1
