import numpy as np
import pytest

from namelink import autodiff as ad
from namelink.datamodel import Caption
from namelink.encoder import (InputSizeError, ModelConfig, NumericError, collate, encode,
                              forward, init_parameters, load_checkpoint, no_decay,
                              parameters_digest, save_checkpoint, spatial_feature)
from namelink.objective import TASK_M_N, build_loss_batch, total_loss
from namelink.encoder import as_leaves

from conftest import make_example

RNG = np.random.default_rng(5)


def check_op(fn, *shapes, positive=False):
    """Compare tape gradients of ``sum(w * fn(*xs))`` with central differences."""
    xs = [RNG.normal(size=s) for s in shapes]
    if positive:
        xs = [np.abs(x) + 0.5 for x in xs]
    w = RNG.normal(size=np.shape(fn(*[ad.Tensor(x) for x in xs]).data))

    def value():
        return float(np.sum(w * fn(*[ad.Tensor(x) for x in xs]).data))

    leaves = [ad.Tensor(x, requires_grad=True) for x in xs]
    with ad.Tape() as tape:
        out = ad.sum_all(ad.mul(fn(*leaves), w))
    tape.backward(out)
    for x, leaf in zip(xs, leaves):
        num = ad.numerical_gradient(value, x)
        assert ad.relative_error(leaf.grad, num) < 1e-6


@pytest.mark.parametrize("name,fn,shapes", [
    ("add-broadcast", lambda a, b: a + b, [(3, 4), (4,)]),
    ("mul", lambda a, b: a * b, [(2, 3), (2, 3)]),
    ("matmul", lambda a, b: a @ b, [(2, 3, 4), (4, 5)]),
    ("linear", lambda x, w, b: ad.linear(x, w, b), [(2, 3, 4), (4, 5), (5,)]),
    ("transpose", lambda a: ad.transpose(a, (1, 0, 2)), [(2, 3, 4)]),
    ("getitem", lambda a: a[:, 1:3], [(3, 4)]),
    ("concat", lambda a, b: ad.concat([a, b], axis=1), [(2, 3), (2, 2)]),
    ("layer_norm", lambda x, g, b: ad.layer_norm(x, g, b), [(3, 6), (6,), (6,)]),
    ("softmax", lambda a: ad.softmax(a, axis=-1), [(3, 5)]),
    ("gelu", ad.gelu, [(4, 4)]),
    ("normalize_rows", ad.normalize_rows, [(3, 4)]),
    ("softplus", ad.softplus, [(5,)]),
])
def test_op_gradients(name, fn, shapes):
    check_op(fn, *shapes)


def test_masked_log_softmax_gradient_and_masking():
    mask = np.array([[True, True, False], [True, False, True]])
    check_op(lambda a: ad.masked_log_softmax(a, mask, axis=1) * mask.astype(float), (2, 3))
    out = ad.masked_log_softmax(ad.Tensor(np.zeros((2, 3))), mask, axis=1).data
    np.testing.assert_allclose(np.exp(out)[mask].reshape(2, 2), 0.5)


def test_embedding_gradient_accumulates_repeated_ids():
    table = ad.Tensor(np.zeros((4, 2)), requires_grad=True)
    with ad.Tape() as tape:
        out = ad.sum_all(ad.embedding(table, np.array([1, 1, 3])))
    tape.backward(out)
    np.testing.assert_array_equal(table.grad[:, 0], [0, 2, 0, 1])


def test_no_recording_outside_tape():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    y = ad.gelu(x)
    assert y._backward is None


def tiny_cfg(**kw):
    return ModelConfig(d_v=4, vocab_size=6, d_model=8, n_layers=1, n_heads=2, max_tokens=8,
                       **kw)


def test_total_loss_gradient_matches_finite_differences():
    cfg = tiny_cfg(dropout_rate=0.1, seed=3)
    exs = [make_example("a"), make_example("b", names=2, xs=(0.2, 0.6), links=((1, 0),))]
    batch = build_loss_batch(TASK_M_N, exs, cfg, selected=[{2}, set()])
    params = init_parameters(cfg)
    leaves = as_leaves(params)
    with ad.Tape() as tape:
        loss, _ = total_loss(leaves, batch, cfg, train_mode=True, step=4)
    tape.backward(loss)

    def value():
        return total_loss(as_leaves(params, False), batch, cfg, train_mode=True, step=4)[1].total

    worst = 0.0
    for name in ("tok_emb", "vis_proj.w", "layer0.qkv.w", "layer0.ln2.g", "null_name"):
        num = ad.numerical_gradient(value, params[name], eps=1e-5)
        worst = max(worst, ad.relative_error(leaves[name].grad, num))
    assert worst < 1e-4


def test_padding_does_not_change_other_examples():
    cfg = tiny_cfg(dropout_rate=0.0)
    params = init_parameters(cfg)
    short = make_example("s", names=1, xs=(0.3,), links=((0, 0),))
    long = make_example("l", names=3, xs=(0.05, 0.3, 0.55, 0.75), links=())
    alone = forward(as_leaves(params, False), collate([short.caption], [short.detections], cfg), cfg)
    both = forward(as_leaves(params, False),
                   collate([short.caption, long.caption], [short.detections, long.detections],
                           cfg), cfg)
    np.testing.assert_allclose(both.text.data[0, :2], alone.text.data[0, :2], atol=1e-10)
    np.testing.assert_allclose(both.boxes.data[0, :1], alone.boxes.data[0, :1], atol=1e-10)


def test_dropout_is_seeded_by_step():
    cfg = tiny_cfg(dropout_rate=0.5, seed=1)
    params = as_leaves(init_parameters(cfg), False)
    ex = make_example()
    batch = collate([ex.caption], [ex.detections], cfg)
    a = forward(params, batch, cfg, train_mode=True, step=2).boxes.data
    b = forward(params, batch, cfg, train_mode=True, step=2).boxes.data
    c = forward(params, batch, cfg, train_mode=True, step=3).boxes.data
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)
    e1 = forward(params, batch, cfg).boxes.data
    np.testing.assert_array_equal(e1, forward(params, batch, cfg, step=9).boxes.data)


def test_size_limits_and_non_finite_features():
    cfg = tiny_cfg()
    ex = make_example()
    with pytest.raises(InputSizeError):
        collate([Caption((1,) * 9, True)], [ex.detections], cfg)
    ex.detections[0].visual_feature[0] = np.nan
    with pytest.raises(NumericError):
        collate([ex.caption], [ex.detections], cfg)


def test_spatial_feature_layout():
    ex = make_example(xs=(0.1,), names=1, links=((0, 0),))
    f = spatial_feature(ex.detections[0].box)
    assert f.shape == (7,)
    np.testing.assert_allclose(f[:4], [0.1, 0.1, 0.3, 0.9])


def test_weight_decay_exemptions():
    assert no_decay("layer0.ln1.g") and no_decay("vis_proj.b") and no_decay("inter_alpha")
    assert not no_decay("layer0.qkv.w") and not no_decay("tok_emb")


def test_checkpoint_round_trip(tmp_path):
    cfg = tiny_cfg()
    params = init_parameters(cfg)
    save_checkpoint(tmp_path / "m.ckpt", params, cfg, {"note": 1})
    back, cfg2, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert cfg2 == cfg and meta["note"] == 1
    assert list(back) == list(params)
    for k in params:
        np.testing.assert_array_equal(back[k], params[k].astype(np.float32).astype(np.float64))
    assert parameters_digest(back) == parameters_digest(load_checkpoint(tmp_path / "m.ckpt")[0])
    (tmp_path / "bad.ckpt").write_bytes(b"NOPE")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_encode_shapes():
    cfg = tiny_cfg()
    ex = make_example()
    text, boxes = encode(init_parameters(cfg), ex.caption, ex.detections, cfg)
    assert text.shape == (4, 8) and boxes.shape == (3, 8)
