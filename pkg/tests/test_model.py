import math

import numpy as np
import pytest

from nmtscale.exactsum import ExactSum
from nmtscale.sgd_core import (
    ModelParams,
    SubBatchTensors,
    TrainConfig,
    backward,
    central_difference,
    collect_grads,
    forward,
    label_smoothed_nll,
    log_softmax,
    sentence_losses,
)
from oracles import Pair, gradcheck, reference_loss

CFG = TrainConfig(vocab_size=12, embed_dim=5, num_layers=3, hidden_dim=6)


@pytest.fixture
def params():
    return ModelParams.init(CFG, seed=3)


@pytest.fixture
def pairs(rng):
    return [Pair(rng.integers(1, 12, rng.integers(1, 7)), rng.integers(1, 12, rng.integers(1, 7)), id=i)
            for i in range(5)]


def test_layer_layout(params):
    assert params.layer_names == ["embed", "ff0", "ff1", "ff2", "out"]
    assert params.ff_names() == ["ff0", "ff1", "ff2"]
    assert params.dtype == np.float32
    assert params.num_params == 2 * 12 * 5 + (5 * 6 + 6) + 2 * (6 * 6 + 6) + (6 * 12 + 12)
    assert params.layer_nbytes("out") == (6 * 12 + 12) * 4
    assert params.layer_nbytes("out", 2) == (6 * 12 + 12) * 2


def test_init_is_seeded():
    assert ModelParams.init(CFG, 1).equal(ModelParams.init(CFG, 1))
    assert not ModelParams.init(CFG, 1).equal(ModelParams.init(CFG, 2))


def test_label_smoothed_nll():
    lp = log_softmax(np.array([2.0, 0.0, -1.0]))
    assert math.isclose(label_smoothed_nll(lp, 0, 0.0), -lp[0])
    want = 0.9 * -lp[1] + 0.1 * -lp.mean()
    assert math.isclose(label_smoothed_nll(lp, 1, 0.1), want)
    with pytest.raises(ValueError):
        label_smoothed_nll(lp, 3, 0.1)
    with pytest.raises(ValueError):
        label_smoothed_nll(np.array([0.0, 0.0]), 0, 0.1)


def test_uniform_model_loss_is_log_vocab():
    p = ModelParams.init(CFG, 0).map(lambda k, n, a: np.zeros_like(a))
    b = SubBatchTensors.from_pairs([Pair([1, 2], [3, 4, 5])])
    loss, ntok, _ = forward(p, b, eps=0.1)
    assert ntok == 3
    assert math.isclose(loss, 3 * math.log(12), rel_tol=1e-6)


def test_forward_matches_scalar_reference(params, pairs):
    b = SubBatchTensors.from_pairs(pairs)
    p64 = params.astype(np.float64)
    loss, ntok, _ = forward(p64, SubBatchTensors.from_pairs(pairs), eps=0.1)
    assert ntok == sum(len(p.tgt) for p in pairs) == b.ntokens
    assert math.isclose(loss, reference_loss(p64, pairs, 0.1), rel_tol=1e-12)


def test_padding_does_not_change_results(params, pairs):
    """Grouping sentences differently changes padding but not the total loss or gradient."""
    together = SubBatchTensors.from_pairs(pairs)
    l_all, _, c_all = forward(params, together)
    g_all = collect_grads(backward(c_all, params, exact=True))
    l_parts = 0.0
    acc = None
    for p in pairs:
        l, _, c = forward(params, SubBatchTensors.from_pairs([p]))
        l_parts += l
        g = collect_grads(backward(c, params, exact=True))
        if acc is None:
            acc = g
        else:
            for k in g:
                for n in g[k]:
                    acc[k][n] += g[k][n]
    assert math.isclose(l_all, l_parts, rel_tol=1e-12)
    for k in g_all:
        for n in g_all[k]:
            assert g_all[k][n].value().tobytes() == acc[k][n].value().tobytes()


def test_sentence_losses_sum_to_batch_loss(params, pairs):
    b = SubBatchTensors.from_pairs(pairs)
    per = sentence_losses(params, b, eps=0.1)
    assert len(per) == len(pairs)
    assert math.isclose(sum(per), forward(params, b, eps=0.1)[0], rel_tol=1e-9)


def test_backward_stream_order_and_types(params, pairs):
    _, _, cache = forward(params, SubBatchTensors.from_pairs(pairs))
    stream = list(backward(cache, params))
    assert [name for name, _ in stream] == ["out", "ff2", "ff1", "ff0", "embed"]
    for name, grads in stream:
        for n, g in grads.items():
            assert g.shape == params.layers[name][n].shape and g.dtype == np.float32
    _, _, hcache = forward(params, SubBatchTensors.from_pairs(pairs), half=True)
    for _, grads in backward(hcache, params, grad_scale=128.0):
        assert all(g.dtype == np.uint16 for g in grads.values())
    _, _, cache = forward(params, SubBatchTensors.from_pairs(pairs))
    for _, grads in backward(cache, params, exact=True):
        assert all(isinstance(g, ExactSum) for g in grads.values())


def test_grad_scale_is_linear(params, pairs):
    _, _, cache = forward(params, SubBatchTensors.from_pairs(pairs))
    g1 = collect_grads(backward(cache, params, 1.0))
    g8 = collect_grads(backward(cache, params, 8.0))
    for k in g1:
        for n in g1[k]:
            np.testing.assert_array_equal(g8[k][n], 8 * g1[k][n])


def test_half_forward_is_close(params, pairs):
    b = SubBatchTensors.from_pairs(pairs)
    full = forward(params, b)[0]
    half = forward(params, b, half=True)[0]
    assert math.isclose(full, half, rel_tol=5e-3)


def test_out_of_vocabulary_rejected(params):
    with pytest.raises(ValueError):
        forward(params, SubBatchTensors.from_pairs([Pair([1], [12])]))


def test_concat_preserves_rows(pairs):
    a = SubBatchTensors.from_pairs(pairs[:2])
    b = SubBatchTensors.from_pairs(pairs[2:])
    c = SubBatchTensors.concat([a, b])
    assert c.num_sentences == 5 and c.ids == tuple(range(5))
    for (s, t), p in zip(c.sentences(), pairs):
        assert tuple(s) == p.src and tuple(t) == p.tgt


def test_central_difference_on_a_quadratic():
    theta = np.array([1.0, -2.0, 0.5])
    g = central_difference(lambda x: float((x**2).sum() + 3 * x[0]), theta, 1e-4)
    np.testing.assert_allclose(g, 2 * theta + np.array([3.0, 0, 0]), rtol=1e-8)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradcheck(seed):
    err, n, _ = gradcheck(seed)
    assert n <= 1000
    assert err <= 1e-4
