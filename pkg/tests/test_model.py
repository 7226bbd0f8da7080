import math

import numpy as np
import pytest

from attnlab import autograd as ag
from attnlab.autograd import Tensor
from attnlab.model import (AttentionModel, ModelConfig, decoder_inputs, encode, encoded_length,
                           encoder_context, forward_teacher_forced, init_params, log_softmax_np)

from gradsuite import model_case


def small_config(**kw):
    base = dict(vocab_size=9, input_dim=5, enc_layers=3, enc_units=6, pooling=(2, 2), dec_units=7)
    base.update(kw)
    return ModelConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=5, enc_layers=1, pooling=())
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=5, enc_layers=3, pooling=(2,))
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=5, enc_layers=2, pooling=(0,))
    assert ModelConfig(vocab_size=5).reduction == 8


def test_lstm_cell_examples():
    zeros = Tensor(np.zeros((1, 3)))
    h, c = ag.lstm_step(Tensor(np.ones((1, 2))), zeros, zeros, Tensor(np.zeros((12, 5))), Tensor(np.zeros(12)))
    assert np.all(h.data == 0) and np.all(c.data == 0)
    b = np.zeros(4)
    b[0], b[1] = -50.0, 50.0  # input gate shut, forget gate open
    h, c = ag.lstm_step(Tensor(np.ones((1, 1))), Tensor(np.zeros((1, 1))), Tensor(np.ones((1, 1))),
                        Tensor(np.zeros((4, 2))), Tensor(b))
    assert abs(c.data[0, 0] - 1.0) < 1e-6


def test_forget_bias_initialised_to_one():
    params = init_params(small_config(), np.random.default_rng(0))
    b = params["enc.0.fwd.b"].data
    np.testing.assert_array_equal(b[6:12], 1.0)
    np.testing.assert_array_equal(b[:6], 0.0)


def test_init_is_seeded_and_within_glorot_limit():
    cfg = small_config()
    a = init_params(cfg, np.random.default_rng(3))
    b = init_params(cfg, np.random.default_rng(3))
    for k in a:
        np.testing.assert_array_equal(a[k].data, b[k].data)
    W = a["att.W"].data
    assert np.abs(W).max() <= math.sqrt(6 / (W.shape[0] + W.shape[1]))


@pytest.mark.parametrize("red", [1, 2, 8, 16, 32])
def test_encoder_length_is_ceil_of_t_over_red(red):
    factors = {1: (1,), 2: (2,), 8: (8,), 16: (4, 4), 32: (2, 16)}[red]
    cfg = ModelConfig(vocab_size=5, input_dim=2, enc_layers=len(factors) + 1, enc_units=2, pooling=factors,
                      dec_units=3)
    for T in range(1, 129):
        assert int(encoded_length(np.array([T]), cfg)[0]) == math.ceil(T / red)
    params = init_params(cfg, np.random.default_rng(0))
    for T in (1, 31, 33, 128):
        enc = encode(params, cfg, np.zeros((T, 2), dtype=np.float32))
        assert enc.states.shape[1] == math.ceil(T / red)


def test_encoder_rejects_bad_inputs():
    cfg = small_config()
    params = init_params(cfg, np.random.default_rng(0))
    with pytest.raises(ag.DimensionError):
        encode(params, cfg, np.zeros((4, 3), dtype=np.float32))
    with pytest.raises(ValueError):
        encode(params, cfg, np.zeros((0, 5), dtype=np.float32))


def test_decoder_inputs_layout():
    inputs, outputs, mask = decoder_inputs([[5, 6], [7]])
    np.testing.assert_array_equal(inputs, [[0, 5, 6], [0, 7, 1]])
    np.testing.assert_array_equal(outputs, [[5, 6, 1], [7, 1, 1]])
    np.testing.assert_array_equal(mask, [[1, 1, 1], [1, 1, 0]])


@pytest.fixture(scope="module")
def teacher_forced():
    cfg = small_config()
    rng = np.random.default_rng(11)
    params = init_params(cfg, rng, dtype=np.float64)
    feats = rng.normal(size=(2, 13, 5))
    lengths = np.array([13, 7])
    targets = [[4, 5, 6, 7], [8, 3]]
    return cfg, params, feats, lengths, targets, forward_teacher_forced(params, cfg, Tensor(feats), targets,
                                                                        lengths)


def test_alphas_are_distributions_over_valid_frames(teacher_forced):
    *_, out = teacher_forced
    mask = out.encoder.mask
    alphas = out.alphas
    assert np.all(alphas >= 0)
    np.testing.assert_allclose(alphas.sum(-1), 1.0, atol=1e-6)
    assert np.all(alphas[1][:, ~mask[1]] == 0)


def test_cumulative_attention_and_fertility_bounds(teacher_forced):
    cfg, params, feats, lengths, targets, out = teacher_forced
    cum = np.cumsum(out.alphas, axis=1)
    for i in range(cum.shape[1]):
        np.testing.assert_allclose(cum[:, i].sum(-1), i + 1, atol=1e-4)
    ctx = encoder_context(params, cfg, out.encoder)
    gate = ctx.gate.data
    assert np.all((gate > 0) & (gate < 1))
    prev = np.concatenate([np.zeros_like(cum[:, :1]), cum[:, :-1]], axis=1)
    beta = gate[:, None, :] * prev
    assert np.all(beta[:, 0] == 0)
    for i in range(beta.shape[1]):
        assert np.all(beta[:, i] >= 0) and np.all(beta[:, i] <= i + 1e-12)


def test_step_scorer_matches_teacher_forcing(teacher_forced):
    cfg, params, feats, lengths, targets, out = teacher_forced
    model = AttentionModel(cfg, params)
    T = int(lengths[1])
    state = model.start(feats[1, :T])
    prev = np.array([0])
    tf = log_softmax_np(out.logits.data[1])
    for i, tok in enumerate(targets[1] + [1]):
        logp, state = model.score(state, prev)
        np.testing.assert_allclose(logp[0], tf[i], atol=1e-10)
        prev = np.array([tok])
    assert model.encoder_length(model.start(feats[1, :T])) == math.ceil(T / 4)


def test_score_rows_are_log_distributions():
    model = AttentionModel.create(small_config(), seed=0)
    state = model.start(np.random.default_rng(0).normal(size=(9, 5)).astype(np.float32))
    logp, _ = model.score(state, np.array([0]))
    assert logp.dtype == np.float64
    assert abs(np.exp(logp).sum() - 1) < 1e-5


def test_select_reorders_hypotheses():
    model = AttentionModel.create(small_config(), seed=1).as_dtype(np.float64)
    state = model.start(np.random.default_rng(0).normal(size=(9, 5)))
    _, state = model.score(state, np.array([0]))
    wide = model.select(state, [0, 0, 0])
    logp, _ = model.score(wide, np.array([4, 5, 6]))
    for k, tok in enumerate((4, 5, 6)):
        single, _ = model.score(state, np.array([tok]))
        np.testing.assert_allclose(logp[k], single[0], atol=1e-12)


def test_dropout_only_when_requested():
    cfg = small_config()
    params = init_params(cfg, np.random.default_rng(0), dtype=np.float64)
    x = np.random.default_rng(1).normal(size=(1, 8, 5))
    a = encode(params, cfg, x).states.data
    b = encode(params, cfg, x, dropout=0.5, rng=np.random.default_rng(0)).states.data
    c = encode(params, cfg, x, dropout=0.0, rng=np.random.default_rng(0)).states.data
    assert not np.allclose(a, b)
    np.testing.assert_array_equal(a, c)


def test_every_parameter_group_receives_gradient():
    fn, params = model_case(0)
    for p in params.values():
        p.grad = None
    with ag.Tape() as tape:
        loss = fn()
    tape.backward(loss)
    for group in ("enc.", "att.", "dec.W", "dec.embed", "out.", "ctc."):
        grads = [p.grad for k, p in params.items() if k.startswith(group)]
        assert grads and all(g is not None and np.any(g != 0) for g in grads), group


def test_model_gradient_check_one_seed():
    fn, params = model_case(3)
    report = ag.grad_check_report(fn, list(params.values()), eps=1e-3, max_coords=4,
                                  rng=np.random.default_rng(3))
    assert report.max_error < 1e-3
