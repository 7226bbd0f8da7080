"""Gradient-check cases shared by the unit and acceptance tests.

Each builder takes a seeded generator and returns ``(fn, params)`` with
float64 leaves; every extent is at most 5.
"""

import numpy as np

from attnlab import autograd as ag
from attnlab.losses import ctc_loss_logits, label_smoothed_ce
from attnlab.model import ModelConfig, forward_teacher_forced, init_params


def _leaf(rng, *shape, scale=1.0, positive=False):
    x = rng.normal(size=shape) * scale
    if positive:
        x = np.abs(x) + 0.5
    return ag.Tensor(x, requires_grad=True)


def _proj(rng, out_shape):
    # random projection so each output coordinate gets a distinct weight
    return ag.Tensor(rng.normal(size=out_shape))


def case_add(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4)
    w = _proj(rng, (3, 4))
    return lambda: ag.tsum((a + b) * w), [a, b]


def case_sub(rng):
    a, b = _leaf(rng, 2, 3), _leaf(rng, 2, 1)
    w = _proj(rng, (2, 3))
    return lambda: ag.tsum((a - b) * w), [a, b]


def case_mul(rng):
    a, b = _leaf(rng, 3, 2), _leaf(rng, 3, 2)
    return lambda: ag.tsum(a * b), [a, b]


def case_tanh(rng):
    x = _leaf(rng, 4, 3)
    w = _proj(rng, (4, 3))
    return lambda: ag.tsum(ag.tanh(x) * w), [x]


def case_sigmoid(rng):
    x = _leaf(rng, 5)
    w = _proj(rng, (5,))
    return lambda: ag.tsum(ag.sigmoid(x) * w), [x]


def case_exp(rng):
    x = _leaf(rng, 3, 3, scale=0.5)
    w = _proj(rng, (3, 3))
    return lambda: ag.tsum(ag.exp(x) * w), [x]


def case_log(rng):
    x = _leaf(rng, 4, positive=True)
    w = _proj(rng, (4,))
    return lambda: ag.tsum(ag.log(x) * w), [x]


def case_reshape_transpose(rng):
    x = _leaf(rng, 2, 3, 4)
    w = _proj(rng, (4, 6))
    return lambda: ag.tsum(ag.transpose(ag.reshape(x, (6, 4)), (1, 0)) * w), [x]


def case_getitem(rng):
    x = _leaf(rng, 4, 5)
    w = _proj(rng, (2, 3))
    return lambda: ag.tsum(x[1:3, ::2] * w), [x]


def case_take(rng):
    table = _leaf(rng, 5, 3)
    idx = np.array([[0, 4, 4], [2, 0, 1]])
    w = _proj(rng, (2, 3, 3))
    return lambda: ag.tsum(ag.take(table, idx) * w), [table]


def case_concat(rng):
    a, b = _leaf(rng, 2, 3), _leaf(rng, 2, 2)
    w = _proj(rng, (2, 5))
    return lambda: ag.tsum(ag.concat([a, b], axis=-1) * w), [a, b]


def case_sum_mean(rng):
    x = _leaf(rng, 3, 4)
    w = _proj(rng, (4,))
    return lambda: ag.tsum(ag.tsum(x, axis=0) * w) + ag.mean(x * x), [x]


def case_matmul(rng):
    a, b = _leaf(rng, 3, 2), _leaf(rng, 2, 4)
    w = _proj(rng, (3, 4))
    return lambda: ag.tsum(ag.matmul(a, b) * w), [a, b]


def case_linear(rng):
    x, W, b = _leaf(rng, 2, 3, 4), _leaf(rng, 5, 4), _leaf(rng, 5)
    w = _proj(rng, (2, 3, 5))
    return lambda: ag.tsum(ag.linear(x, W, b) * w), [x, W, b]


def case_softmax_matmul(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 5)
    mask = np.array([[1, 1, 1, 0, 1], [1, 1, 1, 1, 1], [0, 1, 1, 1, 1]], dtype=bool)
    w = _proj(rng, (3, 5))
    return lambda: ag.tsum(ag.softmax(ag.matmul(a, b), axis=-1, mask=mask) * w), [a, b]


def case_log_softmax(rng):
    x = _leaf(rng, 2, 5)
    w = _proj(rng, (2, 5))
    return lambda: ag.tsum(ag.log_softmax(x) * w), [x]


def case_max_pool(rng):
    x = _leaf(rng, 2, 5, 3)
    lengths = np.array([5, 3])
    w = _proj(rng, (2, 3, 3))
    return lambda: ag.tsum(ag.max_pool_time(x, 2, lengths) * w), [x]


def case_maxout(rng):
    x = _leaf(rng, 3, 4)
    w = _proj(rng, (3, 2))
    return lambda: ag.tsum(ag.maxout(x, 2) * w), [x]


def case_dropout(rng):
    x = _leaf(rng, 4, 4)
    seed = int(rng.integers(1 << 30))
    w = _proj(rng, (4, 4))
    # a fresh generator per call keeps the mask fixed across evaluations
    return lambda: ag.tsum(ag.dropout(x, 0.3, np.random.default_rng(seed)) * w), [x]


def case_attend(rng):
    alpha, values = _leaf(rng, 2, 4), _leaf(rng, 2, 4, 3)
    w = _proj(rng, (2, 3))
    return lambda: ag.tsum(ag.attend(alpha, values) * w), [alpha, values]


def case_lstm_step(rng):
    x, h, c = _leaf(rng, 2, 3), _leaf(rng, 2, 2), _leaf(rng, 2, 2)
    W, b = _leaf(rng, 8, 5, scale=0.5), _leaf(rng, 8, scale=0.5)
    w1, w2 = _proj(rng, (2, 2)), _proj(rng, (2, 2))

    def fn():
        h2, c2 = ag.lstm_step(x, h, c, W, b)
        return ag.tsum(h2 * w1) + ag.tsum(c2 * w2)
    return fn, [x, h, c, W, b]


def case_lstm_layer(rng):
    x = _leaf(rng, 2, 5, 3)
    W, b = _leaf(rng, 8, 5, scale=0.5), _leaf(rng, 8, scale=0.5)
    lengths = np.array([5, 3])
    w = _proj(rng, (2, 5, 2))
    return lambda: ag.tsum(ag.lstm_layer(x, W, b, lengths, reverse=True) * w), [x, W, b]


def case_bilstm(rng):
    x = _leaf(rng, 2, 4, 3)
    wf, bf = _leaf(rng, 8, 5, scale=0.5), _leaf(rng, 8, scale=0.5)
    wb, bb = _leaf(rng, 8, 5, scale=0.5), _leaf(rng, 8, scale=0.5)
    lengths = np.array([4, 2])
    w = _proj(rng, (2, 4, 4))
    return lambda: ag.tsum(ag.bilstm_layer(x, wf, bf, wb, bb, lengths) * w), [x, wf, bf, wb, bb]


def case_label_smoothed_ce(rng):
    logits = _leaf(rng, 2, 3, 5)
    targets = rng.integers(0, 5, size=(2, 3))
    mask = np.array([[1, 1, 1], [1, 1, 0]], dtype=bool)
    return lambda: label_smoothed_ce(logits, targets, mask, 0.1), [logits]


def case_ctc(rng):
    logits = _leaf(rng, 2, 4, 3)
    targets = [[1, 2], [1, 1]]
    w = _proj(rng, (2,))
    return lambda: ag.tsum(ctc_loss_logits(logits, targets, np.array([4, 4]), blank=0) * w), [logits]


OP_CASES = {name[5:]: fn for name, fn in list(globals().items()) if name.startswith("case_")}


def model_case(seed: int):
    """Full teacher-forced loss (CE + CTC) of a 2-layer, 8-unit model, T = 12, N <= 4."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(vocab_size=7, input_dim=5, enc_layers=2, enc_units=8, pooling=(2,), dec_units=8,
                      att_dim=6)
    params = init_params(cfg, rng, dtype=np.float64)
    feats = ag.Tensor(rng.normal(size=(2, 12, 5)))
    lengths = np.array([12, 9])
    targets = [list(rng.integers(3, 7, size=4)), list(rng.integers(3, 7, size=2))]

    def fn():
        out = forward_teacher_forced(params, cfg, feats, targets, lengths)
        ce = label_smoothed_ce(out.logits, out.outputs, out.mask, 0.1)
        ctc_logits = ag.linear(out.encoder.states, params["ctc.W"], params["ctc.b"])
        return ce + ag.tsum(ctc_loss_logits(ctc_logits, targets, out.encoder.lengths)) * 0.5
    return fn, params
