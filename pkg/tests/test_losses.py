import math

import numpy as np
import pytest

from attnlab import autograd as ag
from attnlab.losses import (LossConfig, ce_label_smoothed, ctc_loss, ctc_loss_logits, ctc_min_frames,
                            ctc_realizable, label_smoothed_ce, total_loss)

from oracles import ctc_brute_force


def test_label_smoothing_examples():
    p = np.array([0.8, 0.2])
    assert ce_label_smoothed(p, 0, 0.0) == pytest.approx(-math.log(0.8), abs=1e-15)
    expected = -(0.95 * math.log(0.8) + 0.05 * math.log(0.2))
    assert ce_label_smoothed(p, 0, 0.1) == pytest.approx(expected, abs=1e-12)
    # 0.95 * log(1/0.8) + 0.05 * log(1/0.2), worked by hand
    assert expected == pytest.approx(0.2924583, abs=1e-7)
    for eps in (0.0, 0.1, 0.5):
        for target in range(4):
            assert ce_label_smoothed(np.full(4, 0.25), target, eps) == pytest.approx(math.log(4), abs=1e-12)


def test_label_smoothing_minimum_is_entropy_of_q():
    rng = np.random.default_rng(0)
    V, eps, target = 5, 0.1, 2
    q = np.full(V, eps / V)
    q[target] += 1 - eps
    entropy = -float(np.sum(q * np.log(q)))
    assert ce_label_smoothed(q, target, eps) == pytest.approx(entropy, abs=1e-8)
    for _ in range(200):
        p = rng.dirichlet(np.ones(V))
        assert ce_label_smoothed(p, target, eps) >= entropy - 1e-12


def test_batched_ce_matches_per_position_reference():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(2, 3, 4))
    targets = np.array([[0, 3, 1], [2, 2, 0]])
    mask = np.array([[1, 1, 1], [1, 0, 0]], dtype=bool)
    got = label_smoothed_ce(ag.Tensor(logits), targets, mask, 0.1).item()
    p = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    ref = sum(ce_label_smoothed(p[b, n], targets[b, n], 0.1) for b in range(2) for n in range(3) if mask[b, n])
    assert got == pytest.approx(ref, rel=1e-12)


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(label_smoothing=1.0)
    with pytest.raises(ValueError):
        LossConfig(ctc_weight=float("inf"))
    assert LossConfig(smoothing_enabled=False).epsilon == 0.0


def test_ctc_small_examples():
    p = np.array([[0.2, 0.5, 0.3]])  # blank = 0
    assert ctc_loss(p, [1], blank=0) == pytest.approx(-math.log(0.5), abs=1e-15)
    p2 = np.array([[0.2, 0.5, 0.3], [0.4, 0.35, 0.25]])
    expected = -math.log(0.5 * 0.35 + 0.5 * 0.4 + 0.2 * 0.35)
    assert ctc_loss(p2, [1], blank=0) == pytest.approx(expected, abs=1e-14)
    assert ctc_loss(p, [1, 2], blank=0) == math.inf


def test_ctc_realizability_counts_repeats():
    assert ctc_min_frames([1, 1, 2]) == 4
    assert ctc_min_frames([]) == 0
    assert ctc_realizable([1, 1], 3) and not ctc_realizable([1, 1], 2)


def test_ctc_matches_brute_force_spot_checks():
    rng = np.random.default_rng(7)
    for _ in range(30):
        T, V = int(rng.integers(1, 6)), int(rng.integers(1, 4))
        L = int(rng.integers(0, 4))
        dist = rng.dirichlet(np.ones(V + 1), size=T)
        target = list(rng.integers(1, V + 1, size=L))
        a, b = ctc_loss(dist, target, blank=0), ctc_brute_force(dist, target, 0)
        assert (a == b == math.inf) or abs(a - b) < 1e-10


def test_ctc_blank_position_is_configurable():
    rng = np.random.default_rng(3)
    dist = rng.dirichlet(np.ones(4), size=4)
    assert ctc_loss(dist, [0, 1], blank=2) == pytest.approx(ctc_brute_force(dist, [0, 1], 2), abs=1e-10)


def test_ctc_logits_gradient():
    rng = np.random.default_rng(4)
    logits = ag.Tensor(rng.normal(size=(1, 4, 3)), requires_grad=True)
    fn = lambda: ag.tsum(ctc_loss_logits(logits, [[1, 2]], blank=0))  # noqa: E731
    assert ag.grad_check(fn, [logits]) < 1e-3


def test_ctc_logits_rejects_unrealizable_and_respects_lengths():
    rng = np.random.default_rng(5)
    z = rng.normal(size=(2, 4, 3))
    with pytest.raises(ValueError):
        ctc_loss_logits(ag.Tensor(z), [[1, 1, 1], [1]], blank=0)
    out = ctc_loss_logits(ag.Tensor(z), [[1], [2]], lengths=np.array([4, 2]), blank=0).data
    p = np.exp(z) / np.exp(z).sum(-1, keepdims=True)
    assert out[1] == pytest.approx(ctc_loss(p[1, :2], [2], blank=0), rel=1e-12)


def test_total_loss_combination():
    cfg = LossConfig(ctc_weight=0.5)
    assert total_loss(6.0, 3, 8.0, 2, cfg) == pytest.approx(2.0 + 0.5 * 4.0)
    assert total_loss(6.0, 3, None, 2, cfg) == pytest.approx(2.0)
    assert total_loss(6.0, 3, 8.0, 2, LossConfig(ctc_weight=0.0)) == pytest.approx(2.0)
