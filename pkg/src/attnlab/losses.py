"""Label-smoothed cross entropy and the auxiliary CTC loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor


@dataclass(frozen=True)
class LossConfig:
    label_smoothing: float = 0.1
    ctc_weight: float = 0.5
    smoothing_enabled: bool = True

    def __post_init__(self):
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if not np.isfinite(self.ctc_weight) or self.ctc_weight < 0:
            raise ValueError("ctc_weight must be finite and >= 0")

    @property
    def epsilon(self) -> float:
        return self.label_smoothing if self.smoothing_enabled else 0.0


def ce_label_smoothed(distribution, target: int, eps: float) -> float:
    """``-sum_c q_c log p_c`` with ``q = (1 - eps) onehot(target) + eps / V``."""
    p = np.asarray(distribution, dtype=np.float64)
    V = p.shape[-1]
    q = np.full(V, eps / V)
    q[target] += 1.0 - eps
    with np.errstate(divide="ignore"):
        logp = np.log(p)
    nz = q > 0
    return float(-(q[nz] * logp[nz]).sum())


def label_smoothed_ce(logits, targets, mask, eps: float) -> Tensor:
    """Summed smoothed CE over all unmasked positions of B×N×V logits."""
    logits = ag.as_tensor(logits)
    V = logits.shape[-1]
    dt = logits.dtype
    q = np.full(logits.shape, eps / V, dtype=dt)
    np.put_along_axis(q, np.asarray(targets)[..., None], (1.0 - eps) + eps / V, axis=-1)
    q *= np.asarray(mask, dtype=dt)[..., None]
    return -ag.tsum(ag.log_softmax(logits, axis=-1) * Tensor(q))


# CTC ----------------------------------------------------------------------------


def _lse(a, b, c=None):
    out = np.logaddexp(a, b)
    return out if c is None else np.logaddexp(out, c)


def ctc_min_frames(target) -> int:
    """Frames needed to emit ``target``: one per label plus a blank between repeats."""
    target = list(target)
    return len(target) + sum(1 for a, b in zip(target, target[1:]) if a == b)


def ctc_realizable(target, num_frames: int) -> bool:
    return ctc_min_frames(target) <= num_frames


def _extend(target, blank: int) -> np.ndarray:
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    return ext


def _skip_allowed(ext: np.ndarray, blank: int) -> np.ndarray:
    allowed = np.zeros(len(ext), dtype=bool)
    allowed[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    return allowed


def ctc_forward_backward(logp: np.ndarray, target, blank: int, need_occupancy: bool = True):
    """Log-space forward/backward over the blank-extended label sequence.

    ``logp`` is T×C frame log-probabilities. Returns ``(log_likelihood,
    occupancy)`` where occupancy[t, c] is the posterior probability that
    frame t emits class c; occupancy is None when the target is unrealizable.
    """
    logp = np.asarray(logp, dtype=np.float64)
    T, C = logp.shape
    target = np.asarray(list(target), dtype=np.int64)
    if not ctc_realizable(target, T):
        return -np.inf, None
    ext = _extend(target, blank)
    S = len(ext)
    skip = _skip_allowed(ext, blank)
    emit = logp[:, ext]
    alpha = np.full((T, S), -np.inf)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    neg = np.full(1, -np.inf)
    for t in range(1, T):
        prev = alpha[t - 1]
        shift1 = np.concatenate([neg, prev[:-1]])
        shift2 = np.where(skip, np.concatenate([neg, neg, prev[:-2]])[:S], -np.inf)
        alpha[t] = _lse(prev, shift1, shift2) + emit[t]
    ll = float(_lse(alpha[T - 1, S - 1], alpha[T - 1, S - 2]) if S > 1 else alpha[T - 1, 0])
    if not need_occupancy:
        return ll, None
    # beta[t, s]: log prob of frames t+1.. given state s at t (emission at t excluded)
    beta = np.full((T, S), -np.inf)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    skip_from = np.zeros(S, dtype=bool)
    skip_from[: S - 2] = skip[2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        shift1 = np.concatenate([nxt[1:], neg])
        shift2 = np.where(skip_from, np.concatenate([nxt[2:], neg, neg])[:S], -np.inf)
        beta[t] = _lse(nxt, shift1, shift2)
    post = np.exp(alpha + beta - ll)
    occupancy = np.zeros((T, C))
    for s in range(S):
        occupancy[:, ext[s]] += post[:, s]
    return float(ll), occupancy


def ctc_loss(frame_distributions, target, blank: int = 2) -> float:
    """Negative log of the total probability of all alignments of ``target``.

    Returns +inf when the target cannot fit in the available frames.
    """
    with np.errstate(divide="ignore"):
        logp = np.log(np.asarray(frame_distributions, dtype=np.float64))
    ll, _ = ctc_forward_backward(logp, target, blank, need_occupancy=False)
    return -ll


def ctc_loss_logits(logits, targets: list, lengths=None, blank: int = 2) -> Tensor:
    """Per-utterance CTC losses (B,) from B×T×C logits, differentiable.

    Unrealizable targets must be filtered out by the caller.
    """
    logits = ag.as_tensor(logits)
    B, T, C = logits.shape
    lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    recording = ag.active_tape() is not None and logits.requires_grad
    losses = np.zeros(B)
    grads = np.zeros((B, T, C))
    for b in range(B):
        n = int(lengths[b])
        if not ctc_realizable(targets[b], n):
            raise ValueError(f"CTC target of length {len(targets[b])} does not fit {n} frames")
        ll, occ = ctc_forward_backward(logp[b, :n], targets[b], blank, need_occupancy=recording)
        losses[b] = -ll
        if recording:
            grads[b, :n] = np.exp(logp[b, :n]) - occ

    def bw(g):
        return ((np.asarray(g, dtype=np.float64)[:, None, None] * grads).astype(logits.dtype),)

    return ag._make(losses.astype(logits.dtype), (logits,), bw)


def total_loss(ce_sum, num_labels: int, ctc_sum, num_utterances: int, config: LossConfig):
    """Mean-per-label CE plus ``ctc_weight`` times mean-per-utterance CTC."""
    loss = ce_sum * (1.0 / max(num_labels, 1))
    if ctc_sum is not None and config.ctc_weight > 0 and num_utterances > 0:
        loss = loss + ctc_sum * (config.ctc_weight / num_utterances)
    return loss
