"""Pooled BiLSTM encoder, MLP attention with fertility feedback, LSTM decoder.

All functions work on batches: features are B×T×d with per-sequence lengths,
decoder quantities are B×... . Single-utterance inputs are just B = 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import autograd as ag
from .autograd import Tensor


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    input_dim: int = 40
    enc_layers: int = 6
    enc_units: int = 64
    # one factor between each pair of consecutive encoder layers
    pooling: tuple = (2, 2, 2, 1, 1)
    dec_units: int = 128
    embed_dim: int = 0
    att_dim: int = 0
    enc_dropout: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "pooling", tuple(int(p) for p in self.pooling))
        if self.enc_layers < 2:
            raise ValueError("the encoder needs at least two layers")
        if len(self.pooling) != self.enc_layers - 1:
            raise ValueError(f"{self.enc_layers} encoder layers need {self.enc_layers - 1} pooling factors")
        if any(p < 1 for p in self.pooling):
            raise ValueError("pooling factors must be >= 1")

    @property
    def reduction(self) -> int:
        return math.prod(self.pooling)

    @property
    def embed(self) -> int:
        return self.embed_dim or self.dec_units

    @property
    def attention(self) -> int:
        return self.att_dim or self.dec_units

    def with_encoder(self, enc_layers: int, pooling) -> "ModelConfig":
        return replace(self, enc_layers=enc_layers, pooling=tuple(pooling))


def glorot(rng: np.random.Generator, shape, dtype=np.float32) -> np.ndarray:
    fan_out = shape[0]
    fan_in = shape[1] if len(shape) > 1 else 1
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_lstm(rng, in_dim: int, units: int, dtype=np.float32):
    w = glorot(rng, (4 * units, in_dim + units), dtype)
    b = np.zeros(4 * units, dtype=dtype)
    b[units:2 * units] = 1.0
    return w, b


def encoder_layer_names(layer: int) -> list[str]:
    return [f"enc.{layer}.fwd.W", f"enc.{layer}.fwd.b", f"enc.{layer}.bwd.W", f"enc.{layer}.bwd.b"]


def init_encoder_layer(config: ModelConfig, layer: int, rng, dtype=np.float32) -> dict:
    in_dim = config.input_dim if layer == 0 else 2 * config.enc_units
    out = {}
    for direction in ("fwd", "bwd"):
        w, b = init_lstm(rng, in_dim, config.enc_units, dtype)
        out[f"enc.{layer}.{direction}.W"] = w
        out[f"enc.{layer}.{direction}.b"] = b
    return out


def init_params(config: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict:
    """Seeded uniform Glorot init; LSTM forget-gate biases start at 1."""
    V, D, E, A = config.vocab_size, config.dec_units, config.embed, config.attention
    H = 2 * config.enc_units
    arrays = {}
    for layer in range(config.enc_layers):
        arrays.update(init_encoder_layer(config, layer, rng, dtype))
    arrays["att.W"] = glorot(rng, (A, D + H + 1), dtype)
    arrays["att.v"] = glorot(rng, (A,), dtype)
    arrays["att.v_beta"] = glorot(rng, (H,), dtype)
    arrays["dec.embed"] = glorot(rng, (V, E), dtype)
    arrays["dec.W"], arrays["dec.b"] = init_lstm(rng, E + H, D, dtype)
    arrays["out.W1"] = glorot(rng, (2 * D, D + E + H), dtype)
    arrays["out.b1"] = np.zeros(2 * D, dtype=dtype)
    arrays["out.W2"] = glorot(rng, (V, D), dtype)
    arrays["out.b2"] = np.zeros(V, dtype=dtype)
    arrays["ctc.W"] = glorot(rng, (V, H), dtype)
    arrays["ctc.b"] = np.zeros(V, dtype=dtype)
    return {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}


# encoder -----------------------------------------------------------------------


@dataclass
class EncoderOutput:
    states: Tensor  # B×T'×2u
    lengths: np.ndarray  # B

    @property
    def mask(self) -> np.ndarray:
        T = self.states.shape[1]
        return np.arange(T)[None, :] < self.lengths[:, None]


def encoded_length(T, config: ModelConfig):
    for p in config.pooling:
        T = ag.pooled_lengths(T, p)
    return T


def encode(params: dict, config: ModelConfig, features, lengths=None,
           dropout: float = 0.0, rng: np.random.Generator | None = None) -> EncoderOutput:
    """BiLSTM layers with time max-pooling in between; T' = ceil(T / red)."""
    x = ag.as_tensor(features)
    if x.ndim == 2:
        x = ag.reshape(x, (1,) + x.shape)
    B, T, d = x.shape
    if T < 1:
        raise ValueError("cannot encode an empty feature sequence")
    if d != config.input_dim:
        raise ag.DimensionError(f"feature width {d} != configured input_dim {config.input_dim}")
    lengths = np.full(B, T, dtype=np.int64) if lengths is None else np.asarray(lengths, dtype=np.int64)
    for layer in range(config.enc_layers):
        if layer > 0 and dropout > 0.0:
            x = ag.dropout(x, dropout, rng)
        wf, bf, wb, bb = (params[n] for n in encoder_layer_names(layer))
        x = ag.bilstm_layer(x, wf, bf, wb, bb, lengths)
        if layer < config.enc_layers - 1:
            factor = config.pooling[layer]
            x = ag.max_pool_time(x, factor, lengths)
            lengths = ag.pooled_lengths(lengths, factor)
    return EncoderOutput(x, lengths)


# attention -----------------------------------------------------------------------


def attention_energies(s, h, beta, W, v, h_proj=None) -> Tensor:
    """``e[b, t] = v . tanh(W [s_b, h_bt, beta_bt])`` for s: B×D, h: B×T×H, beta: B×T.

    ``h_proj`` may carry a precomputed ``h @ W_h.T`` (it does not change
    across decoder steps).
    """
    s, h, beta, W = ag.as_tensor(s), ag.as_tensor(h), ag.as_tensor(beta), ag.as_tensor(W)
    D, H = s.shape[-1], h.shape[-1]
    if W.shape[1] != D + H + 1:
        raise ag.DimensionError(f"attention matrix {W.shape} does not fit [s({D}), h({H}), beta]")
    if h_proj is None:
        h_proj = ag.matmul(h, ag.transpose(W[:, D:D + H]))
    s_proj = ag.matmul(s, ag.transpose(W[:, :D]))
    B, T = beta.shape
    pre = h_proj + ag.reshape(s_proj, (B, 1, -1)) + ag.reshape(beta, (B, T, 1)) * W[:, D + H]
    energies = ag.matmul(ag.tanh(pre), ag.reshape(v, (-1, 1)))
    return ag.reshape(energies, (B, T))


def fertility_gate(h, v_beta) -> Tensor:
    """``sigmoid(v_beta . h_t)`` per encoder frame (B×T)."""
    h = ag.as_tensor(h)
    B, T, H = h.shape
    return ag.reshape(ag.sigmoid(ag.matmul(h, ag.reshape(v_beta, (H, 1)))), (B, T))


def fertility_feedback(h, cumulative_alpha, v_beta, gate=None) -> Tensor:
    """``beta[b, t] = sigmoid(v_beta . h_bt) * sum_{k<i} alpha[k, b, t]``."""
    if gate is None:
        gate = fertility_gate(h, v_beta)
    return gate * cumulative_alpha


def attend(alpha, h) -> Tensor:
    return ag.attend(alpha, h)


# decoder -------------------------------------------------------------------------


@dataclass
class DecoderState:
    s: Tensor  # LSTM output s_i, B×D
    cell: Tensor  # LSTM cell state, B×D
    context: Tensor  # c_i, B×H
    cum_alpha: Tensor  # sum of attention weights so far, B×T'
    prev_token: np.ndarray = None  # B
    # encoder side, row-aligned with the state; only set while decoding
    ctx: "EncoderContext" = None

    def select(self, idx) -> "DecoderState":
        """Rows ``idx`` of the state (used to reorder beam hypotheses)."""
        idx = np.asarray(idx, dtype=np.int64)
        pick = lambda t: Tensor(t.data[idx])
        return DecoderState(pick(self.s), pick(self.cell), pick(self.context), pick(self.cum_alpha),
                            None if self.prev_token is None else self.prev_token[idx],
                            None if self.ctx is None else self.ctx.select(idx))


@dataclass
class EncoderContext:
    """Per-utterance attention quantities that stay fixed while decoding."""

    h: Tensor
    mask: np.ndarray
    h_proj: Tensor
    gate: Tensor

    def select(self, idx) -> "EncoderContext":
        pick = lambda t: Tensor(t.data[idx])
        return EncoderContext(pick(self.h), self.mask[idx], pick(self.h_proj), pick(self.gate))


def encoder_context(params: dict, config: ModelConfig, enc: EncoderOutput) -> EncoderContext:
    D, H = config.dec_units, 2 * config.enc_units
    W = params["att.W"]
    h_proj = ag.matmul(enc.states, ag.transpose(W[:, D:D + H]))
    return EncoderContext(enc.states, enc.mask, h_proj, fertility_gate(enc.states, params["att.v_beta"]))


def initial_state(params: dict, config: ModelConfig, ctx: EncoderContext) -> DecoderState:
    B, T = ctx.mask.shape
    dt = params["dec.W"].dtype
    zeros = lambda n: Tensor(np.zeros((B, n), dtype=dt))
    return DecoderState(zeros(config.dec_units), zeros(config.dec_units), zeros(2 * config.enc_units),
                        Tensor(np.zeros((B, T), dtype=dt)), np.zeros(B, dtype=np.int64))


def decoder_step(params: dict, config: ModelConfig, state: DecoderState, prev_tokens,
                 ctx: EncoderContext) -> tuple[DecoderState, Tensor, Tensor]:
    """One decoder step; returns the new state, output logits and alpha.

    Order: s_i from [embed(y_{i-1}), c_{i-1}]; beta_i from cumulative alpha;
    alpha_i = softmax(e_i); c_i; readout on [s_i, embed(y_{i-1}), c_i].
    """
    prev_tokens = np.asarray(prev_tokens, dtype=np.int64)
    emb = ag.take(params["dec.embed"], prev_tokens)
    s, cell = ag.lstm_step(ag.concat([emb, state.context], axis=-1), state.s, state.cell,
                           params["dec.W"], params["dec.b"])
    beta = fertility_feedback(ctx.h, state.cum_alpha, None, gate=ctx.gate)
    energies = attention_energies(s, ctx.h, beta, params["att.W"], params["att.v"], h_proj=ctx.h_proj)
    alpha = ag.softmax(energies, axis=-1, mask=ctx.mask)
    context = ag.attend(alpha, ctx.h)
    hidden = ag.maxout(ag.linear(ag.concat([s, emb, context], axis=-1), params["out.W1"], params["out.b1"]))
    logits = ag.linear(hidden, params["out.W2"], params["out.b2"])
    new_state = DecoderState(s, cell, context, state.cum_alpha + alpha, prev_tokens)
    return new_state, logits, alpha


def decoder_inputs(targets: list, bos_id: int = 0, eos_id: int = 1):
    """Pad target id lists into decoder inputs, outputs (with EOS) and a mask."""
    B = len(targets)
    N = max(len(t) for t in targets) + 1
    inputs = np.full((B, N), eos_id, dtype=np.int64)
    outputs = np.full((B, N), eos_id, dtype=np.int64)
    mask = np.zeros((B, N), dtype=bool)
    for b, t in enumerate(targets):
        inputs[b, 0] = bos_id
        inputs[b, 1:len(t) + 1] = t
        outputs[b, :len(t)] = t
        outputs[b, len(t)] = eos_id
        mask[b, :len(t) + 1] = True
    return inputs, outputs, mask


@dataclass
class TeacherForced:
    logits: Tensor  # B×N×V
    alphas: np.ndarray  # B×N×T'
    outputs: np.ndarray  # gold ids incl. EOS, B×N
    mask: np.ndarray  # B×N
    encoder: EncoderOutput

    def distributions(self) -> np.ndarray:
        return ag._softmax_np(self.logits.data, -1)


def forward_teacher_forced(params: dict, config: ModelConfig, features, targets: list, lengths=None,
                           dropout: float = 0.0, rng=None, bos_id: int = 0, eos_id: int = 1) -> TeacherForced:
    enc = encode(params, config, features, lengths, dropout=dropout, rng=rng)
    ctx = encoder_context(params, config, enc)
    inputs, outputs, mask = decoder_inputs(targets, bos_id, eos_id)
    state = initial_state(params, config, ctx)
    step_logits, alphas = [], []
    B, N = inputs.shape
    for i in range(N):
        state, logits, alpha = decoder_step(params, config, state, inputs[:, i], ctx)
        step_logits.append(ag.reshape(logits, (B, 1, -1)))
        alphas.append(alpha.data)
    return TeacherForced(ag.concat(step_logits, axis=1), np.stack(alphas, axis=1), outputs, mask, enc)


def log_softmax_np(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# decoding surface ------------------------------------------------------------------


class AttentionModel:
    """Parameters plus config, exposing the step scorer used by beam search.

    ``score(state, prev_tokens)`` returns log-probabilities for the next
    token (K×V, float64) and the state after the step.
    """

    def __init__(self, config: ModelConfig, params: dict):
        self.config = config
        self.params = params

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "AttentionModel":
        return cls(config, init_params(config, np.random.default_rng(seed), dtype))

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    def as_dtype(self, dtype) -> "AttentionModel":
        return AttentionModel(self.config, {k: Tensor(v.data.astype(dtype)) for k, v in self.params.items()})

    def start(self, features):
        feats = np.asarray(features.frames if hasattr(features, "frames") else features)
        if feats.ndim != 2 or len(feats) == 0:
            raise ValueError("beam search needs a non-empty T×d feature matrix")
        dt = self.params["dec.W"].dtype
        with ag.no_grad():
            enc = encode(self.params, self.config, feats.astype(dt))
            ctx = encoder_context(self.params, self.config, enc)
            state = initial_state(self.params, self.config, ctx)
        state.ctx = ctx
        return state

    def encoder_length(self, state) -> int:
        return int(state.ctx.mask[0].sum())

    def score(self, state: DecoderState, prev_tokens):
        with ag.no_grad():
            new, logits, _ = decoder_step(self.params, self.config, state, prev_tokens, state.ctx)
        new.ctx = state.ctx
        return log_softmax_np(logits.data), new

    def select(self, state: DecoderState, idx) -> DecoderState:
        return state.select(idx)

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params.values())
