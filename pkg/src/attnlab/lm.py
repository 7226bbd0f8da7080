"""Subword language models: interpolated Kneser-Ney n-grams and an LSTM LM.

Both predict every vocabulary token except BOS and the CTC blank; EOS is a
predicted event and BOS is context only.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autograd as ag
from . import checkpoint as ckpt
from .autograd import Tensor
from .bpe import BLANK, BOS, EOS
from .config import dump_text, parse_text
from .model import glorot, init_lstm

LOG10 = math.log(10.0)


class LmFormatError(ValueError):
    pass


# n-gram --------------------------------------------------------------------------------


class NGramLM:
    """Interpolated Kneser-Ney model over string tokens.

    ``events`` is the set of predictable tokens; the lowest order mixes in a
    uniform distribution over it, so every event has non-zero probability.
    """

    def __init__(self, order: int, events: Sequence[str], bos: str = BOS, eos: str = EOS):
        if order < 1:
            raise ValueError("order must be >= 1")
        self.order = order
        self.events = sorted(set(events) | {eos})
        self.bos, self.eos = bos, eos
        # per order m: {context tuple: {word: adjusted count}}
        self.counts: list[dict] = [defaultdict(dict) for _ in range(order + 1)]
        self.discounts = [0.0] * (order + 1)
        self._cache: dict = {}
        # set when loaded from ARPA: explicit probabilities and backoffs
        self._arpa: tuple | None = None

    # training

    @classmethod
    def train(cls, corpus: Iterable[Sequence[str]], order: int, events: Sequence[str] | None = None,
              bos: str = BOS, eos: str = EOS) -> "NGramLM":
        sentences = [list(s) for s in corpus]
        if not sentences:
            raise ValueError("empty LM training corpus")
        seen = {w for s in sentences for w in s}
        if bos in seen:
            raise ValueError("BOS may not appear inside a training sentence")
        lm = cls(order, seen if events is None else set(events), bos, eos)
        unknown = seen - set(lm.events)
        if unknown:
            raise ValueError(f"tokens outside the event set: {sorted(unknown)[:5]}")
        raw = defaultdict(int)  # n-gram tuple -> raw count
        for s in sentences:
            padded = [bos] + s + [eos]
            for i in range(1, len(padded)):
                for m in range(1, order + 1):
                    if i - m + 1 < 0:
                        break
                    raw[tuple(padded[i - m + 1:i + 1])] += 1
        left = defaultdict(set)  # m-gram -> distinct left neighbours
        for gram in raw:
            if len(gram) >= 2:
                left[gram[1:]].add(gram[0])
        for gram, c in raw.items():
            m = len(gram)
            if m == order or gram[0] == bos:
                adjusted = c
            else:
                adjusted = len(left[gram])
            lm.counts[m][gram[:-1]][gram[-1]] = adjusted
        for m in range(1, order + 1):
            n1 = sum(1 for ctx in lm.counts[m].values() for c in ctx.values() if c == 1)
            n2 = sum(1 for ctx in lm.counts[m].values() for c in ctx.values() if c == 2)
            lm.discounts[m] = n1 / (n1 + 2 * n2) if n1 + n2 > 0 else 0.0
        return lm

    # probabilities

    def distribution(self, context: Sequence[str]) -> dict:
        """``{event: p(event | context)}``; context is truncated to order - 1 tokens."""
        ctx = tuple(context)[-(self.order - 1):] if self.order > 1 else ()
        ctx = self._known_suffix(ctx)
        hit = self._cache.get(ctx)
        if hit is None:
            hit = self._cache[ctx] = self._distribution(ctx)
        return hit

    def _known_suffix(self, ctx: tuple) -> tuple:
        # contexts never seen before behave like their longest seen suffix
        while ctx and not self._is_context(ctx):
            ctx = ctx[1:]
        return ctx

    def _is_context(self, ctx: tuple) -> bool:
        if self._arpa is not None:
            tables, backoffs = self._arpa
            return ctx in backoffs or ctx in tables[len(ctx) + 1]
        return ctx in self.counts[len(ctx) + 1]

    def _distribution(self, ctx: tuple) -> dict:
        if self._arpa is not None:
            return self._arpa_distribution(ctx)
        if not ctx:
            table = self.counts[1].get((), {})
            total = sum(c for w, c in table.items() if w != self.bos)
            d = self.discounts[1]
            uniform = 1.0 / len(self.events)
            if total == 0:
                return {w: uniform for w in self.events}
            types = sum(1 for w in table if w != self.bos)
            gamma = d * types / total
            return {w: max(table.get(w, 0) - d, 0.0) / total + gamma * uniform for w in self.events}
        lower = self.distribution(ctx[1:])
        table = self.counts[len(ctx) + 1].get(ctx)
        if not table:
            return lower
        total = sum(table.values())
        d = self.discounts[len(ctx) + 1]
        gamma = d * len(table) / total
        return {w: max(table.get(w, 0) - d, 0.0) / total + gamma * lower[w] for w in self.events}

    def prob(self, word: str, context: Sequence[str]) -> float:
        return self.distribution(context).get(word, 0.0)

    def sequence_logprobs(self, tokens: Sequence[str]) -> list[float]:
        """Natural-log probability of each token and of the final EOS."""
        history = [self.bos]
        out = []
        for w in list(tokens) + [self.eos]:
            p = self.prob(w, history)
            out.append(math.log(p) if p > 0 else -math.inf)
            history.append(w)
        return out

    # ARPA

    def _entries(self):
        """(order, gram, log10 p, log10 backoff or None) for every listed n-gram."""
        if self._arpa is not None:
            return self._arpa_entries()
        rows = []
        for m in range(1, self.order + 1):
            grams = []
            if m == 1:
                grams = [(w,) for w in self.events] + [(self.bos,)]
            else:
                for ctx, table in self.counts[m].items():
                    grams.extend(ctx + (w,) for w in table)
            for gram in sorted(set(grams)):
                ctx, w = gram[:-1], gram[-1]
                if w == self.bos:
                    logp = -99.0
                else:
                    logp = math.log10(self.distribution(ctx)[w]) if self._exact_context(ctx) else None
                    if logp is None:
                        continue
                backoff = None
                if m < self.order:
                    table = self.counts[m + 1].get(gram)
                    if table:
                        total = sum(table.values())
                        gamma = self.discounts[m + 1] * len(table) / total
                        backoff = math.log10(gamma) if gamma > 0 else -99.0
                rows.append((m, gram, logp, backoff))
        return rows

    def _arpa_entries(self):
        tables, backoffs = self._arpa
        rows = []
        for m in range(1, self.order + 1):
            grams = sorted(ctx + (w,) for ctx, table in tables[m].items() for w in table)
            for gram in grams:
                p = tables[m][gram[:-1]][gram[-1]]
                logp = math.log10(p) if p > 0 else -99.0
                bo = backoffs.get(gram)
                rows.append((m, gram, logp, None if bo is None else (math.log10(bo) if bo > 0 else -99.0)))
        return rows

    def _exact_context(self, ctx: tuple) -> bool:
        return not ctx or self._known_suffix(ctx) == ctx

    def write_arpa(self, path) -> None:
        rows = self._entries()
        by_order = defaultdict(list)
        for r in rows:
            by_order[r[0]].append(r)
        lines = ["\\data\\"]
        lines += [f"ngram {m}={len(by_order[m])}" for m in range(1, self.order + 1)]
        for m in range(1, self.order + 1):
            lines += ["", f"\\{m}-grams:"]
            for _, gram, logp, backoff in by_order[m]:
                line = f"{logp:.17g}\t{' '.join(gram)}"
                if backoff is not None:
                    line += f"\t{backoff:.17g}"
                lines.append(line)
        lines += ["", "\\end\\", ""]
        Path(path).write_text("\n".join(lines), encoding="utf-8")

    @classmethod
    def read_arpa(cls, path, bos: str = BOS, eos: str = EOS) -> "NGramLM":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"language model not found: {path}")
        probs: dict = {}
        backoffs: dict = {}
        order = 0
        section = None
        for n, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            line = raw.strip()
            if not line or line == "\\data\\" or line.startswith("ngram "):
                if line.startswith("ngram "):
                    order = max(order, int(line[6:].split("=")[0]))
                continue
            if line == "\\end\\":
                break
            if line.startswith("\\") and line.endswith("-grams:"):
                section = int(line[1:line.index("-")])
                continue
            if section is None:
                raise LmFormatError(f"{path}:{n}: entry outside an n-gram section")
            parts = line.split("\t")
            if len(parts) not in (2, 3):
                raise LmFormatError(f"{path}:{n}: malformed ARPA entry")
            gram = tuple(parts[1].split(" "))
            if len(gram) != section:
                raise LmFormatError(f"{path}:{n}: expected a {section}-gram")
            probs[gram] = 10.0 ** float(parts[0])
            if len(parts) == 3:
                backoffs[gram] = 10.0 ** float(parts[2])
        if order == 0:
            raise LmFormatError(f"{path}: missing \\data\\ header")
        events = [g[0] for g in probs if len(g) == 1 and g[0] != bos]
        lm = cls(order, events, bos, eos)
        tables = [dict() for _ in range(order + 1)]
        for gram, p in probs.items():
            tables[len(gram)].setdefault(gram[:-1], {})[gram[-1]] = p
        lm._arpa = (tables, backoffs)
        return lm

    def _arpa_distribution(self, ctx: tuple) -> dict:
        tables, backoffs = self._arpa
        if not ctx:
            return {w: tables[1][()].get(w, 0.0) for w in self.events}
        lower = self.distribution(ctx[1:])
        listed = tables[len(ctx) + 1].get(ctx, {})
        bo = backoffs.get(ctx, 1.0)
        return {w: listed[w] if w in listed else bo * lower[w] for w in self.events}


# LSTM LM ---------------------------------------------------------------------------------


@dataclass(frozen=True)
class LstmLMConfig:
    proj: int = 32
    layers: int = 1
    units: int = 128
    dropout: float = 0.2
    lr: float = 1.0
    clip_norm: float = 5.0
    epochs: int = 10
    batch_size: int = 16


# the recognizer-scale configuration described for full-size experiments
FULL_SCALE_LSTM_LM = LstmLMConfig(proj=512, layers=2, units=2048, dropout=0.2)


class LstmLM:
    """Embedding projection, stacked LSTM layers and a softmax over the BPE vocab."""

    def __init__(self, config: LstmLMConfig, vocab_size: int, params: dict, bos_id: int = 0,
                 eos_id: int = 1, blank_id: int = 2):
        self.config = config
        self.vocab_size = vocab_size
        self.params = params
        self.bos_id, self.eos_id, self.blank_id = bos_id, eos_id, blank_id
        mask = np.zeros(vocab_size, dtype=bool)
        mask[[bos_id, blank_id]] = True
        self._excluded = mask

    @classmethod
    def create(cls, config: LstmLMConfig, vocab_size: int, seed: int = 0, dtype=np.float32) -> "LstmLM":
        rng = np.random.default_rng(seed)
        arrays = {"lm.embed": glorot(rng, (vocab_size, config.proj), dtype)}
        in_dim = config.proj
        for layer in range(config.layers):
            arrays[f"lm.{layer}.W"], arrays[f"lm.{layer}.b"] = init_lstm(rng, in_dim, config.units, dtype)
            in_dim = config.units
        arrays["lm.out.W"] = glorot(rng, (vocab_size, config.units), dtype)
        arrays["lm.out.b"] = np.zeros(vocab_size, dtype=dtype)
        return cls(config, vocab_size, {k: Tensor(v, requires_grad=True) for k, v in arrays.items()})

    def as_dtype(self, dtype) -> "LstmLM":
        params = {k: Tensor(v.data.astype(dtype)) for k, v in self.params.items()}
        return LstmLM(self.config, self.vocab_size, params, self.bos_id, self.eos_id, self.blank_id)

    def _mask_logits(self, logits: Tensor) -> Tensor:
        penalty = np.where(self._excluded, -1e9, 0.0).astype(logits.dtype)
        return logits + Tensor(penalty)

    def forward(self, inputs: np.ndarray, lengths: np.ndarray, dropout: float = 0.0, rng=None) -> Tensor:
        """Logits (B×N×V) for padded input ids."""
        x = ag.take(self.params["lm.embed"], inputs)
        for layer in range(self.config.layers):
            if dropout > 0.0:
                x = ag.dropout(x, dropout, rng)
            x = ag.lstm_layer(x, self.params[f"lm.{layer}.W"], self.params[f"lm.{layer}.b"], lengths)
        return self._mask_logits(ag.linear(x, self.params["lm.out.W"], self.params["lm.out.b"]))

    # scorer interface

    def start(self, features=None):
        dt = self.params["lm.out.W"].dtype
        zeros = np.zeros((1, self.config.units), dtype=dt)
        return [(zeros, zeros) for _ in range(self.config.layers)]

    def score(self, state, prev_tokens):
        with ag.no_grad():
            x = ag.take(self.params["lm.embed"], np.asarray(prev_tokens, dtype=np.int64))
            new_state = []
            for layer, (h, c) in enumerate(state):
                h, c = ag.lstm_step(x, Tensor(h), Tensor(c), self.params[f"lm.{layer}.W"],
                                    self.params[f"lm.{layer}.b"])
                new_state.append((h.data, c.data))
                x = h
            logits = self._mask_logits(ag.linear(x, self.params["lm.out.W"], self.params["lm.out.b"]))
        z = logits.data.astype(np.float64)
        z = z - z.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        logp[:, self._excluded] = -np.inf
        return logp, new_state

    def select(self, state, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return [(h[idx], c[idx]) for h, c in state]

    def sequence_logprobs(self, tokens: Sequence[int]) -> list[float]:
        state = self.start()
        prev = np.array([self.bos_id])
        out = []
        for tok in list(tokens) + [self.eos_id]:
            logp, state = self.score(state, prev)
            out.append(float(logp[0, tok]))
            prev = np.array([tok])
        return out

    # persistence

    def save(self, path, vocab_tokens: Sequence[str] | None = None) -> None:
        doc = {f"lm.{k}": v for k, v in asdict(self.config).items()}
        doc.update({"checkpoint.kind": "lstm-lm", "lm.vocab_size": self.vocab_size})
        if vocab_tokens is not None:
            doc["bpe.vocab"] = list(vocab_tokens)
        ckpt.save_checkpoint(path, dump_text(doc), {k: v.data for k, v in self.params.items()})

    @classmethod
    def load(cls, path) -> "LstmLM":
        text, tensors = ckpt.load_checkpoint(path)
        doc = parse_text(text, str(path))
        if doc.get("checkpoint.kind") != "lstm-lm":
            raise LmFormatError(f"{path}: not an LSTM LM checkpoint")
        fields = LstmLMConfig.__dataclass_fields__
        config = LstmLMConfig(**{k[3:]: v for k, v in doc.items() if k[3:] in fields and k.startswith("lm.")})
        return cls(config, int(doc["lm.vocab_size"]), {k: Tensor(v) for k, v in tensors.items()})


def _pad_lm_batch(seqs: list, bos: int, eos: int):
    N = max(len(s) for s in seqs) + 1
    inputs = np.full((len(seqs), N), eos, dtype=np.int64)
    outputs = np.full((len(seqs), N), eos, dtype=np.int64)
    mask = np.zeros((len(seqs), N), dtype=bool)
    for b, s in enumerate(seqs):
        inputs[b, 0] = bos
        inputs[b, 1:len(s) + 1] = s
        outputs[b, :len(s)] = s
        outputs[b, len(s)] = eos
        mask[b, :len(s) + 1] = True
    return inputs, outputs, mask, np.array([len(s) + 1 for s in seqs])


def lm_batch_nll(lm: LstmLM, seqs: list, dropout: float = 0.0, rng=None) -> Tensor:
    """Summed token NLL (EOS included) of a list of id sequences."""
    inputs, outputs, mask, lengths = _pad_lm_batch(seqs, lm.bos_id, lm.eos_id)
    logits = lm.forward(inputs, lengths, dropout, rng)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    np.put_along_axis(onehot, outputs[..., None], 1.0, axis=-1)
    onehot *= mask[..., None]
    return -ag.tsum(ag.log_softmax(logits, axis=-1) * Tensor(onehot))


def train_lstm_lm(corpus: Sequence[Sequence[int]], vocab_size: int, config: LstmLMConfig = LstmLMConfig(),
                  seed: int = 0, log=None) -> LstmLM:
    """Plain SGD with global-norm clipping and dropout before every LSTM layer."""
    from .trainer import clip_global_norm

    seqs = [list(s) for s in corpus]
    if not seqs:
        raise ValueError("empty LM training corpus")
    lm = LstmLM.create(config, vocab_size, seed)
    for epoch in range(config.epochs):
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(len(seqs))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = [seqs[i] for i in order[start:start + config.batch_size]]
            labels = sum(len(s) + 1 for s in batch)
            for p in lm.params.values():
                p.grad = None
            with ag.Tape() as tape:
                loss = lm_batch_nll(lm, batch, config.dropout, rng) * (1.0 / labels)
            tape.backward(loss)
            grads = {k: np.zeros_like(p.data) if p.grad is None else p.grad for k, p in lm.params.items()}
            grads = clip_global_norm(grads, config.clip_norm)
            for k, g in grads.items():
                p = lm.params[k]
                p.data = (p.data - config.lr * g).astype(p.dtype)
            total += float(loss.item()) * labels
            count += labels
        if log:
            log(f"lm epoch {epoch + 1} train ppl {math.exp(total / count):.3f}")
    return lm


# scoring -------------------------------------------------------------------------------


class UniformLM:
    """Every event equally likely; perplexity equals the number of events."""

    def __init__(self, events: Sequence):
        self.events = list(events)

    def sequence_logprobs(self, tokens: Sequence) -> list[float]:
        return [-math.log(len(self.events))] * (len(tokens) + 1)


def lm_logprob(model, tokens: Sequence) -> float:
    """Total natural-log probability of ``tokens`` followed by EOS."""
    return float(math.fsum(model.sequence_logprobs(tokens)))


def perplexity(model, corpus: Iterable[Sequence]) -> float:
    """``exp(-total logprob / predicted events)``, counting one EOS per sequence."""
    total, events = [], 0
    for seq in corpus:
        total.extend(model.sequence_logprobs(seq))
        events += len(seq) + 1
    if events == 0:
        raise ValueError("empty evaluation corpus")
    return math.exp(-math.fsum(total) / events)


class NGramScorer:
    """Adapts a string-token :class:`NGramLM` to the id-based search interface."""

    def __init__(self, lm: NGramLM, vocab_tokens: Sequence[str]):
        self.lm = lm
        self.tokens = list(vocab_tokens)
        self.index = {w: i for i, w in enumerate(self.tokens)}
        self._rows: dict = {}

    def _row(self, ctx: tuple) -> np.ndarray:
        row = self._rows.get(ctx)
        if row is None:
            dist = self.lm.distribution(ctx)
            row = np.full(len(self.tokens), -np.inf)
            for w, p in dist.items():
                i = self.index.get(w)
                if i is not None and p > 0:
                    row[i] = math.log(p)
            self._rows[ctx] = row
        return row

    def start(self, features=None):
        return [()]

    def score(self, state, prev_tokens):
        keep = max(self.lm.order - 1, 0)
        new_state = []
        for ctx, tok in zip(state, np.asarray(prev_tokens)):
            ctx = (ctx + (self.tokens[int(tok)],))[-keep:] if keep else ()
            new_state.append(ctx)
        return np.stack([self._row(c) for c in new_state]), new_state

    def select(self, state, idx):
        return [state[int(i)] for i in idx]


def load_lm(path, vocab_tokens: Sequence[str]):
    """Load an ARPA file or an LSTM LM checkpoint as a search scorer."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"language model not found: {path}")
    with open(path, "rb") as f:
        head = f.read(8)
    if head == ckpt.MAGIC:
        lm = LstmLM.load(path)
        if lm.vocab_size != len(vocab_tokens):
            raise LmFormatError(f"{path}: LM vocabulary size {lm.vocab_size} != recognizer {len(vocab_tokens)}")
        return lm.as_dtype(np.float64)
    return NGramScorer(NGramLM.read_arpa(path), vocab_tokens)


def lm_events(vocab_tokens: Sequence[str]) -> list[str]:
    return [t for t in vocab_tokens if t not in (BOS, BLANK)]
