"""Byte-pair-encoded subword units with an "@@" continuation marker."""

from __future__ import annotations

import re
from collections import Counter
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

MARKER = "@@"
BOS, EOS, BLANK, UNK = "<s>", "</s>", "<blank>", "<unk>"
RESERVED = (BOS, EOS, BLANK)
SPECIAL_TOKENS = ("[noise]", "[vocalized-noise]", "[laughter]")
_SPECIAL_RE = re.compile(r"^\[[^\[\]\s]+\]$")


class BpeVocab:
    """Bijective token <-> id table.

    Layout: 0 BOS, 1 EOS, 2 CTC blank, 3 <unk>, then the special event
    tokens, then subword tokens.
    """

    bos_id, eos_id, blank_id, unk_id = 0, 1, 2, 3

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tokens[:4] != [BOS, EOS, BLANK, UNK]:
            raise ValueError("vocabulary must start with <s>, </s>, <blank>, <unk>")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate token in vocabulary")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        specials = []
        for t in tokens[4:]:
            if not _SPECIAL_RE.match(t):
                break
            specials.append(t)
        self.specials = tuple(specials)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def __eq__(self, other):
        return isinstance(other, BpeVocab) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self.index.get(token, self.unk_id)

    def token(self, i: int) -> str:
        return self.tokens[i]

    def ids_to_tokens(self, ids: Iterable[int]) -> list[str]:
        """Map ids to token strings, dropping BOS/EOS/blank."""
        return [self.tokens[i] for i in ids if i > self.blank_id]

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "BpeVocab":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


class Merges(list):
    """Ordered merge list; index is the priority (0 = applied first)."""

    def __init__(self, pairs: Iterable[tuple[str, str]] = ()):
        super().__init__(tuple(p) for p in pairs)
        if len(set(self)) != len(self):
            raise ValueError("duplicate merge pair")

    def ranks(self) -> dict:
        return {p: i for i, p in enumerate(self)}

    def save(self, path) -> None:
        Path(path).write_text("".join(f"{a} {b}\n" for a, b in self), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Merges":
        pairs = []
        for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            parts = line.split(" ")
            if len(parts) != 2 or not all(parts):
                raise ValueError(f"{path}:{n}: expected two space-separated symbols")
            pairs.append((parts[0], parts[1]))
        return cls(pairs)


class Words(list):
    """Word list produced by :func:`merge_to_words`.

    ``dangling_marker`` is set when the last token still carried "@@".
    """

    dangling_marker = False


def _iter_words(corpus) -> Iterable[str]:
    for item in corpus:
        if isinstance(item, str):
            yield from item.split()
        else:
            yield from item


def _merge_symbols(symbols: tuple, pair: tuple) -> tuple:
    a, b = pair
    out = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == a and symbols[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


def build_vocab(alphabet: Iterable[str], merges: Merges, specials=SPECIAL_TOKENS) -> BpeVocab:
    symbols = sorted(set(alphabet))
    seen = set(symbols)
    for a, b in merges:
        if a + b not in seen:
            seen.add(a + b)
            symbols.append(a + b)
    tokens = [BOS, EOS, BLANK, UNK, *specials]
    for s in symbols:
        tokens += [s + MARKER, s]
    return BpeVocab(tokens)


def learn_bpe(corpus, num_merges: int, specials=SPECIAL_TOKENS) -> tuple[Merges, BpeVocab]:
    """Learn merges by repeatedly joining the most frequent adjacent pair.

    ``corpus`` holds sentences, each a whitespace-separated string or a list
    of words. Ties go to the lexicographically smallest pair; learning stops
    early once no pair occurs at least twice.
    """
    if num_merges < 0:
        raise ValueError("num_merges must be >= 0")
    specials = tuple(specials)
    words = Counter(w for w in _iter_words(corpus) if w not in specials)
    if not words and not specials:
        raise ValueError("empty corpus")
    vocab_words = {tuple(w): c for w, c in words.items()}
    alphabet = {ch for w in words for ch in w}
    merges = Merges()
    for _ in range(num_merges):
        pairs: Counter = Counter()
        for sym, count in vocab_words.items():
            for pair in zip(sym, sym[1:]):
                pairs[pair] += count
        if not pairs:
            break
        best = min(pairs, key=lambda p: (-pairs[p], p))
        if pairs[best] < 2:
            break
        merges.append(best)
        vocab_words = {_merge_symbols(s, best): c for s, c in vocab_words.items()}
    return merges, build_vocab(alphabet, merges, specials)


class BpeCodec:
    """Applies learned merges; encode results are cached per word."""

    def __init__(self, merges: Merges, vocab: BpeVocab):
        self.merges = merges
        self.vocab = vocab
        self._ranks = merges.ranks()
        self._segment = lru_cache(maxsize=65536)(self._segment_uncached)

    def _segment_uncached(self, word: str) -> tuple:
        symbols = tuple(word)
        ranks = self._ranks
        while len(symbols) > 1:
            candidates = [ranks[p] for p in zip(symbols, symbols[1:]) if p in ranks]
            if not candidates:
                break
            symbols = _merge_symbols(symbols, self.merges[min(candidates)])
        return symbols

    def word_tokens(self, word: str) -> list[str]:
        if word in self.vocab.specials:
            return [word]
        symbols = self._segment(word)
        tokens = [s + MARKER for s in symbols[:-1]] + list(symbols[-1:])
        return [t if t in self.vocab else UNK for t in tokens]

    def encode_tokens(self, words: Iterable[str]) -> list[str]:
        out = []
        for w in words:
            out.extend(self.word_tokens(w))
        return out

    def encode(self, words: Iterable[str]) -> list[int]:
        return [self.vocab.id(t) for t in self.encode_tokens(words)]

    def decode(self, ids: Iterable[int]) -> Words:
        return merge_to_words(self.vocab.ids_to_tokens(ids))


def encode_words(words: Iterable[str], merges: Merges, vocab: BpeVocab) -> list[int]:
    return BpeCodec(merges, vocab).encode(words)


def merge_to_words(tokens: Sequence[str]) -> Words:
    words = Words()
    current = ""
    for tok in tokens:
        if tok.endswith(MARKER):
            current += tok[: -len(MARKER)]
        else:
            words.append(current + tok)
            current = ""
    if current:
        words.append(current)
        words.dangling_marker = True
    return words
