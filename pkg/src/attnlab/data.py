"""Manifests, transcript normalization, feature caching and the toy corpus."""

from __future__ import annotations

import hashlib
import os
import queue
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .features import (FormatError, MfccConfig, Signal, load_features, mfcc, read_wav,
                       save_features, write_wav)

CACHE_ENV = "ATTNLAB_CACHE_DIR"
_EVENT_RE = re.compile(r"\[[^\[\]\s]+\]")


class DataError(ValueError):
    pass


@dataclass
class Utterance:
    id: str
    wav: str
    words: list
    features: np.ndarray | None = None
    tokens: list = field(default_factory=list)

    @property
    def num_frames(self) -> int:
        return 0 if self.features is None else len(self.features)


def normalize_transcript(text: str) -> str:
    """Lowercase and collapse whitespace; bracketed events stay verbatim."""
    out = []
    for word in text.split():
        out.append(word if _EVENT_RE.fullmatch(word) else word.lower())
    return " ".join(out)


def read_manifest(path, max_chars: int | None = None) -> list[Utterance]:
    """Read ``id<TAB>wav<TAB>transcript`` lines; wav paths resolve against the manifest."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    seen = set()
    out = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{n}: expected 3 tab-separated fields, got {len(parts)}")
        uid, wav, text = parts
        if uid in seen:
            raise DataError(f"{path}:{n}: duplicate utterance id {uid!r}")
        seen.add(uid)
        text = normalize_transcript(text)
        if not text:
            raise DataError(f"{path}:{n}: empty transcript for {uid!r}")
        if max_chars is not None and len(text) > max_chars:
            continue
        wav_path = Path(wav)
        if not wav_path.is_absolute():
            wav_path = path.parent / wav_path
        out.append(Utterance(uid, str(wav_path), text.split()))
    return out


def write_manifest(path, utterances: Iterable[Utterance], relative_to=None) -> None:
    lines = []
    for u in utterances:
        wav = os.path.relpath(u.wav, relative_to) if relative_to else u.wav
        lines.append(f"{u.id}\t{wav}\t{' '.join(u.words)}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_transcripts(path) -> list[tuple[str | None, list]]:
    """Lines of words, optionally ``id<TAB>...<TAB>words`` (last field is the text)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"text file not found: {path}")
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if "\t" in line:
            parts = line.split("\t")
            out.append((parts[0], normalize_transcript(parts[-1]).split()))
        elif line.strip():
            out.append((None, normalize_transcript(line).split()))
    return out


# features ----------------------------------------------------------------------


def _cache_key(wav: Path, config: MfccConfig) -> str:
    st = wav.stat()
    h = hashlib.sha1(f"{wav.resolve()}|{st.st_size}|{st.st_mtime_ns}|{config!r}".encode())
    return h.hexdigest()


def featurize(wav_path, config: MfccConfig, cache_dir=None) -> np.ndarray:
    wav = Path(wav_path)
    cache_dir = cache_dir or os.environ.get(CACHE_ENV)
    if cache_dir and wav.exists():
        cached = Path(cache_dir) / (_cache_key(wav, config) + ".feat")
        if cached.exists():
            return load_features(cached)
        frames = mfcc(read_wav(wav), config).frames
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        tmp = cached.with_suffix(f".tmp{os.getpid()}")
        save_features(tmp, frames)
        os.replace(tmp, cached)
        return frames
    return mfcc(read_wav(wav), config).frames


def prefetch(items: Iterable, maxsize: int = 4) -> Iterator:
    """Run ``items`` on a producer thread, buffering at most ``maxsize`` results.

    The producer blocks while the buffer is full; exceptions are re-raised
    in the consumer.
    """
    if maxsize <= 0:
        yield from items
        return
    q: queue.Queue = queue.Queue(maxsize=maxsize)
    done = object()
    stop = threading.Event()

    def put(entry) -> bool:
        while not stop.is_set():
            try:
                q.put(entry, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def produce():
        try:
            for item in items:
                if not put((True, item)):
                    return
            put((True, done))
        except BaseException as exc:  # handed to the consumer
            put((False, exc))

    thread = threading.Thread(target=produce, daemon=True)
    thread.start()
    try:
        while True:
            ok, item = q.get()
            if not ok:
                raise item
            if item is done:
                return
            yield item
    finally:
        stop.set()
        thread.join(timeout=5)


def load_features_for(utterances: list[Utterance], config: MfccConfig, cache_dir=None,
                      workers: int = 4) -> list[Utterance]:
    """Fill ``features`` for every utterance, extracting ahead on a background thread."""
    gen = ((u, featurize(u.wav, config, cache_dir)) for u in utterances)
    for u, frames in prefetch(gen, workers):
        u.features = frames
    return utterances


# toy corpus -----------------------------------------------------------------------

TOY_LEXICON = {
    "det": ["the", "a", "my", "your"],
    "adj": ["red", "big", "old", "small", "green", "fast"],
    "noun": ["cat", "dog", "bird", "fish", "car", "boat"],
    "verb": ["runs", "sits", "sings", "jumps", "swims", "waits"],
    "adv": ["now", "here", "today"],
}
TOY_EVENT = "[noise]"
TOY_RATE = 16000


def toy_words() -> list[str]:
    return [w for group in TOY_LEXICON.values() for w in group]


def toy_templates() -> dict:
    """Fixed three-tone chord per word; identical for every seed.

    Any two words share at most one tone, so each frame identifies its word.
    """
    rng = np.random.default_rng(20240601)
    grid = np.geomspace(300.0, 3400.0, 14)
    templates, used = {}, []
    for word in toy_words():
        while True:
            combo = set(int(i) for i in rng.choice(len(grid), size=3, replace=False))
            if all(len(combo & other) <= 1 for other in used):
                used.append(combo)
                break
        templates[word] = [float(grid[i]) for i in sorted(combo)]
    return templates


def toy_sentence(rng: np.random.Generator) -> list[str]:
    lex = TOY_LEXICON
    words = [rng.choice(lex["det"])]
    if rng.random() < 0.5:
        words.append(rng.choice(lex["adj"]))
    words += [rng.choice(lex["noun"]), rng.choice(lex["verb"])]
    if rng.random() < 0.5:
        words.append(rng.choice(lex["adv"]))
    if rng.random() < 0.1:
        words.insert(0, TOY_EVENT)
    return [str(w) for w in words]


def render_toy(words: list[str], rng: np.random.Generator, templates: dict, sr: int = TOY_RATE) -> np.ndarray:
    pitch = rng.uniform(0.97, 1.03)
    amp = rng.uniform(0.3, 0.6)
    pieces = [np.zeros(int(sr * rng.uniform(0.05, 0.1)))]
    for k, word in enumerate(words):
        if k:
            pieces.append(np.zeros(int(sr * rng.uniform(0.03, 0.06))))
        if word == TOY_EVENT:
            pieces.append(rng.normal(0.0, 0.25, int(sr * 0.15)))
            continue
        n = int(sr * 0.3 * rng.uniform(0.85, 1.15))
        t = np.arange(n) / sr
        ramp = np.minimum(1.0, np.minimum(t, t[::-1]) / 0.005)
        chord = sum(np.sin(2 * np.pi * f * pitch * t + rng.uniform(0, 2 * np.pi)) for f in templates[word])
        pieces.append(amp / 3 * ramp * chord)
    pieces.append(np.zeros(int(sr * rng.uniform(0.05, 0.1))))
    x = np.concatenate(pieces)
    return np.clip(x + rng.normal(0.0, 0.01, len(x)), -1.0, 1.0)


def make_toy_data(out_dir, num_train: int = 200, num_dev: int = 40, seed: int = 0) -> dict:
    """Write WAVs plus train/dev manifests and transcripts under ``out_dir``.

    Returns the manifest paths. Output is byte-identical for a fixed seed.
    """
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    templates = toy_templates()
    paths = {}
    for split, count in (("train", num_train), ("dev", num_dev)):
        utts = []
        for i in range(count):
            uid = f"{split}-{i:04d}"
            words = toy_sentence(rng)
            wav = out / "wav" / f"{uid}.wav"
            write_wav(wav, Signal(render_toy(words, rng, templates), TOY_RATE))
            utts.append(Utterance(uid, str(wav), words))
        write_manifest(out / f"{split}.tsv", utts, relative_to=out)
        (out / f"{split}.txt").write_text("".join(" ".join(u.words) + "\n" for u in utts), encoding="utf-8")
        paths[split] = out / f"{split}.tsv"
    return paths


__all__ = ["DataError", "FormatError", "Utterance", "normalize_transcript", "read_manifest",
           "write_manifest", "read_transcripts", "featurize", "prefetch", "load_features_for",
           "make_toy_data", "toy_words", "toy_templates", "CACHE_ENV"]
