import threading
import time

import numpy as np
import pytest

from attnlab.data import (CACHE_ENV, DataError, featurize, make_toy_data, normalize_transcript, prefetch,
                          read_manifest, read_transcripts, toy_templates, toy_words)
from attnlab.features import MfccConfig


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_normalize_keeps_events():
    assert normalize_transcript("  The  CAT [noise] Sat ") == "the cat [noise] sat"
    assert normalize_transcript("[NOISE]") == "[NOISE]"


def test_manifest_resolves_relative_paths(tmp_path):
    m = write(tmp_path / "m.tsv", "u1\twav/a.wav\tHello World\n\nu2\t/abs/b.wav\tok\n")
    utts = read_manifest(m)
    assert [u.id for u in utts] == ["u1", "u2"]
    assert utts[0].wav == str(tmp_path / "wav" / "a.wav")
    assert utts[0].words == ["hello", "world"]
    assert utts[1].wav == "/abs/b.wav"


def test_manifest_max_chars_filters(tmp_path):
    m = write(tmp_path / "m.tsv", "a\tx.wav\tshort\nb\tx.wav\ta much longer line\n")
    assert [u.id for u in read_manifest(m, max_chars=6)] == ["a"]


@pytest.mark.parametrize("text,needle", [
    ("a\tx.wav\n", ":1: expected 3"),
    ("a\tx.wav\thi\na\ty.wav\tyo\n", ":2: duplicate"),
    ("a\tx.wav\t   \n", ":1: empty transcript"),
])
def test_manifest_errors(tmp_path, text, needle):
    m = write(tmp_path / "m.tsv", text)
    with pytest.raises(DataError, match=needle):
        read_manifest(m)


def test_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_manifest(tmp_path / "nope.tsv")


def test_read_transcripts_with_and_without_ids(tmp_path):
    t = write(tmp_path / "t.txt", "u1\tA B\nplain Words\n\n")
    assert read_transcripts(t) == [("u1", ["a", "b"]), (None, ["plain", "words"])]


def test_feature_cache_is_used(tmp_path, toy_small, monkeypatch):
    wav = read_manifest(toy_small["train"])[0].wav
    cache = tmp_path / "cache"
    monkeypatch.setenv(CACHE_ENV, str(cache))
    first = featurize(wav, MfccConfig())
    files = list(cache.glob("*.feat"))
    assert len(files) == 1
    again = featurize(wav, MfccConfig())
    np.testing.assert_array_equal(first, again)
    featurize(wav, MfccConfig(normalize="mean"))
    assert len(list(cache.glob("*.feat"))) == 2
    monkeypatch.delenv(CACHE_ENV)
    np.testing.assert_array_equal(featurize(wav, MfccConfig()), first)


def test_prefetch_preserves_order_and_bounds_buffer():
    produced = []

    def gen():
        for i in range(20):
            produced.append(i)
            yield i

    it = prefetch(gen(), maxsize=2)
    assert next(it) == 0
    time.sleep(0.2)
    # one consumed, at most two buffered, one held by the blocked producer
    assert len(produced) <= 4
    assert list(it) == list(range(1, 20))


def test_prefetch_propagates_exceptions():
    def gen():
        yield 1
        raise RuntimeError("boom")

    it = prefetch(gen(), maxsize=3)
    assert next(it) == 1
    with pytest.raises(RuntimeError, match="boom"):
        next(it)


def test_prefetch_close_stops_producer():
    before = threading.active_count()
    it = prefetch(iter(range(10 ** 6)), maxsize=1)
    next(it)
    it.close()
    time.sleep(0.3)
    assert threading.active_count() <= before


def test_toy_vocabulary_is_small_and_templates_distinct():
    words = toy_words()
    assert len(set(words)) <= 30
    chords = [set(v) for v in toy_templates().values()]
    for i in range(len(chords)):
        for j in range(i):
            assert len(chords[i] & chords[j]) <= 1


def test_toy_data_is_deterministic(tmp_path):
    a = make_toy_data(tmp_path / "a", 3, 2, seed=5)
    b = make_toy_data(tmp_path / "b", 3, 2, seed=5)
    for split in ("train", "dev"):
        assert a[split].read_text() == b[split].read_text()
        for ua, ub in zip(read_manifest(a[split]), read_manifest(b[split])):
            assert open(ua.wav, "rb").read() == open(ub.wav, "rb").read()
    vocab = {w for u in read_manifest(a["train"]) for w in u.words}
    assert vocab <= set(toy_words()) | {"[noise]"}
