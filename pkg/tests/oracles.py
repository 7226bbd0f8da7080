"""Brute-force reference computations used as independent test oracles."""

import itertools
from functools import lru_cache

import numpy as np


@lru_cache(maxsize=None)
def _paths(T: int, C: int):
    paths = np.array(list(itertools.product(range(C), repeat=T)), dtype=np.int64).reshape(-1, T)
    return paths


def collapse(path, blank: int) -> tuple:
    out, prev = [], None
    for s in path:
        if s != prev and s != blank:
            out.append(int(s))
        prev = s
    return tuple(out)


@lru_cache(maxsize=None)
def _collapsed(T: int, C: int, blank: int):
    return [collapse(p, blank) for p in _paths(T, C)]


def ctc_brute_force(dist: np.ndarray, target, blank: int) -> float:
    """Negative log of the summed probability of every path that collapses to ``target``."""
    T, C = dist.shape
    paths = _paths(T, C)
    hits = np.array([c == tuple(target) for c in _collapsed(T, C, blank)])
    if not hits.any():
        return float("inf")
    probs = np.prod(dist[np.arange(T)[None, :], paths[hits]], axis=1)
    total = float(np.sum(np.sort(probs)))
    return -np.log(total) if total > 0 else float("inf")


def exhaustive_decode(model, features, max_len: int, lm=None, weight: float = 0.0):
    """Best EOS-terminated sequence within ``max_len`` steps by depth-first enumeration.

    Scores every prefix with fresh scorer calls, so no beam bookkeeping is shared
    with the search under test. Returns (score, tokens).
    """
    best = (-np.inf, None)
    eos = 1

    def visit(prefix, am_state, lm_state, am, lmv, steps):
        nonlocal best
        prev = np.array([prefix[-1] if prefix else 0])
        logp, am_next = model.score(am_state, prev)
        if lm is not None:
            lp, lm_next = lm.score(lm_state, prev)
        V = logp.shape[1]
        for v in range(V):
            a = am + logp[0, v]
            lv = lmv + (lp[0, v] if lm is not None else 0.0)
            s = a + weight * lv if weight else a
            if not np.isfinite(s):
                continue
            if v == eos:
                if s > best[0]:
                    best = (s, tuple(prefix))
            elif steps + 1 < max_len:
                visit(prefix + [v], am_next, lm_next if lm is not None else None, a, lv, steps + 1)

    visit([], model.start(features), lm.start(features) if lm is not None else None, 0.0, 0.0, 0)
    return best
