"""Add-one bigram language model with a unigram cache, for SS_theta scoring."""

from __future__ import annotations

import math
from collections import Counter
from typing import Iterable, Sequence

from .core import terms

BOS = "<s>"
SEP = "<sep>"
UNK = "<unk>"


class BigramLM:
    """Add-one smoothed bigram model interpolated with a dynamic unigram cache.

    A plain bigram only sees one token of history, so a conditioning prefix
    would affect nothing beyond the first predicted token.  The cache holds
    every content token seen so far (prefix and already-predicted text), with
    a Dirichlet prior toward the add-one unigram:

        P(w | prev, cache) = (1 - lam) * P_bigram(w | prev)
                             + lam * (n_cache(w) + beta * P_uni(w)) / (|cache| + beta)

    The separator restarts the bigram context (it is scored like ``<s>``) and
    never enters the cache.
    """

    def __init__(self, corpus: Iterable[str], cache_weight: float = 0.5, cache_prior: float = 5.0):
        if not 0.0 <= cache_weight < 1.0:
            raise ValueError("cache_weight must be in [0, 1)")
        self.lam = cache_weight
        self.beta = cache_prior
        self.unigram: Counter[str] = Counter()
        self.bigram: Counter[tuple[str, str]] = Counter()
        self.history: Counter[str] = Counter()
        for text in corpus:
            toks = terms(text)
            self.unigram.update(toks)
            for prev, w in zip([BOS] + toks, toks):
                self.bigram[(prev, w)] += 1
                self.history[prev] += 1
        self.vocab = set(self.unigram) | {UNK}
        self.V = len(self.vocab)
        self.N = sum(self.unigram.values())

    def _norm(self, w: str) -> str:
        return w if w in self.vocab else UNK

    def p_unigram(self, w: str) -> float:
        return (self.unigram.get(w, 0) + 1) / (self.N + self.V)

    def p_bigram(self, w: str, prev: str) -> float:
        return (self.bigram.get((prev, w), 0) + 1) / (self.history.get(prev, 0) + self.V)

    def nll(self, text: Sequence[str] | str, context: Sequence[str] | str | None = None) -> float:
        """-ln P(text), optionally conditioned on ``context`` followed by the separator."""
        toks = [self._norm(t) for t in (terms(text) if isinstance(text, str) else text)]
        cache: Counter[str] = Counter()
        prev = BOS
        if context is not None:
            ctx = [self._norm(t) for t in (terms(context) if isinstance(context, str) else context)]
            cache.update(ctx)
            prev = BOS  # separator restarts the bigram context
        size = sum(cache.values())
        total = 0.0
        for w in toks:
            pc = (cache.get(w, 0) + self.beta * self.p_unigram(w)) / (size + self.beta)
            p = (1 - self.lam) * self.p_bigram(w, prev) + self.lam * pc
            total -= math.log(p)
            cache[w] += 1
            size += 1
            prev = w
        return total
