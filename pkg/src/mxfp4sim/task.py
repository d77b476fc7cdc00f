"""Synthetic next-token task: a fixed random order-k Markov chain over a small vocabulary.

The model sees the previous ``context`` tokens as concatenated one-hot
vectors and predicts the next token. The chain's conditional entropy is the
irreducible loss floor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DataConfig:
    vocab: int = 32
    context: int = 2
    concentration: float = 0.1  # Dirichlet alpha; smaller = peakier transitions
    corpus_tokens: int = 200_000
    val_tokens: int = 2048
    seed: int = 1234

    @property
    def input_dim(self) -> int:
        return self.vocab * self.context


class MarkovCorpus:
    def __init__(self, cfg: DataConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        n_ctx = cfg.vocab**cfg.context
        self.transitions = rng.dirichlet(np.full(cfg.vocab, cfg.concentration), size=n_ctx)
        self._cdf = np.cumsum(self.transitions, axis=1)
        self._cdf[:, -1] = 1.0
        self.train_tokens = self._sample(rng, cfg.corpus_tokens)
        self.val_tokens = self._sample(rng, cfg.val_tokens + cfg.context)
        self.val_x, self.val_y = self.windows(
            self.val_tokens, np.arange(cfg.val_tokens)
        )

    def _ctx_index(self, ctx: np.ndarray) -> np.ndarray:
        idx = np.zeros(ctx.shape[0], dtype=np.int64)
        for k in range(ctx.shape[1]):
            idx = idx * self.cfg.vocab + ctx[:, k]
        return idx

    def _sample(self, rng, n: int) -> np.ndarray:
        k = self.cfg.context
        toks = np.empty(n + k, dtype=np.int64)
        toks[:k] = rng.integers(0, self.cfg.vocab, size=k)
        u = rng.random(n)
        n_ctx = self.cfg.vocab**k
        row = int(self._ctx_index(toks[None, :k])[0])
        cdf = self._cdf
        for t in range(k, n + k):
            tok = int(np.searchsorted(cdf[row], u[t - k], side="right"))
            toks[t] = tok
            row = (row * self.cfg.vocab + tok) % n_ctx
        return toks

    def windows(self, tokens: np.ndarray, starts: np.ndarray):
        k, v = self.cfg.context, self.cfg.vocab
        ctx = tokens[starts[:, None] + np.arange(k)[None, :]]
        x = np.zeros((starts.size, k * v))
        x[np.arange(starts.size)[:, None], np.arange(k)[None, :] * v + ctx] = 1.0
        return x, tokens[starts + k]

    def batch(self, rng: np.random.Generator, size: int):
        starts = rng.integers(0, self.train_tokens.size - self.cfg.context, size=size)
        return self.windows(self.train_tokens, starts)

    def entropy_floor(self) -> float:
        """Mean conditional entropy (nats) under the chain's empirical context mix."""
        p = self.transitions
        h = -np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0), axis=1)
        k = self.cfg.context
        ctx = np.lib.stride_tricks.sliding_window_view(self.train_tokens[:-1], k)
        return float(h[self._ctx_index(ctx)].mean())
