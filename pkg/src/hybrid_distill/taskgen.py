"""Synthetic key-value retrieval rows, Markov-chain filler rows, and their mixture."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

BOS, PAD, SEP, NEWLINE, QUERY = 0, 1, 2, 3, 4
N_SPECIAL = 5
IGNORE = -100


class Kind(str, Enum):
    KV_RETRIEVAL = "kv_retrieval"
    FILLER = "filler"


@dataclass(frozen=True)
class Vocab:
    n_keys: int = 24
    n_values: int = 24

    def __post_init__(self):
        if self.n_keys < 1 or self.n_values < 1:
            raise ValueError("vocab needs at least one key and one value")

    @property
    def size(self) -> int:
        return N_SPECIAL + self.n_keys + self.n_values

    def key(self, i: int) -> int:
        return N_SPECIAL + i

    def value(self, i: int) -> int:
        return N_SPECIAL + self.n_keys + i

    def is_key(self, tok: int) -> bool:
        return N_SPECIAL <= tok < N_SPECIAL + self.n_keys

    def is_value(self, tok: int) -> bool:
        return N_SPECIAL + self.n_keys <= tok < self.size

    @property
    def content_ids(self) -> np.ndarray:
        return np.arange(N_SPECIAL, self.size)


@dataclass
class SequenceBatch:
    """Right-padded token rows plus the scored next-token position of each row.

    ``target[i]`` is the token that should follow ``tokens[i, answer_pos[i]]``.
    """

    tokens: np.ndarray  # int64 [B, T]
    target: np.ndarray  # int64 [B]
    answer_pos: np.ndarray  # int64 [B]
    kind: tuple[Kind, ...]

    def __post_init__(self):
        self.tokens = np.atleast_2d(np.asarray(self.tokens, dtype=np.int64))
        self.target = np.atleast_1d(np.asarray(self.target, dtype=np.int64))
        self.answer_pos = np.atleast_1d(np.asarray(self.answer_pos, dtype=np.int64))
        self.kind = tuple(Kind(k) for k in self.kind)
        B, T = self.tokens.shape
        if not (len(self.target) == len(self.answer_pos) == len(self.kind) == B):
            raise ValueError("per-row fields must have one entry per row")
        if np.any(self.answer_pos >= T) or np.any(self.answer_pos < 0):
            raise ValueError("answer_pos must index into the row")

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[1]

    def labels(self) -> np.ndarray:
        """Next-token labels with PAD targets set to IGNORE; the answer slot gets ``target``."""
        lab = np.full(self.tokens.shape, IGNORE, dtype=np.int64)
        lab[:, :-1] = self.tokens[:, 1:]
        lab[lab == PAD] = IGNORE
        rows = np.arange(len(self))
        lab[rows, self.answer_pos] = self.target
        # nothing after the answer is scored
        after = np.arange(self.seq_len)[None, :] > self.answer_pos[:, None]
        lab[after] = IGNORE
        return lab

    def answer_only_labels(self) -> np.ndarray:
        lab = np.full(self.tokens.shape, IGNORE, dtype=np.int64)
        lab[np.arange(len(self)), self.answer_pos] = self.target
        return lab

    def select(self, idx) -> "SequenceBatch":
        idx = np.asarray(idx, dtype=np.int64)
        return SequenceBatch(self.tokens[idx], self.target[idx], self.answer_pos[idx],
                             tuple(self.kind[i] for i in idx))


def stack(rows: Sequence[SequenceBatch], seq_len: int | None = None) -> SequenceBatch:
    """Concatenate rows, right-padding every row with PAD to ``seq_len`` (default: longest row)."""
    if not rows:
        raise ValueError("nothing to stack")
    T = max(r.seq_len for r in rows) if seq_len is None else seq_len
    toks = []
    for r in rows:
        if r.seq_len > T:
            raise ValueError(f"row of length {r.seq_len} does not fit seq_len={T}")
        toks.append(np.pad(r.tokens, ((0, 0), (0, T - r.seq_len)), constant_values=PAD))
    return SequenceBatch(
        np.concatenate(toks),
        np.concatenate([r.target for r in rows]),
        np.concatenate([r.answer_pos for r in rows]),
        tuple(k for r in rows for k in r.kind),
    )


def kv_length(n_pairs: int) -> int:
    return 1 + 4 * n_pairs + 2


def kv_length(n_pairs: int) -> int:
    """Tokens in a retrieval row with ``n_pairs`` pairs: BOS, 4 per pair, QUERY, key."""
    return 4 * n_pairs + 3


def gen_kv_sequence(seed: int, n_pairs: int, vocab: Vocab, seq_len: int | None = None) -> SequenceBatch:
    """``BOS (key SEP value NEWLINE)*n QUERY key*``; the row's target is key*'s value."""
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    if n_pairs > vocab.n_keys:
        raise ValueError(f"n_pairs={n_pairs} exceeds n_keys={vocab.n_keys}")
    rng = np.random.default_rng([seed, 0x6B76])
    keys = rng.choice(vocab.n_keys, size=n_pairs, replace=False)
    values = rng.integers(0, vocab.n_values, size=n_pairs)
    q = int(rng.integers(n_pairs))
    toks = [BOS]
    for k, v in zip(keys, values):
        toks += [vocab.key(k), SEP, vocab.value(v), NEWLINE]
    toks += [QUERY, vocab.key(keys[q])]
    answer_pos = len(toks) - 1
    T = len(toks) if seq_len is None else seq_len
    if T < len(toks):
        raise ValueError(f"{n_pairs} pairs need {len(toks)} tokens, seq_len={T}")
    toks += [PAD] * (T - len(toks))
    return SequenceBatch([toks], [vocab.value(values[q])], [answer_pos], (Kind.KV_RETRIEVAL,))


def markov_chain(vocab: Vocab, order: int = 1, chain_seed: int = 0, concentration: float = 0.1) -> np.ndarray:
    """Transition table of shape [C]*order + [C] over the C content tokens (keys then values).

    A small Dirichlet concentration makes rows peaked, so the chain is learnable well below
    the unigram entropy.
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    C = vocab.n_keys + vocab.n_values
    rng = np.random.default_rng([chain_seed, 0xF111])
    return rng.dirichlet(np.full(C, concentration), size=(C,) * order)


def gen_filler_sequence(seed: int, T: int, vocab: Vocab, order: int = 1, chain_seed: int = 0,
                        chain: np.ndarray | None = None) -> SequenceBatch:
    """A length-``T`` walk on the seeded Markov chain; the scored token is the walk's next step."""
    if T < order + 1:
        raise ValueError("T must exceed the chain order")
    if chain is None:
        chain = markov_chain(vocab, order, chain_seed)
    if chain.ndim != order + 1:
        raise ValueError("chain order does not match `order`")
    C = chain.shape[-1]
    rng = np.random.default_rng([seed, 0xF1EE])
    walk = list(rng.integers(0, C, size=order))
    cdf = np.cumsum(chain, axis=-1)
    u = rng.random(T + 1 - order)
    for ui in u:
        row = cdf[tuple(walk[-order:])]
        walk.append(min(int(np.searchsorted(row, ui * row[-1], side="right")), C - 1))
    toks = np.asarray(walk, dtype=np.int64) + N_SPECIAL
    return SequenceBatch([toks[:T]], [toks[T]], [T - 1], (Kind.FILLER,))


@dataclass(frozen=True)
class TaskParams:
    n_keys: int = 24
    n_values: int = 24
    min_pairs: int = 4  # probe rows draw n_pairs from [min_pairs, max_pairs]
    max_pairs: int = 12
    train_min_pairs: int = 1  # training rows start lower: short lists are an easy curriculum
    seq_len: int = 64
    filler_order: int = 1
    chain_seed: int = 0

    def __post_init__(self):
        if not 1 <= self.train_min_pairs <= self.max_pairs or not 1 <= self.min_pairs <= self.max_pairs:
            raise ValueError("need 1 <= min_pairs, train_min_pairs <= max_pairs")
        if self.max_pairs > self.n_keys:
            raise ValueError(f"max_pairs={self.max_pairs} exceeds n_keys={self.n_keys}")
        if self.seq_len < 2:
            raise ValueError("seq_len must be >= 2")

    @property
    def max_kv_len(self) -> int:
        return kv_length(self.max_pairs)

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.n_keys, self.n_values)


def gen_probe(seed: int, n: int, params: TaskParams, n_pairs: int | None = None) -> SequenceBatch:
    """``n`` retrieval rows; ``n_pairs`` fixed or drawn per row from [min_pairs, max_pairs]."""
    if n < 1:
        raise ValueError("probe must have at least one row")
    rng = np.random.default_rng([seed, 0x9A0B])
    seeds = rng.integers(0, 2**62, size=n)
    counts = (np.full(n, n_pairs) if n_pairs is not None
              else rng.integers(params.min_pairs, params.max_pairs + 1, size=n))
    rows = [gen_kv_sequence(int(s), int(c), params.vocab) for s, c in zip(seeds, counts)]
    return stack(rows)


def gen_mixture(seed: int, n: int, ratio: float, params: TaskParams = TaskParams()) -> list[SequenceBatch]:
    """``round(ratio*n)`` retrieval rows and the rest filler, shuffled by ``seed``."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    rng = np.random.default_rng([seed, 0x313C])
    n_kv = int(round(ratio * n))
    seeds = rng.integers(0, 2**62, size=n)
    counts = rng.integers(params.train_min_pairs, params.max_pairs + 1, size=n)
    chain = markov_chain(params.vocab, params.filler_order, params.chain_seed)
    rows = []
    for i in range(n):
        if i < n_kv:
            rows.append(gen_kv_sequence(int(seeds[i]), int(counts[i]), params.vocab))
        else:
            rows.append(gen_filler_sequence(int(seeds[i]), params.seq_len, params.vocab,
                                            params.filler_order, chain=chain))
    order = rng.permutation(n)
    return [rows[i] for i in order]
