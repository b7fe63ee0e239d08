"""Small deterministic language models used as draft/target stand-ins.

Every model maps a token context to a next-token distribution. Contexts
shorter than the model order are left-padded with the reserved BOS index
``vocab.size``, which is never part of any distribution's support.
"""

from __future__ import annotations

import json
from collections import defaultdict
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np

from adaspec.distributions import (
    Vocab,
    apply_temperature,
    normalize,
    onehot,
    top_k_truncate,
)
from adaspec.errors import DomainError, EmptyCorpus

Context = Tuple[int, ...]


class LanguageModel:
    """Base class. Subclasses implement ``_compute(window)``.

    ``window`` is the BOS-padded tuple of the last ``order`` tokens. Results
    are cached per window and returned as read-only arrays, so repeated
    calls are bitwise identical.
    """

    vocab: Vocab
    order: int

    def __init__(self, vocab: Vocab, order: int):
        if order < 0:
            raise DomainError("model order must be >= 0")
        self.vocab = vocab
        self.order = order
        self._cache: Dict[Context, np.ndarray] = {}

    def window(self, context: Sequence[int]) -> Context:
        m = self.order
        if m == 0:
            return ()
        tail = tuple(context[-m:])
        if len(tail) < m:
            tail = (self.vocab.bos,) * (m - len(tail)) + tail
        return tail

    def next_dist(self, context: Sequence[int]) -> np.ndarray:
        w = self.window(context)
        d = self._cache.get(w)
        if d is None:
            d = np.array(self._compute(w), dtype=np.float64)
            d.flags.writeable = False
            self._cache[w] = d
        return d

    def _compute(self, window: Context) -> np.ndarray:
        raise NotImplementedError

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_cache"] = {}
        return state

    def to_dict(self) -> dict:
        raise NotImplementedError

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


def greedy_token(model: LanguageModel, context: Sequence[int]) -> int:
    """Argmax of the next-token distribution; ties go to the lower id."""
    return int(np.argmax(model.next_dist(context)))


class KGramModel(LanguageModel):
    """Add-alpha smoothed k-gram model: ``next_dist(c) = Norm[counts(last m of c) + alpha]``."""

    def __init__(self, vocab: Vocab, order: int, counts: Dict[Context, np.ndarray], smoothing: float):
        super().__init__(vocab, order)
        if smoothing <= 0:
            raise DomainError("smoothing must be positive")
        self.smoothing = float(smoothing)
        self.counts = counts

    def _compute(self, window):
        c = self.counts.get(window)
        if c is None:
            return np.full(self.vocab.size, 1.0 / self.vocab.size)
        return normalize(c + self.smoothing)

    def to_dict(self):
        table = {}
        for ctx, c in sorted(self.counts.items()):
            nz = np.flatnonzero(c)
            table["-".join(map(str, ctx))] = {str(int(t)): float(c[t]) for t in nz}
        return {
            "kind": "kgram",
            "vocab": self.vocab.to_dict(),
            "order": self.order,
            "smoothing": self.smoothing,
            "counts": table,
        }

    @classmethod
    def from_dict(cls, d):
        vocab = Vocab.from_dict(d["vocab"])
        counts = {}
        for key, row in d["counts"].items():
            ctx = tuple(int(t) for t in key.split("-")) if key else ()
            c = np.zeros(vocab.size)
            for t, n in row.items():
                c[int(t)] = n
            counts[ctx] = c
        return cls(vocab, int(d["order"]), counts, float(d["smoothing"]))


def fit_kgram(
    corpus: Iterable[Sequence[int]],
    order: int,
    smoothing: float,
    vocab: Optional[Vocab] = None,
) -> KGramModel:
    """Count every ``(m-token context, next token)`` pair of the corpus.

    Each sequence is left-padded with ``order`` BOS symbols, so the first
    tokens are counted under padded contexts. When ``vocab`` is omitted it
    is sized to the largest token id seen, with ``eos`` the last id.
    """
    seqs = [list(s) for s in corpus]
    seqs = [s for s in seqs if s]
    if not seqs:
        raise EmptyCorpus("corpus contains no tokens")
    if vocab is None:
        size = max(2, max(max(s) for s in seqs) + 1)
        vocab = Vocab(size, size - 1)
    counts: Dict[Context, np.ndarray] = defaultdict(lambda: np.zeros(vocab.size))
    pad = [vocab.bos] * order
    for s in seqs:
        if min(s) < 0 or max(s) >= vocab.size:
            raise DomainError("corpus token outside vocab")
        padded = pad + s
        for i in range(order, len(padded)):
            counts[tuple(padded[i - order:i])][padded[i]] += 1.0
    return KGramModel(vocab, order, dict(counts), smoothing)


class TableModel(LanguageModel):
    """Explicit conditional table of shape ``(V+1,)*order + (V,)``.

    Order 1 is a Markov transition matrix whose extra row (index V) holds
    the distribution of the first token.
    """

    def __init__(self, vocab: Vocab, table):
        table = np.asarray(table, dtype=np.float64)
        order = table.ndim - 1
        super().__init__(vocab, order)
        if table.shape != (vocab.size + 1,) * order + (vocab.size,):
            raise DomainError(f"table shape {table.shape} does not match vocab {vocab.size}")
        self.table = table / table.sum(axis=-1, keepdims=True)

    def _compute(self, window):
        return self.table[window] if window else self.table

    def to_dict(self):
        return {"kind": "table", "vocab": self.vocab.to_dict(), "table": self.table.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(Vocab.from_dict(d["vocab"]), np.array(d["table"]))


def random_table_model(
    vocab: Vocab, order: int, rng: np.random.Generator, concentration: float = 1.0
) -> TableModel:
    """Dirichlet-distributed conditional table; every entry is strictly positive."""
    shape = (vocab.size + 1,) * order
    table = rng.dirichlet(np.full(vocab.size, concentration), size=shape)
    table = np.maximum(table, 1e-6)
    return TableModel(vocab, table)


class PerturbedModel(LanguageModel):
    """``Norm[(1 - mix) * softmax(log base / temperature) + mix * uniform]``."""

    def __init__(self, base: LanguageModel, mix: float, temperature: float):
        if not 0.0 <= mix <= 1.0:
            raise DomainError("mix must lie in [0, 1]")
        if temperature <= 0:
            raise DomainError("temperature must be positive")
        super().__init__(base.vocab, base.order)
        self.base = base
        self.mix = float(mix)
        self.temperature = float(temperature)

    def _compute(self, window):
        d = apply_temperature(self.base.next_dist(window), self.temperature)
        if self.mix == 0.0:
            return d
        return normalize((1.0 - self.mix) * d + self.mix / self.vocab.size)

    def to_dict(self):
        return {
            "kind": "perturbed",
            "mix": self.mix,
            "temperature": self.temperature,
            "base": self.base.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(model_from_dict(d["base"]), float(d["mix"]), float(d["temperature"]))


def perturb(base: LanguageModel, mix: float, temperature: float = 1.0) -> PerturbedModel:
    return PerturbedModel(base, mix, temperature)


class SamplingTransform(LanguageModel):
    """Temperature then top-k truncation applied on top of a base model."""

    def __init__(self, base: LanguageModel, top_k: Optional[int] = None, temperature: float = 1.0):
        super().__init__(base.vocab, base.order)
        self.base = base
        self.top_k = top_k
        self.temperature = float(temperature)

    def _compute(self, window):
        d = apply_temperature(self.base.next_dist(window), self.temperature)
        if self.top_k is not None:
            d = top_k_truncate(d, self.top_k)
        return d

    def to_dict(self):
        return {
            "kind": "transform",
            "top_k": self.top_k,
            "temperature": self.temperature,
            "base": self.base.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(model_from_dict(d["base"]), d.get("top_k"), float(d.get("temperature", 1.0)))


class GreedyModel(LanguageModel):
    """Point mass on the base model's greedy token."""

    def __init__(self, base: LanguageModel):
        super().__init__(base.vocab, base.order)
        self.base = base

    def _compute(self, window):
        return onehot(int(np.argmax(self.base.next_dist(window))), self.vocab.size)

    def to_dict(self):
        return {"kind": "greedy", "base": self.base.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(model_from_dict(d["base"]))


_KINDS = {
    "kgram": KGramModel,
    "table": TableModel,
    "perturbed": PerturbedModel,
    "transform": SamplingTransform,
    "greedy": GreedyModel,
}


def model_from_dict(d: dict) -> LanguageModel:
    try:
        cls = _KINDS[d["kind"]]
    except KeyError:
        raise DomainError(f"unknown model kind {d.get('kind')!r}") from None
    return cls.from_dict(d)


def load_model(path) -> LanguageModel:
    return model_from_dict(json.loads(Path(path).read_text()))


# -- corpus input ---------------------------------------------------------

BYTE_VOCAB = Vocab(256, ord("\n"))


def read_token_corpus(path) -> list:
    """Newline-delimited sequences of space-separated integer token ids."""
    seqs = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line:
            seqs.append([int(t) for t in line.split()])
    return seqs


def bytes_to_sequences(data: bytes) -> list:
    """Split raw bytes into lines; each sequence keeps its newline as EOS."""
    seqs = []
    for line in data.split(b"\n"):
        if line:
            seqs.append(list(line) + [BYTE_VOCAB.eos])
    return seqs


def read_byte_corpus(path) -> list:
    return bytes_to_sequences(Path(path).read_bytes())
