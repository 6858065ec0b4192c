"""Text ingestion: vocabulary, tokenisation and sentence-packed mini-batches."""

from __future__ import annotations

import collections
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import TokenSequence

UNK = "<unk>"
EOS = "</s>"
UNK_ID = 0
EOS_ID = 1
RESERVED = (UNK, EOS)


@dataclass(frozen=True, eq=False)
class Vocabulary:
    """Bijection between tokens and ids.

    Vocabularies built from text reserve id 0 for ``<unk>`` and id 1 for the
    end-of-sentence marker.  Plain symbol tables read from a TSV file (e.g. the
    three-symbol table ``A B C``) may lack them; :attr:`has_reserved` tells.
    """

    tokens: tuple[str, ...]
    frequencies: tuple[int, ...] = ()
    cap: int | None = None
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        tokens = tuple(self.tokens)
        freqs = tuple(self.frequencies) or (0,) * len(tokens)
        if len(freqs) != len(tokens):
            raise ValueError("one frequency per token is required")
        index = {}
        for i, tok in enumerate(tokens):
            if tok in index:
                raise ValueError(f"duplicate token {tok!r} at ids {index[tok]} and {i}")
            if not tok or any(c.isspace() for c in tok):
                raise ValueError(f"token {tok!r} is empty or contains whitespace")
            index[tok] = i
        if self.cap is not None and len(tokens) > self.cap:
            raise ValueError(f"{len(tokens)} tokens exceed the cap of {self.cap}")
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "frequencies", freqs)
        object.__setattr__(self, "index", index)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    @property
    def has_reserved(self) -> bool:
        return self.tokens[:2] == RESERVED

    def id_of(self, token: str) -> int:
        i = self.index.get(token)
        if i is not None:
            return i
        if self.has_reserved:
            return UNK_ID
        raise KeyError(f"token {token!r} is not in the vocabulary and it has no {UNK}")

    def encode_line(self, line: str) -> list[int]:
        return [self.id_of(tok) for tok in line.split()]

    def decode_ids(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def write_tsv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write("id\ttoken\tfrequency\n")
            for i, (tok, n) in enumerate(zip(self.tokens, self.frequencies)):
                f.write(f"{i}\t{tok}\t{n}\n")

    @classmethod
    def read_tsv(cls, path) -> "Vocabulary":
        rows = []
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                parts = line.split("\t")
                if lineno == 1 and parts[0] == "id":
                    continue
                if len(parts) not in (2, 3):
                    raise ValueError(f"{path}:{lineno}: expected 'id<TAB>token<TAB>frequency'")
                try:
                    i = int(parts[0])
                    n = int(parts[2]) if len(parts) == 3 else 0
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: non-integer id or frequency") from None
                rows.append((i, parts[1], n))
        if not rows:
            raise ValueError(f"{path}: empty vocabulary file")
        rows.sort()
        if [r[0] for r in rows] != list(range(len(rows))):
            raise ValueError(f"{path}: ids must be exactly 0..{len(rows) - 1}")
        return cls(tuple(r[1] for r in rows), tuple(r[2] for r in rows))


def build_vocab(lines: Iterable[str], cap: int) -> Vocabulary:
    """Frequency-ranked vocabulary; ties keep first-occurrence order.

    The ``cap - 2`` most frequent words are kept after the two reserved
    tokens.  Literal ``<unk>`` / ``</s>`` in the text count towards the
    reserved entries.
    """
    if cap < len(RESERVED):
        raise ValueError(f"cap must leave room for the {len(RESERVED)} reserved tokens, got {cap}")
    counts: collections.Counter[str] = collections.Counter()
    n_lines = 0
    for line in lines:
        words = line.split()
        if not words:
            continue
        n_lines += 1
        counts.update(words)
    if not counts:
        raise ValueError("cannot build a vocabulary from empty input")
    reserved_counts = {tok: counts.pop(tok, 0) for tok in RESERVED}
    # Counter keeps insertion order and sorted() is stable
    ranked = sorted(counts.items(), key=lambda kv: -kv[1])
    kept = ranked[: cap - len(RESERVED)]
    dropped = sum(n for _, n in ranked[cap - len(RESERVED):])
    tokens = RESERVED + tuple(tok for tok, _ in kept)
    freqs = (reserved_counts[UNK] + dropped, reserved_counts[EOS] + n_lines) + tuple(n for _, n in kept)
    return Vocabulary(tokens, freqs, cap)


@dataclass(frozen=True, eq=False)
class TokenizedCorpus:
    sentences: tuple[TokenSequence, ...]
    vocab: Vocabulary
    token_count: int
    unk_count: int

    @property
    def oov_rate(self) -> float:
        return self.unk_count / self.token_count if self.token_count else 0.0

    def __len__(self):
        return len(self.sentences)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)


def tokenize(lines: Iterable[str], vocab: Vocabulary) -> TokenizedCorpus:
    """One sentence per nonblank line: whitespace split, OOV to ``<unk>``, ``</s>`` appended."""
    if not vocab.has_reserved:
        raise ValueError(f"tokenising needs a vocabulary with {UNK} and {EOS} at ids 0 and 1")
    K = len(vocab)
    sentences = []
    tokens = unk = 0
    for line in lines:
        ids = vocab.encode_line(line)
        if not ids:
            continue
        ids.append(EOS_ID)
        tokens += len(ids)
        unk += ids.count(UNK_ID)
        sentences.append(TokenSequence(tuple(ids), K))
    return TokenizedCorpus(tuple(sentences), vocab, tokens, unk)


def read_lines(path) -> list[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


def load_corpus(path, vocab: Vocabulary) -> TokenizedCorpus:
    return tokenize(read_lines(path), vocab)


def make_minibatches(sentences: TokenizedCorpus | Sequence[TokenSequence], capacity_words: int,
                     seed: int | np.random.Generator) -> list[list[TokenSequence]]:
    """Shuffle sentences, then pack them greedily into batches of at most ``capacity_words`` tokens.

    The sentence that overflows a batch is cut to fill it exactly; its
    remainder is dropped for this pass.
    """
    if capacity_words < 1:
        raise ValueError(f"capacity must be >= 1, got {capacity_words}")
    if isinstance(sentences, TokenizedCorpus):
        sentences = sentences.sentences
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    order = rng.permutation(len(sentences))
    batches: list[list[TokenSequence]] = []
    current: list[TokenSequence] = []
    used = 0
    for k in order:
        s = sentences[k]
        room = capacity_words - used
        if len(s) < room:
            current.append(s)
            used += len(s)
            continue
        current.append(s if len(s) == room else TokenSequence(s.ids[:room], s.vocab_size))
        batches.append(current)
        current, used = [], 0
    if current:
        batches.append(current)
    return batches


def split_lines(lines: Sequence[str], valid_fraction: float, test_fraction: float):
    """Contiguous train / valid / test split of the nonblank lines."""
    lines = [ln for ln in lines if ln.strip()]
    n = len(lines)
    n_test = int(round(n * test_fraction))
    n_valid = int(round(n * valid_fraction))
    n_train = n - n_valid - n_test
    if n_train <= 0:
        raise ValueError("split leaves no training lines")
    return lines[:n_train], lines[n_train:n_train + n_valid], lines[n_train + n_valid:]
