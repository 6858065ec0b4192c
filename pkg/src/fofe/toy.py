"""Synthetic corpus with long-range structure, for desk-scale language-model experiments.

Each sentence draws a topic.  A second-order Markov chain over word classes
decides the shape of the sentence, and each word is drawn from its class,
preferring the topic's share of that class.  Within a class and within a
topic's share, word frequencies follow a Zipf law.  Some words have fixed
partners that tend to follow them directly or one word later.  A model that
only sees the previous word can recover neither the topic nor the class two steps back, so
longer contexts pay off measurably.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

# words per class; the first few classes are small closed sets of function words
DEFAULT_CLASS_SIZES = (4, 6, 8, 10, 12) + (150,) * 12


@dataclass(frozen=True)
class ToySpec:
    n_topics: int = 12
    class_sizes: tuple[int, ...] = DEFAULT_CLASS_SIZES
    topic_words: int = 20          # per open class and topic
    topic_prob: float = 0.9        # chance a word comes from the topic's share
    concentration: float = 0.25    # Dirichlet parameter of class transitions
    colloc_prob: float = 0.25      # chance the next word is the fixed partner of the previous word
    skip_prob: float = 0.15        # ... or the partner of the word two back
    eos_weight: float = 0.5
    min_len: int = 5
    max_len: int = 30

    @property
    def n_types(self) -> int:
        return sum(self.class_sizes)


class ToyLanguage:
    def __init__(self, spec: ToySpec, seed: int):
        self.spec = spec
        rng = np.random.default_rng(seed)
        self.words = []
        for c, size in enumerate(spec.class_sizes):
            self.words.append([f"{chr(ord('a') + c)}{i}" for i in range(size)])
        C = len(spec.class_sizes)
        # state (c2, c1) with C meaning "sentence start"; outcome C means end of sentence
        alpha = np.full(C + 1, spec.concentration)
        alpha[C] = spec.eos_weight * spec.concentration
        self.trans = rng.dirichlet(alpha, size=(C + 1, C + 1))
        self.trans[C, C, C] = 0.0
        self.trans[C, C] /= self.trans[C, C].sum()
        self.class_probs = [_zipf(rng, size) for size in spec.class_sizes]
        self.topic_sets = []
        for _ in range(spec.n_topics):
            sets = []
            for size in spec.class_sizes:
                if size > 2 * spec.topic_words:
                    members = rng.choice(size, size=spec.topic_words, replace=False)
                    sets.append((members, _zipf(rng, spec.topic_words)))
                else:
                    sets.append(None)
            self.topic_sets.append(sets)
        # fixed partners for open-class words: (class, index) of the collocate
        open_classes = [c for c, size in enumerate(spec.class_sizes) if size > 2 * spec.topic_words]
        self.partner = {}
        self.skip_partner = {}
        for table in (self.partner, self.skip_partner):
            for c in open_classes:
                for i in range(spec.class_sizes[c]):
                    pc = int(rng.choice(open_classes))
                    table[(c, i)] = (pc, int(rng.choice(spec.class_sizes[pc], p=self.class_probs[pc])))

    def sentence(self, rng: np.random.Generator) -> list[str]:
        spec = self.spec
        C = len(spec.class_sizes)
        topic = self.topic_sets[rng.integers(spec.n_topics)]
        c2 = c1 = C
        w2 = w1 = None
        out: list[str] = []
        while len(out) < spec.max_len:
            u = rng.random()
            if w1 in self.partner and u < spec.colloc_prob:
                c, i = self.partner[w1]
            elif w2 in self.skip_partner and u > 1 - spec.skip_prob:
                c, i = self.skip_partner[w2]
            else:
                c, i = self._regular(rng, topic, c2, c1, len(out) < spec.min_len)
                if c == C:
                    break
            out.append(self.words[c][i])
            c2, c1 = c1, c
            w2, w1 = w1, (c, i)
        return out

    def _regular(self, rng, topic, c2, c1, too_short):
        spec = self.spec
        C = len(spec.class_sizes)
        p = self.trans[c2, c1]
        if too_short:
            p = p[:C] / p[:C].sum()
        c = int(rng.choice(p.size, p=p))
        if c == C:
            return c, -1
        pool = topic[c]
        if pool is not None and rng.random() < spec.topic_prob:
            members, probs = pool
            return c, int(members[rng.choice(members.size, p=probs)])
        return c, int(rng.choice(spec.class_sizes[c], p=self.class_probs[c]))


def _zipf(rng, n, exponent=1.0):
    """Zipf weights over ``n`` items in a random rank order."""
    w = 1.0 / np.arange(1, n + 1) ** exponent
    return w[rng.permutation(n)] / w.sum()


def generate_lines(n_tokens: int, seed: int = 42, spec: ToySpec | None = None,
                   language_seed: int | None = None) -> list[str]:
    """Sentences (one per line) until at least ``n_tokens`` words have been produced.

    ``language_seed`` fixes the grammar and topics; ``seed`` the sampled text.
    Splits drawn with different ``seed`` values share one language.
    """
    lang = ToyLanguage(spec or ToySpec(), seed if language_seed is None else language_seed)
    rng = np.random.default_rng([seed, 1])
    lines, total = [], 0
    while total < n_tokens:
        words = lang.sentence(rng)
        lines.append(" ".join(words))
        total += len(words)
    return lines


def write_splits(out_dir, train_tokens: int = 100_000, valid_tokens: int = 10_000,
                 test_tokens: int = 10_000, seed: int = 42, spec: ToySpec | None = None) -> dict[str, Path]:
    """Write ``train.txt``, ``valid.txt`` and ``test.txt`` drawn from one toy language."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for k, (name, n) in enumerate((("train", train_tokens), ("valid", valid_tokens), ("test", test_tokens))):
        lines = generate_lines(n, seed=seed * 3 + k, spec=spec, language_seed=seed)
        paths[name] = out / f"{name}.txt"
        paths[name].write_text("\n".join(lines) + "\n", encoding="utf-8")
    return paths
