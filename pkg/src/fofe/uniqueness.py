"""Collision experiments and critical forgetting factors.

Two distinct sequences *collide* under threshold ``eps`` when their codes
differ by less than ``eps`` in every coordinate.  For ``alpha <= 0.5`` codes
never coincide.  Above 0.5 an exact coincidence needs ``alpha`` to solve some
``sum(xi_t * alpha ** t for t in 1..T) == 1`` with ``xi`` a 0/1 vector: the
critical factors enumerated by :func:`find_critical_alphas`.
"""

from __future__ import annotations

import functools
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .core import ForgettingFactor, as_factor
from .errors import TooLargeError
from .pairs import count_close_pairs, count_close_prefix_pairs

MAX_ENUMERATED_CASES = 2 ** 22
MAX_CRITICAL_ORDER = 20
ROOT_DEDUPE_TOL = 1e-9
SHARED_ROOT_TOL = 1e-12

COLLISION_HEADER = ("alpha", "epsilon", "K", "T", "cases", "collisions")
CRITICAL_HEADER = ("alpha", "xi_bits", "residual")


@dataclass(frozen=True)
class CollisionReport:
    alpha: ForgettingFactor
    epsilon: float
    K: int
    T: int
    cases_tested: int
    collisions: int
    example_pairs: tuple = ()
    mode: str = "exact-length"

    def tsv_row(self) -> tuple:
        return (format_float(self.alpha.value), format_float(self.epsilon), str(self.K), str(self.T),
                str(self.cases_tested), str(self.collisions))


def format_float(x: float) -> str:
    """Shortest round-tripping text for ``x``; integral values lose the ``.0``."""
    s = repr(float(x))
    return s[:-2] if s.endswith(".0") else s


def write_collision_tsv(reports: Iterable[CollisionReport], out) -> None:
    out.write("\t".join(COLLISION_HEADER) + "\n")
    for r in reports:
        out.write("\t".join(r.tsv_row()) + "\n")


def read_collision_tsv(text: str) -> list[dict]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = lines[0].split("\t")
    if tuple(header) != COLLISION_HEADER:
        raise ValueError(f"unexpected collision header {header}")
    rows = []
    for ln in lines[1:]:
        a, e, K, T, cases, coll = ln.split("\t")
        rows.append(dict(alpha=float(a), epsilon=float(e), K=int(K), T=int(T),
                         cases=int(cases), collisions=int(coll)))
    return rows


# --- enumeration ------------------------------------------------------------


def _count_cases(K: int, T: int, mode: str) -> int:
    if mode == "exact-length":
        return K ** T
    if mode == "up-to-length":
        return sum(K ** t for t in range(1, T + 1))
    raise ValueError(f"mode must be 'exact-length' or 'up-to-length', got {mode!r}")


def _all_codes(K: int, T: int, alpha: float) -> np.ndarray:
    """Codes of every length-T sequence, row n = base-K digits of n (w_1 most significant)."""
    N = K ** T
    idx = np.arange(N, dtype=np.int64)
    z = np.zeros((N, K))
    for t in range(T):
        digit = (idx // K ** (T - 1 - t)) % K
        z *= alpha
        z[idx, digit] += 1.0
    return z


def _sequence_of(index: int, K: int, lengths: Sequence[tuple[int, int]]) -> tuple[int, ...]:
    for T, offset in lengths:
        if index < offset + K ** T:
            n = index - offset
            return tuple((n // K ** (T - 1 - t)) % K for t in range(T))
    raise IndexError(index)


def _check_guard(K: int, T: int, mode: str) -> int:
    if K < 1 or T < 1:
        raise ValueError(f"K and T must be positive, got K={K}, T={T}")
    cases = _count_cases(K, T, mode)
    if cases > MAX_ENUMERATED_CASES:
        raise TooLargeError(f"{cases} sequences (K={K}, T={T}, {mode}) exceeds the enumeration "
                            f"limit of 2^22 = {MAX_ENUMERATED_CASES}")
    return cases


def _enumerate(K: int, T: int, alpha: float, mode: str):
    if mode == "exact-length":
        return _all_codes(K, T, alpha), [(T, 0)]
    blocks, parts, offset = [], [], 0
    for t in range(1, T + 1):
        blocks.append((t, offset))
        parts.append(_all_codes(K, t, alpha))
        offset += K ** t
    return np.vstack(parts), blocks


def _report(codes, blocks, K, T, cases, alpha, epsilon, mode, max_examples):
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    found = count_close_pairs(codes, epsilon, max_examples=max_examples)
    examples = tuple((_sequence_of(i, K, blocks), _sequence_of(j, K, blocks)) for i, j in found.examples)
    return CollisionReport(alpha, float(epsilon), K, T, cases, found.count, examples, mode)


def enumerate_collisions(K: int, T: int, alpha: float | ForgettingFactor, epsilon: float,
                         mode: str = "exact-length", max_examples: int = 10) -> CollisionReport:
    """Encode every sequence of length ``T`` (or ``1..T``) over ``K`` symbols and count colliding pairs."""
    alpha = as_factor(alpha)
    cases = _check_guard(K, T, mode)
    codes, blocks = _enumerate(K, T, alpha.value, mode)
    return _report(codes, blocks, K, T, cases, alpha, epsilon, mode, max_examples)


def _sweep_alpha(K, T, alpha, epsilons, mode):
    alpha = as_factor(alpha)
    cases = _check_guard(K, T, mode)
    codes, blocks = _enumerate(K, T, alpha.value, mode)
    return [_report(codes, blocks, K, T, cases, alpha, e, mode, 10) for e in epsilons]


def scan_corpus_collisions(sentences: Iterable[Sequence[int]], vocab_size: int,
                           alpha: float | ForgettingFactor, epsilon: float,
                           max_examples: int = 10) -> CollisionReport:
    """Count collisions among the codes of all distinct within-sentence prefixes.

    Prefixes are deduplicated by their token strings first, so a prefix that
    recurs in the corpus never collides with itself.
    """
    alpha = as_factor(alpha)
    a = alpha.value
    # prefix trie: node id -> (parent, token); node 0 is the empty prefix
    children: dict[tuple[int, int], int] = {}
    parent, token = [-1], [-1]
    longest = 0
    for sent in sentences:
        node = 0
        longest = max(longest, len(sent))
        for w in sent:
            w = int(w)
            if not 0 <= w < vocab_size:
                raise ValueError(f"token id {w} outside [0, {vocab_size})")
            key = (node, w)
            nxt = children.get(key)
            if nxt is None:
                nxt = len(parent)
                children[key] = nxt
                parent.append(node)
                token.append(w)
            node = nxt
    n = len(parent) - 1
    codes: list[dict[int, float]] = [{}]
    indptr, indices, data = [0], [], []
    for node in range(1, n + 1):
        z = {i: a * v for i, v in codes[parent[node]].items()}
        z[token[node]] = z.get(token[node], 0.0) + 1.0
        codes.append(z)
        keys = sorted(z)
        indices.extend(keys)
        data.extend(z[k] for k in keys)
        indptr.append(len(indices))
    # row 0 is the empty prefix
    indptr = [0] + indptr
    X = sp.csr_matrix((np.array(data), np.array(indices, dtype=np.int64), np.array(indptr)),
                      shape=(n + 1, vocab_size))
    found = count_close_prefix_pairs(X, parent, token, a, epsilon, max_examples=max_examples)

    def path(node):
        out = []
        while node > 0:
            out.append(token[node])
            node = parent[node]
        return tuple(reversed(out))

    examples = tuple((path(i), path(j)) for i, j in found.examples)
    return CollisionReport(alpha, float(epsilon), vocab_size, longest, n, found.count, examples, "corpus")


# --- critical forgetting factors ---------------------------------------------


@dataclass(frozen=True, eq=False)
class CriticalAlphaSet:
    """Roots in (0.5, 1) of ``sum(xi_t alpha^t) = 1`` over all 0/1 vectors ``xi`` of length ``T``.

    ``generators[k]`` lists every ``xi`` (as a bit mask, bit ``t-1`` = ``xi_t``)
    whose polynomial vanishes at ``alphas[k]``; ``residuals[k]`` is the largest
    ``|sum(xi_t alpha^t) - 1|`` among them.
    """

    T: int
    alphas: np.ndarray
    generators: tuple = field(repr=False)
    residuals: np.ndarray = field(repr=False)

    def __len__(self):
        return self.alphas.size

    def xi(self, mask: int) -> tuple[int, ...]:
        return tuple((mask >> t) & 1 for t in range(self.T))

    def xi_bits(self, mask: int) -> str:
        return "".join(map(str, self.xi(mask)))

    @property
    def roots(self) -> list[tuple[float, tuple[int, ...]]]:
        """(alpha, xi) with the first generating xi of each root."""
        return [(float(a), self.xi(g[0])) for a, g in zip(self.alphas, self.generators)]

    def nearest(self, alpha: float) -> float | None:
        if self.alphas.size == 0:
            return None
        k = int(np.searchsorted(self.alphas, alpha))
        cands = [self.alphas[j] for j in (k - 1, k) if 0 <= j < self.alphas.size]
        return float(min(cands, key=lambda r: abs(r - alpha)))

    def write_tsv(self, out) -> None:
        out.write("\t".join(CRITICAL_HEADER) + "\n")
        for a, gens, res in zip(self.alphas, self.generators, self.residuals):
            bits = ",".join(self.xi_bits(g) for g in gens)
            out.write(f"{a:.12f}\t{bits}\t{res:.3e}\n")

    def to_tsv(self) -> str:
        buf = io.StringIO()
        self.write_tsv(buf)
        return buf.getvalue()


def polynomial_residual(masks: np.ndarray, alpha: np.ndarray | float, T: int) -> np.ndarray:
    """``sum(xi_t alpha^t) - 1`` for each mask, evaluated by Horner's rule."""
    masks = np.asarray(masks, dtype=np.int64)
    alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), masks.shape)
    acc = np.zeros(masks.shape)
    for t in range(T, 0, -1):
        acc = (acc + ((masks >> (t - 1)) & 1)) * alpha
    return acc - 1.0


@functools.lru_cache(maxsize=32)
def find_critical_alphas(T: int) -> CriticalAlphaSet:
    """Enumerate every critical forgetting factor in (0.5, 1) for sequences up to length ``T``.

    Each polynomial has nonnegative coefficients, so it is strictly increasing
    on (0, inf) and owns at most one root in the interval.  Since
    ``sum(xi_t 2^-t) < 1`` always holds, a root exists exactly when ``xi`` has
    at least two ones (one would put it at the excluded endpoint 1).
    Roots are located by bisection down to adjacent floats.
    """
    if T < 1:
        raise ValueError(f"T must be positive, got {T}")
    if T > MAX_CRITICAL_ORDER:
        raise TooLargeError(f"T={T} needs 2^{T} polynomials; the limit is T <= {MAX_CRITICAL_ORDER}")
    masks = np.arange(1, 2 ** T, dtype=np.int64)
    popcount = np.zeros(masks.shape, dtype=np.int64)
    for t in range(T):
        popcount += (masks >> t) & 1
    masks = masks[popcount >= 2]
    if masks.size == 0:
        return CriticalAlphaSet(T, np.zeros(0), (), np.zeros(0))
    lo = np.full(masks.shape, 0.5)
    hi = np.full(masks.shape, 1.0)
    for _ in range(64):
        mid = 0.5 * (lo + hi)
        neg = polynomial_residual(masks, mid, T) < 0
        lo = np.where(neg, mid, lo)
        hi = np.where(neg, hi, mid)
    r_lo = np.abs(polynomial_residual(masks, lo, T))
    r_hi = np.abs(polynomial_residual(masks, hi, T))
    roots = np.where(r_lo <= r_hi, lo, hi)
    inside = (roots > 0.5) & (roots < 1.0)
    roots, masks = roots[inside], masks[inside]

    own = np.abs(polynomial_residual(masks, roots, T))

    order = np.lexsort((masks, roots))
    roots, masks, own = roots[order], masks[order], own[order]
    new_cluster = np.concatenate([[True], np.diff(roots) > ROOT_DEDUPE_TOL])
    starts = np.flatnonzero(new_cluster)
    sizes = np.diff(np.append(starts, roots.size))

    single = starts[sizes == 1]
    alphas = list(roots[single])
    residuals = list(own[single])
    generators = [(int(m),) for m in masks[single]]
    for s, n in zip(starts[sizes > 1], sizes[sizes > 1]):
        # members either share one algebraic root (residual at the representative
        # stays at rounding level) or are distinct roots that happen to sit closer
        # than the dedupe tolerance; the latter keep their own entries
        idx = s + np.argsort(own[s:s + n], kind="stable")
        while idx.size:
            rep = roots[idx[0]]
            res = np.abs(polynomial_residual(masks[idx], rep, T))
            join = res <= SHARED_ROOT_TOL
            alphas.append(rep)
            residuals.append(float(res[join].max()))
            generators.append(tuple(sorted(int(m) for m in masks[idx[join]])))
            idx = idx[~join]
    alphas = np.array(alphas)
    order = np.argsort(alphas, kind="stable")
    alphas = alphas[order]
    residuals = np.array(residuals)[order]
    generators = tuple(generators[k] for k in order)
    alphas.setflags(write=False)
    residuals.setflags(write=False)
    return CriticalAlphaSet(T, alphas, generators, residuals)


@dataclass(frozen=True)
class SafetyCheck:
    safe: bool
    nearest_root: float | None
    distance: float


def is_alpha_safe(alpha: float | ForgettingFactor, T: int, margin: float) -> SafetyCheck:
    """Whether ``alpha`` keeps more than ``margin`` away from every critical root of order ``T``."""
    alpha = as_factor(alpha)
    roots = find_critical_alphas(T)
    nearest = roots.nearest(alpha.value)
    if nearest is None:
        return SafetyCheck(True, None, math.inf)
    distance = abs(alpha.value - nearest)
    return SafetyCheck(distance > margin, nearest, distance)


def sweep_collisions(K: int, T: int, alphas: Sequence[float], epsilons: Sequence[float],
                     mode: str = "exact-length", workers: int = 1) -> list[CollisionReport]:
    """Run :func:`enumerate_collisions` over an alpha x epsilon grid.

    Codes are enumerated once per alpha.  Rows come back alpha-major in the
    order given, whatever the worker count.
    """
    _check_guard(K, T, mode)
    alphas = [as_factor(a) for a in alphas]
    if workers <= 1 or len(alphas) <= 1:
        chunks = [_sweep_alpha(K, T, a, epsilons, mode) for a in alphas]
    else:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_sweep_alpha, K, T, a, list(epsilons), mode) for a in alphas]
            chunks = [f.result() for f in futures]
    return [r for chunk in chunks for r in chunk]
