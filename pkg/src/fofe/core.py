"""Fixed-size ordinally-forgetting encoding of token sequences.

A sequence ``w_1 .. w_T`` over a vocabulary of ``K`` symbols is folded into a
single K-dimensional vector by the recursion ``z_t = alpha * z_{t-1} + e_t``
with ``z_0 = 0``, where ``e_t`` is the one-hot vector of ``w_t``.  Entry ``i``
of the final code is therefore ``sum(alpha ** (T - t) for t where w_t == i)``.

Three evaluation orders are provided and are interchangeable up to rounding:

* :func:`encode_prefixes` runs the recursion directly,
* :func:`encode_via_matrix` multiplies the lower-triangular forgetting matrix
  ``M`` (``M[i, j] = alpha ** (i - j)``) with the stacked one-hot rows ``V``,
* :func:`encode_embedded` decays embedding rows instead of one-hot rows, i.e.
  evaluates ``M (V U)`` rather than ``(M V) U``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.signal import lfilter

from .errors import AmbiguousCodeError, MalformedCodeError, SequenceTooLongError

#: Above this vocabulary size prefix codes are stored as sparse id -> value maps.
SPARSE_VOCAB_THRESHOLD = 4096

DEFAULT_DECODE_TOL = 1e-9
DEFAULT_MAX_LEN = 64

# Backtracking budget for decoding in the almost-unique regime.
_DECODE_NODE_BUDGET = 200_000


@dataclass(frozen=True)
class ForgettingFactor:
    """A forgetting factor strictly inside (0, 1)."""

    value: float

    def __post_init__(self):
        v = float(self.value)
        if not (math.isfinite(v) and 0.0 < v < 1.0):
            raise ValueError(f"forgetting factor must lie in the open interval (0, 1), got {self.value!r}")
        object.__setattr__(self, "value", v)

    @property
    def regime(self) -> str:
        """``"unique"`` when every code decodes unambiguously (value <= 0.5)."""
        return "unique" if self.value <= 0.5 else "almost-unique"

    @property
    def code_bound(self) -> float:
        return 1.0 / (1.0 - self.value)

    def __float__(self):
        return self.value


def as_factor(alpha: float | ForgettingFactor) -> ForgettingFactor:
    if isinstance(alpha, ForgettingFactor):
        return alpha
    return ForgettingFactor(alpha)


@dataclass(frozen=True)
class TokenSequence:
    """Token ids drawn from a vocabulary of ``vocab_size`` symbols."""

    ids: tuple[int, ...]
    vocab_size: int

    def __post_init__(self):
        ids = tuple(int(i) for i in self.ids)
        if self.vocab_size < 1:
            raise ValueError(f"vocab_size must be positive, got {self.vocab_size}")
        for i in ids:
            if not 0 <= i < self.vocab_size:
                raise ValueError(f"token id {i} outside [0, {self.vocab_size})")
        object.__setattr__(self, "ids", ids)

    def __len__(self):
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)

    def __getitem__(self, item):
        return self.ids[item]


def as_sequence(seq: TokenSequence | Sequence[int], vocab_size: int | None = None) -> TokenSequence:
    if isinstance(seq, TokenSequence):
        if vocab_size is not None and vocab_size != seq.vocab_size:
            raise ValueError(f"sequence vocab_size {seq.vocab_size} != {vocab_size}")
        return seq
    if vocab_size is None:
        raise ValueError("vocab_size is required for a bare id list")
    return TokenSequence(tuple(seq), vocab_size)


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class FofeCode:
    """Fixed-size code of a whole sequence."""

    entries: np.ndarray
    alpha: ForgettingFactor

    def __post_init__(self):
        entries = np.array(self.entries, dtype=np.float64)
        if entries.ndim != 1:
            raise ValueError("a FOFE code is a 1-d vector")
        object.__setattr__(self, "entries", _readonly(entries))
        object.__setattr__(self, "alpha", as_factor(self.alpha))

    @property
    def vocab_size(self) -> int:
        return self.entries.shape[0]

    def __len__(self):
        return self.entries.shape[0]


@dataclass(frozen=True, eq=False)
class ForgettingMatrix:
    """The T x T lower-triangular matrix with ``entry(i, j) = alpha ** (i - j)``."""

    order: int
    alpha: ForgettingFactor
    entries: np.ndarray = field(repr=False)


def build_forgetting_matrix(T: int, alpha: float | ForgettingFactor) -> ForgettingMatrix:
    """Build the forgetting matrix of order ``T``.

    Columns are filled by the recursion ``entry(i, j) = alpha * entry(i-1, j)``
    so that every entry carries exactly the rounding of the recursive encoder.
    """
    alpha = as_factor(alpha)
    if T < 1:
        raise ValueError(f"forgetting matrix order must be >= 1, got {T}")
    powers = np.empty(T)
    powers[0] = 1.0
    for k in range(1, T):
        powers[k] = alpha.value * powers[k - 1]
    i, j = np.indices((T, T))
    lag = i - j
    M = np.where(lag >= 0, powers[np.clip(lag, 0, T - 1)], 0.0)
    return ForgettingMatrix(T, alpha, _readonly(M))


class PrefixCodes:
    """FOFE codes of every prefix ``w_1 .. w_t`` of one sequence.

    Row ``t`` (0-based) is the code of the first ``t + 1`` tokens.  Storage is
    either a dense ``T x K`` array or, for large vocabularies, one sparse
    ``{id: value}`` map per row; :attr:`rows` always returns the dense view.
    """

    __slots__ = ("alpha", "vocab_size", "_dense", "_sparse")

    def __init__(self, alpha, vocab_size, dense=None, sparse=None):
        self.alpha = as_factor(alpha)
        self.vocab_size = int(vocab_size)
        if (dense is None) == (sparse is None):
            raise ValueError("exactly one of dense/sparse storage is required")
        if dense is not None:
            dense = np.asarray(dense, dtype=np.float64)
            if dense.ndim != 2 or dense.shape[1] != self.vocab_size:
                raise ValueError(f"dense prefix codes must be T x {self.vocab_size}")
            _readonly(dense)
        self._dense = dense
        self._sparse = None if sparse is None else tuple(sparse)

    def __len__(self):
        if self._dense is not None:
            return self._dense.shape[0]
        return len(self._sparse)

    @property
    def is_sparse(self) -> bool:
        return self._sparse is not None

    @property
    def rows(self) -> np.ndarray:
        if self._dense is None:
            dense = np.zeros((len(self._sparse), self.vocab_size))
            for t, row in enumerate(self._sparse):
                if row:
                    dense[t, list(row.keys())] = list(row.values())
            self._dense = _readonly(dense)
        return self._dense

    def sparse_row(self, t: int) -> dict[int, float]:
        if self._sparse is not None:
            return dict(self._sparse[t])
        row = self._dense[t]
        nz = np.flatnonzero(row)
        return {int(i): float(row[i]) for i in nz}

    def code(self, t: int) -> FofeCode:
        """Code of the first ``t`` tokens; ``t = 0`` gives the zero vector."""
        if t == 0:
            return FofeCode(np.zeros(self.vocab_size), self.alpha)
        if self._dense is not None:
            return FofeCode(self._dense[t - 1], self.alpha)
        entries = np.zeros(self.vocab_size)
        row = self._sparse[t - 1]
        if row:
            entries[list(row.keys())] = list(row.values())
        return FofeCode(entries, self.alpha)

    @property
    def final(self) -> FofeCode:
        return self.code(len(self))


def encode_prefixes(seq: TokenSequence, alpha: float | ForgettingFactor) -> PrefixCodes:
    """Run the recursion ``z_t = alpha * z_{t-1} + e_t`` and keep every ``z_t``."""
    alpha = as_factor(alpha)
    a = alpha.value
    K = seq.vocab_size
    if K > SPARSE_VOCAB_THRESHOLD:
        rows = []
        z: dict[int, float] = {}
        for w in seq.ids:
            z = {i: a * v for i, v in z.items()}
            z[w] = z.get(w, 0.0) + 1.0
            rows.append(z)
        return PrefixCodes(alpha, K, sparse=rows)
    rows = np.zeros((len(seq), K))
    z = np.zeros(K)
    for t, w in enumerate(seq.ids):
        z = a * z
        z[w] += 1.0
        rows[t] = z
    return PrefixCodes(alpha, K, dense=rows)


def encode(seq: TokenSequence, alpha: float | ForgettingFactor) -> FofeCode:
    """Code of the whole sequence (the last prefix row)."""
    alpha = as_factor(alpha)
    a = alpha.value
    z = np.zeros(seq.vocab_size)
    for w in seq.ids:
        z *= a
        z[w] += 1.0
    return FofeCode(z, alpha)


def encode_via_matrix(seq: TokenSequence, alpha: float | ForgettingFactor) -> PrefixCodes:
    """Evaluate all prefix codes at once as ``S = M V``."""
    alpha = as_factor(alpha)
    T = len(seq)
    if T == 0:
        raise ValueError("matrix encoding needs a nonempty sequence")
    M = build_forgetting_matrix(T, alpha).entries
    ids = np.asarray(seq.ids)
    K = seq.vocab_size
    if K <= SPARSE_VOCAB_THRESHOLD:
        V = np.zeros((T, K))
        V[np.arange(T), ids] = 1.0
        return PrefixCodes(alpha, K, dense=M @ V)
    # V is one-hot: column k of M V is the sum of the columns of M at positions of k
    used, inverse = np.unique(ids, return_inverse=True)
    S_used = np.zeros((T, used.size))
    np.add.at(S_used.T, inverse, M.T)
    rows = []
    for t in range(T):
        nz = np.flatnonzero(S_used[t])
        rows.append({int(used[c]): float(S_used[t, c]) for c in nz})
    return PrefixCodes(alpha, K, sparse=rows)


def encode_batch(sentences: Sequence[TokenSequence], alpha: float | ForgettingFactor) -> list[PrefixCodes]:
    """Encode a mini-batch as the block-diagonal product ``diag(M_1..M_N) [V_1; ..; V_N]``.

    Each block is evaluated on its own, so no state crosses a sentence boundary.
    """
    alpha = as_factor(alpha)
    if not sentences:
        return []
    K = sentences[0].vocab_size
    out = []
    for n, s in enumerate(sentences):
        if s.vocab_size != K:
            raise ValueError(f"sentence {n} has vocab_size {s.vocab_size}, batch uses {K}")
        if len(s) == 0:
            raise ValueError(f"sentence {n} of the batch is empty")
        out.append(encode_via_matrix(s, alpha))
    return out


def forgetting_scan(X: np.ndarray, alpha: float, axis: int = 0, reverse: bool = False) -> np.ndarray:
    """Apply ``y_t = alpha * y_{t-1} + x_t`` along ``axis``.

    With ``reverse=True`` the scan runs from the end, which is the transpose
    ``M^T`` of the forward map and is what back-propagation needs.
    """
    X = np.asarray(X)
    if X.shape[axis] == 0:
        return X.copy()
    if reverse:
        X = np.flip(X, axis=axis)
    Y = lfilter([1.0], [1.0, -float(alpha)], X, axis=axis).astype(X.dtype, copy=False)
    if reverse:
        Y = np.flip(Y, axis=axis)
    return np.ascontiguousarray(Y)


def encode_embedded(seq: TokenSequence, alpha: float | ForgettingFactor, embedding: np.ndarray) -> np.ndarray:
    """Prefix codes projected through ``embedding`` without forming K-dim codes.

    Rows of the embedding are looked up (``V U``) and then decayed along the
    sequence (``M (V U)``).
    """
    alpha = as_factor(alpha)
    U = np.asarray(embedding)
    if U.ndim != 2 or U.shape[0] != seq.vocab_size:
        raise ValueError(f"embedding must have {seq.vocab_size} rows, got shape {U.shape}")
    if len(seq) == 0:
        return np.zeros((0, U.shape[1]), dtype=U.dtype)
    return forgetting_scan(U[np.asarray(seq.ids)], alpha.value)


# --- decoding -------------------------------------------------------------


def _geometric_sums(a: float, n: int) -> np.ndarray:
    """``S[T] = sum(a ** k for k < T)`` for ``T = 0 .. n``."""
    S = np.zeros(n + 1)
    p = 1.0
    for T in range(1, n + 1):
        S[T] = S[T - 1] + p
        p *= a
    return S


def _infer_length(total: float, a: float, K: int, max_len: int, tol: float) -> int:
    # the entries of a length-T code always sum to 1 + a + ... + a^(T-1)
    slack = max(1, K) * tol
    S = _geometric_sums(a, max_len + 1)
    T = int(np.argmin(np.abs(S[: max_len + 1] - total)))
    if abs(S[T] - total) <= slack:
        return T
    if total > S[max_len] + slack and total < 1.0 / (1.0 - a):
        raise SequenceTooLongError(
            f"code sums to {total!r}, which needs more than max_len={max_len} tokens")
    raise MalformedCodeError(f"entry sum {total!r} is not 1 + alpha + ... + alpha^(T-1) for any T")


def decode(code: FofeCode | np.ndarray, alpha: float | ForgettingFactor | None = None,
           max_len: int = DEFAULT_MAX_LEN, tol: float = DEFAULT_DECODE_TOL) -> TokenSequence:
    """Recover the sequence whose final code is ``code``.

    The length follows from the entry sum.  Positions are then filled from the
    most recent one backwards: the token at distance ``p`` from the end is the
    entry still holding at least ``alpha ** p``.  For ``alpha <= 0.5`` that entry
    is unique at every step.  Above 0.5 several entries can qualify; all
    branches are searched and a code with more than one consistent sequence
    raises :class:`AmbiguousCodeError`.
    """
    if isinstance(code, FofeCode):
        if alpha is None:
            alpha = code.alpha
        z = np.array(code.entries, dtype=np.float64)
    else:
        z = np.array(code, dtype=np.float64)
        if alpha is None:
            raise ValueError("alpha is required when decoding a bare vector")
    alpha = as_factor(alpha)
    a = alpha.value
    K = z.shape[0]
    if not np.all(np.isfinite(z)):
        raise MalformedCodeError("code has non-finite entries")
    if np.any(z < -tol):
        raise MalformedCodeError("code has negative entries")
    T = _infer_length(float(z.sum()), a, K, max_len, tol)
    if T == 0:
        if np.any(np.abs(z) > tol):
            raise MalformedCodeError("residual left after decoding the empty sequence")
        return TokenSequence((), K)

    powers = a ** np.arange(T, dtype=np.float64)
    # tails[p] = sum of powers strictly beyond position p from the end
    tails = np.concatenate([np.cumsum(powers[::-1])[::-1][1:], [0.0]])

    solutions: list[list[int]] = []
    picked: list[int] = []
    nodes = 0

    def search(p: int, r: np.ndarray) -> None:
        nonlocal nodes
        if len(solutions) > 1:
            return
        nodes += 1
        if nodes > _DECODE_NODE_BUDGET:
            raise AmbiguousCodeError(
                f"alpha={a} code could not be resolved within {_DECODE_NODE_BUDGET} search steps")
        if p == T:
            if np.all(np.abs(r) <= tol):
                solutions.append(list(picked))
            return
        cand = np.flatnonzero(r >= powers[p] - tol)
        if cand.size > 1:
            cand = cand[np.argsort(-r[cand], kind="stable")]
        for i in cand:
            r2 = r.copy()
            r2[i] -= powers[p]
            if np.any(r2 > tails[p] + tol):
                continue
            picked.append(int(i))
            search(p + 1, r2)
            picked.pop()

    search(0, z)
    if not solutions:
        raise MalformedCodeError(f"no sequence of length {T} reproduces the code within tol={tol}")
    if len(solutions) > 1:
        raise AmbiguousCodeError(
            f"alpha={a} admits several sequences for this code, e.g. {solutions[0][::-1]} and {solutions[1][::-1]}")
    return TokenSequence(tuple(reversed(solutions[0])), K)


def decode_many(codes: np.ndarray, alpha: float | ForgettingFactor,
                max_len: int = DEFAULT_MAX_LEN, tol: float = DEFAULT_DECODE_TOL) -> list[tuple[int, ...]]:
    """Vectorised greedy decoder for a stack of codes in the unique regime.

    Rows are decoded simultaneously; the first row that fails raises the same
    errors as :func:`decode`, with the row index in the message.
    """
    alpha = as_factor(alpha)
    if alpha.regime != "unique":
        raise ValueError("decode_many only supports alpha <= 0.5; use decode() per code")
    a = alpha.value
    R = np.array(codes, dtype=np.float64)
    if R.ndim != 2:
        raise ValueError("codes must be an N x K array")
    N, K = R.shape
    if not np.all(np.isfinite(R)) or np.any(R < -tol):
        bad = int(np.flatnonzero(~np.all(np.isfinite(R) & (R >= -tol), axis=1))[0])
        raise MalformedCodeError(f"row {bad}: negative or non-finite entries")
    slack = max(1, K) * tol
    S = _geometric_sums(a, max_len + 1)
    totals = R.sum(axis=1)
    lengths = np.argmin(np.abs(totals[:, None] - S[None, : max_len + 1]), axis=1)
    off = np.abs(S[lengths] - totals) > slack
    if np.any(off):
        bad = int(np.flatnonzero(off)[0])
        _infer_length(float(totals[bad]), a, K, max_len, tol)  # raises the precise error
        raise MalformedCodeError(f"row {bad}: cannot infer the sequence length")

    T_max = int(lengths.max()) if N else 0
    out = np.full((N, max(T_max, 1)), -1, dtype=np.int64)
    rows = np.arange(N)
    power = 1.0
    for p in range(T_max):
        active = rows[lengths > p]
        sub = R[active]
        cand = sub >= power - tol
        count = cand.sum(axis=1)
        if np.any(count != 1):
            bad = int(active[np.flatnonzero(count != 1)[0]])
            raise MalformedCodeError(f"row {bad}: {int(count[np.flatnonzero(count != 1)[0]])} entries "
                                     f"hold alpha^{p} at distance {p} from the end")
        tok = np.argmax(cand, axis=1)
        R[active, tok] -= power
        out[active, lengths[active] - 1 - p] = tok
        power *= a
    leftover = np.abs(R).max(axis=1) > tol
    if np.any(leftover):
        bad = int(np.flatnonzero(leftover)[0])
        raise MalformedCodeError(f"row {bad}: residual above tol after decoding")
    return [tuple(int(x) for x in out[n, : lengths[n]]) for n in range(N)]

