"""Exact counting of point pairs closer than a threshold in the max-norm.

Two rows ``a`` and ``b`` are *close* when ``max_k |a_k - b_k| < eps`` with the
differences evaluated in float64 exactly as a brute-force loop would.  The
counter first buckets rows into cells of an ``eps``-grid (cells further than
one step apart in any coordinate can never be close), then resolves each
bucket and each pair of adjacent buckets with a bounding-box tree:

* if the largest possible coordinate gap between two boxes is below ``eps``,
  every cross pair is close and is counted in one step;
* if the smallest possible gap already reaches ``eps``, none is;
* otherwise the larger box is split at its median and the halves are retried,
  down to small leaves compared row by row.

Box bounds are differences of actual stored coordinates, and float
subtraction is monotone, so the shortcuts agree bit-for-bit with brute force.
Works on dense arrays and on CSR sparse matrices (absent entries are 0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

LEAF_SIZE = 48


@dataclass
class PairCount:
    count: int
    examples: list[tuple[int, int]]


class _Dense:
    def __init__(self, X):
        self.X = np.ascontiguousarray(X, dtype=np.float64)
        self.n, self.d = self.X.shape

    def box(self, rows):
        sub = self.X[rows]
        return None, sub.min(axis=0), sub.max(axis=0)

    def column(self, rows, col):
        return self.X[rows, col]

    def block(self, rows, cols):
        return self.X[rows] if cols is None else self.X[np.ix_(rows, cols)]


class _Sparse:
    def __init__(self, X):
        X = sp.csr_matrix(X, dtype=np.float64)
        X.sum_duplicates()
        X.sort_indices()
        self.X = X
        self.n, self.d = X.shape

    def box(self, rows):
        sub = self.X[rows]
        cols = np.unique(sub.indices)
        if cols.size == 0:
            return cols, np.zeros(0), np.zeros(0)
        sub = sub[:, cols]
        lo = np.asarray(sub.min(axis=0).todense()).ravel()
        hi = np.asarray(sub.max(axis=0).todense()).ravel()
        return cols, lo, hi

    def column(self, rows, col):
        return np.asarray(self.X[rows][:, [col]].todense()).ravel()

    def block(self, rows, cols):
        return np.asarray(self.X[rows][:, cols].todense())


def _expand(cols, vals, union):
    out = np.zeros(union.size)
    if cols.size:
        out[np.searchsorted(union, cols)] = vals
    return out


class _Tree:
    """Median-split box tree over a subset of rows."""

    def __init__(self, data, rows, leaf_size):
        self.data = data
        self.perm = np.asarray(rows, dtype=np.int64).copy()
        self.start, self.end, self.cols, self.lo, self.hi = [], [], [], [], []
        self.left, self.right = [], []
        self.lo_f, self.hi_f = [], []
        self._build(leaf_size)

    def _new(self, s, e):
        cols, lo, hi = self.data.box(self.perm[s:e])
        if cols is None:
            # plain floats: box arithmetic on a handful of coordinates is
            # cheaper in Python than through numpy reductions
            self.lo_f.append(lo.tolist())
            self.hi_f.append(hi.tolist())
        self.start.append(s)
        self.end.append(e)
        self.cols.append(cols)
        self.lo.append(lo)
        self.hi.append(hi)
        self.left.append(-1)
        self.right.append(-1)
        return len(self.start) - 1

    def _build(self, leaf_size):
        root = self._new(0, self.perm.size)
        stack = [root]
        while stack:
            node = stack.pop()
            s, e = self.start[node], self.end[node]
            if e - s <= leaf_size:
                continue
            extent = self.hi[node] - self.lo[node]
            if extent.size == 0 or extent.max() <= 0.0:
                continue  # all rows identical
            k = int(np.argmax(extent))
            col = k if self.cols[node] is None else int(self.cols[node][k])
            seg = self.perm[s:e]
            vals = self.data.column(seg, col)
            mid = (e - s) // 2
            order = np.argpartition(vals, mid, kind="introselect")
            self.perm[s:e] = seg[order]
            left = self._new(s, s + mid)
            right = self._new(s + mid, e)
            self.left[node], self.right[node] = left, right
            stack.extend((right, left))

    def size(self, node):
        return self.end[node] - self.start[node]

    def rows(self, node):
        return self.perm[self.start[node]:self.end[node]]

    def is_leaf(self, node):
        return self.left[node] < 0


def _bounds(ta, a, tb, b):
    """(lower, upper) bounds on max-norm distance between rows of two nodes."""
    ca, cb = ta.cols[a], tb.cols[b]
    if ca is None:
        lower = upper = 0.0
        for la, ha, lb, hb in zip(ta.lo_f[a], ta.hi_f[a], tb.lo_f[b], tb.hi_f[b]):
            upper = max(upper, ha - lb, hb - la)
            lower = max(lower, lb - ha, la - hb)
        return lower, upper
    else:
        union = np.union1d(ca, cb)
        if union.size == 0:
            return 0.0, 0.0
        loA, hiA = _expand(ca, ta.lo[a], union), _expand(ca, ta.hi[a], union)
        loB, hiB = _expand(cb, tb.lo[b], union), _expand(cb, tb.hi[b], union)
    upper = max(float(np.max(hiA - loB)), float(np.max(hiB - loA)))
    lower = max(float(np.max(loB - hiA)), float(np.max(loA - hiB)), 0.0)
    return lower, upper


class _Counter:
    def __init__(self, data, eps, max_examples):
        self.data = data
        self.eps = eps
        self.max_examples = max_examples
        self.count = 0
        self.examples: list[tuple[int, int]] = []

    def _note(self, ra, rb, mask=None):
        if len(self.examples) >= self.max_examples:
            return
        if mask is None:
            same = ra is rb
            for p, i in enumerate(ra):
                for j in (rb[p + 1:] if same else rb):
                    self.examples.append((int(min(i, j)), int(max(i, j))))
                    if len(self.examples) >= self.max_examples:
                        return
        else:
            for p, q in zip(*np.nonzero(mask)):
                self.examples.append((int(min(ra[p], rb[q])), int(max(ra[p], rb[q]))))
                if len(self.examples) >= self.max_examples:
                    return

    def _cols(self, ra, rb, ta):
        if ta.cols[0] is None:
            return None
        cols = np.union1d(self.data.X[ra].indices, self.data.X[rb].indices)
        return cols

    def _leaf_self(self, t, node):
        r = t.rows(node)
        cols = self._cols(r, r, t)
        if cols is not None and cols.size == 0:
            n = r.size
            self.count += n * (n - 1) // 2
            self._note(r, r)
            return
        B = self.data.block(r, cols)
        close = np.abs(B[:, None, :] - B[None, :, :]).max(axis=2) < self.eps
        close = np.triu(close, k=1)
        self.count += int(close.sum())
        self._note(r, r, close)

    def _leaf_cross(self, ta, a, tb, b):
        ra, rb = ta.rows(a), tb.rows(b)
        cols = self._cols(ra, rb, ta)
        if cols is not None and cols.size == 0:
            self.count += ra.size * rb.size
            self._note(ra, rb)
            return
        A = self.data.block(ra, cols)
        B = self.data.block(rb, cols)
        close = np.abs(A[:, None, :] - B[None, :, :]).max(axis=2) < self.eps
        self.count += int(close.sum())
        self._note(ra, rb, close)

    def within(self, t, root=0):
        eps = self.eps
        stack = [("s", root, root)]
        while stack:
            kind, a, b = stack.pop()
            if kind == "s":
                n = t.size(a)
                if t.cols[a] is None:
                    spread = max((h - l for l, h in zip(t.lo_f[a], t.hi_f[a])), default=0.0)
                else:
                    spread = float((t.hi[a] - t.lo[a]).max()) if t.hi[a].size else 0.0
                if spread < eps:
                    self.count += n * (n - 1) // 2
                    r = t.rows(a)
                    self._note(r, r)
                elif t.is_leaf(a):
                    self._leaf_self(t, a)
                else:
                    L, R = t.left[a], t.right[a]
                    stack.append(("c", L, R))
                    stack.append(("s", R, R))
                    stack.append(("s", L, L))
            else:
                self._cross(t, a, t, b, stack)

    def across(self, ta, tb):
        stack = [("c", 0, 0)]
        while stack:
            _, a, b = stack.pop()
            self._cross(ta, a, tb, b, stack)

    def _cross(self, ta, a, tb, b, stack):
        lower, upper = _bounds(ta, a, tb, b)
        if lower >= self.eps:
            return
        if upper < self.eps:
            self.count += ta.size(a) * tb.size(b)
            self._note(ta.rows(a), tb.rows(b))
            return
        la, lb = ta.is_leaf(a), tb.is_leaf(b)
        if la and lb:
            self._leaf_cross(ta, a, tb, b)
        elif lb or (not la and ta.size(a) >= tb.size(b)):
            stack.append(("c", ta.right[a], b))
            stack.append(("c", ta.left[a], b))
        else:
            stack.append(("c", a, tb.right[b]))
            stack.append(("c", a, tb.left[b]))


def _grid_cells(data, eps):
    """Group rows by their eps-grid cell; returns (keys, groups) in key order."""
    if isinstance(data, _Sparse):
        return None
    cells = np.floor(data.X / eps).astype(np.int64)
    keys, inverse = np.unique(cells, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    order = np.argsort(inverse, kind="stable")
    bounds = np.searchsorted(inverse[order], np.arange(keys.shape[0] + 1))
    groups = [order[bounds[g]:bounds[g + 1]] for g in range(keys.shape[0])]
    return keys, groups


# Above this many neighbour offsets the grid stage is skipped.
_MAX_GRID_OFFSETS = 364


def count_close_pairs(X, eps: float, max_examples: int = 10, leaf_size: int = LEAF_SIZE) -> PairCount:
    """Count unordered row pairs of ``X`` at max-norm distance below ``eps``.

    ``X`` is a dense ``N x d`` array or a scipy sparse matrix.  Returns the
    exact count and up to ``max_examples`` example index pairs ``(i, j)``,
    ``i < j``, in a deterministic order.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    data = _Sparse(X) if sp.issparse(X) else _Dense(X)
    counter = _Counter(data, float(eps), max_examples)
    if data.n < 2:
        return PairCount(0, [])
    d = data.d
    n_offsets = (3 ** d - 1) // 2 if d <= 12 else None
    if isinstance(data, _Sparse) or n_offsets is None or n_offsets > _MAX_GRID_OFFSETS:
        counter.within(_Tree(data, np.arange(data.n), leaf_size))
        return PairCount(counter.count, counter.examples)

    keys, groups = _grid_cells(data, eps)
    lookup = {tuple(k): g for g, k in enumerate(keys.tolist())}
    offsets = np.array(np.meshgrid(*[[-1, 0, 1]] * d, indexing="ij")).reshape(d, -1).T
    # keep lexicographically positive offsets so each neighbour pair is visited once
    positive = [o for o in offsets.tolist() if next((v for v in o if v != 0), 0) > 0]
    trees: dict[int, _Tree] = {}

    def tree(g):
        if g not in trees:
            trees[g] = _Tree(data, groups[g], leaf_size)
        return trees[g]

    for g, key in enumerate(keys.tolist()):
        counter.within(tree(g))
        for off in positive:
            h = lookup.get(tuple(k + o for k, o in zip(key, off)))
            if h is not None:
                counter.across(tree(g), tree(h))
        trees.pop(g, None)
    return PairCount(counter.count, counter.examples)


# Groups this small are checked pair by pair.
_PREFIX_LEAF = 12
# Pruning thresholds are widened by this relative margin; candidates are then
# re-checked on the stored codes, so the margin only costs a few extra checks.
_PRUNE_SLACK = 1e-9


def count_close_prefix_pairs(X, parent, token, alpha: float, eps: float,
                             max_examples: int = 10) -> PairCount:
    """Close-pair count for codes of the nodes of a prefix trie.

    Row ``n`` of the CSR matrix ``X`` is the code of trie node ``n``; node 0 is
    the empty prefix and is excluded from the count.  ``parent[n]`` and
    ``token[n]`` give the trie structure, so that
    ``X[n] = alpha * X[parent[n]] + e_token[n]``.

    Two nodes ending in the same token are exactly ``alpha`` times as far
    apart as their parents, so those pairs are resolved one level up with
    threshold ``eps / alpha``.  Nodes ending in different tokens ``x`` and
    ``y`` can only be close when each code holds more than ``1 - eps`` in the
    other's final coordinate, which leaves few candidates.  Every candidate is
    finally compared on the stored rows, so the count matches brute force.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    X = sp.csr_matrix(X, dtype=np.float64)
    parent = np.asarray(parent, dtype=np.int64)
    token = np.asarray(token, dtype=np.int64)
    n = X.shape[0] - 1
    verifier = _PairVerifier(X, float(eps), max_examples)
    if n < 2:
        return PairCount(0, [])
    stack = [(np.arange(1, n + 1), np.arange(1, n + 1), float(eps))]
    while stack:
        orig, cur, e = stack.pop()
        m = cur.size
        if m < 2:
            continue
        if m <= _PREFIX_LEAF:
            i, j = np.triu_indices(m, k=1)
            verifier.add(orig[i], orig[j])
            continue
        e_p = e * (1 + _PRUNE_SLACK) + 1e-15
        if e_p >= 1.0:
            # no pruning left; fall back to the generic counter on this group
            found = count_close_pairs(X[orig], eps, max_examples=max_examples)
            verifier.count += found.count
            verifier.note([(orig[i], orig[j]) for i, j in found.examples])
            continue
        last = token[cur]
        order = np.argsort(last, kind="stable")
        keys, starts = np.unique(last[order], return_index=True)
        bounds = np.append(starts, m)
        group_of = {int(k): order[bounds[g]:bounds[g + 1]] for g, k in enumerate(keys)}
        for k, members in group_of.items():
            if members.size > 1 and k >= 0:
                stack.append((orig[members], parent[cur[members]], e / alpha))
        # heavy coordinates: entries above 1 - e that are not the final token
        sub = X[cur]
        rows = np.repeat(np.arange(m), np.diff(sub.indptr))
        heavy = sub.data >= 1.0 - e_p
        hr, hc = rows[heavy], sub.indices[heavy]
        extra = hc != last[hr]
        if not extra.any():
            continue
        heavy_set = set(zip(hr.tolist(), hc.tolist()))
        for q, j in zip(hr[extra].tolist(), hc[extra].tolist()):
            lq = int(last[q])
            if j >= lq or j not in group_of:
                continue  # each cross pair is taken from its smaller final token
            ps = [p for p in group_of[j].tolist() if (p, lq) in heavy_set]
            if ps:
                verifier.add(orig[ps], np.full(len(ps), orig[q]))
    verifier.flush()
    return PairCount(verifier.count, verifier.examples)


class _PairVerifier:
    """Checks candidate pairs on the stored rows, in chunks."""

    CHUNK = 20_000

    def __init__(self, X, eps, max_examples):
        self.X = X
        self.eps = eps
        self.max_examples = max_examples
        self.count = 0
        self.examples: list[tuple[int, int]] = []
        self.a: list[np.ndarray] = []
        self.b: list[np.ndarray] = []
        self.pending = 0

    def note(self, pairs):
        for i, j in pairs:
            if len(self.examples) >= self.max_examples:
                return
            self.examples.append((int(min(i, j)), int(max(i, j))))

    def add(self, a, b):
        self.a.append(np.asarray(a, dtype=np.int64))
        self.b.append(np.asarray(b, dtype=np.int64))
        self.pending += len(self.a[-1])
        if self.pending >= self.CHUNK:
            self.flush()

    def flush(self):
        if not self.pending:
            return
        a, b = np.concatenate(self.a), np.concatenate(self.b)
        self.a, self.b, self.pending = [], [], 0
        diff = abs(self.X[a] - self.X[b])
        dist = np.asarray(diff.max(axis=1).todense()).ravel()
        close = np.flatnonzero(dist < self.eps)
        self.count += close.size
        self.note(zip(a[close].tolist(), b[close].tolist()))
