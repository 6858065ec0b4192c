import io
import itertools
import math

import numpy as np
import pytest

from fofe import TokenSequence, encode
from fofe.errors import TooLargeError
from fofe.uniqueness import (
    CRITICAL_HEADER,
    enumerate_collisions,
    find_critical_alphas,
    is_alpha_safe,
    polynomial_residual,
    read_collision_tsv,
    scan_corpus_collisions,
    sweep_collisions,
    write_collision_tsv,
)

from oracles import bisect_root, brute_force_count, closed_form_code, recursive_prefix_codes

GOLDEN = (math.sqrt(5) - 1) / 2


def codes_of(K, T, alpha, lengths=None):
    # recursion order (z = alpha * z + e) so that pairs sitting exactly at eps
    # round the same way as in the package
    seqs = [s for t in (lengths or [T]) for s in itertools.product(range(K), repeat=t)]
    return seqs, np.array([recursive_prefix_codes(s, K, alpha)[-1] for s in seqs])


class TestEnumerateCollisions:
    def test_small_binary_case(self):
        r = enumerate_collisions(2, 3, 0.5, 1e-6)
        assert (r.cases_tested, r.collisions) == (8, 0)

    @pytest.mark.parametrize("T", [1, 4, 9])
    def test_single_symbol(self, T):
        r = enumerate_collisions(1, T, 0.8, 0.5)
        assert (r.cases_tested, r.collisions) == (1, 0)

    @pytest.mark.parametrize("K,T", [(2, 12), (3, 7), (4, 6), (2, 9), (8, 4), (64, 2)])
    @pytest.mark.parametrize("alpha", [0.3, 0.55, GOLDEN, 0.75, 0.9])
    @pytest.mark.parametrize("eps", [1e-4, 1e-3, 1e-2, 0.1])
    def test_matches_brute_force(self, K, T, alpha, eps):
        _, codes = codes_of(K, T, alpha)
        assert enumerate_collisions(K, T, alpha, eps).collisions == brute_force_count(codes, eps)

    def test_up_to_length_mode(self):
        _, codes = codes_of(2, 8, 0.7, lengths=range(1, 9))
        r = enumerate_collisions(2, 8, 0.7, 0.05, mode="up-to-length")
        assert r.cases_tested == 2 ** 9 - 2
        assert r.collisions == brute_force_count(codes, 0.05)

    def test_examples_really_collide(self):
        r = enumerate_collisions(2, 10, GOLDEN, 1e-9)
        assert r.collisions > 0 and r.example_pairs
        for x, y in r.example_pairs:
            assert x != y
            d = np.max(np.abs(closed_form_code(x, 2, GOLDEN) - closed_form_code(y, 2, GOLDEN)))
            assert d < 1e-9

    @pytest.mark.parametrize("K,T", [(2, 8), (3, 6), (3, 8)])
    @pytest.mark.parametrize("alpha", [0.25, 0.4, 0.5])
    def test_unique_regime_has_no_collisions_below_min_gap(self, K, T, alpha):
        _, codes = codes_of(K, T, alpha)
        gaps = [np.abs(codes[i + 1:] - codes[i]).max(axis=1).min() for i in range(len(codes) - 1)]
        assert enumerate_collisions(K, T, alpha, float(min(gaps))).collisions == 0

    def test_epsilon_monotone(self):
        counts = [enumerate_collisions(2, 14, 0.8, e).collisions for e in (1e-4, 1e-3, 1e-2)]
        assert counts == sorted(counts)

    def test_guard(self):
        with pytest.raises(TooLargeError, match=str(3 ** 14)):
            enumerate_collisions(3, 14, 0.7, 0.01)

    def test_collisions_bounded_by_pairs(self):
        r = enumerate_collisions(3, 5, 0.9, 0.5)
        assert r.collisions <= math.comb(r.cases_tested, 2)


class TestSweep:
    def test_rows_alpha_major_and_worker_independent(self):
        one = sweep_collisions(2, 10, [0.6, 0.8], [1e-3, 1e-2])
        two = sweep_collisions(2, 10, [0.6, 0.8], [1e-3, 1e-2], workers=2)
        assert [(r.alpha.value, r.epsilon) for r in one] == [(0.6, 1e-3), (0.6, 1e-2), (0.8, 1e-3), (0.8, 1e-2)]
        assert [r.tsv_row() for r in one] == [r.tsv_row() for r in two]

    def test_tsv_roundtrip(self):
        reports = sweep_collisions(2, 6, [0.55, 0.7], [1e-2])
        buf = io.StringIO()
        write_collision_tsv(reports, buf)
        rows = read_collision_tsv(buf.getvalue())
        assert buf.getvalue().splitlines()[0] == "alpha\tepsilon\tK\tT\tcases\tcollisions"
        assert [(r["alpha"], r["collisions"]) for r in rows] == [(0.55, reports[0].collisions), (0.7, reports[1].collisions)]


class TestCriticalAlphas:
    def test_order_two(self):
        roots = find_critical_alphas(2)
        assert len(roots) == 1
        assert abs(roots.alphas[0] - GOLDEN) <= 1e-12
        assert roots.roots[0][1] == (1, 1)

    def test_order_one_is_empty(self):
        assert len(find_critical_alphas(1)) == 0

    def test_order_three_contains_cubic_root(self):
        roots = find_critical_alphas(3)
        oracle = bisect_root([0, 1, 1])
        k = int(np.argmin(np.abs(roots.alphas - oracle)))
        assert abs(roots.alphas[k] - oracle) < 1e-12
        assert (0, 1, 1) in [roots.xi(m) for m in roots.generators[k]]

    @pytest.mark.parametrize("T", range(1, 13))
    def test_validity_and_bound(self, T):
        roots = find_critical_alphas(T)
        assert len(roots) <= T * 2 ** T
        assert np.all((roots.alphas > 0.5) & (roots.alphas < 1.0))
        assert np.all(np.diff(roots.alphas) > 0)
        for a, gens in zip(roots.alphas, roots.generators):
            assert np.all(np.abs(polynomial_residual(np.array(gens), a, T)) <= 1e-12)

    @pytest.mark.parametrize("T", range(2, 9))
    def test_no_root_missed(self, T):
        # every polynomial with a sign change on a fine grid over (0.5, 1) has its root listed
        grid = np.linspace(0.5, 1.0, 4097)[1:-1]
        roots = find_critical_alphas(T)
        for mask in range(1, 2 ** T):
            vals = polynomial_residual(np.full(grid.shape, mask), grid, T)
            if np.any(vals < 0) and np.any(vals > 0):
                coeffs = [(mask >> t) & 1 for t in range(T)]
                r = bisect_root(coeffs)
                k = int(np.argmin(np.abs(roots.alphas - r)))
                assert abs(roots.alphas[k] - r) < 1e-12
                assert mask in roots.generators[k]

    def test_shared_roots_are_merged(self):
        # alpha + alpha^2 = 1 also solves alpha^2 + alpha^3 + alpha^4 = alpha^2 + alpha^3 (x alpha^2) ... e.g. xi = 1011
        roots = find_critical_alphas(4)
        k = int(np.argmin(np.abs(roots.alphas - GOLDEN)))
        assert {roots.xi_bits(m) for m in roots.generators[k]} >= {"1100", "1011"}
        assert np.sum(np.abs(roots.alphas - GOLDEN) < 1e-9) == 1

    def test_tsv(self):
        text = find_critical_alphas(2).to_tsv().splitlines()
        assert text[0] == "\t".join(CRITICAL_HEADER)
        assert text[1].startswith("0.6180339887")
        assert text[1].split("\t")[1] == "11"

    def test_guard(self):
        with pytest.raises(TooLargeError):
            find_critical_alphas(21)


class TestSafety:
    def test_safe(self):
        r = is_alpha_safe(0.7, 2, 0.01)
        assert r.safe and abs(r.distance - (0.7 - GOLDEN)) < 1e-12

    def test_unsafe(self):
        r = is_alpha_safe(0.618, 2, 0.001)
        assert not r.safe and r.distance < 3.5e-5

    @pytest.mark.parametrize("T", [1, 5, 10])
    def test_unique_regime_is_safe(self, T):
        assert is_alpha_safe(0.3, T, 0.1).safe


class TestCorpusScan:
    def test_identical_sentences_do_not_collide(self):
        r = scan_corpus_collisions([(0, 1, 2), (0, 1, 2)], 3, 0.7, 0.01)
        assert (r.cases_tested, r.collisions) == (3, 0)

    def test_binary_strings_match_enumeration(self):
        sentences = list(itertools.product(range(2), repeat=3))
        r = scan_corpus_collisions(sentences, 2, 0.5, 1e-6)
        assert r.collisions == 0
        assert r.cases_tested == 2 + 4 + 8

    def test_counts_distinct_colliding_prefixes(self):
        a = GOLDEN
        r = scan_corpus_collisions([(0, 0, 1), (1, 1, 0)], 2, a, 1e-9)
        assert r.collisions == 1
        assert r.example_pairs == (((0, 0, 1), (1, 1, 0)),)

    def test_matches_brute_force_on_random_corpus(self):
        rng = np.random.default_rng(11)
        sentences = [tuple(rng.integers(0, 4, rng.integers(1, 10)).tolist()) for _ in range(150)]
        prefixes = sorted({s[:t] for s in sentences for t in range(1, len(s) + 1)})
        codes = np.array([encode(TokenSequence(p, 4), 0.8).entries for p in prefixes])
        for eps in (1e-3, 0.05, 0.4):
            r = scan_corpus_collisions(sentences, 4, 0.8, eps)
            assert r.cases_tested == len(prefixes)
            assert r.collisions == brute_force_count(codes, eps)

    def test_rejects_bad_ids(self):
        with pytest.raises(ValueError):
            scan_corpus_collisions([(0, 5)], 3, 0.7, 0.01)
