import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fofe import (
    FofeCode,
    ForgettingFactor,
    TokenSequence,
    build_forgetting_matrix,
    decode,
    decode_many,
    encode,
    encode_batch,
    encode_embedded,
    encode_prefixes,
    encode_via_matrix,
)
from fofe.core import forgetting_scan
from fofe.errors import AmbiguousCodeError, MalformedCodeError, SequenceTooLongError

from oracles import closed_form_code, exact_code, recursive_prefix_codes

A, B, C = 0, 1, 2


def seq(ids, K):
    return TokenSequence(tuple(ids), K)


@st.composite
def sequences(draw, max_len=100, max_k=50, min_len=0):
    K = draw(st.integers(1, max_k))
    ids = draw(st.lists(st.integers(0, K - 1), min_size=min_len, max_size=max_len))
    return seq(ids, K)


alphas = st.floats(0.01, 0.99)


class TestForgettingFactor:
    @pytest.mark.parametrize("bad", [0.0, 1.0, -0.3, 1.5, float("nan"), float("inf")])
    def test_rejects_outside_open_interval(self, bad):
        with pytest.raises(ValueError, match=r"\(0, 1\)"):
            ForgettingFactor(bad)

    @pytest.mark.parametrize("value,regime", [(0.25, "unique"), (0.5, "unique"), (0.5000001, "almost-unique"), (0.9, "almost-unique")])
    def test_regime(self, value, regime):
        assert ForgettingFactor(value).regime == regime


class TestTokenSequence:
    def test_rejects_out_of_range_id(self):
        with pytest.raises(ValueError):
            seq([0, 3], 3)

    def test_empty_allowed(self):
        assert len(seq([], 4)) == 0


class TestEncodePrefixes:
    @pytest.mark.parametrize("a", [Fraction(1, 2), Fraction(7, 10), Fraction(1, 3)])
    def test_abc_example(self, a):
        code = encode(seq([A, B, C], 3), float(a))
        expected = [float(x) for x in exact_code([A, B, C], 3, a)]
        assert expected == [float(a ** 2), float(a), 1.0]
        np.testing.assert_allclose(code.entries, expected, rtol=0, atol=1e-15)

    @pytest.mark.parametrize("a", [0.5, 0.7])
    def test_abcbc_example(self, a):
        code = encode(seq([A, B, C, B, C], 3), a)
        np.testing.assert_allclose(code.entries, [a ** 4, a + a ** 3, 1 + a ** 2], rtol=0, atol=1e-15)

    def test_empty_sequence_is_zero(self):
        pc = encode_prefixes(seq([], 4), 0.5)
        assert pc.rows.shape == (0, 4)
        np.testing.assert_array_equal(pc.final.entries, np.zeros(4))

    def test_tiny_alpha_keeps_only_last_token(self):
        code = encode(seq([A, B, C], 3), 1e-9)
        assert np.max(np.abs(code.entries - [0, 0, 1])) <= 1e-8

    def test_first_row_is_one_hot(self):
        pc = encode_prefixes(seq([2, 0, 1], 4), 0.6)
        np.testing.assert_array_equal(pc.rows[0], [0, 0, 1, 0])

    @settings(max_examples=200, deadline=None)
    @given(sequences(), alphas)
    def test_matches_closed_form(self, s, a):
        code = encode(s, a)
        np.testing.assert_allclose(code.entries, closed_form_code(s.ids, s.vocab_size, a), rtol=0, atol=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(sequences(min_len=1, max_len=40, max_k=10), alphas)
    def test_prefix_recursion(self, s, a):
        rows = encode_prefixes(s, a).rows
        np.testing.assert_allclose(rows, recursive_prefix_codes(s.ids, s.vocab_size, a), rtol=0, atol=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(sequences(), alphas)
    def test_entries_bounded(self, s, a):
        z = encode(s, a).entries
        assert np.all(z >= 0)
        assert np.all(z < 1 / (1 - a))

    def test_sparse_path_matches_dense(self):
        rng = np.random.default_rng(3)
        ids = rng.integers(0, 6000, 40)
        big = encode_prefixes(seq(ids, 6000), 0.7)
        assert big.is_sparse
        np.testing.assert_allclose(big.rows, recursive_prefix_codes(ids, 6000, 0.7), rtol=0, atol=1e-12)


class TestForgettingMatrix:
    def test_order_one(self):
        np.testing.assert_array_equal(build_forgetting_matrix(1, 0.3).entries, [[1.0]])

    def test_order_three(self):
        np.testing.assert_array_equal(build_forgetting_matrix(3, 0.5).entries,
                                      [[1, 0, 0], [0.5, 1, 0], [0.25, 0.5, 1]])

    def test_order_two(self):
        np.testing.assert_array_equal(build_forgetting_matrix(2, 0.7).entries, [[1, 0], [0.7, 1]])

    def test_zero_order_rejected(self):
        with pytest.raises(ValueError):
            build_forgetting_matrix(0, 0.5)

    @given(st.integers(1, 30), alphas)
    def test_structure(self, T, a):
        M = build_forgetting_matrix(T, a).entries
        assert np.all(np.diag(M) == 1)
        assert np.all(np.triu(M, 1) == 0)
        for i in range(1, T):
            np.testing.assert_allclose(M[i, :i], a * M[i - 1, :i], rtol=1e-12)


class TestMatrixAndBatch:
    def test_abc(self):
        rows = encode_via_matrix(seq([A, B, C], 3), 0.5).rows
        np.testing.assert_array_equal(rows, [[1, 0, 0], [0.5, 1, 0], [0.25, 0.5, 1]])

    def test_repeated_token(self):
        np.testing.assert_array_equal(encode_via_matrix(seq([A, A], 3), 0.5).rows, [[1, 0, 0], [1.5, 0, 0]])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            encode_via_matrix(seq([], 3), 0.5)

    @settings(max_examples=100, deadline=None)
    @given(sequences(min_len=1, max_len=200, max_k=20), alphas)
    def test_matches_recursion(self, s, a):
        np.testing.assert_allclose(encode_via_matrix(s, a).rows, encode_prefixes(s, a).rows, rtol=0, atol=1e-12)

    def test_batch_example(self):
        out = encode_batch([seq([A, B], 3), seq([C], 3)], 0.5)
        np.testing.assert_array_equal(out[0].rows, [[1, 0, 0], [0.5, 1, 0]])
        np.testing.assert_array_equal(out[1].rows, [[0, 0, 1]])

    def test_batch_edge_cases(self):
        assert encode_batch([], 0.5) == []
        with pytest.raises(ValueError):
            encode_batch([seq([A], 3), seq([], 3)], 0.5)
        with pytest.raises(ValueError):
            encode_batch([seq([A], 3), seq([A], 4)], 0.5)

    def test_batch_blocks_are_independent(self):
        s = seq([1, 0, 2, 2], 3)
        single = encode_via_matrix(s, 0.6).rows
        for pc in encode_batch([s] * 4, 0.6):
            np.testing.assert_array_equal(pc.rows, single)


class TestEmbedded:
    def test_identity_embedding(self):
        s = seq([2, 0, 1, 1], 3)
        np.testing.assert_allclose(encode_embedded(s, 0.4, np.eye(3)), encode_prefixes(s, 0.4).rows, rtol=0, atol=1e-15)

    def test_small_example(self):
        np.testing.assert_allclose(encode_embedded(seq([A, B], 2), 0.5, np.array([[2.0], [3.0]])), [[2.0], [4.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            encode_embedded(seq([0], 3), 0.5, np.ones((4, 2)))

    @settings(max_examples=100, deadline=None)
    @given(sequences(min_len=1, max_len=60, max_k=20), alphas, st.integers(1, 8), st.integers(0, 2 ** 31))
    def test_linearity(self, s, a, D, seed):
        U = np.random.default_rng(seed).normal(size=(s.vocab_size, D))
        np.testing.assert_allclose(encode_embedded(s, a, U), encode_prefixes(s, a).rows @ U, rtol=0, atol=1e-10)

    def test_reverse_scan_is_transpose(self):
        rng = np.random.default_rng(0)
        T, a = 7, 0.65
        M = build_forgetting_matrix(T, a).entries
        g = rng.normal(size=(T, 3))
        np.testing.assert_allclose(forgetting_scan(g, a, reverse=True), M.T @ g, atol=1e-13)


class TestDecode:
    def test_abc(self):
        assert decode(FofeCode(np.array([0.25, 0.5, 1.0]), 0.5)).ids == (A, B, C)

    def test_zero_code_is_empty(self):
        assert decode(FofeCode(np.zeros(5), 0.3)).ids == ()

    def test_malformed(self):
        with pytest.raises(MalformedCodeError):
            decode(FofeCode(np.array([0.3, 0.0, 1.0]), 0.5))

    def test_too_long(self):
        code = encode(seq([0] * 30, 2), 0.5)
        with pytest.raises(SequenceTooLongError):
            decode(code, max_len=10)

    def test_ambiguous_at_golden_ratio(self):
        # at alpha^2 + alpha = 1, [A, A, B] and [B, B, A] both encode to (1, 1)
        a = (5 ** 0.5 - 1) / 2
        left, right = encode(seq([A, A, B], 2), a), encode(seq([B, B, A], 2), a)
        assert np.max(np.abs(left.entries - right.entries)) < 1e-12
        with pytest.raises(AmbiguousCodeError):
            decode(left)

    def test_best_effort_above_half(self):
        s = seq([3, 1, 4, 1, 5, 2, 6], 7)
        assert decode(encode(s, 0.7)).ids == s.ids

    def test_exhaustive_roundtrip_k4_len10(self):
        K = 4
        for T in range(0, 11):
            ids = np.array(list(itertools.product(range(K), repeat=T)), dtype=np.int64).reshape(K ** T, T)
            powers = 0.5 ** np.arange(T - 1, -1, -1)
            codes = np.zeros((ids.shape[0], K))
            for t in range(T):
                np.add.at(codes, (np.arange(ids.shape[0]), ids[:, t]), powers[t])
            got = decode_many(codes, 0.5, max_len=10)
            assert got == [tuple(r) for r in ids.tolist()]

    @settings(max_examples=300, deadline=None)
    @given(st.integers(1, 5), st.sampled_from([0.25, 0.5]), st.data())
    def test_roundtrip_small_k(self, K, a, data):
        ids = data.draw(st.lists(st.integers(0, K - 1), max_size=10))
        assert decode(encode(seq(ids, K), a)).ids == tuple(ids)
