import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from h1bkv import sketch as sk


def naive_score(bits_a, bits_c):
    """Plain +-1 dot product over Python lists, divided by b."""
    a = [1 if x else -1 for x in bits_a]
    c = [1 if x else -1 for x in bits_c]
    return sum(x * y for x, y in zip(a, c)) / len(a)


def bits_of(text):
    return [ch == "1" for ch in text]


class TestBuildMatrix:
    def test_deterministic(self):
        assert sk.build_matrix(7, 4, 3) == sk.build_matrix(7, 4, 3)

    def test_seeds_differ(self):
        a, b = sk.build_matrix(7, 4, 3), sk.build_matrix(8, 4, 3)
        assert np.any(a.entries != b.entries)

    def test_shape_and_finite(self):
        m = sk.build_matrix(1, 5, 9)
        assert (m.rows, m.cols) == (5, 9)
        assert np.all(np.isfinite(m.entries))

    def test_large_sample_moments(self):
        m = sk.build_matrix(7, 65536, 1)
        assert abs(m.entries.mean()) <= 0.02
        assert abs(m.entries.var() - 1.0) <= 0.05

    @pytest.mark.parametrize("b,d", [(0, 3), (3, 0), (-1, 2)])
    def test_rejects_empty_shape(self, b, d):
        with pytest.raises(ValueError):
            sk.build_matrix(0, b, d)

    def test_entries_read_only(self):
        m = sk.build_matrix(0, 2, 2)
        with pytest.raises(ValueError):
            m.entries[0, 0] = 1.0

    def test_head_matrices_distinct(self):
        a = sk.head_matrix(5, 0, 0, 16, 4)
        b = sk.head_matrix(5, 0, 1, 16, 4)
        assert a.seed == sk.head_seed(5, 0, 0)
        assert np.any(a.entries != b.entries)


class TestPacking:
    @pytest.mark.parametrize("b", [1, 8, 63, 64, 65, 128, 300])
    def test_word_count_and_padding(self, b, np_rng):
        bits = np_rng.random(b) < 0.5
        s = sk.pack_bits(np.ones(b, dtype=bool))
        assert s.words.shape == (math.ceil(b / 64),)
        # every padding bit zero even when all valid bits are set
        assert int(np.bitwise_count(s.words).sum()) == b
        np.testing.assert_array_equal(sk.pack_bits(bits).unpack(), bits)

    def test_lsb_first_layout(self):
        bits = np.zeros(70, dtype=bool)
        bits[0] = bits[3] = bits[64] = True
        s = sk.pack_bits(bits)
        assert int(s.words[0]) == 0b1001
        assert int(s.words[1]) == 1

    def test_rejects_dirty_padding(self):
        with pytest.raises(ValueError):
            sk.PackedSketch(np.array([1 << 10], dtype=np.uint64), 8)

    @given(st.lists(st.booleans(), min_size=1, max_size=200))
    def test_unpack_repack_identity(self, bits):
        s = sk.pack_bits(bits)
        assert sk.pack_bits(s.unpack()) == s

    @given(st.lists(st.booleans(), min_size=1, max_size=200))
    def test_serialization_roundtrip(self, bits):
        s = sk.pack_bits(bits)
        raw = s.to_bytes()
        assert len(raw) == 4 + 8 * math.ceil(len(bits) / 64)
        back, end = sk.PackedSketch.from_bytes(raw)
        assert back == s and end == len(raw)

    def test_serialized_layout_little_endian(self):
        bits = np.zeros(64, dtype=bool)
        bits[0] = bits[9] = True
        raw = sk.pack_bits(bits).to_bytes()
        assert raw[:4] == (64).to_bytes(4, "little")
        assert raw[4:] == ((1 << 9) | 1).to_bytes(8, "little")


class TestSketch:
    def test_zero_vector_is_all_ones(self):
        m = sk.build_matrix(3, 100, 6)
        s = sk.sketch(m, np.zeros(6))
        assert s.unpack().all()

    def test_positive_scaling_invariant(self, np_rng):
        m = sk.build_matrix(3, 128, 16)
        v = np_rng.standard_normal(16)
        assert sk.sketch(m, v) == sk.sketch(m, 3.5 * v)

    def test_negation_complements(self, np_rng):
        m = sk.build_matrix(3, 100, 16)
        v = np_rng.standard_normal(16)
        assert np.all(m.entries @ v != 0)
        assert sk.sketch(m, -v) == sk.sketch(m, v).complement()

    def test_bits_match_projection_signs(self, np_rng):
        m = sk.build_matrix(11, 77, 5)
        v = np_rng.standard_normal(5)
        expected = [float(row @ v) >= 0 for row in m.entries]
        assert sk.sketch(m, v).unpack().tolist() == expected

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            sk.sketch(sk.build_matrix(0, 8, 4), np.ones(5))

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            sk.sketch(sk.build_matrix(0, 8, 2), np.array([1.0, np.nan]))

    def test_rows_match_single(self, np_rng):
        m = sk.build_matrix(2, 130, 8)
        vs = np_rng.standard_normal((6, 8))
        words = sk.sketch_rows(m, vs)
        for v, w in zip(vs, words):
            np.testing.assert_array_equal(sk.sketch(m, v).words, w)


class TestHammingScore:
    def test_identical_is_one(self):
        s = sk.pack_bits(bits_of("10110"))
        assert sk.hamming_score(s, s) == 1.0

    def test_complement_is_minus_one(self):
        s = sk.pack_bits(bits_of("1011000111"))
        assert sk.hamming_score(s, s.complement()) == -1.0

    def test_hand_example(self):
        a, c = bits_of("11110000"), bits_of("11000011")
        assert naive_score(a, c) == 0.0
        assert sk.hamming_score(sk.pack_bits(a), sk.pack_bits(c)) == 0.0

    def test_width_mismatch(self):
        with pytest.raises(ValueError):
            sk.hamming_score(sk.pack_bits([True] * 8), sk.pack_bits([True] * 9))

    @pytest.mark.parametrize("b", [8, 64, 256, 300])
    def test_matches_naive_oracle(self, b, np_rng):
        for _ in range(200):
            a = np_rng.random(b) < 0.5
            c = np_rng.random(b) < 0.5
            assert sk.hamming_score(sk.pack_bits(a), sk.pack_bits(c)) == naive_score(a, c)

    @pytest.mark.parametrize("b", [5, 100, 300])
    def test_padding_contents_ignored(self, b, np_rng):
        a = sk.pack_bits(np_rng.random(b) < 0.5)
        c = sk.pack_bits(np_rng.random(b) < 0.5)
        dirty_a = a.words.copy()
        dirty_c = c.words.copy()
        garbage = ~sk.pad_mask(b)
        dirty_a |= garbage
        dirty_c |= garbage & np.uint64(0x5555555555555555)
        expected = sk.hamming_score(a, c)
        got = sk.hamming_scores(dirty_a[None, :], dirty_c, b)[0]
        assert got == expected

    def test_vectorized_matches_pairwise(self, np_rng):
        b = 300
        keys = [sk.pack_bits(np_rng.random(b) < 0.5) for _ in range(20)]
        q = sk.pack_bits(np_rng.random(b) < 0.5)
        mat = np.stack([k.words for k in keys])
        expected = [sk.hamming_score(k, q) for k in keys]
        assert sk.hamming_scores(mat, q.words, b).tolist() == expected

    @settings(max_examples=50)
    @given(st.integers(1, 400), st.integers(0, 2**32))
    def test_score_in_range_and_symmetric(self, b, seed):
        g = np.random.default_rng(seed)
        a = sk.pack_bits(g.random(b) < 0.5)
        c = sk.pack_bits(g.random(b) < 0.5)
        s = sk.hamming_score(a, c)
        assert -1.0 <= s <= 1.0
        assert s == sk.hamming_score(c, a)


class TestSimilarityCurve:
    def test_theoretical_values(self):
        assert sk.expected_score(0.0) == pytest.approx(0.0, abs=1e-15)
        assert sk.expected_score(0.5) == pytest.approx(1.0 / 3.0, abs=1e-12)
        assert sk.expected_score(-0.5) == pytest.approx(-1.0 / 3.0, abs=1e-12)

    def test_small_run_close(self):
        points = sk.estimate_similarity_curve(64, [-0.5, 0.0, 0.5], trials=2000, seed=1)
        for p in points:
            # 5 standard errors at b=64, trials=2000
            assert p.abs_error < 5 * math.sqrt(1.0 / (64 * 2000))

    def test_deterministic(self):
        a = sk.estimate_similarity_curve(32, [0.3], trials=50, seed=4)
        b = sk.estimate_similarity_curve(32, [0.3], trials=50, seed=4)
        assert a == b

    @pytest.mark.parametrize("rho", [1.0, -1.0, 1.5])
    def test_rejects_degenerate_cosine(self, rho):
        with pytest.raises(ValueError):
            sk.estimate_similarity_curve(16, [rho], trials=1)

    def test_rejects_bad_trials(self):
        with pytest.raises(ValueError):
            sk.estimate_similarity_curve(16, [0.0], trials=0)

    def test_constructed_pair_has_target_cosine(self):
        q, k = sk._pair_with_cosine(3, 10, 0.37)
        assert np.linalg.norm(q) == pytest.approx(1.0)
        assert np.linalg.norm(k) == pytest.approx(1.0)
        assert q @ k == pytest.approx(0.37)
