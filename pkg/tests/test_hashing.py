import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eta_ctr.hashing import (
    Fingerprint,
    HashParameterError,
    HashPlanes,
    fingerprint_batch,
    hamming,
    hamming_matrix,
    new_planes,
    pack_bits,
    signature_bits,
    simhash,
    unpack_bits,
)
from eta_ctr.numeric import ShapeError


def fp(bits) -> Fingerprint:
    bits = np.asarray(bits, dtype=np.uint8)
    return Fingerprint(words=pack_bits(bits[None, :])[0], m=len(bits))


def axis_planes() -> HashPlanes:
    return HashPlanes(d=2, m=2, seed=-1, planes=np.eye(2))


def unit_pairs(rng, n, d, theta):
    """n pairs of unit vectors in R^d at exactly angle theta."""
    u = rng.normal(size=(n, d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    w = rng.normal(size=(n, d))
    w -= (w * u).sum(axis=1, keepdims=True) * u
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    return u, np.cos(theta) * u + np.sin(theta) * w


class TestPlanes:
    def test_deterministic(self):
        a, b = new_planes(16, 64, 7), new_planes(16, 64, 7)
        assert a.planes.tobytes() == b.planes.tobytes()
        assert not np.array_equal(a.planes, new_planes(16, 64, 8).planes)

    def test_small_m_valid(self):
        p = new_planes(128, 4, 0)
        assert p.planes.shape == (128, 4)
        assert p.words == 1

    def test_centered(self):
        assert abs(new_planes(128, 512, 0).planes.mean()) < 0.05

    @pytest.mark.parametrize("d,m", [(0, 4), (4, 0)])
    def test_zero_dims_rejected(self, d, m):
        with pytest.raises(HashParameterError):
            new_planes(d, m, 0)

    def test_immutable(self):
        p = new_planes(4, 8, 0)
        with pytest.raises(ValueError):
            p.planes[0, 0] = 1.0

    def test_unknown_rule(self):
        with pytest.raises(HashParameterError):
            new_planes(4, 8, 0, rule="bogus")


class TestSimhash:
    def test_axis_aligned(self):
        # the second projection is exactly zero and maps to 0
        assert simhash(np.array([1.0, 0.0]), axis_planes()).bits().tolist() == [1, 0]

    def test_negation_complements(self):
        p = new_planes(16, 100, 3)
        e = np.random.default_rng(0).normal(size=16)
        a, b = simhash(e, p).bits(), simhash(-e, p).bits()
        assert np.all(a ^ b == 1)

    def test_collision_law_pi_over_3(self):
        rng = np.random.default_rng(11)
        p = new_planes(32, 256, 5)
        u, v = unit_pairs(rng, 10_000, 32, np.pi / 3)
        rate = (signature_bits(u, p) != signature_bits(v, p)).mean()
        assert abs(rate - 1 / 3) <= 0.02

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            simhash(np.ones(3), new_planes(4, 8, 0))

    def test_padding_bits_zero(self):
        p = new_planes(8, 70, 1)
        words = fingerprint_batch(np.random.default_rng(1).normal(size=(20, 8)), p)
        assert words.shape == (20, 2)
        assert np.all(words[:, 1] >> np.uint64(6) == 0)

    def test_sum_of_signs_rule(self):
        planes = np.array([[1.0, -2.0, 0.5], [3.0, 1.0, -1.0], [-0.5, 4.0, 2.0]])
        p = HashPlanes(d=3, m=3, seed=-1, planes=planes, rule="sum-of-signs")
        e = np.array([2.0, -0.1, 1.0])
        # per-column votes of sgn(e_j * H_ji): [1 - 1 - 1, -1 - 1 + 1, 1 + 1 + 1]
        assert simhash(e, p).bits().tolist() == [0, 0, 1]
        # the projection rule disagrees on column 0 (2 - 0.3 - 0.5 > 0)
        assert simhash(e, HashPlanes(d=3, m=3, seed=-1, planes=planes)).bits().tolist() == [1, 0, 1]


class TestHamming:
    def test_identity(self):
        x = fp([1, 0, 1, 1, 0])
        assert hamming(x, x) == 0

    def test_two_positions(self):
        assert hamming(fp([1, 0, 1, 0]), fp([0, 1, 1, 0])) == 2

    def test_complement(self):
        assert hamming(fp([1, 1, 1, 1]), fp([0, 0, 0, 0])) == 4

    def test_unequal_lengths(self):
        with pytest.raises(HashParameterError):
            hamming(fp([1, 0, 1]), fp([1, 0, 1, 0]))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 200), st.integers(0, 2**32 - 1))
    def test_metric_axioms(self, m, seed):
        rng = np.random.default_rng(seed)
        a, b, c = (fp(rng.integers(0, 2, m)) for _ in range(3))
        assert hamming(a, b) == hamming(b, a)
        assert hamming(a, c) <= hamming(a, b) + hamming(b, c)
        assert (hamming(a, b) == 0) == (a == b)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 300), st.integers(0, 2**32 - 1))
    def test_matches_bit_count(self, m, seed):
        rng = np.random.default_rng(seed)
        bits = rng.integers(0, 2, (5, m)).astype(np.uint8)
        other = rng.integers(0, 2, (3, m)).astype(np.uint8)
        got = hamming_matrix(pack_bits(bits), pack_bits(other))
        want = (bits[:, None, :] != other[None, :, :]).sum(axis=2)
        assert np.array_equal(got, want)


class TestBatch:
    def test_singleton(self):
        p = new_planes(6, 40, 2)
        e = np.random.default_rng(0).normal(size=6)
        assert np.array_equal(fingerprint_batch(e[None, :], p)[0], simhash(e, p).words)

    def test_rows_match_simhash(self):
        p = new_planes(8, 64, 2)
        E = np.random.default_rng(1).normal(size=(16, 8))
        batch = fingerprint_batch(E, p)
        for i in range(16):
            assert np.array_equal(batch[i], simhash(E[i], p).words)

    def test_duplicates(self):
        p = new_planes(8, 64, 2)
        e = np.random.default_rng(1).normal(size=8)
        out = fingerprint_batch(np.stack([e, e, e]), p)
        assert (out == out[0]).all()

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            fingerprint_batch(np.ones((3, 5)), new_planes(4, 8, 0))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 200), st.integers(0, 2**32 - 1))
    def test_pack_roundtrip(self, m, seed):
        bits = np.random.default_rng(seed).integers(0, 2, (4, m)).astype(np.uint8)
        assert np.array_equal(unpack_bits(pack_bits(bits), m), bits)

    def test_refresh_after_update(self):
        # moving an embedding across a hyperplane changes its fresh fingerprint
        p = axis_planes()
        e = np.array([1.0, 1.0])
        before = fingerprint_batch(e[None], p)[0].copy()
        e[1] = -1.0
        assert not np.array_equal(fingerprint_batch(e[None], p)[0], before)
