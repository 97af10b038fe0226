import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mkd.channel import SystemConfig
from mkd.codebook import (Codebook, FeedbackIndex, average_distortion, bits_to_index, get_measure, index_to_bits,
                          load_codebook, lloyd_train, quantize, quantize_indices, save_codebook,
                          train_user_codebook)
from mkd.errors import ConfigError, FormatError
from mkd.linalg import chordal_distance

from conftest import crandn, random_semi_unitary


def random_codebook(rng, M, N, B):
    return Codebook(M, N, B, random_semi_unitary(rng, M, N, batch=(2 ** B,)))


def projector(a):
    return a @ a.conj().T


class TestBits:
    def test_examples(self):
        assert index_to_bits(1, 3).tolist() == [-1, -1, -1]
        assert index_to_bits(6, 3).tolist() == [1, -1, 1]   # 5 = 101b
        assert index_to_bits(8, 3).tolist() == [1, 1, 1]

    def test_round_trip_all(self):
        for B in range(1, 9):
            idx = np.arange(1, 2 ** B + 1)
            np.testing.assert_array_equal(bits_to_index(index_to_bits(idx, B)), idx)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            index_to_bits(0, 3)
        with pytest.raises(ValueError):
            index_to_bits(9, 3)

    def test_feedback_index(self):
        fb = FeedbackIndex.from_index(3, 2)
        assert fb.bits == (1, -1)
        assert int(bits_to_index(fb.bits)) == 3


class TestCodebookType:
    def test_wrong_count(self, rng):
        with pytest.raises(ConfigError):
            Codebook(4, 1, 2, random_semi_unitary(rng, 4, 1, batch=(3,)))

    def test_not_semi_unitary(self, rng):
        cw = random_semi_unitary(rng, 4, 1, batch=(2,))
        cw[1] *= 2
        with pytest.raises(ConfigError):
            Codebook(4, 1, 1, cw)

    def test_duplicates(self, rng):
        a = random_semi_unitary(rng, 4, 2)
        with pytest.raises(ConfigError):
            Codebook(4, 2, 1, np.stack([a, a @ np.diag([1j, -1])]))


class TestQuantize:
    def test_exact_codeword(self, rng):
        cb = random_codebook(rng, 8, 2, 3)
        assert quantize(cb.codewords[2], cb).index == 3

    def test_single_word(self, rng):
        cb = Codebook(4, 1, 0, random_semi_unitary(rng, 4, 1, batch=(1,)))
        for _ in range(5):
            fb = quantize(random_semi_unitary(rng, 4, 1), cb)
            assert fb.index == 1 and fb.bits == ()

    def test_brute_force_oracle(self, rng):
        cb = random_codebook(rng, 4, 2, 4)
        for _ in range(200):
            h = random_semi_unitary(rng, 4, 2)
            dist = [chordal_distance(a, h) for a in cb.codewords]
            assert quantize(h, cb).index == int(np.argmin(dist)) + 1

    def test_tie_lowest_index(self):
        e = np.eye(3, dtype=complex)
        cw = np.stack([e[:, [0]], e[:, [1]]])
        cb = Codebook(3, 1, 1, cw)
        h = ((e[:, 0] + e[:, 1]) / np.sqrt(2))[:, None]
        assert quantize(h, cb).index == 1

    def test_batched_matches_single(self, rng):
        cb = random_codebook(rng, 8, 2, 5)
        hs = random_semi_unitary(rng, 8, 2, batch=(7, 3))
        idx = quantize_indices(hs, cb)
        assert idx.shape == (7, 3)
        assert idx[4, 1] + 1 == quantize(hs[4, 1], cb).index

    def test_unknown_measure(self, rng):
        cb = random_codebook(rng, 4, 1, 1)
        with pytest.raises(ConfigError):
            quantize(cb.codewords[0], cb, measure=99)

    def test_chordal_registered(self):
        assert get_measure(0)[0] == "chordal"


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0, 2 * np.pi))
def test_global_phase_invariance(seed, phase):
    g = np.random.default_rng(seed)
    cb = random_codebook(g, 6, 2, 3)
    h = random_semi_unitary(g, 6, 2)
    assert quantize(h, cb).index == quantize(np.exp(1j * phase) * h, cb).index


class TestLloyd:
    def test_perfectly_clusterable(self, rng):
        B = 4
        base = random_semi_unitary(rng, 8, 2, batch=(2 ** B,))
        train = np.repeat(base, 2 ** B, axis=0)
        cb = lloyd_train(train, B, rng=np.random.default_rng(1))
        assert cb.distortion_history[-1] == pytest.approx(0.0, abs=1e-12)
        for a in base:
            d = min(chordal_distance(c, a) for c in cb.codewords)
            assert d <= 1e-6

    def test_one_iteration_eigen_centroids(self):
        gen = np.random.default_rng(3)
        # two clusters around e1 and e2 in C^2
        near1 = np.stack([[1.0, 0.2 * gen.standard_normal()] for _ in range(12)]).astype(complex)
        near2 = np.stack([[0.2 * gen.standard_normal(), 1.0] for _ in range(12)]).astype(complex)
        pts = np.concatenate([near1, near2])
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
        train = pts[:, :, None]
        init = np.array([[[1.0], [0.0]], [[0.0], [1.0]]], complex)
        cb = lloyd_train(train, 1, iters=1, tol=0.0, init=init)
        # hand oracle: top eigenvector of each cluster's outer-product sum
        for cluster, cw in zip((pts[:12], pts[12:]), cb.codewords):
            s = sum(np.outer(p, p.conj()) for p in cluster)
            w, v = np.linalg.eigh(s)
            top = v[:, [-1]]
            np.testing.assert_allclose(projector(cw), projector(top), atol=1e-12)

    def test_monotone_twenty_iterations(self):
        gen = np.random.default_rng(9)
        train = random_semi_unitary(gen, 4, 1, batch=(10000,))
        cb = lloyd_train(train, 4, iters=20, tol=0.0, rng=gen)
        h = np.array(cb.distortion_history)
        assert len(h) == 21
        assert np.all(np.diff(h) <= 1e-12)
        assert h[-1] <= h[0]

    def test_beats_random_codebook(self, rng):
        train = random_semi_unitary(rng, 4, 2, batch=(800,))
        cb = lloyd_train(train, 3, iters=15, rng=rng)
        rand = random_semi_unitary(rng, 4, 2, batch=(8,))
        assert average_distortion(train, cb.codewords) <= average_distortion(train, rand)

    def test_history_matches_final_codebook(self, rng):
        train = random_semi_unitary(rng, 4, 1, batch=(400,))
        cb = lloyd_train(train, 2, iters=5, tol=0.0, rng=rng)
        assert cb.distortion_history[-1] == pytest.approx(average_distortion(train, cb.codewords), rel=1e-12)

    def test_empty_cell_reseeded(self):
        gen = np.random.default_rng(4)
        train = random_semi_unitary(gen, 4, 1, batch=(40,))
        # two identical far-away codewords force an empty cell on the first partition
        far = np.zeros((4, 1), complex)
        far[3] = 1
        init = np.stack([train[0], far, far * 1j, train[1]])
        cb = lloyd_train(train, 2, iters=3, tol=0.0, init=init)
        assert len(cb) == 4

    def test_small_training_set(self, rng):
        with pytest.raises(ConfigError):
            lloyd_train(random_semi_unitary(rng, 4, 1, batch=(15,)), 1)


class TestUserCodebooks:
    def test_users_differ_and_reproducible(self):
        cfg = SystemConfig(M=4, N=2, K=2, B=2, L=4)
        a = train_user_codebook(cfg, 0, seed=5, iters=5)
        b = train_user_codebook(cfg, 1, seed=5, iters=5)
        c = train_user_codebook(cfg, 0, seed=5, iters=5)
        assert not np.allclose(a.codewords, b.codewords)
        assert a.codewords.tobytes() == c.codewords.tobytes()


class TestCodebookFile:
    def test_round_trip(self, tmp_path, rng):
        cb = random_codebook(rng, 8, 2, 3)
        path = tmp_path / "cb.gcb"
        save_codebook(path, cb)
        back = load_codebook(path)
        assert back.codewords.tobytes() == cb.codewords.tobytes()
        assert (back.M, back.N, back.B, back.measure_id) == (8, 2, 3, 0)

    def test_header(self, tmp_path, rng):
        path = tmp_path / "cb.gcb"
        save_codebook(path, random_codebook(rng, 4, 1, 1))
        raw = path.read_bytes()
        assert raw[:4] == b"GCB1"
        assert struct.unpack("<IIII", raw[4:20]) == (4, 1, 1, 0)
        assert len(raw) == 20 + 2 * (12 + 4 * 16)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.gcb"
        path.write_bytes(b"GCB2" + bytes(16))
        with pytest.raises(FormatError):
            load_codebook(path)

    def test_trailing_bytes(self, tmp_path, rng):
        path = tmp_path / "cb.gcb"
        save_codebook(path, random_codebook(rng, 4, 1, 1))
        path.write_bytes(path.read_bytes() + b"x")
        with pytest.raises(FormatError):
            load_codebook(path)
