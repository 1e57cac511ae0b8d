import math

import jax
import numpy as np
import pytest

from oracles import softmax_cross_entropy_direct
from trajdiff.embedding import (
    cross_entropy,
    decode,
    embed,
    init_embedding,
    logits,
    normalize_rows,
    read_trajectories_jsonl,
    sample_z0,
    write_trajectories_jsonl,
)
from trajdiff.errors import DataError


class TestEmbed:
    def test_table_lookup(self):
        E = np.array([[1.0, 0.0], [0.0, 1.0]])
        out = np.asarray(embed([0, 1, 0], E))
        assert np.array_equal(out, np.array([[1, 0], [0, 1], [1, 0]], dtype=float))

    def test_rows_unit_norm(self, rng):
        E = init_embedding(rng, 7, 5)
        out = np.asarray(embed(rng.integers(0, 7, size=12), E))
        assert np.allclose(np.linalg.norm(out, axis=1), 1.0)

    def test_rejects_out_of_range_token(self):
        E = np.eye(3)
        with pytest.raises(DataError):
            embed([0, 3], E)

    def test_embed_decode_roundtrip(self, rng):
        for _ in range(5):
            E = init_embedding(rng, 6, 4)
            y = rng.integers(0, 6, size=10)
            z = sample_z0(y, E, 0.0, rng)
            assert np.array_equal(decode(z, E), y)
            # brute-force check that each row's argmax really is y_n
            for n, token in enumerate(y):
                scores = [float(z[n] @ E[d]) for d in range(6)]
                assert int(np.argmax(scores)) == token


class TestSampleZ0:
    def test_zero_variance(self, rng):
        E = init_embedding(rng, 4, 3)
        y = np.array([0, 2, 1])
        assert np.array_equal(sample_z0(y, E, 0.0, rng), np.asarray(embed(y, E)))

    def test_monte_carlo_variance(self):
        rng = np.random.default_rng(5)
        E = init_embedding(rng, 4, 2)
        y = np.array([1])
        sigma_sq = 0.07
        n = 100_000
        draws = np.stack([sample_z0(y, E, sigma_sq, rng) for _ in range(n // 100)])
        # 1000 draws of 2 coords: widen with per-coordinate pooling
        flat = (draws - np.asarray(embed(y, E))).reshape(-1)
        est = flat.var()
        se = sigma_sq * math.sqrt(2 / (flat.size - 1))
        assert abs(est - sigma_sq) < 3 * se

    def test_rejects_negative_variance(self, rng):
        with pytest.raises(ValueError):
            sample_z0(np.array([0]), np.eye(2), -1.0, rng)


class TestLogits:
    def test_orthonormal_one_hot(self):
        E = np.eye(4)
        z = E[[2, 0]]
        out = np.asarray(logits(z, E))
        assert out[0].argmax() == 2 and out[0].max() == pytest.approx(1.0)
        assert out[1].argmax() == 0

    def test_zero_latent_uniform(self):
        out = np.asarray(logits(np.zeros((3, 4)), np.random.default_rng(0).standard_normal((5, 4))))
        assert np.all(out == 0.0)

    def test_matches_dot_product_oracle(self, rng):
        z = rng.standard_normal((3, 4))
        E = rng.standard_normal((5, 4))
        out = np.asarray(logits(z, E))
        for n in range(3):
            for d in range(5):
                assert out[n, d] == pytest.approx(sum(z[n, k] * E[d, k] for k in range(4)), rel=1e-12)

    def test_rowwise_equals_whole_matrix(self, rng):
        z = rng.standard_normal((6, 4))
        E = rng.standard_normal((9, 4))
        whole = np.asarray(logits(z, E))
        rows = np.stack([np.asarray(logits(z[n : n + 1], E))[0] for n in range(6)])
        assert np.max(np.abs(whole - rows)) < 1e-12


class TestDecode:
    def test_exact_embedding_decodes_back(self, rng):
        E = init_embedding(rng, 5, 3)
        y = np.array([4, 1, 1, 0])
        assert np.array_equal(decode(np.asarray(embed(y, E)), E), y)

    def test_tie_break_smallest_index(self):
        E = init_embedding(np.random.default_rng(0), 4, 3)
        assert np.array_equal(decode(np.zeros((3, 3)), E), np.zeros(3, dtype=np.int64))

    def test_small_perturbations_leave_decode_unchanged(self, rng):
        E = init_embedding(rng, 6, 4)
        y = rng.integers(0, 6, size=8)
        z = np.asarray(embed(y, E))
        # margin: for row n, gap between top score (=1) and runner-up; a
        # perturbation of norm < gap/2 cannot flip the argmax (scores are
        # 1-Lipschitz in z against unit-norm rows).
        scores = np.asarray(logits(z, E))
        sorted_scores = np.sort(scores, axis=1)
        margins = sorted_scores[:, -1] - sorted_scores[:, -2]
        delta = rng.standard_normal(z.shape)
        delta /= np.linalg.norm(delta, axis=1, keepdims=True)
        delta *= 0.49 * margins[:, None]
        assert np.array_equal(decode(z + delta, E), y)


class TestCrossEntropy:
    def test_uniform_logits(self):
        N, D = 5, 7
        out = float(cross_entropy(np.zeros(N, dtype=int), np.zeros((N, 3)), np.zeros((D, 3))))
        assert out == pytest.approx(N * math.log(D), rel=1e-12)

    def test_dominant_logit_limit(self):
        E = np.eye(3)
        y = np.array([1])
        z = 60.0 * E[[1]]
        assert float(cross_entropy(y, z, E)) < 1e-10

    def test_matches_direct_softmax_oracle(self, rng):
        z = rng.standard_normal((4, 3))
        E = rng.standard_normal((6, 3))
        y = rng.integers(0, 6, size=4)
        ours = float(cross_entropy(y, z, E))
        direct = softmax_cross_entropy_direct(y, z @ E.T)
        assert ours == pytest.approx(direct, abs=1e-10)

    def test_nonnegative(self, rng):
        for _ in range(10):
            z = rng.standard_normal((4, 3)) * 5
            E = rng.standard_normal((6, 3))
            y = rng.integers(0, 6, size=4)
            assert float(cross_entropy(y, z, E)) >= 0.0

    def test_gradient_matches_finite_differences(self, rng):
        E = init_embedding(rng, 5, 3)
        y = rng.integers(0, 5, size=4)
        z = rng.standard_normal((4, 3))
        g = np.asarray(jax.grad(lambda zz: cross_entropy(y, zz, E))(z))
        h = 1e-6
        for idx in np.ndindex(z.shape):
            up, dn = z.copy(), z.copy()
            up[idx] += h
            dn[idx] -= h
            fd = (float(cross_entropy(y, up, E)) - float(cross_entropy(y, dn, E))) / (2 * h)
            assert abs(g[idx] - fd) / max(abs(fd), 1e-8) < 1e-6


class TestNormalizeRows:
    def test_three_four_five(self):
        out = np.asarray(normalize_rows(np.array([[3.0, 4.0]])))
        assert np.allclose(out, [[0.6, 0.8]])

    def test_idempotent(self, rng):
        E = rng.standard_normal((5, 3))
        once = np.asarray(normalize_rows(E))
        twice = np.asarray(normalize_rows(once))
        assert np.allclose(once, twice, atol=1e-15)

    def test_zero_row_rejected(self):
        with pytest.raises(ValueError, match="zero row"):
            normalize_rows(np.array([[1.0, 0.0], [0.0, 0.0]]))


class TestJsonlRoundtrip:
    def test_roundtrip(self, tmp_path):
        path = tmp_path / "t.jsonl"
        trajs = [np.array([1, 2, 3]), np.array([0, 0, 4])]
        write_trajectories_jsonl(path, trajs, ["alice", "bob"])
        back, users = read_trajectories_jsonl(path)
        assert users == ["alice", "bob"]
        assert all(np.array_equal(a, b) for a, b in zip(trajs, back))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            read_trajectories_jsonl(tmp_path / "absent.jsonl")

    def test_bad_record(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"user": "x"}\n')
        with pytest.raises(DataError, match="bad trajectory record"):
            read_trajectories_jsonl(path)
