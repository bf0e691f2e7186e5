import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vqphon.tensor import DimensionError, Tensor
from vqphon.vq import (
    Codebook,
    TokenSequence,
    codebook_usage_stats,
    format_token_line,
    init_codebook,
    nearest_codeword,
    parse_token_line,
    quantize_straight_through,
    vq_loss_terms,
)


def scan_oracle(vector, words):
    """Explicit running-min scan, first hit kept."""
    best_i, best_d = 0, float(((words[0] - vector) ** 2).sum())
    for i in range(1, len(words)):
        d = float(((words[i] - vector) ** 2).sum())
        if d < best_d:
            best_i, best_d = i, d
    return best_i, best_d


class TestNearestCodeword:
    def test_exact_match(self, rng):
        words = rng.standard_normal((16, 8))
        cb = Codebook(Tensor(words))
        idx, d2 = nearest_codeword(words[7], cb)
        assert idx == 7
        assert d2 == 0.0

    def test_matches_exhaustive_scan(self, rng):
        words = rng.standard_normal((64, 16))
        cb = Codebook(Tensor(words))
        for _ in range(200):
            v = rng.standard_normal(16)
            got = nearest_codeword(v, cb)
            expect = scan_oracle(v, words)
            assert got[0] == expect[0]
            assert got[1] == expect[1]

    def test_tie_breaks_to_lowest_index(self):
        words = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 3.0]])
        cb = Codebook(Tensor(words))
        idx, d2 = nearest_codeword(np.zeros(2), cb)
        assert idx == 0
        assert d2 == 1.0

    def test_dimension_mismatch(self, rng):
        cb = Codebook(Tensor(rng.standard_normal((4, 8))))
        with pytest.raises(DimensionError):
            nearest_codeword(np.zeros(5), cb)


class TestQuantize:
    def test_forward_bit_equals_codewords(self, rng):
        cb = init_codebook(K=32, dim=8, seed=3)
        z = Tensor(rng.standard_normal((2, 8, 11)), requires_grad=True)
        lat = quantize_straight_through(z, cb)
        for b in range(2):
            for t in range(11):
                assert np.array_equal(lat.z_q.data[b, :, t],
                                      cb.codewords.data[lat.indices[b, t]])

    def test_straight_through_gradient(self, rng):
        cb = init_codebook(K=16, dim=4, seed=0)
        z = Tensor(rng.standard_normal((1, 4, 6)), requires_grad=True)
        lat = quantize_straight_through(z, cb)
        lat.z_q.sum().backward()
        assert np.allclose(z.grad, 1.0)
        assert cb.codewords.grad is None

    def test_pass_through_matches_detached_substitution(self, rng):
        # grad through downstream of z_q w.r.t. z_e equals grad w.r.t. a
        # detached copy of z_q substituted at the same point
        cb = init_codebook(K=8, dim=4, seed=1)

        def downstream(t):
            prod = (t * t * 0.5 + t * 3.0)
            return (prod * prod).mean()

        z = Tensor(rng.standard_normal((1, 4, 5)), requires_grad=True)
        lat = quantize_straight_through(z, cb)
        downstream(lat.z_q).backward()
        grad_via_st = z.grad.copy()

        sub = Tensor(lat.z_q.data.copy(), requires_grad=True)
        downstream(sub).backward()
        assert np.allclose(grad_via_st, sub.grad)

    def test_quantization_idempotent(self, rng):
        cb = init_codebook(K=16, dim=8, seed=5)
        z = Tensor(rng.standard_normal((1, 8, 20)))
        lat1 = quantize_straight_through(z, cb)
        lat2 = quantize_straight_through(Tensor(lat1.z_q.data), cb)
        assert np.array_equal(lat1.indices, lat2.indices)
        assert np.array_equal(lat1.z_q.data, lat2.z_q.data)

    def test_batched_indices_match_single_vector_scan(self, rng):
        cb = init_codebook(K=24, dim=6, seed=9)
        z = Tensor(rng.standard_normal((3, 6, 7)))
        lat = quantize_straight_through(z, cb)
        for b in range(3):
            for t in range(7):
                idx, _ = nearest_codeword(z.data[b, :, t], cb)
                assert lat.indices[b, t] == idx

    def test_dimension_mismatch(self, rng):
        cb = init_codebook(K=8, dim=4, seed=0)
        with pytest.raises(DimensionError):
            quantize_straight_through(Tensor(rng.standard_normal((1, 5, 3))), cb)


class TestLossTerms:
    def test_zero_when_equal(self, rng):
        z = Tensor(rng.standard_normal((1, 4, 5)), requires_grad=True)
        codes = Tensor(z.data.copy(), requires_grad=True)
        cb_loss, commit = vq_loss_terms(z, codes)
        assert cb_loss.data == 0.0
        assert commit.data == 0.0

    def test_constant_offset(self, rng):
        delta = 0.37
        z = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        codes = Tensor(z.data + delta)
        cb_loss, commit = vq_loss_terms(z, codes)
        assert abs(cb_loss.data - delta ** 2) < 1e-12
        assert abs(commit.data - delta ** 2) < 1e-12

    def test_gradient_partition(self, rng):
        # codebook term moves only codes; commitment only the encoder side
        cb = init_codebook(K=8, dim=4, seed=2)
        z = Tensor(rng.standard_normal((1, 4, 6)), requires_grad=True)
        lat = quantize_straight_through(z, cb)

        cb_loss, commit = vq_loss_terms(lat.z_e, lat.codes)
        cb_loss.backward()
        assert z.grad is None
        assert cb.codewords.grad is not None
        assert np.any(cb.codewords.grad != 0)

        cb.codewords.grad = None
        cb_loss2, commit2 = vq_loss_terms(lat.z_e, lat.codes)
        commit2.backward()
        assert cb.codewords.grad is None
        assert z.grad is not None
        assert np.any(z.grad != 0)

    def test_nonnegative_and_zero_iff_on_codewords(self, rng):
        cb = init_codebook(K=8, dim=4, seed=7)
        z = Tensor(rng.standard_normal((1, 4, 9)))
        lat = quantize_straight_through(z, cb)
        cb_loss, commit = vq_loss_terms(lat.z_e, lat.codes)
        assert cb_loss.data >= 0 and commit.data >= 0
        # place latents exactly on codewords
        on = Tensor(lat.z_q.data.copy())
        lat2 = quantize_straight_through(on, cb)
        l1, l2 = vq_loss_terms(lat2.z_e, lat2.codes)
        assert l1.data == 0.0 and l2.data == 0.0


class TestInitCodebook:
    def test_deterministic(self):
        a = init_codebook(K=64, dim=16, seed=42)
        b = init_codebook(K=64, dim=16, seed=42)
        assert np.array_equal(a.codewords.data, b.codewords.data)

    def test_shape_and_range(self):
        cb = init_codebook(K=256, dim=128, seed=0)
        assert cb.codewords.data.shape == (256, 128)
        assert np.all(np.abs(cb.codewords.data) <= 1.0 / 256)
        # no two codewords identical
        flat = {cb.codewords.data[i].tobytes() for i in range(256)}
        assert len(flat) == 256

    def test_too_small_rejected(self):
        with pytest.raises(ValueError, match="K=1"):
            init_codebook(K=1, dim=4)

    def test_kmeans_recovers_synthetic_clusters(self, rng):
        centers = np.array([[2.0, 2.0], [-2.0, 2.0], [2.0, -2.0], [-2.0, -2.0]])
        pts = np.concatenate([c + 0.05 * rng.standard_normal((50, 2)) for c in centers])
        cb = init_codebook(K=4, dim=2, strategy="kmeans", seed=0, latents=pts)
        got = cb.codewords.data
        for c in centers:
            dist = np.sqrt(((got - c) ** 2).sum(axis=1)).min()
            assert dist < 0.1


class TestUsageStats:
    def test_collapsed_perplexity_is_one(self):
        seqs = [TokenSequence("u", np.full(50, 3))]
        counts, perp = codebook_usage_stats(seqs, K=16)
        assert counts[3] == 50
        assert abs(perp - 1.0) < 1e-12

    def test_uniform_perplexity_is_K(self):
        K = 8
        seqs = [TokenSequence("u", np.repeat(np.arange(K), 10))]
        _, perp = codebook_usage_stats(seqs, K=K)
        assert abs(perp - K) < 1e-9

    def test_histogram_totals(self, rng):
        idx = rng.integers(0, 12, size=333)
        counts, _ = codebook_usage_stats([TokenSequence("u", idx)], K=12)
        assert counts.sum() == 333

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="no tokens"):
            codebook_usage_stats([], K=4)


class TestTokenLines:
    def test_roundtrip(self):
        seq = TokenSequence("utt_7", np.array([1, 2, 3, 2, 1]))
        line = format_token_line(seq)
        assert line == "utt_7 1 2 3 2 1"
        back = parse_token_line(line)
        assert back.utterance_id == "utt_7"
        assert np.array_equal(back.indices, seq.indices)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), k=st.integers(2, 40), d=st.integers(1, 24))
def test_nearest_matches_scan_property(seed, k, d):
    rng = np.random.default_rng(seed)
    words = rng.standard_normal((k, d))
    cb = Codebook(Tensor(words))
    v = rng.standard_normal(d)
    got = nearest_codeword(v, cb)
    expect = scan_oracle(v, words)
    assert got == expect
