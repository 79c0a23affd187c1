import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tokmri.errors import (
    ConfigError,
    DegenerateDataError,
    GeometryError,
    InvalidInputError,
    NotTrainedError,
    ShapeMismatchError,
)
from tokmri.tokenizer import (
    Codebook,
    LatentGrid,
    Tokenizer,
    channel_stats,
    denormalize_channel,
    kmeans,
    normalize_channel,
    patchify,
    quantize,
    ste_quantize_grad,
    train_tokenizer,
    unpatchify,
)


def brute_force_nearest(vectors, entries):
    """Per-row scan over every codebook entry; the quantizer oracle."""
    out = np.empty(len(vectors), dtype=int)
    for i, v in enumerate(vectors):
        best, best_d = 0, np.inf
        for k, e in enumerate(entries):
            d = float(np.dot(v - e, v - e))
            if d < best_d:
                best, best_d = k, d
        out[i] = best
    return out


class TestPatchify:
    def test_patch_count(self):
        x = np.arange(32 * 32, dtype=float).reshape(32, 32)
        assert patchify(x, 8).shape == (16, 64)

    def test_single_patch_is_whole_image(self):
        x = np.random.default_rng(0).standard_normal((8, 8))
        patches = patchify(x, 8)
        assert patches.shape == (1, 64)
        assert np.array_equal(patches[0], x.ravel())

    def test_round_trip(self):
        x = np.random.default_rng(1).standard_normal((24, 16))
        assert np.array_equal(unpatchify(patchify(x, 8), 3, 2, 8), x)

    def test_row_major_order(self):
        x = np.zeros((4, 4))
        x[0:2, 2:4] = 1.0  # second patch in row-major 2x2-grid order
        patches = patchify(x, 2)
        assert np.all(patches[1] == 1.0)
        assert np.all(patches[[0, 2, 3]] == 0.0)

    def test_indivisible_raises(self):
        with pytest.raises(GeometryError):
            patchify(np.zeros((10, 8)), 3)


class TestQuantize:
    def test_exact_entry_snaps_to_itself(self):
        cb = Codebook(np.arange(12.0).reshape(4, 3))
        lat = LatentGrid(cb.entries[[2]].copy(), 1, 1)
        idx, snapped = quantize(lat, cb)
        assert idx.tolist() == [2]
        assert np.array_equal(snapped.vectors, cb.entries[[2]])

    def test_idempotent(self):
        rng = np.random.default_rng(2)
        cb = Codebook(rng.standard_normal((16, 4)))
        lat = LatentGrid(rng.standard_normal((9, 4)), 3, 3)
        _, snapped = quantize(lat, cb)
        idx2, snapped2 = quantize(snapped, cb)
        assert np.array_equal(snapped2.vectors, snapped.vectors)

    def test_matches_brute_force_scan(self):
        rng = np.random.default_rng(3)
        cb = Codebook(rng.standard_normal((16, 4)))
        lat = LatentGrid(rng.standard_normal((64, 4)), 8, 8)
        idx, _ = quantize(lat, cb)
        assert np.array_equal(idx, brute_force_nearest(lat.vectors, cb.entries))

    def test_tie_breaks_to_lowest_index(self):
        # entries 1 and 2 tie for nearest; the lower index must win
        entries = np.array([[9.0, 9.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 2.0]])
        cb = Codebook(entries)
        lat = LatentGrid(np.array([[0.0, 0.0]]), 1, 1)
        idx, _ = quantize(lat, cb)
        assert idx.tolist() == [1]

    def test_dimension_mismatch(self):
        cb = Codebook(np.random.default_rng(4).standard_normal((4, 3)))
        lat = LatentGrid(np.zeros((2, 5)), 1, 2)
        with pytest.raises(ShapeMismatchError):
            quantize(lat, cb)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_nearest_neighbor_optimality(self, seed):
        rng = np.random.default_rng(seed)
        cb = Codebook(rng.standard_normal((8, 3)))
        lat = LatentGrid(rng.standard_normal((5, 3)), 1, 5)
        idx, snapped = quantize(lat, cb)
        d_chosen = np.sum((lat.vectors - snapped.vectors) ** 2, axis=1)
        for k in range(cb.K):
            d_k = np.sum((lat.vectors - cb.entries[k]) ** 2, axis=1)
            assert np.all(d_chosen <= d_k + 1e-12)


class TestCodebook:
    def test_rejects_duplicates(self):
        with pytest.raises(InvalidInputError):
            Codebook(np.array([[1.0, 2.0], [1.0, 2.0]]))

    def test_rejects_non_finite(self):
        with pytest.raises(InvalidInputError):
            Codebook(np.array([[1.0, np.inf]]))


class TestEncoderDecoder:
    def _affine_tokenizer(self, rng, p=2, D=3):
        return Tokenizer(
            p=p,
            enc_w=rng.standard_normal((D, p * p)),
            enc_b=np.zeros(D),
            dec_w=rng.standard_normal((p * p, D)),
            dec_b=np.zeros(p * p),
            codebook=Codebook(rng.standard_normal((4, D))),
        )

    def test_zero_image_zero_latents(self):
        tok = self._affine_tokenizer(np.random.default_rng(5))
        lat = tok.encode(np.zeros((4, 4)))
        assert np.array_equal(lat.vectors, np.zeros((4, 3)))

    def test_homogeneous_when_bias_zero(self):
        rng = np.random.default_rng(6)
        tok = self._affine_tokenizer(rng)
        x = rng.standard_normal((4, 4))
        a = -2.5
        assert np.allclose(tok.encode(a * x).vectors, a * tok.encode(x).vectors)

    def test_hand_computed_projection(self):
        # 2x2 patches of a 4x4 image; encoder picks (sum, first pixel)
        enc_w = np.array([[1.0, 1.0, 1.0, 1.0], [1.0, 0.0, 0.0, 0.0]])
        tok = Tokenizer(p=2, enc_w=enc_w, enc_b=np.array([0.5, 0.0]),
                        dec_w=np.zeros((4, 2)), dec_b=np.zeros(4),
                        codebook=Codebook(np.zeros((1, 2)) + 1.0))
        x = np.arange(16.0).reshape(4, 4)
        lat = tok.encode(x)
        # patch 0 pixels: 0,1,4,5 -> sum 10, first 0
        assert np.allclose(lat.vectors[0], [10.5, 0.0])
        # patch 3 pixels: 10,11,14,15 -> sum 50, first 10
        assert np.allclose(lat.vectors[3], [50.5, 10.0])

    def test_decode_shape_and_zero_case(self):
        rng = np.random.default_rng(7)
        tok = self._affine_tokenizer(rng)
        lat = LatentGrid(np.zeros((4, 3)), 2, 2)
        out = tok.decode(lat)
        assert out.shape == (4, 4)
        assert np.array_equal(out, np.zeros((4, 4)))

    def test_untrained_raises(self):
        tok = Tokenizer(p=8)
        with pytest.raises(NotTrainedError):
            tok.encode(np.zeros((8, 8)))
        with pytest.raises(NotTrainedError):
            tok.decode(LatentGrid(np.zeros((1, 4)), 1, 1))

    def test_pseudo_inverse_round_trip(self):
        # decoder = least-squares inverse of a linear encoder on the
        # training patch span: decode(encode(x)) ~= x there
        rng = np.random.default_rng(8)
        D, p = 4, 2
        basis = rng.standard_normal((D, p * p))  # patch span of rank D
        coeffs = rng.standard_normal((50, D))
        patches = coeffs @ basis
        enc_w = basis  # latent = basis @ patch
        lat = patches @ enc_w.T
        dec_w, *_ = np.linalg.lstsq(lat, patches, rcond=None)
        tok = Tokenizer(p=p, enc_w=enc_w, enc_b=np.zeros(D),
                        dec_w=dec_w.T, dec_b=np.zeros(p * p),
                        codebook=Codebook(rng.standard_normal((3, D))))
        x = (coeffs[0] @ basis).reshape(p, p)
        assert np.allclose(tok.decode(tok.encode(x)), x, atol=1e-8)


class TestSTE:
    def test_identity(self):
        g = np.random.default_rng(9).standard_normal((5, 4))
        assert np.array_equal(ste_quantize_grad(g), g)

    def test_zero(self):
        assert np.array_equal(ste_quantize_grad(np.zeros((2, 2))), np.zeros((2, 2)))


class TestKMeans:
    def test_distinct_points_zero_distortion(self):
        rng = np.random.default_rng(10)
        data = rng.standard_normal((8, 3))
        centroids, assign, trace = kmeans(data, 8, seed=0)
        assert trace[-1] < 1e-20
        assert sorted(assign.tolist()) == list(range(8))

    def test_objective_non_increasing(self):
        rng = np.random.default_rng(11)
        data = rng.standard_normal((200, 4))
        _, _, trace = kmeans(data, 10, iters=30, seed=1)
        assert all(a >= b - 1e-9 for a, b in zip(trace, trace[1:]))

    def test_hand_case_two_clusters(self):
        data = np.array([[0.0], [0.0], [10.0], [10.0]])
        centroids, _, _ = kmeans(data, 2, seed=2)
        assert sorted(centroids.ravel().tolist()) == [0.0, 10.0]

    def test_k_larger_than_points(self):
        with pytest.raises(ConfigError):
            kmeans(np.zeros((3, 2)), 5)


class TestTrainTokenizer:
    def test_basic_training_and_report(self):
        rng = np.random.default_rng(12)
        dataset = [rng.standard_normal((16, 16)) for _ in range(6)]
        tok, report = train_tokenizer(dataset, K=8, D=4, p=4, seed=0)
        assert tok.is_trained
        assert tok.codebook.K == 8
        assert report["recon_mse"] >= 0
        assert report["quant_distortion"] >= 0
        trace = report["kmeans_trace"]
        assert all(a >= b - 1e-9 for a, b in zip(trace, trace[1:]))

    def test_rank_d_recon_bound(self):
        # affine round trip must equal the best rank-D approximation error
        rng = np.random.default_rng(13)
        dataset = [rng.standard_normal((8, 8)) for _ in range(10)]
        tok, report = train_tokenizer(dataset, K=4, D=4, p=4, seed=0)
        patches = np.concatenate([patchify(c, 4) for c in dataset])
        mean = patches.mean(axis=0)
        centered = patches - mean
        s = np.linalg.svd(centered, compute_uv=False)
        best = float(np.sum(s[4:] ** 2)) / patches.size
        assert report["recon_mse"] <= best + 1e-9

    def test_empty_dataset(self):
        with pytest.raises(ConfigError):
            train_tokenizer([], K=4, D=2, p=4)

    def test_k_exceeds_patches(self):
        rng = np.random.default_rng(14)
        with pytest.raises(ConfigError):
            train_tokenizer([rng.standard_normal((4, 4))], K=10, D=2, p=4)

    def test_degenerate_patches(self):
        dataset = [np.ones((8, 8)) for _ in range(4)]
        with pytest.raises(DegenerateDataError):
            train_tokenizer(dataset, K=2, D=2, p=4)

    def test_exactly_k_constant_patches(self):
        # K distinct constant patches: every patch its own centroid
        values = np.arange(6.0)
        dataset = [np.full((4, 4), v) for v in values]
        tok, report = train_tokenizer(dataset, K=6, D=2, p=4, seed=0)
        assert report["quant_distortion"] < 1e-18


class TestPersistence:
    def test_json_round_trip(self, tmp_path):
        rng = np.random.default_rng(15)
        dataset = [rng.standard_normal((16, 16)) for _ in range(4)]
        tok, _ = train_tokenizer(dataset, K=8, D=4, p=4, seed=0)
        path = tmp_path / "tokenizer.json"
        tok.save(path)
        back = Tokenizer.load(path)
        assert back.p == tok.p
        assert np.array_equal(back.enc_w, tok.enc_w)
        assert np.array_equal(back.enc_b, tok.enc_b)
        assert np.array_equal(back.dec_w, tok.dec_w)
        assert np.array_equal(back.dec_b, tok.dec_b)
        assert np.array_equal(back.codebook.entries, tok.codebook.entries)


class TestChannelNormalization:
    def test_round_trip(self):
        rng = np.random.default_rng(16)
        x = rng.standard_normal((8, 8)) * 3 + 5
        stats = channel_stats(x)
        z = normalize_channel(x, stats)
        assert abs(z.mean()) < 1e-12
        assert abs(z.std() - 1.0) < 1e-6
        assert np.allclose(denormalize_channel(z, stats), x, atol=1e-12)

    def test_zero_channel_safe(self):
        stats = channel_stats(np.zeros((4, 4)))
        z = normalize_channel(np.zeros((4, 4)), stats)
        assert np.all(np.isfinite(z))
        assert np.array_equal(z, np.zeros((4, 4)))
