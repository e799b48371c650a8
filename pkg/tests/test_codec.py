import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskgen.codec import (
    Codebook,
    MaskTokenizer,
    binarize,
    decode_tokens,
    dequantize,
    encode_mask,
    flatten_tokens,
    load_codebook,
    load_codebook_binary,
    load_codebook_text,
    load_tokens,
    patchify,
    quantize,
    save_codebook_binary,
    save_codebook_text,
    save_tokens,
    train_codebook,
    unflatten_tokens,
)
from maskgen.validation import ValidationError


def random_mask(rng, h=32, w=32):
    return (rng.random((h, w)) < 0.5).astype(np.uint8)


class TestPatchify:
    def test_all_foreground_single_patch(self):
        grid = patchify(np.ones((16, 16), np.uint8), 16)
        assert grid.shape == (1, 1, 256)
        assert (grid == 1.0).all()

    def test_all_background_2x2(self):
        grid = patchify(np.zeros((32, 32), np.uint8), 16)
        assert grid.shape == (2, 2, 256)
        assert (grid == -1.0).all()

    def test_single_pixel_index_arithmetic(self):
        # flatten(r, c) = r*16 + c within a patch
        mask = np.zeros((16, 16), np.uint8)
        mask[0, 0] = 1
        vec = patchify(mask, 16)[0, 0]
        assert vec[0] == 1.0
        assert (vec[1:] == -1.0).all()

        mask = np.zeros((16, 16), np.uint8)
        mask[3, 7] = 1
        vec = patchify(mask, 16)[0, 0]
        assert vec[3 * 16 + 7] == 1.0
        assert vec.sum() == -254.0

    def test_block_placement(self):
        mask = np.zeros((32, 32), np.uint8)
        mask[16:, :16] = 1  # lower-left patch
        grid = patchify(mask, 16)
        assert (grid[1, 0] == 1.0).all()
        assert (grid[0, 0] == -1.0).all()
        assert (grid[0, 1] == -1.0).all()
        assert (grid[1, 1] == -1.0).all()

    def test_not_divisible_reports_remainder(self):
        with pytest.raises(ValidationError, match="remainders.*1.*4"):
            patchify(np.zeros((17, 20), np.uint8), 16)

    def test_non_binary_rejected(self):
        with pytest.raises(ValidationError, match="0/1"):
            patchify(np.full((16, 16), 7, np.uint8), 16)


class TestBinarize:
    def test_threshold_cases(self):
        # >= 0 maps to foreground, including exact zero
        grid = np.array([[[0.0, -0.3, 0.2, -1.0]]], np.float32)
        mask = binarize(grid, 2)
        assert mask.tolist() == [[1, 0], [1, 0]]

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_roundtrip_identity(self, seed):
        rng = np.random.default_rng(seed)
        mask = random_mask(rng)
        assert (binarize(patchify(mask, 16), 16) == mask).all()

    def test_nonfinite_rejected(self):
        grid = np.full((1, 1, 4), np.nan, np.float32)
        with pytest.raises(ValidationError, match="non-finite"):
            binarize(grid, 2)


class TestFlatten:
    def test_row_major(self):
        grid = np.array([[1, 2], [3, 4]])
        assert flatten_tokens(grid).tolist() == [1, 2, 3, 4]
        assert unflatten_tokens([1, 2, 3, 4], 2, 2).tolist() == [[1, 2], [3, 4]]

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 1023), min_size=16, max_size=16))
    def test_roundtrip(self, tokens):
        grid = unflatten_tokens(tokens, 4, 4)
        assert flatten_tokens(grid).tolist() == tokens

    def test_length_mismatch(self):
        with pytest.raises(ValidationError, match="does not fill"):
            unflatten_tokens([1, 2, 3], 2, 2)


class TestQuantize:
    @pytest.fixture
    def two_code_book(self):
        return Codebook(np.stack([-np.ones(4), np.ones(4)]).astype(np.float32))

    def test_nearest_selection(self, two_code_book):
        grid = np.ones((1, 1, 4), np.float32)
        assert quantize(grid, two_code_book).tolist() == [[1]]
        assert quantize(-grid, two_code_book).tolist() == [[0]]

    def test_tie_breaks_to_lowest_index(self, two_code_book):
        grid = np.array([[[1.0, 1.0, -1.0, -1.0]]], np.float32)
        assert quantize(grid, two_code_book).tolist() == [[0]]

    def test_matches_linear_scan_oracle(self):
        rng = np.random.default_rng(7)
        codebook = Codebook(rng.normal(size=(64, 16)).astype(np.float32))
        grid = rng.choice([-1.0, 1.0], size=(8, 8, 16)).astype(np.float32)
        got = quantize(grid, codebook)
        centers = codebook.vectors.astype(np.float64)
        for i in range(8):
            for j in range(8):
                dists = [
                    float(((grid[i, j].astype(np.float64) - c) ** 2).sum()) for c in centers
                ]
                assert got[i, j] == int(np.argmin(dists))

    def test_dimension_mismatch(self, two_code_book):
        with pytest.raises(ValidationError, match="does not match codebook dimension"):
            quantize(np.zeros((1, 1, 8), np.float32), two_code_book)


class TestDequantize:
    def test_lookup_exact(self):
        vec = np.arange(8, dtype=np.float32).reshape(2, 4)
        cb = Codebook(vec)
        out = dequantize(np.array([[1, 0], [0, 1]]), cb)
        assert (out[0, 0] == vec[1]).all()
        assert (out[1, 0] == vec[0]).all()

    def test_codebook_vectors_are_fixed_points(self):
        rng = np.random.default_rng(3)
        cb = Codebook(rng.normal(size=(16, 8)).astype(np.float32))
        tokens = np.arange(16).reshape(4, 4)
        grid = dequantize(tokens, cb)
        assert (quantize(grid, cb) == tokens).all()

    def test_all_zero_tokens(self):
        cb = Codebook(np.stack([np.full(4, 2.0), np.full(4, 5.0)]).astype(np.float32))
        out = dequantize(np.zeros((2, 2), np.int64), cb)
        assert (out == 2.0).all()

    def test_out_of_range_reports_position(self):
        cb = Codebook(np.eye(3, dtype=np.float32) + 1)
        tokens = np.array([[0, 1], [5, 0]])
        with pytest.raises(ValidationError, match=r"token 5 at position \(1, 0\)"):
            dequantize(tokens, cb)


class TestTrainCodebook:
    def test_two_point_clustering(self):
        vectors = np.array([[-1.0] * 4] * 10 + [[1.0] * 4] * 10)
        cb = train_codebook(vectors, n_codes=2, seed=0)
        rows = {tuple(r) for r in cb.vectors.tolist()}
        assert rows == {(-1.0,) * 4, (1.0,) * 4}

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(11)
        vectors = rng.choice([-1.0, 1.0], size=(500, 16))
        a = train_codebook(vectors, n_codes=8, seed=42)
        b = train_codebook(vectors, n_codes=8, seed=42)
        assert (a.vectors == b.vectors).all()
        assert a.iterations == b.iterations

    def test_beats_single_vector_oracle(self):
        # Total distortion of a converged codebook cannot exceed that of the
        # one-centroid solution (the global mean), since cluster means minimise
        # within-cluster squared error.
        rng = np.random.default_rng(0)
        vectors = rng.choice([-1.0, 1.0], size=(1000, 256))
        cb = train_codebook(vectors, n_codes=16, seed=0)
        centers = cb.vectors.astype(np.float64)
        mean = vectors.mean(axis=0)
        total = sum(min(float(((v - c) ** 2).sum()) for c in centers) for v in vectors)
        baseline = float(((vectors - mean) ** 2).sum())
        assert total <= baseline + 1e-6

    def test_requires_distinct_vectors(self):
        vectors = np.array([[0.0, 1.0]] * 50 + [[1.0, 0.0]] * 50)
        with pytest.raises(ValidationError, match="distinct"):
            train_codebook(vectors, n_codes=3)

    def test_no_duplicate_centroids_across_seeds(self):
        rng = np.random.default_rng(5)
        base = rng.choice([-1.0, 1.0], size=(12, 8))
        vectors = np.repeat(base, 40, axis=0)  # heavy duplication stresses reseeding
        for seed in range(6):
            cb = train_codebook(vectors, n_codes=8, seed=seed)
            assert np.unique(cb.vectors, axis=0).shape[0] == 8

    def test_training_meta(self):
        rng = np.random.default_rng(2)
        vectors = rng.normal(size=(64, 4))
        cb = train_codebook(vectors, n_codes=4, seed=9)
        assert cb.seed == 9
        assert cb.sample_count == 64
        assert cb.iterations >= 1


class TestCodebookValidation:
    def test_rejects_duplicates(self):
        with pytest.raises(ValidationError, match="duplicate"):
            Codebook(np.ones((2, 4), np.float32))

    def test_rejects_single_vector(self):
        with pytest.raises(ValidationError, match="at least 2"):
            Codebook(np.ones((1, 4), np.float32))

    def test_rejects_nonfinite(self):
        bad = np.stack([np.zeros(4), np.full(4, np.inf)]).astype(np.float32)
        with pytest.raises(ValidationError, match="non-finite"):
            Codebook(bad)


class TestCodebookFiles:
    @pytest.fixture
    def codebook(self):
        rng = np.random.default_rng(21)
        return train_codebook(rng.choice([-1.0, 1.0], size=(200, 16)), n_codes=8, seed=21)

    def test_text_roundtrip(self, codebook, tmp_path):
        path = tmp_path / "cb.txt"
        save_codebook_text(path, codebook)
        loaded = load_codebook_text(path)
        assert (loaded.vectors == codebook.vectors).all()
        assert loaded.seed == codebook.seed
        header = path.read_text().splitlines()[0]
        assert header == "MASKCB v1 8 16 21"

    def test_binary_roundtrip(self, codebook, tmp_path):
        path = tmp_path / "cb.mcb"
        save_codebook_binary(path, codebook)
        loaded = load_codebook_binary(path)
        assert (loaded.vectors == codebook.vectors).all()
        raw = path.read_bytes()
        assert raw[:7] == b"MSKCB1\x00"
        assert len(raw) == 16 + 8 + 8 * 16 * 4

    def test_sniffing_loader(self, codebook, tmp_path):
        save_codebook_text(tmp_path / "cb.txt", codebook)
        save_codebook_binary(tmp_path / "cb.mcb", codebook)
        assert (load_codebook(tmp_path / "cb.txt").vectors == codebook.vectors).all()
        assert (load_codebook(tmp_path / "cb.mcb").vectors == codebook.vectors).all()

    def test_token_file_roundtrip(self, tmp_path):
        tokens = np.arange(12).reshape(3, 4)
        save_tokens(tmp_path / "t.json", tokens)
        assert (load_tokens(tmp_path / "t.json") == tokens).all()


class TestMaskTokenizer:
    def test_fit_transform_inverse(self):
        rng = np.random.default_rng(13)
        masks = [random_mask(rng, 32, 32) for _ in range(40)]
        tok = MaskTokenizer(n_codes=32, patch_size=16, seed=13).fit(masks)
        rows = tok.transform(masks[:5])
        assert rows.shape == (5, 4)
        recon = tok.inverse_transform(rows)
        assert recon.shape == (5, 32, 32)

    def test_perfect_reconstruction_reports_identity(self):
        # Blocky masks whose patches all appear in training reconstruct exactly.
        masks = []
        for bits in range(1, 16):
            m = np.zeros((32, 32), np.uint8)
            for b in range(4):
                if bits >> b & 1:
                    m[(b // 2) * 16 : (b // 2 + 1) * 16, (b % 2) * 16 : (b % 2 + 1) * 16] = 1
            masks.append(m)
        tok = MaskTokenizer(n_codes=2, patch_size=16, seed=0).fit(masks)
        report = tok.reconstruction_report(masks)
        assert report.total_iou == 1.0
        assert report.mahd == 0.0

    def test_get_params(self):
        params = MaskTokenizer(n_codes=64, seed=5).get_params()
        assert params["n_codes"] == 64
        assert params["seed"] == 5

    def test_unfitted_transform_raises(self):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            MaskTokenizer().transform([np.zeros((16, 16), np.uint8)])
