import numpy as np
import pytest

from sparselabel.dictionary import Dictionary
from sparselabel.encode import (
    EncodeError,
    GramCache,
    SparseCodeMap,
    SparseVector,
    batch_omp_encode,
    build_gram_cache,
    encode_image,
    load_code_map,
    omp_encode,
    reconstruct_image,
    save_code_map,
)
from sparselabel.grid import PatchGeometry, PatchMatrix


def random_dictionary(rng, dim_channels, atoms, k, side=1, coherent=False):
    geom = PatchGeometry(side, dim_channels)
    base = rng.normal(size=(geom.dim, atoms))
    if coherent:
        base += 2.0 * rng.normal(size=(geom.dim, 1))
    base /= np.linalg.norm(base, axis=0)
    return Dictionary(geom, base, k)


class TestOmpEncode:
    def test_exact_atom_recovery(self):
        rng = np.random.default_rng(0)
        for k in (1, 3, 8):
            D = random_dictionary(rng, 16, 12, k)
            sv = omp_encode(D.atoms[:, 7], D)
            assert sv.nnz == 1
            assert sv.indices[0] == 7
            assert abs(sv.values[0] - 1.0) <= 1e-10

    def test_zero_signal_empty_support(self):
        D = random_dictionary(np.random.default_rng(1), 10, 8, 4)
        assert omp_encode(np.zeros(10), D).nnz == 0

    def test_orthonormal_projection_oracle(self):
        rng = np.random.default_rng(2)
        q, _ = np.linalg.qr(rng.normal(size=(12, 12)))
        D = Dictionary(PatchGeometry(1, 12), q, 12)
        x = rng.normal(size=12)
        sv = omp_encode(x, D)
        assert np.max(np.abs(sv.to_dense() - q.T @ x)) <= 1e-10

    def test_residual_orthogonality_each_round(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            D = random_dictionary(rng, 20, 15, 6)
            x = rng.normal(size=20)
            # replay the pursuit round by round
            support = []
            residual = x.copy()
            for _ in range(6):
                corr = D.atoms.T @ residual
                lam = int(np.argmax(np.abs(corr)))
                if abs(corr[lam]) <= 1e-12:
                    break
                support.append(lam)
                coef, *_ = np.linalg.lstsq(D.atoms[:, support], x, rcond=None)
                residual = x - D.atoms[:, support] @ coef
                sel_corr = D.atoms[:, support].T @ residual
                assert np.max(np.abs(sel_corr)) <= 1e-8

    def test_monotone_residual_norm(self):
        rng = np.random.default_rng(4)
        D = random_dictionary(rng, 20, 30, 10)
        x = rng.normal(size=20)
        support = []
        norms = [np.linalg.norm(x)]
        residual = x.copy()
        for _ in range(10):
            corr = D.atoms.T @ residual
            lam = int(np.argmax(np.abs(corr)))
            support.append(lam)
            coef, *_ = np.linalg.lstsq(D.atoms[:, support], x, rcond=None)
            residual = x - D.atoms[:, support] @ coef
            norms.append(np.linalg.norm(residual))
        assert all(b <= a + 1e-12 for a, b in zip(norms, norms[1:]))

    def test_dimension_mismatch(self):
        D = random_dictionary(np.random.default_rng(5), 10, 8, 2)
        with pytest.raises(EncodeError):
            omp_encode(np.zeros(9), D)

    def test_nnz_le_k_sorted_unique(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            D = random_dictionary(rng, 15, 20, 5)
            sv = omp_encode(rng.normal(size=15), D)
            assert sv.nnz <= 5
            assert np.all(np.diff(sv.indices) > 0)


class TestBatchOmp:
    def test_matches_reference_on_random_instances(self):
        rng = np.random.default_rng(7)
        for t in range(300):
            L = int(rng.integers(8, 65))
            K = int(rng.integers(1, 9))
            dim = int(rng.integers(10, 40))
            D = random_dictionary(rng, dim, L, K, coherent=(t % 3 == 0))
            X = rng.normal(size=(dim, 4))
            cache = build_gram_cache(D)
            batch = batch_omp_encode(PatchMatrix(D.geometry, X), D, cache)
            for n in range(4):
                ref = omp_encode(X[:, n], D)
                assert np.array_equal(ref.indices, batch[n].indices)
                assert np.max(np.abs(ref.values - batch[n].values), initial=0.0) <= 1e-8

    def test_empty_input(self):
        D = random_dictionary(np.random.default_rng(8), 10, 8, 3)
        out = batch_omp_encode(PatchMatrix(D.geometry, np.zeros((10, 0))), D, build_gram_cache(D))
        assert out == []

    def test_duplicate_columns_give_duplicate_outputs(self):
        rng = np.random.default_rng(9)
        D = random_dictionary(rng, 12, 10, 3)
        x = rng.normal(size=12)
        X = np.stack([x, x, x], axis=1)
        out = batch_omp_encode(PatchMatrix(D.geometry, X), D, build_gram_cache(D))
        for sv in out[1:]:
            assert np.array_equal(sv.indices, out[0].indices)
            assert np.array_equal(sv.values, out[0].values)

    def test_stale_cache_rejected(self):
        rng = np.random.default_rng(10)
        D1 = random_dictionary(rng, 12, 10, 3)
        D2 = random_dictionary(rng, 12, 10, 3)
        cache = build_gram_cache(D1)
        with pytest.raises(EncodeError, match="stale"):
            batch_omp_encode(PatchMatrix(D2.geometry, np.zeros((12, 1))), D2, cache)

    def test_gram_cache_invariants(self):
        with pytest.raises(EncodeError):
            GramCache(np.array([[1.0, 0.5], [0.4, 1.0]]), "x")
        with pytest.raises(EncodeError):
            GramCache(np.array([[2.0, 0.0], [0.0, 1.0]]), "x")


class TestEncodeImage:
    def test_constant_image_zero_mean_dictionary_all_empty(self):
        rng = np.random.default_rng(11)
        geom = PatchGeometry(3, 1)
        atoms = rng.normal(size=(9, 8))
        atoms /= np.linalg.norm(atoms, axis=0)
        D = Dictionary(geom, atoms, 3, zero_mean_input=True)
        Z = encode_image(np.full((6, 6, 1), 0.8), D)
        assert int(Z.nnz_per_cell().sum()) == 0

    def test_m1_tiled_atom_image(self):
        # m=1, c=2: every pixel is a scaled copy of atom 3
        rng = np.random.default_rng(12)
        geom = PatchGeometry(1, 2)
        atoms = rng.normal(size=(2, 6))
        atoms /= np.linalg.norm(atoms, axis=0)
        D = Dictionary(geom, atoms, 2)
        img = np.tile(atoms[:, 3] * 1.7, (4, 5, 1))
        Z = encode_image(img, D)
        for y in range(4):
            for x in range(5):
                sv = Z.cell(x, y)
                assert np.array_equal(sv.indices, [3])
                assert abs(sv.values[0] - 1.7) < 1e-10

    def test_matches_per_pixel_reference_loop(self):
        rng = np.random.default_rng(13)
        geom = PatchGeometry(5, 1)
        atoms = rng.normal(size=(25, 16))
        atoms /= np.linalg.norm(atoms, axis=0)
        D = Dictionary(geom, atoms, 2)
        img = rng.random((8, 8, 1))
        Z = encode_image(img, D)
        from sparselabel.grid import extract_patch

        for y in range(8):
            for x in range(8):
                ref = omp_encode(extract_patch(img, (x, y), geom), D)
                got = Z.cell(x, y)
                assert np.array_equal(ref.indices, got.indices)
                assert np.max(np.abs(ref.values - got.values), initial=0.0) <= 1e-8

    def test_channel_mismatch(self):
        D = random_dictionary(np.random.default_rng(14), 2, 6, 2)
        with pytest.raises(EncodeError, match="channels"):
            encode_image(np.zeros((4, 4, 1)), D)


class TestReconstruct:
    def test_all_empty_map_gives_zero_image(self):
        D = random_dictionary(np.random.default_rng(15), 1, 4, 2, side=3)
        Z = SparseCodeMap(5, 5, 4, np.full((25, 1), -1, np.int32), np.zeros((25, 1)))
        out = reconstruct_image(Z, D)
        assert np.all(out == 0.0)

    def test_single_stamp_matches_oracle(self):
        rng = np.random.default_rng(16)
        geom = PatchGeometry(3, 1)
        atoms = rng.normal(size=(9, 5))
        atoms /= np.linalg.norm(atoms, axis=0)
        D = Dictionary(geom, atoms, 2)
        h = w = 7
        idx = np.full((h * w, 1), -1, np.int32)
        val = np.zeros((h * w, 1))
        px, py, ai, wgt = 3, 4, 2, 0.9
        idx[py * w + px, 0] = ai
        val[py * w + px, 0] = wgt
        Z = SparseCodeMap(w, h, 5, idx, val)
        out = reconstruct_image(Z, D)
        # direct stamping oracle
        expected = np.zeros((h, w))
        patch = (wgt * atoms[:, ai]).reshape(3, 3)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                expected[py + dy, px + dx] += patch[dy + 1, dx + 1]
        counts = np.zeros((h, w))
        for cy in range(h):
            for cx in range(w):
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        yy, xx = cy + dy, cx + dx
                        if 0 <= yy < h and 0 <= xx < w:
                            counts[yy, xx] += 1
        assert np.allclose(out[:, :, 0], expected / counts, atol=1e-12)

    def test_roundtrip_on_m1_synthetic(self):
        # incoherent (orthonormal) atoms so the greedy pursuit provably
        # recovers the planted 2-sparse combinations
        rng = np.random.default_rng(17)
        geom = PatchGeometry(1, 8)
        q, _ = np.linalg.qr(rng.normal(size=(8, 6)))
        D = Dictionary(geom, q, 2)
        img = np.zeros((6, 6, 8))
        for y in range(6):
            for x in range(6):
                s = rng.choice(6, size=2, replace=False)
                img[y, x] = q[:, s] @ rng.normal(size=2)
        Z = encode_image(img, D)
        out = reconstruct_image(Z, D)
        assert np.max(np.abs(out - img)) <= 1e-8

    def test_dim_mismatch(self):
        D = random_dictionary(np.random.default_rng(18), 1, 4, 2, side=3)
        Z = SparseCodeMap(2, 2, 5, np.full((4, 1), -1, np.int32), np.zeros((4, 1)))
        with pytest.raises(EncodeError):
            reconstruct_image(Z, D)


class TestSparseStructures:
    def test_sparse_vector_validation(self):
        with pytest.raises(EncodeError):
            SparseVector(np.array([3, 1]), np.array([1.0, 2.0]), 5)
        with pytest.raises(EncodeError):
            SparseVector(np.array([1, 7]), np.array([1.0, 2.0]), 5)

    def test_map_dense_roundtrip(self):
        rng = np.random.default_rng(19)
        dense = rng.random((4, 5, 7))
        dense[dense < 0.6] = 0.0
        Z = SparseCodeMap.from_dense(dense)
        assert np.array_equal(Z.to_dense(), dense)

    def test_serialization_roundtrip(self, tmp_path):
        rng = np.random.default_rng(20)
        D = random_dictionary(rng, 9, 12, 3, side=1)
        # build a map via encoding then round-trip through the binary format
        geom = PatchGeometry(3, 1)
        atoms = rng.normal(size=(9, 12))
        atoms /= np.linalg.norm(atoms, axis=0)
        D = Dictionary(geom, atoms, 3)
        Z = encode_image(rng.random((6, 7, 1)), D)
        p = tmp_path / "z.slzm"
        save_code_map(Z, p)
        back = load_code_map(p)
        assert (back.width, back.height, back.dim) == (Z.width, Z.height, Z.dim)
        for y in range(6):
            for x in range(7):
                a, b = Z.cell(x, y), back.cell(x, y)
                assert np.array_equal(a.indices, b.indices)
                # values stored as f32
                assert np.max(np.abs(a.values - b.values), initial=0.0) <= 1e-6
