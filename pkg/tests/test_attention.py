"""Attention machinery tests, anchored by an exhaustive brute-force oracle."""

import math

import numpy as np
import pytest

from crafill import attention
from crafill.attention import (
    AttentionScores,
    CellPartition,
    PatchGrid,
    aggregate_residuals,
    attention_transfer,
    compute_scores,
    dump_scores,
    extract_patches,
    fold_patches,
    load_scores_dump,
    partition_cells,
    transfer_matrix,
)
from crafill.errors import MaskError, ShapeError


def brute_force_scores(features, hole):
    """Independent score computation: explicit window gathering, explicit
    cosine and softmax loops.  features (c, g, g); hole (g, g) bool."""
    c, g, _ = features.shape
    vecs = []
    for y in range(g):
        for x in range(g):
            window = []
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < g and 0 <= xx < g:
                        window.extend(float(features[ch, yy, xx]) for ch in range(c))
                    else:
                        window.extend([0.0] * c)
            vecs.append(np.array(window))
    n = g * g
    hole_flat = hole.reshape(-1)
    ctx = [i for i in range(n) if not hole_flat[i]]
    scores = np.zeros((n, n))
    for j in range(n):
        if not hole_flat[j]:
            continue
        sims = []
        vj = vecs[j] / (np.linalg.norm(vecs[j]) + 1e-8)
        for i in ctx:
            vi = vecs[i] / (np.linalg.norm(vecs[i]) + 1e-8)
            sims.append(math.exp(float(vi @ vj)))
        z = sum(sims)
        for i, e in zip(ctx, sims):
            scores[i, j] = e / z
    return scores


def brute_force_transfer(values, scores, hole):
    """Independent 1x1-patch transfer: out_j = sum_i s[i, j] * values_i."""
    c, g, _ = values.shape
    hole_flat = hole.reshape(-1)
    out = values.copy().astype(np.float64)
    for j in range(g * g):
        if not hole_flat[j]:
            continue
        jy, jx = divmod(j, g)
        acc = np.zeros(c)
        for i in range(g * g):
            if hole_flat[i]:
                continue
            iy, ix = divmod(i, g)
            acc += scores[i, j] * values[:, iy, ix]
        out[:, jy, jx] = acc
    return out


def make_mask(h, w, hole_slices=None):
    m = np.zeros((h, w), np.float32)
    if hole_slices:
        m[hole_slices] = 1.0
    return m


class TestPartition:
    def test_empty_mask(self):
        part = partition_cells(make_mask(512, 512), 32)
        assert part.n_hole == 0 and part.n_context == 1024

    def test_single_cell_hole(self):
        m = make_mask(512, 512, (slice(32, 48), slice(64, 80)))  # one 16x16 cell
        part = partition_cells(m, 32)
        assert part.n_hole == 1
        assert part.hole[2, 4]

    def test_quarter_area_hole(self):
        # centred square covering 25% of the area -> 16x16 = 256 cells
        m = make_mask(512, 512, (slice(128, 384), slice(128, 384)))
        part = partition_cells(m, 32)
        assert part.n_hole == 256

    def test_any_overlap_marks_cell(self):
        m = make_mask(512, 512)
        m[0, 0] = 1.0  # a single hole pixel
        assert partition_cells(m, 32).n_hole == 1

    def test_all_hole_rejected(self):
        with pytest.raises(MaskError):
            partition_cells(np.ones((512, 512), np.float32), 32)

    def test_non_binary_rejected(self):
        with pytest.raises(MaskError):
            partition_cells(np.full((64, 64), 0.5, np.float32), 32)


class TestPatches:
    def test_exact_tiling_roundtrip(self):
        rng = np.random.default_rng(0)
        arr = rng.standard_normal((3, 4, 4)).astype(np.float32)
        grid = PatchGrid((4, 4), (2, 2), (2, 2))
        stack = extract_patches(arr, grid)
        assert stack.shape == (4, 3, 2, 2)
        np.testing.assert_array_equal(fold_patches(stack, grid), arr)

    def test_same_padding_patch_count(self):
        grid = PatchGrid((32, 32), (3, 3), (1, 1), "same")
        assert grid.n_patches == 1024
        stack = extract_patches(np.zeros((1, 32, 32), np.float32), grid)
        assert stack.shape[0] == 1024

    def test_level_patch_count(self):
        grid = PatchGrid((128, 128), (4, 4), (4, 4))
        assert grid.n_patches == 1024

    def test_overlapping_fold_averages(self):
        arr = np.ones((1, 4, 4), np.float32) * 3.0
        grid = PatchGrid((4, 4), (2, 2), (1, 1))
        folded = fold_patches(extract_patches(arr, grid), grid)
        np.testing.assert_allclose(folded, arr)

    def test_mismatch_rejected(self):
        grid = PatchGrid((4, 4), (2, 2), (2, 2))
        with pytest.raises(ShapeError):
            extract_patches(np.zeros((1, 6, 6), np.float32), grid)


class TestScores:
    def test_single_context_cell(self):
        hole = np.ones((4, 4), bool)
        hole[0, 0] = False
        part = CellPartition(hole=hole)
        rng = np.random.default_rng(1)
        scores = compute_scores(rng.standard_normal((2, 4, 4)).astype(np.float32), part)
        for j in part.hole_idx:
            assert scores.matrix[0, j] == 1.0

    def test_two_context_cosines_plus_minus_one(self):
        # orthogonal-free toy: one feature channel, isolated cells via a
        # 4x4 grid where only cells (0,0), (0,2), (2,2) are non-zero, so
        # their 3x3 windows reduce to single values
        feats = np.zeros((1, 4, 4), np.float32)
        feats[0, 0, 0] = 2.0  # context, cosine +1 with hole
        feats[0, 0, 2] = -1.0  # context, cosine -1 with hole
        feats[0, 2, 2] = 0.5  # hole cell
        hole = np.zeros((4, 4), bool)
        hole[2, 2] = True
        hole[3, :] = True  # make remaining zero cells holes so they do not vote
        hole[2, :2] = True
        hole[2, 3] = True
        hole[1, :] = True
        hole[0, 1] = True
        hole[0, 3] = True
        part = CellPartition(hole=hole)
        scores = compute_scores(feats, part)
        j = 2 * 4 + 2
        e = math.e
        np.testing.assert_allclose(
            scores.matrix[0 * 4 + 0, j], e / (e + 1 / e), atol=1e-6
        )
        np.testing.assert_allclose(
            scores.matrix[0 * 4 + 2, j], (1 / e) / (e + 1 / e), atol=1e-6
        )

    def test_matrix_shape_1024(self):
        part = partition_cells(make_mask(512, 512, (slice(0, 64), slice(0, 64))), 32)
        rng = np.random.default_rng(2)
        scores = compute_scores(rng.standard_normal((4, 32, 32)).astype(np.float32), part)
        assert scores.matrix.shape == (1024, 1024)

    def test_normalisation_and_range_random(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            g = int(rng.integers(4, 12))
            hole = rng.random((g, g)) < 0.4
            hole.flat[int(rng.integers(g * g))] = False  # keep context nonempty
            part = CellPartition(hole=hole)
            feats = rng.standard_normal((3, g, g)).astype(np.float32)
            s = compute_scores(feats, part)
            m = s.matrix
            assert (m >= 0).all() and (m <= 1).all()
            np.testing.assert_array_equal(m[part.hole_idx, :], 0.0)
            for j in part.hole_idx:
                assert abs(m[part.context_idx, j].sum() - 1.0) <= 1e-5

    def test_zero_feature_map_is_safe(self):
        hole = np.zeros((4, 4), bool)
        hole[1, 1] = True
        part = CellPartition(hole=hole)
        s = compute_scores(np.zeros((2, 4, 4), np.float32), part)
        # all-zero patches give uniform weights, not NaN
        assert abs(s.matrix[part.context_idx, 5].sum() - 1.0) <= 1e-5


class TestTransfer:
    def _toy_scores(self, g, hole, column):
        part = CellPartition(hole=hole)
        matrix = np.zeros((g * g, g * g), np.float32)
        for j in part.hole_idx:
            matrix[:, j] = column
        return AttentionScores(matrix=matrix, partition=part)

    def test_one_hot_copies_patch(self):
        g = 4
        hole = np.zeros((g, g), bool)
        hole[2, 2] = True
        col = np.zeros(g * g, np.float32)
        col[1] = 1.0  # copy from cell (0, 1)
        scores = self._toy_scores(g, hole, col)
        rng = np.random.default_rng(4)
        p = rng.standard_normal((3, 8, 8)).astype(np.float32)
        out = attention_transfer(p, scores, 2)
        np.testing.assert_array_equal(out[:, 4:6, 4:6], p[:, 0:2, 2:4])

    def test_half_half_average(self):
        g = 2
        hole = np.array([[False, False], [False, True]])
        col = np.array([0.5, 0.5, 0.0, 0.0], np.float32)
        scores = self._toy_scores(g, hole, col)
        p = np.zeros((1, 4, 4), np.float32)
        p[0, 0:2, 0:2] = 2.0  # patch A
        p[0, 0:2, 2:4] = 4.0  # patch B
        out = attention_transfer(p, scores, 2)
        np.testing.assert_array_equal(out[0, 2:4, 2:4], np.full((2, 2), 3.0))

    def test_context_unchanged_bit_exact(self):
        rng = np.random.default_rng(5)
        m = make_mask(128, 128, (slice(0, 32), slice(0, 32)))
        part = partition_cells(m, 8)
        feats = rng.standard_normal((2, 8, 8)).astype(np.float32)
        scores = compute_scores(feats, part)
        p = rng.standard_normal((3, 32, 32)).astype(np.float32)
        out = attention_transfer(p, scores, 4)
        for q in part.context_idx:
            qy, qx = divmod(q, 8)
            np.testing.assert_array_equal(
                out[:, qy * 4 : qy * 4 + 4, qx * 4 : qx * 4 + 4],
                p[:, qy * 4 : qy * 4 + 4, qx * 4 : qx * 4 + 4],
            )

    def test_convexity_bound(self):
        rng = np.random.default_rng(6)
        m = make_mask(64, 64, (slice(16, 40), slice(8, 32)))
        part = partition_cells(m, 8)
        feats = rng.standard_normal((2, 8, 8)).astype(np.float32)
        scores = compute_scores(feats, part)
        p = rng.standard_normal((1, 16, 16)).astype(np.float32)
        out = attention_transfer(p, scores, 2)
        u_in = p.reshape(1, 8, 2, 8, 2).transpose(1, 3, 0, 2, 4).reshape(64, -1)
        u_out = out.reshape(1, 8, 2, 8, 2).transpose(1, 3, 0, 2, 4).reshape(64, -1)
        ctx = part.context_idx
        lo = u_in[ctx].min(axis=0) - 1e-5
        hi = u_in[ctx].max(axis=0) + 1e-5
        for j in part.hole_idx:
            assert (u_out[j] >= lo).all() and (u_out[j] <= hi).all()

    def test_empty_mask_transfer_is_identity(self):
        part = CellPartition(hole=np.zeros((4, 4), bool))
        scores = AttentionScores(
            matrix=np.zeros((16, 16), np.float32), partition=part
        )
        p = np.random.default_rng(7).standard_normal((2, 8, 8)).astype(np.float32)
        np.testing.assert_array_equal(attention_transfer(p, scores, 2), p)

    def test_score_sharing_single_computation(self):
        rng = np.random.default_rng(8)
        attention.stats.reset()
        m = make_mask(128, 128, (slice(0, 48), slice(0, 48)))
        part = partition_cells(m, 8)
        scores = compute_scores(rng.standard_normal((4, 8, 8)).astype(np.float32), part)
        for k, size in ((8, 64), (4, 32), (2, 16)):
            attention_transfer(
                rng.standard_normal((2, size, size)).astype(np.float32), scores, k
            )
        assert attention.stats.score_computations == 1


class TestBruteForceEquivalence:
    def test_exhaustive_small_maps(self):
        rng = np.random.default_rng(9)
        for trial in range(50):
            g = int(rng.integers(2, 9))
            hole = rng.random((g, g)) < 0.35
            hole.flat[int(rng.integers(g * g))] = False
            part = CellPartition(hole=hole)
            feats = rng.standard_normal((2, g, g)).astype(np.float32)
            values = rng.standard_normal((3, g, g)).astype(np.float32)
            scores = compute_scores(feats, part)
            ref_scores = brute_force_scores(feats, hole)
            np.testing.assert_allclose(scores.matrix, ref_scores, atol=1e-5)
            out = attention_transfer(values, scores, 1)
            ref_out = brute_force_transfer(values, ref_scores, hole)
            np.testing.assert_allclose(out, ref_out, atol=1e-5)


class TestAggregate:
    def _scores(self, rng, g=8, hole_frac=0.3):
        hole = rng.random((g, g)) < hole_frac
        hole.flat[0] = False
        part = CellPartition(hole=hole)
        feats = rng.standard_normal((2, g, g)).astype(np.float32)
        return compute_scores(feats, part)

    def test_zero_residual(self):
        rng = np.random.default_rng(10)
        scores = self._scores(rng)
        out = aggregate_residuals(np.zeros((3, 256, 256), np.float32), scores)
        np.testing.assert_array_equal(out, 0.0)

    def test_constant_context_fills_constant(self):
        rng = np.random.default_rng(11)
        scores = self._scores(rng)
        res = np.full((3, 64, 64), 0.75, np.float64)
        out = aggregate_residuals(res, scores)
        part = scores.partition
        u = out.reshape(3, 8, 8, 8, 8).transpose(1, 3, 0, 2, 4).reshape(64, -1)
        for j in part.hole_idx:
            np.testing.assert_allclose(u[j], 0.75, atol=1e-9)
        for q in part.context_idx:
            np.testing.assert_array_equal(u[q], 0.0)

    def test_patch_geometry_large(self):
        # a 4096-wide residual over a 32-grid uses 128x128 patches
        scores_part = CellPartition(hole=np.zeros((32, 32), bool))
        scores = AttentionScores(
            matrix=np.zeros((1024, 1024), np.float32), partition=scores_part
        )
        out = aggregate_residuals(np.zeros((1, 4096, 4096), np.float32), scores)
        assert out.shape == (1, 4096, 4096)

    def test_dimension_rule(self):
        rng = np.random.default_rng(12)
        scores = self._scores(rng)
        with pytest.raises(ShapeError):
            aggregate_residuals(np.zeros((3, 100, 100), np.float32), scores)


class TestTransferMatrix:
    def test_identity_on_context(self):
        rng = np.random.default_rng(13)
        hole = np.zeros((4, 4), bool)
        hole[1, 1] = True
        part = CellPartition(hole=hole)
        scores = compute_scores(rng.standard_normal((2, 4, 4)).astype(np.float32), part)
        m = transfer_matrix(scores, keep_context=True)
        for q in part.context_idx:
            row = np.zeros(16)
            row[q] = 1.0
            np.testing.assert_array_equal(m[q], row)
        mz = transfer_matrix(scores, keep_context=False)
        np.testing.assert_array_equal(mz[part.context_idx], 0.0)


class TestDump:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(14)
        scores = TestAggregate()._scores(rng)
        path = tmp_path / "scores.bin"
        dump_scores(scores, path)
        loaded = load_scores_dump(path)
        np.testing.assert_array_equal(loaded, scores.matrix)
        assert "n_context" in (tmp_path / "scores.bin.hdr").read_text()
