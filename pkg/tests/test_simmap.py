import numpy as np
import pytest
import torch

from segalign.features import FeatureSequence, cosine_sim
from segalign.simmap import (apply_keyframe_mask, dense_map, fuse_mask, keyframe_submatrix,
                             prepare_detector_input, sparse_map, tile_offsets, write_pgm)


def seq(rng, n, dim=6, vid="v"):
    return FeatureSequence(vid, 2.0, rng.standard_normal((n, dim)))


def test_self_map_diagonal():
    s = seq(np.random.default_rng(0), 9)
    D = dense_map(s, s).dense()
    assert np.allclose(np.diag(D), 1.0, atol=1e-6)


def test_dense_map_vs_scalar_oracle():
    rng = np.random.default_rng(1)
    a, b = seq(rng, 3, vid="a"), seq(rng, 4, vid="b")
    D = dense_map(a, b).dense()
    for i in range(3):
        for j in range(4):
            assert abs(D[i, j] - cosine_sim(a.vectors[i], b.vectors[j])) <= 1e-6


def test_transpose_exact_and_orthogonal_zero():
    rng = np.random.default_rng(2)
    a, b = seq(rng, 7, vid="a"), seq(rng, 5, vid="b")
    assert np.array_equal(dense_map(a, b).dense().T, dense_map(b, a).dense())
    e0 = FeatureSequence("x", 1.0, np.tile([1.0, 0, 0], (4, 1)))
    e1 = FeatureSequence("y", 1.0, np.tile([0, 1.0, 0], (3, 1)))
    assert not np.any(dense_map(e0, e1).dense())
    with pytest.raises(ValueError):
        dense_map(a, FeatureSequence("z", 1.0, np.ones((2, 3))))


def test_mask_identity_annihilation_and_oracle():
    rng = np.random.default_rng(3)
    S = dense_map(seq(rng, 6, vid="a"), seq(rng, 5, vid="b"))
    assert np.array_equal(apply_keyframe_mask(S, np.ones(6), np.ones(5)).values, S.dense())
    p1 = rng.random(6)
    p1[2] = 0.0
    p2 = rng.random(5)
    m = apply_keyframe_mask(S, p1, p2).values
    assert not np.any(m[2])
    for i in range(6):
        for j in range(5):
            assert abs(m[i, j] - p1[i] * p2[j] * S.dense()[i, j]) <= 1e-7
    with pytest.raises(ValueError):
        apply_keyframe_mask(S, np.ones(5), np.ones(5))


def test_mask_gradient_formula():
    rng = np.random.default_rng(4)
    S = torch.tensor(rng.random((4, 3)), dtype=torch.float64)
    p1 = torch.tensor(rng.random(4), dtype=torch.float64, requires_grad=True)
    p2 = torch.tensor(rng.random(3), dtype=torch.float64)
    W = torch.tensor(rng.standard_normal((4, 3)), dtype=torch.float64)
    (fuse_mask(S, p1, p2) * W).sum().backward()
    want = (W * p2[None, :] * S).sum(1)
    assert torch.allclose(p1.grad, want, atol=1e-12)


def test_sparse_densify_and_masking_commute():
    rng = np.random.default_rng(5)
    D = rng.uniform(-1, 1, (5, 6))
    D[rng.random((5, 6)) < 0.6] = 0.0
    r, c = np.nonzero(D)
    sp = sparse_map("a", "b", (5, 6), (1.0, 1.0), r, c, D[r, c])
    dn = sp.with_values(D, )  # same data, dense
    assert np.array_equal(sp.dense(), D)
    p1, p2 = rng.random(5), rng.random(6)
    assert np.array_equal(apply_keyframe_mask(sp, p1, p2).values, apply_keyframe_mask(dn, p1, p2).values)
    for (t1, o1), (t2, o2) in zip(prepare_detector_input(sp, 16), prepare_detector_input(dn, 16)):
        assert o1 == o2 and np.array_equal(t1, t2)


def test_keyframe_submatrix_modes():
    rng = np.random.default_rng(6)
    S = dense_map(seq(rng, 6, vid="a"), seq(rng, 7, vid="b"))
    assert np.array_equal(keyframe_submatrix(S, range(6), range(7)).dense(), S.dense())
    S2 = dense_map(seq(rng, 2, vid="a"), seq(rng, 2, vid="b"))
    z = keyframe_submatrix(S2, [0], [0]).dense()
    assert z[0, 0] == S2.dense()[0, 0] and np.count_nonzero(z) == 1
    k1, k2 = [1, 4, 5], [0, 3]
    zf = keyframe_submatrix(S, k1, k2, "zero-fill").dense()
    for i in range(6):
        for j in range(7):
            assert zf[i, j] == (S.dense()[i, j] if i in k1 and j in k2 else 0.0)
    dr = keyframe_submatrix(S, k1, k2, "drop")
    assert dr.shape == (3, 2) and np.array_equal(dr.dense(), S.dense()[np.ix_(k1, k2)])
    assert dr.to_original_rows(1.0) == 4 and dr.to_original_cols(2.0, "right") == 4
    with pytest.raises(ValueError):
        keyframe_submatrix(S, [], [0])
    with pytest.raises(IndexError):
        keyframe_submatrix(S, [6], [0])


def test_drop_boxes_map_back_within_one_frame():
    # a box spanning compacted cells [a, b) maps to original frames that the
    # zero-fill map would report for the same kept cells
    rng = np.random.default_rng(7)
    S = dense_map(seq(rng, 30, vid="a"), seq(rng, 30, vid="b"))
    for _ in range(50):
        k = np.sort(rng.choice(30, size=10, replace=False))
        dr = keyframe_submatrix(S, k, k, "drop")
        a, b = sorted(rng.choice(11, size=2, replace=False))
        lo, hi = dr.to_original_rows(float(a), "left"), dr.to_original_rows(float(b), "right")
        assert lo == k[a] and hi == k[b - 1] + 1


def test_tiling_examples_and_coverage():
    assert tile_offsets(128, 128) == [0]
    assert tile_offsets(200, 128) == [0, 72]
    t = prepare_detector_input(np.ones((128, 128)), 128)
    assert len(t) == 1 and t[0][1] == (0, 0)
    t = prepare_detector_input(np.full((16, 16), 0.5), 128)
    assert len(t) == 1 and t[0][0].shape == (128, 128) and t[0][0][:16, :16].min() == 0.5 and t[0][0][16:].max() == 0
    t = prepare_detector_input(np.ones((1, 1)), 8)
    assert t[0][0].shape == (8, 8)
    for n in (129, 200, 300, 513):
        offs = tile_offsets(n, 128)
        covered = np.zeros(n, bool)
        for o in offs:
            covered[o : o + 128] = True
        assert covered.all() and offs[-1] == n - 128
    with pytest.raises(ValueError):
        prepare_detector_input(np.ones((4, 4)), 12)


def test_tiling_clamps_negatives_and_back_projects():
    rng = np.random.default_rng(8)
    D = rng.uniform(-1, 1, (200, 150))
    for tile, (r0, c0) in prepare_detector_input(D, 128):
        blk = np.clip(D[r0 : r0 + 128, c0 : c0 + 128], 0, None).astype(np.float32)
        assert np.array_equal(tile[: blk.shape[0], : blk.shape[1]], blk)


def test_pgm_dump(tmp_path):
    write_pgm(np.array([[0.0, 1.0], [0.5, -1.0]]), tmp_path / "m.pgm")
    data = (tmp_path / "m.pgm").read_bytes()
    assert data.startswith(b"P5\n2 2\n255\n") and data[-4:] == bytes([0, 255, 128, 0])


def test_hold_mode_reads_only_keyframe_pairs():
    rng = np.random.default_rng(9)
    S = dense_map(seq(rng, 9, vid="a"), seq(rng, 7, vid="b"))
    k1, k2 = [2, 5], [0, 4]
    H = keyframe_submatrix(S, k1, k2, "hold").dense()
    D = S.dense()
    own1 = [2, 2, 2, 2, 2, 5, 5, 5, 5]  # rows before the first keyframe borrow it
    own2 = [0, 0, 0, 0, 4, 4, 4]
    for i in range(9):
        for j in range(7):
            assert H[i, j] == D[own1[i], own2[j]]
    assert np.array_equal(keyframe_submatrix(S, range(9), range(7), "hold").dense(), D)
