import json

import numpy as np
import pytest

from segalign.errors import DataError
from segalign.features import FeatureSequence
from segalign.synth import (EditSpec, SynthConfig, apply_spatial_proxy, apply_temporal, dataset_pairs, gen_video,
                            load_dataset, make_dataset, make_pair, make_retrieval_set, pair_seed, self_similarity)

SMALL = SynthConfig(dim=16, length_range=(40, 60), extent_range=(8, 16), low_quality_frac=0.0)


def test_gen_video_trivia():
    still = gen_video(SynthConfig(dim=8, alpha=0.0, noise=0.0, shot_count=1, low_quality_frac=0.0), length=12)
    assert np.allclose(still.vectors, still.vectors[0], atol=1e-7)
    two = gen_video(SynthConfig(dim=64, alpha=0.0, noise=0.0, shot_count=2, low_quality_frac=0.0), seed=3, length=20)
    cos = two.vectors.astype(np.float64) @ two.vectors.astype(np.float64).T
    assert abs(cos[0, -1]) < 0.5  # independent random anchors in 64-d
    a, b = gen_video(SMALL, seed=5), gen_video(SMALL, seed=5)
    assert a.vectors.tobytes() == b.vectors.tobytes()
    with pytest.raises(ValueError):
        SynthConfig(hold_range=(3, 2))


def test_hold_regime_repeats_states():
    cfg = SynthConfig(dim=16, hold_range=(3, 3), jitter=0.0, low_quality_frac=0.0, shot_count=1)
    v = gen_video(cfg, length=12, seed=1).vectors
    for s in (0, 3, 6, 9):
        assert np.array_equal(v[s], v[s + 1]) and np.array_equal(v[s], v[s + 2])
    assert not np.array_equal(v[2], v[3])


def test_temporal_mappings():
    seq = FeatureSequence("s", 2.0, np.random.default_rng(0).standard_normal((10, 4)))
    out, mp = apply_temporal(seq, "accelerate", k=2)
    assert len(out) == 5 and mp.tolist() == [0, 2, 4, 6, 8]
    out, mp = apply_temporal(seq, "decelerate", k=2)
    assert len(out) == 20 and mp.tolist() == [i // 2 for i in range(20)]
    assert np.array_equal(out.vectors, seq.vectors[mp])
    # composition oracle: clip [2, 9) then accelerate(2) shows source frames 2, 4, 6, 8
    clip, m1 = apply_temporal(seq, "clip", start=2, end=9)
    _, m2 = apply_temporal(clip, "accelerate", k=2)
    assert m1[m2].tolist() == [2, 4, 6, 8]
    _, mp = apply_temporal(seq, "drop", p=0.3, seed=4)
    assert np.all(np.diff(mp) > 0)
    with pytest.raises(ValueError):
        apply_temporal(seq, "clip", start=5, end=5)
    with pytest.raises(ValueError):
        apply_temporal(seq, "warp")


def test_spatial_proxy():
    seq = gen_video(SMALL, seed=2)
    assert apply_spatial_proxy(seq, 0.0) is seq
    a = apply_spatial_proxy(seq, 0.05, rotation_seed=1, seed=2)
    b = apply_spatial_proxy(seq, 0.05, rotation_seed=1, seed=2)
    assert a == b
    assert self_similarity(seq, apply_spatial_proxy(seq, 1.0, seed=3)) < 0.9


def test_pair_ground_truth_exact():
    cfg = SMALL
    p = make_pair(cfg, [EditSpec("identity", spatial=False)], seed=11)
    (s,) = p.segments
    q0, r0 = int(s.q_start * cfg.fps), int(s.r_start * cfg.fps)
    n = int(round((s.q_end - s.q_start) * cfg.fps))
    assert np.array_equal(p.query.vectors[q0 : q0 + n], p.ref.vectors[r0 : r0 + n])
    acc = make_pair(cfg, [EditSpec("accelerate", spatial=False)], seed=12).segments[0]
    assert (acc.r_end - acc.r_start) == pytest.approx(2 * (acc.q_end - acc.q_start), abs=1 / cfg.fps)
    two = make_pair(cfg, ["clip", "decelerate"], seed=13).segments
    assert len(two) == 2
    a, b = sorted(two, key=lambda m: m.q_start)
    assert a.q_end <= b.q_start


def test_dataset_determinism_and_regeneration(tmp_path):
    m1 = make_dataset(tmp_path / "a", 4, SMALL, seed=3)
    make_dataset(tmp_path / "b", 4, SMALL, seed=3)
    for f in ("features.sgaf", "annotations.txt", "manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    ds = load_dataset(tmp_path / "a")
    assert len(ds.store) == 2 * m1["n_pairs"] and len(ds.pairs()) == 4
    regen = dataset_pairs(4, SMALL, seed=3)[2]
    stored = ds.pairs()[2]
    assert stored.query == regen.query and stored.ref == regen.ref
    assert [(round(s.q_start, 3), round(s.r_end, 3)) for s in stored.segments] == \
        [(round(s.q_start, 3), round(s.r_end, 3)) for s in regen.segments]
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["seed"] == 3
    with pytest.raises(DataError):
        load_dataset(tmp_path / "missing")


def test_pair_seed_independent_of_order():
    assert pair_seed(1, 5) == pair_seed(1, 5) != pair_seed(1, 6)
    assert dataset_pairs(3, SMALL, seed=9)[2].query == dataset_pairs(5, SMALL, seed=9)[2].query


def test_retrieval_set_annotations_point_at_copies():
    gallery, queries, ann = make_retrieval_set(SMALL, n_gallery=6, n_queries=4, seed=1)
    assert len(gallery) == 6 and len(queries) == 4 and ann
    gal = {g.video_id: g for g in gallery}
    for (qid, gid), segs in ann.items():
        q = next(x for x in queries if x.video_id == qid)
        for s in segs:
            qi, ri = int(s.q_start * SMALL.fps), int(s.r_start * SMALL.fps)
            c = float(q.vectors[qi].astype(np.float64) @ gal[gid].vectors[ri].astype(np.float64))
            assert c > 0.5
