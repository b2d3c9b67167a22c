import itertools

import numpy as np
import pytest

from segalign.align import SegmentMatch
from segalign.evaluate import average_precision, dump_map_image, map_eval, segment_f1, sweep_f1


def seg(q0, q1, r0, r1, score=1.0):
    return SegmentMatch(q0, q1, r0, r1, score)


def test_segment_f1_examples():
    gts = {("q", "r"): [seg(0, 10, 5, 15)]}
    assert segment_f1(gts, gts).f1 == 1.0
    empty = segment_f1({}, gts)
    assert empty.precision == 0.0 and empty.f1 == 0.0
    half = segment_f1({("q", "r"): [seg(0, 5, 5, 10)]}, gts)
    assert (half.precision, half.recall) == (1.0, 0.5) and half.f1 == pytest.approx(2 / 3)
    wrong = segment_f1({("q", "r"): [seg(0, 10, 30, 40)]}, gts)
    assert wrong.precision == 0.0 and wrong.recall == 0.0


def test_segment_f1_order_and_relabeling():
    rng = np.random.default_rng(0)
    preds, gts = {}, {}
    for k in range(6):
        q0, r0 = rng.uniform(0, 20, 2)
        gts[f"p{k}"] = [seg(q0, q0 + 8, r0, r0 + 8)]
        preds[f"p{k}"] = [seg(q0 + d, q0 + d + 6, r0 + d, r0 + d + 6, float(rng.random())) for d in rng.uniform(-3, 3, 2)]
    base = segment_f1(preds, gts, 0.3)
    shuffled = {k: v[::-1] for k, v in preds.items()}
    assert segment_f1(shuffled, gts, 0.3).f1 == base.f1
    ren = {f"x{k}": v for k, v in preds.items()}
    reng = {f"x{k}": v for k, v in gts.items()}
    assert segment_f1(ren, reng, 0.3).f1 == base.f1


def test_sweep_examples():
    gts = {"a": [seg(0, 10, 0, 10)]}
    best = sweep_f1({"a": [seg(0, 10, 0, 10, 0.9)]}, gts)
    assert best.f1 == 1.0 and best.threshold <= 0.9
    assert best.pr_points[0][2] == 0.0 and best.pr_points[0][0] > 0.9
    ths = [p[0] for p in best.pr_points]
    assert ths == sorted(ths, reverse=True)


def test_sweep_vs_exhaustive_thresholds():
    rng = np.random.default_rng(1)
    for _ in range(15):
        preds, gts = {}, {}
        for k in range(4):
            q0, r0 = rng.uniform(0, 10, 2)
            gts[k] = [seg(q0, q0 + 6, r0, r0 + 6)]
            preds[k] = [seg(q0 + d, q0 + d + 5, r0 + e, r0 + e + 5, float(rng.integers(1, 6)) / 5)
                        for d, e in rng.uniform(-4, 4, (2, 2))]
        scores = sorted({m.score for v in preds.values() for m in v})
        want = max(segment_f1(preds, gts, t).f1 for t in scores)
        got = sweep_f1(preds, gts)
        assert got.f1 == pytest.approx(want, abs=1e-12)
        assert got.f1 >= segment_f1(preds, gts, 0.5).f1
        assert segment_f1(preds, gts, got.threshold).f1 == pytest.approx(got.f1, abs=1e-12)


def exhaustive_ap(ranked, relevant):
    # precision at each relevant item's rank, written out directly
    ranks = [i + 1 for i, v in enumerate(ranked) if v in relevant]
    return sum(sum(1 for v in ranked[:r] if v in relevant) / r for r in ranks) / len(relevant)


def test_map_examples():
    assert average_precision(["a"] + [f"x{i}" for i in range(9)], {"a"}) == 1.0
    assert average_precision(["a", "x", "b"], {"a", "b"}) == pytest.approx(5 / 6)
    rep = map_eval({"q1": ["a", "b"], "q2": [("c", 0.9)], "q3": ["z"]}, {"q1": {"a"}, "q2": {"c"}})
    assert rep.mAP == 1.0 and rep.skipped_queries == 1


def test_map_all_permutations():
    items = ["a", "b", "c", "d", "e"]
    for rel in ({"a"}, {"b", "d"}, {"a", "c", "e"}):
        for perm in itertools.permutations(items):
            assert average_precision(perm, rel) == pytest.approx(exhaustive_ap(perm, rel), abs=1e-15)


def test_dump_map_image(tmp_path):
    M = np.zeros((6, 8))
    M[2, 3] = 1.0
    dump_map_image(M, tmp_path / "a.ppm", gt_boxes=[(0, 0, 4, 4)], pred_boxes=[(4, 2, 8, 6)])
    data = (tmp_path / "a.ppm").read_bytes()
    header = b"P6\n8 6\n255\n"
    assert data.startswith(header) and len(data) == len(header) + 6 * 8 * 3
    img = np.frombuffer(data[len(header):], np.uint8).reshape(6, 8, 3)
    assert tuple(img[0, 0]) == (0, 255, 0) and tuple(img[2, 4]) == (255, 0, 0)
    assert tuple(img[1, 1]) == (0, 0, 0)
    dump_map_image(M, tmp_path / "b.ppm", gt_boxes=[(0, 0, 4, 4)], pred_boxes=[(4, 2, 8, 6)])
    assert (tmp_path / "b.ppm").read_bytes() == data
