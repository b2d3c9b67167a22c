import math

import numpy as np
import pytest
import torch

from segalign.features import FeatureSequence
from segalign.keyframe import ScorerParams, score_frames, ske_loss, uniform_mask
from segalign.simmap import apply_keyframe_mask, dense_map, prepare_detector_input
from segalign.spd import (DetectorConfig, detect_pair, detect_values, detection_to_match, init_params, map_samples,
                          spd_loss, forward)
from segalign.ssan import (PairSample, SsanHyper, SsanParams, effective_scores, load_scorer, load_ssan, make_sample,
                           save_scorer, save_ssan, ssan_forward, ssan_grad_check, ssan_loss, train_ssan)
from segalign.synth import SynthConfig, dataset_pairs

TINY = DetectorConfig(input_size=16, channels=(1, 2, 2, 2))


def walk(rng, n, dim=8, vid="v"):
    x = np.cumsum(0.4 * rng.standard_normal((n, dim)), axis=0) + rng.standard_normal(dim)
    return FeatureSequence(vid, 2.0, x)


def random_detector(cfg, seed, scale=0.3):
    rng = np.random.default_rng(seed)
    theta = init_params(cfg, torch.float64)
    for k in theta:
        theta[k] = theta[k] + scale * torch.tensor(rng.standard_normal(theta[k].shape))
    theta["bh"][0] = 1.0  # fire often so detections are not empty
    return theta


def random_sample(rng, n=20, m=18):
    S = rng.uniform(-0.2, 1.0, (n, m))
    return PairSample(S, rng.random((n, 3)), rng.random((m, 3)), rng.integers(0, 2, n).astype(float),
                      rng.integers(0, 2, m).astype(float), np.array([[2.0, 3.0, 12.0, 14.0]]))


def test_identity_mask_equivalence():
    rng = np.random.default_rng(0)
    det = random_detector(DetectorConfig(input_size=32), 1)
    ones = SsanParams(ScorerParams([0.0, 0.0, 0.0], 50.0), det)
    for _ in range(10):
        q, r = walk(rng, int(rng.integers(10, 70)), vid="q"), walk(rng, int(rng.integers(10, 70)), vid="r")
        S = dense_map(q, r)
        assert ssan_forward(ones, (q, r), S) == detect_pair(det, S)


def test_zero_scorer_infinite_interval_is_empty():
    rng = np.random.default_rng(1)
    det = random_detector(DetectorConfig(input_size=32), 2)
    zeros = SsanParams(ScorerParams([0.0, 0.0, 0.0], -1000.0), det)
    q, r = walk(rng, 40, vid="q"), walk(rng, 30, vid="r")
    with np.errstate(over="ignore"):
        assert ssan_forward(zeros, (q, r), interval=math.inf) == ([], 0.0)
        with pytest.raises(ValueError):
            ssan_forward(zeros, (q, r), dense_map(q, q))


def test_composition_oracle():
    rng = np.random.default_rng(2)
    det = random_detector(DetectorConfig(input_size=32), 3)
    for k in range(5):
        scorer = ScorerParams(rng.standard_normal(3), float(rng.standard_normal()))
        q, r = walk(rng, 45, vid="q"), walk(rng, 37, vid="r")
        S = dense_map(q, r)
        e1 = np.maximum(score_frames(q, scorer).scores, uniform_mask(len(q), 8))
        e2 = np.maximum(score_frames(r, scorer).scores, uniform_mask(len(r), 8))
        masked = apply_keyframe_mask(S, e1, e2).values
        dets = detect_values(det, masked)
        want = [detection_to_match(S, d) for d in dets]
        got, sim = ssan_forward(SsanParams(scorer, det), (q, r), S, interval=8)
        assert got == want and sim == max((m.score for m in want), default=0.0)


def test_loss_decomposition():
    rng = np.random.default_rng(3)
    det = random_detector(TINY, 4)
    for _ in range(5):
        s = random_sample(rng)
        scorer = ScorerParams(rng.standard_normal(3), float(rng.standard_normal()))
        st = ssan_loss(SsanParams(scorer, det), s, interval=8)
        # independent route: keyframe BCE per video, plus the plain detector loss on the masked map
        pq = 1 / (1 + np.exp(-(s.phi_q @ scorer.weights + scorer.bias)))
        pr = 1 / (1 + np.exp(-(s.phi_r @ scorer.weights + scorer.bias)))
        l_ske = ske_loss(pq, s.labels_q) + ske_loss(pr, s.labels_r)
        e1, e2 = effective_scores(pq, 8), effective_scores(pr, 8)
        masked = e1[:, None] * e2[None, :] * s.S
        tiles = map_samples(masked, s.boxes, 16)
        preds = forward(det, np.stack([t.astype(np.float64) for t, _ in tiles]))
        sp = spd_loss(preds, [b for _, b in tiles])
        assert abs(st.l_ske - l_ske) <= 1e-9
        assert abs(st.l_spd - sp.l_spd) <= 1e-6  # tiles above are float32, the training path is float64
        assert abs(st.l_ssan - (st.l_ske + st.l_spd)) <= 1e-9


def test_perfect_scorer_saturated_detector():
    rng = np.random.default_rng(4)
    det = init_params(TINY, torch.float64, zero=True)
    det["bh"][0] = -20.0
    lq, lr = rng.integers(0, 2, 12).astype(float), rng.integers(0, 2, 10).astype(float)
    phi_q = np.stack([lq, np.zeros(12), np.zeros(12)], 1)
    phi_r = np.stack([lr, np.zeros(10), np.zeros(10)], 1)
    s = PairSample(rng.random((12, 10)), phi_q, phi_r, lq, lr, np.zeros((0, 4)))
    st = ssan_loss(SsanParams(ScorerParams([40.0, 0.0, 0.0], -20.0), det), s)
    assert st.l_ske <= 1e-6 and st.l_ssan <= 1e-6
    assert abs(st.l_ssan - st.l_ske) <= 1e-6


def test_scorer_grad_check():
    rng = np.random.default_rng(5)
    det = random_detector(TINY, 6, scale=0.2)
    for _ in range(3):
        s = random_sample(rng)
        scorer = ScorerParams(rng.standard_normal(3), float(rng.standard_normal()))
        assert ssan_grad_check(SsanParams(scorer, det), s, interval=8) < 1e-4


def test_monotone_masking():
    rng = np.random.default_rng(6)
    S = dense_map(walk(rng, 30, vid="q"), walk(rng, 25, vid="r"))
    p1, p2 = rng.random(30), rng.random(25)
    base = prepare_detector_input(apply_keyframe_mask(S, p1, p2).values, 16)
    for i in rng.choice(30, 5, replace=False):
        z = p1.copy()
        z[i] = 0.0
        for (a, _), (b, _) in zip(prepare_detector_input(apply_keyframe_mask(S, z, p2).values, 16), base):
            assert np.all(a <= b)


def small_training_set(n=6):
    pairs = dataset_pairs(n, SynthConfig(length_range=(20, 30), extent_range=(6, 10)), seed=7)
    return [make_sample(p) for p in pairs]


def test_train_ssan_zero_epochs_and_determinism():
    samples = small_training_set()
    init = SsanParams(ScorerParams([0.5, 1.0, -0.5], 0.1), init_params(DetectorConfig(input_size=32)))
    out, hist = train_ssan(samples, init, SsanHyper(epochs=0))
    assert hist == [] and out.detector.equal(init.detector)
    assert np.array_equal(out.scorer.as_vector(), init.scorer.as_vector())
    a, ha = train_ssan(samples, init, SsanHyper(epochs=2, batch=3, seed=1))
    b, hb = train_ssan(samples, init, SsanHyper(epochs=2, batch=3, seed=1))
    assert a.detector.equal(b.detector) and np.array_equal(a.scorer.as_vector(), b.scorer.as_vector())
    assert ha == hb and len(ha) == 2 and 0 < ha[0].compression_ratio <= 1
    assert not np.array_equal(a.scorer.as_vector(), init.scorer.as_vector())
    frozen, _ = train_ssan(samples, init, SsanHyper(epochs=2, batch=3, freeze_scorer=True))
    assert np.array_equal(frozen.scorer.as_vector(), init.scorer.as_vector())
    assert not frozen.detector.equal(init.detector)


def test_persistence(tmp_path):
    params = SsanParams(ScorerParams([0.25, -1.5, 2.0], 0.125), init_params(DetectorConfig(input_size=64)))
    save_ssan(params, tmp_path / "m.sgsm", {"config_hash": "x"})
    got, meta = load_ssan(tmp_path / "m.sgsm")
    assert got.detector.equal(params.detector) and meta["config_hash"] == "x"
    assert np.array_equal(got.scorer.as_vector(), params.scorer.as_vector())
    save_scorer(params.scorer, tmp_path / "s.json")
    assert np.array_equal(load_scorer(tmp_path / "s.json").as_vector(), params.scorer.as_vector())
