"""Joint keyframe scoring and pattern detection: the scorer's per-frame
confidences (floored by the sparse-uniform mask) weight the similarity map
before detection, and both parts train under one loss."""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import spd
from .errors import DataError
from .keyframe import (EPS, ScorerParams, TeacherParams, novelty_descriptor, quantize_scores, teacher_select,
                       uniform_mask)
from .simmap import SimilarityMap, dense_map, fuse_mask, keyframe_submatrix, tile_offsets
from .spd import DetectOptions, DetectorParams, TrainHyper, TrainingStats

log = logging.getLogger(__name__)

SGSM_MAGIC = b"SGSM"
SGSM_VERSION = 1


@dataclass
class SsanParams:
    scorer: ScorerParams
    detector: DetectorParams


def effective_scores(scores, interval) -> np.ndarray:
    s = np.asarray(getattr(scores, "scores", scores), dtype=np.float64)
    return np.maximum(s, uniform_mask(len(s), interval))


def frame_scores(scorer: ScorerParams, seq, phi=None) -> np.ndarray:
    phi = novelty_descriptor(seq) if phi is None else phi
    z = phi @ scorer.weights + scorer.bias
    return 1.0 / (1.0 + np.exp(-z))


def keyframes(scorer: ScorerParams, seq, threshold: float, interval, phi=None) -> np.ndarray:
    """Quantized keyframe indices of the effective (uniform-floored) scores."""
    return quantize_scores(effective_scores(frame_scores(scorer, seq, phi), interval), threshold)


def ssan_forward(params: SsanParams, pair, S: SimilarityMap | None = None, interval=8,
                 opts: DetectOptions = DetectOptions()):
    """Detections on the keyframe-weighted map of a (query, ref) pair.

    Returns (matches, video_similarity) like :func:`spd.detect_pair`.
    """
    q, r = pair
    S = dense_map(q, r) if S is None else S
    e1 = effective_scores(frame_scores(params.scorer, q), interval)
    e2 = effective_scores(frame_scores(params.scorer, r), interval)
    if (len(e1), len(e2)) != S.shape:
        raise ValueError(f"map {S.shape} does not match pair lengths ({len(e1)}, {len(e2)})")
    return spd.detect_pair(params.detector, S, masks=(e1, e2), opts=opts)


def keyframe_map(S: SimilarityMap, k1, k2) -> SimilarityMap:
    """Inference-time keyframe map: similarities kept only between keyframes."""
    return keyframe_submatrix(S, k1, k2, "zero-fill")


# --- training -----------------------------------------------------------------


@dataclass
class PairSample:
    """Everything a training step needs for one pair, precomputed once."""

    S: np.ndarray  # raw dense map (fixed during training)
    phi_q: np.ndarray
    phi_r: np.ndarray
    labels_q: np.ndarray
    labels_r: np.ndarray
    boxes: np.ndarray  # gt boxes in map cells


def make_sample(pair, teacher: TeacherParams = TeacherParams()) -> PairSample:
    q, r = pair.query, pair.ref
    return PairSample(
        dense_map(q, r).dense(), novelty_descriptor(q), novelty_descriptor(r),
        teacher_select(q, teacher).astype(np.float64), teacher_select(r, teacher).astype(np.float64),
        pair.boxes(),
    )


def _bce(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    p = p.clamp(EPS, 1 - EPS)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()


def _tiles_t(values: torch.Tensor, boxes: np.ndarray, G: int):
    """Differentiable counterpart of prepare_detector_input + tile-local boxes."""
    values = values.clamp(min=0.0)
    rows, cols = values.shape
    out = []
    for r0 in tile_offsets(rows, G):
        for c0 in tile_offsets(cols, G):
            block = values[r0 : r0 + G, c0 : c0 + G]
            tile = F.pad(block, (0, G - block.shape[1], 0, G - block.shape[0]))
            b = np.clip(boxes - np.array([c0, r0, c0, r0], dtype=np.float64), 0.0, float(G))
            ok = (b[:, 2] - b[:, 0] >= 1) & (b[:, 3] - b[:, 1] >= 1)
            out.append((tile, b[ok]))
    return out


def _scorer_tensor(scorer: ScorerParams, dtype) -> torch.Tensor:
    return torch.tensor(scorer.as_vector(), dtype=dtype)


def _loss_terms(theta_s: torch.Tensor, det: DetectorParams, samples: list[PairSample], interval, G: int,
                giou_weight: float = 1.0):
    """(l_ske, l_bce, l_giou) tensors for a batch of pairs."""
    dtype = theta_s.dtype
    l_ske = theta_s.new_zeros(())
    tiles, boxes = [], []
    for s in samples:
        eff = []
        for phi, y in ((s.phi_q, s.labels_q), (s.phi_r, s.labels_r)):
            z = torch.as_tensor(phi, dtype=dtype) @ theta_s[:3] + theta_s[3]
            p = torch.sigmoid(z)
            l_ske = l_ske + _bce(p, torch.as_tensor(y, dtype=dtype)) / len(samples)
            eff.append(torch.maximum(p, torch.as_tensor(uniform_mask(len(phi), interval), dtype=dtype)))
        masked = fuse_mask(torch.as_tensor(s.S, dtype=dtype), eff[0], eff[1])
        for t, b in _tiles_t(masked, s.boxes, G):
            tiles.append(t)
            boxes.append(b)
    preds = spd.forward(det, torch.stack(tiles))
    l_bce, l_giou = spd.spd_loss_terms(preds, boxes, det.config.stride, giou_weight)
    return l_ske, l_bce, l_giou


def ssan_loss(params: SsanParams, sample: PairSample, interval=8) -> TrainingStats:
    """l_ssan = BCE(query scores) + BCE(ref scores) + l_spd on the masked map."""
    det = params.detector
    th = _scorer_tensor(params.scorer, det.dtype)
    with torch.no_grad():
        l_ske, l_bce, l_giou = _loss_terms(th, det, [sample], interval, det.config.input_size,
                                           det.config.giou_weight)
    l_ske, l_bce, l_giou = float(l_ske), float(l_bce), float(l_giou)
    l_spd = l_bce + l_giou
    return TrainingStats(l_bce=l_bce, l_giou=l_giou, l_spd=l_spd, l_ske=l_ske, l_ssan=l_ske + l_spd)


def ssan_grad_check(params: SsanParams, sample: PairSample, interval=8, h: float = 1e-5) -> float:
    """Max relative error of d l_ssan / d scorer params, autograd vs central differences (float64)."""
    det = params.detector.to(torch.float64)
    G = det.config.input_size

    def loss_of(v: np.ndarray, grad: bool = False):
        th = torch.tensor(v, dtype=torch.float64, requires_grad=grad)
        l_ske, l_bce, l_giou = _loss_terms(th, det, [sample], interval, G, det.config.giou_weight)
        return th, l_ske + l_bce + l_giou

    x0 = params.scorer.as_vector()
    th, loss = loss_of(x0, grad=True)
    loss.backward()
    analytic = th.grad.numpy()
    numeric = spd.central_differences(lambda v: float(loss_of(v)[1]), x0, h)
    return float(spd.relative_error(analytic, numeric).max())


@dataclass
class SsanHyper(TrainHyper):
    interval: int | None = 8
    threshold: float = 0.5
    freeze_scorer: bool = False
    scorer_lr: float | None = None
    epochs: int = 20
    warmup_epochs: int = 0


@dataclass
class SsanEpoch:
    epoch: int
    l_ske: float
    l_spd: float
    compression_ratio: float


def train_ssan(samples: list[PairSample], init: SsanParams, hyper: SsanHyper = SsanHyper(),
               dtype=torch.float32, callback=None) -> tuple[SsanParams, list[SsanEpoch]]:
    """Fine-tune scorer and detector jointly from pretrained parts.

    With ``freeze_scorer`` only the detector moves, which is the separately
    trained keyframe-scorer + detector baseline.
    """
    if not samples:
        raise DataError("empty training set")
    torch.manual_seed(hyper.seed)
    det = init.detector.to(dtype).requires_grad_()
    cfg = det.config
    # the scorer stays float64 so a frozen (or untouched) scorer round-trips exactly
    th = _scorer_tensor(init.scorer, torch.float64).requires_grad_(not hyper.freeze_scorer)
    groups = [{"params": list(det.values())}]
    if not hyper.freeze_scorer:
        groups.append({"params": [th], "lr": hyper.scorer_lr or hyper.lr, "weight_decay": 0.0})
    opt = torch.optim.SGD(groups, lr=hyper.lr, momentum=hyper.momentum, nesterov=hyper.momentum > 0,
                          weight_decay=hyper.weight_decay)
    base_lrs = [g["lr"] for g in opt.param_groups]
    rng = np.random.default_rng(hyper.seed)
    history, step = [], 0
    for epoch in range(hyper.epochs):
        scale = spd.lr_at(hyper, epoch) / hyper.lr if hyper.lr else 0.0
        for g, base in zip(opt.param_groups, base_lrs):
            g["lr"] = base * scale
        order = rng.permutation(len(samples))
        tot_ske = tot_spd = 0.0
        for s in range(0, len(samples), hyper.batch):
            batch = [samples[i] for i in order[s : s + hyper.batch]]
            l_ske, l_bce, l_giou = _loss_terms(th, det, batch, hyper.interval, cfg.input_size, cfg.giou_weight)
            loss = l_ske + l_bce + l_giou
            spd._check_finite(float(loss.detach()), step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            w = len(batch) / len(samples)
            tot_ske += w * float(l_ske.detach())
            tot_spd += w * float((l_bce + l_giou).detach())
        scorer = ScorerParams.from_vector(th.detach().double().numpy())
        ratio = float(np.mean([
            len(quantize_scores(effective_scores(1 / (1 + np.exp(-(phi @ scorer.weights + scorer.bias))),
                                                 hyper.interval), hyper.threshold)) / len(phi)
            for smp in samples[: min(len(samples), 64)] for phi in (smp.phi_q, smp.phi_r)
        ]))
        rec = SsanEpoch(epoch, tot_ske, tot_spd, ratio)
        history.append(rec)
        log.info("ssan epoch %d: l_ske=%.4f l_spd=%.4f ratio=%.3f", epoch, tot_ske, tot_spd, ratio)
        if callback is not None:
            callback(rec)
    out = SsanParams(ScorerParams.from_vector(th.detach().double().numpy()), det.requires_grad_(False))
    return out, history


# --- persistence ----------------------------------------------------------------


def save_ssan(params: SsanParams, path, extra: dict | None = None) -> None:
    body = spd.params_to_bytes(params.detector, extra)
    head = SGSM_MAGIC + struct.pack("<I", SGSM_VERSION) + params.scorer.as_vector().astype("<f8").tobytes()
    Path(path).write_bytes(head + body)


def load_ssan(path) -> tuple[SsanParams, dict]:
    data = Path(path).read_bytes()
    if data[:4] != SGSM_MAGIC:
        raise DataError(f"{path}: not an SGSM model")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != SGSM_VERSION:
        raise DataError(f"{path}: unsupported SGSM version {version}")
    scorer = ScorerParams.from_vector(np.frombuffer(data, dtype="<f8", count=4, offset=8))
    det, meta, _ = spd.params_from_bytes(data, 40)
    return SsanParams(scorer, det), meta


def save_scorer(scorer: ScorerParams, path, extra: dict | None = None) -> None:
    import json
    rec = {"weights": scorer.weights.tolist(), "bias": scorer.bias}
    if extra:
        rec.update(extra)
    Path(path).write_text(json.dumps(rec, sort_keys=True))


def load_scorer(path) -> ScorerParams:
    import json
    rec = json.loads(Path(path).read_text())
    return ScorerParams(rec["weights"], rec["bias"])
