"""Similarity pattern detection: a small anchor-free detector over similarity
maps, trained with objectness BCE plus GIoU box regression."""
from __future__ import annotations

import json
import logging
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .align import SegmentMatch
from .errors import DataError, DivergenceError
from .simmap import SimilarityMap, prepare_detector_input

log = logging.getLogger(__name__)

SGDM_MAGIC = b"SGDM"
SGDM_VERSION = 1
PARAM_ORDER = ("w1", "b1", "w2", "b2", "w3", "b3", "wh", "bh")


@dataclass(frozen=True)
class DetectorConfig:
    input_size: int = 128
    channels: tuple[int, int, int, int] = (1, 8, 16, 16)
    stride: int = 8
    seed: int = 0
    giou_weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) != 4 or self.channels[0] != 1:
            raise ValueError("channels must be (1, c1, c2, c3)")
        if self.stride != 8:
            raise ValueError("three 2x2 pooling stages give a stride of 8")
        if self.input_size % self.stride:
            raise ValueError(f"input_size {self.input_size} is not divisible by {self.stride}")

    @property
    def grid(self) -> int:
        return self.input_size // self.stride


class DetectorParams(OrderedDict):
    """Named parameter tensors in :data:`PARAM_ORDER`."""

    def __init__(self, *args, config: DetectorConfig | None = None, **kw):
        super().__init__(*args, **kw)
        self.config = config

    def to(self, dtype) -> "DetectorParams":
        return DetectorParams(((k, v.detach().to(dtype).clone()) for k, v in self.items()), config=self.config)

    def clone(self) -> "DetectorParams":
        return DetectorParams(((k, v.detach().clone()) for k, v in self.items()), config=self.config)

    def requires_grad_(self, flag: bool = True) -> "DetectorParams":
        for v in self.values():
            v.requires_grad_(flag)
        return self

    @property
    def dtype(self):
        return self["w1"].dtype

    def equal(self, other: "DetectorParams") -> bool:
        return list(self) == list(other) and all(torch.equal(self[k], other[k]) for k in self)

    def n_params(self) -> int:
        return sum(v.numel() for v in self.values())


def init_params(cfg: DetectorConfig, dtype=torch.float32, zero: bool = False) -> DetectorParams:
    """He-uniform kernels, zero biases, from a fixed numpy seed."""
    rng = np.random.default_rng(cfg.seed)
    c0, c1, c2, c3 = cfg.channels
    shapes = {"w1": (c1, c0, 3, 3), "w2": (c2, c1, 3, 3), "w3": (c3, c2, 3, 3), "wh": (5, c3, 1, 1)}
    p = DetectorParams(config=cfg)
    for name in PARAM_ORDER:
        if name.startswith("w"):
            shape = shapes[name]
            fan_in = shape[1] * shape[2] * shape[3]
            bound = math.sqrt(6.0 / fan_in)
            w = np.zeros(shape) if zero else rng.uniform(-bound, bound, size=shape)
            p[name] = torch.tensor(w, dtype=dtype)
        else:
            p[name] = torch.zeros(shapes["w" + name[1:]][0], dtype=dtype)
    if not zero:
        # the head starts near "nothing here" so early BCE is not swamped by negatives
        p["wh"][1:] *= 0.1
        p["bh"][0] = -4.0
    return p


def forward(theta: DetectorParams, tiles) -> torch.Tensor:
    """(B, G, G) or (B, 1, G, G) tiles -> (B, 5, G/8, G/8) raw predictions.

    Channels: objectness logit, tx, ty, tw, th.
    """
    x = torch.as_tensor(tiles, dtype=theta.dtype)
    if x.dim() == 2:
        x = x[None]
    if x.dim() == 3:
        x = x[:, None]
    cfg = theta.config
    if cfg is not None and tuple(x.shape[-2:]) != (cfg.input_size, cfg.input_size):
        raise ValueError(f"tile shape {tuple(x.shape[-2:])} != configured {cfg.input_size}")
    if x.shape[-1] % 8 or x.shape[-2] % 8:
        raise ValueError("tile sides must be multiples of 8")
    for k in ("1", "2", "3"):
        x = F.max_pool2d(F.relu(F.conv2d(x, theta["w" + k], theta["b" + k], padding=1)), 2)
    return F.conv2d(x, theta["wh"], theta["bh"])


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]  # x1, y1, x2, y2; x = ref axis, y = query axis
    score: float


def decode_boxes(preds: torch.Tensor, stride: int = 8, size: int | None = None) -> torch.Tensor:
    """(B, 5, g, g) -> (B, g, g, 4) boxes in tile pixels, clamped to the tile."""
    B, _, g, _ = preds.shape
    size = g * stride if size is None else size
    v, u = torch.meshgrid(torch.arange(g, dtype=preds.dtype), torch.arange(g, dtype=preds.dtype), indexing="ij")
    cx = (u + 0.5 + torch.tanh(preds[:, 1])) * stride
    cy = (v + 0.5 + torch.tanh(preds[:, 2])) * stride
    w = stride * torch.exp(torch.clamp(preds[:, 3], max=10.0))
    h = stride * torch.exp(torch.clamp(preds[:, 4], max=10.0))
    box = torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)
    return box.clamp(0.0, float(size))


def decode(preds, offset=(0, 0), G: int | None = None, stride: int = 8, min_score: float = 0.0) -> list[Detection]:
    """Raw predictions of one tile -> detections in map cells (tile offset added).

    ``offset`` is (row, col) as produced by :func:`prepare_detector_input`.
    """
    p = torch.as_tensor(preds)
    if p.dim() == 3:
        p = p[None]
    boxes = decode_boxes(p, stride, G)[0].reshape(-1, 4).detach().cpu().numpy().astype(np.float64)
    scores = torch.sigmoid(p[0, 0]).reshape(-1).detach().cpu().numpy().astype(np.float64)
    r0, c0 = offset
    out = []
    for b, s in zip(boxes, scores):
        if s < min_score or not (b[0] < b[2] and b[1] < b[3]):
            continue
        out.append(Detection((b[0] + c0, b[1] + r0, b[2] + c0, b[3] + r0), float(s)))
    return out


def encode(box, u: int, v: int, stride: int = 8) -> np.ndarray:
    """Inverse of the box part of :func:`decode` for an unclamped box at cell (u, v)."""
    x1, y1, x2, y2 = box
    cx, cy = (x1 + x2) / 2 / stride, (y1 + y2) / 2 / stride
    return np.array([
        math.atanh(cx - u - 0.5), math.atanh(cy - v - 0.5),
        math.log((x2 - x1) / stride), math.log((y2 - y1) / stride),
    ])


def giou(a, b) -> float:
    ax1, ay1, ax2, ay2 = (float(t) for t in a)
    bx1, by1, bx2, by2 = (float(t) for t in b)
    area_a = max(ax2 - ax1, 0.0) * max(ay2 - ay1, 0.0)
    area_b = max(bx2 - bx1, 0.0) * max(by2 - by1, 0.0)
    inter = max(min(ax2, bx2) - max(ax1, bx1), 0.0) * max(min(ay2, by2) - max(ay1, by1), 0.0)
    union = area_a + area_b - inter
    hull = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    iou = inter / union if union > 0 else 0.0
    return iou - (hull - union) / hull if hull > 0 else iou


def iou(a, b) -> float:
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    inter = max(min(ax2, bx2) - max(ax1, bx1), 0.0) * max(min(ay2, by2) - max(ay1, by1), 0.0)
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else 0.0


def giou_t(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-wise GIoU of (N, 4) box tensors."""
    area_a = (a[:, 2] - a[:, 0]).clamp(min=0) * (a[:, 3] - a[:, 1]).clamp(min=0)
    area_b = (b[:, 2] - b[:, 0]).clamp(min=0) * (b[:, 3] - b[:, 1]).clamp(min=0)
    iw = (torch.minimum(a[:, 2], b[:, 2]) - torch.maximum(a[:, 0], b[:, 0])).clamp(min=0)
    ih = (torch.minimum(a[:, 3], b[:, 3]) - torch.maximum(a[:, 1], b[:, 1])).clamp(min=0)
    inter = iw * ih
    union = area_a + area_b - inter
    hull = (torch.maximum(a[:, 2], b[:, 2]) - torch.minimum(a[:, 0], b[:, 0])) * (
        torch.maximum(a[:, 3], b[:, 3]) - torch.minimum(a[:, 1], b[:, 1]))
    iou_ = torch.where(union > 0, inter / union.clamp(min=1e-300), torch.zeros_like(union))
    return torch.where(hull > 0, iou_ - (hull - union) / hull.clamp(min=1e-300), iou_)


@dataclass
class TrainingStats:
    l_bce: float = 0.0
    l_giou: float = 0.0
    l_spd: float = 0.0
    l_ske: float = 0.0
    l_ssan: float = 0.0


def assign_targets(gt_boxes, grid: int, stride: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Positive cells are those whose center lies inside a gt box; each goes to
    the gt with the nearest center (ties to the lower gt index).

    Returns (objectness targets (g, g), assigned gt index (g, g) or -1).
    """
    assigned = np.full((grid, grid), -1, dtype=np.int64)
    gts = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(gts) == 0:
        return np.zeros((grid, grid)), assigned
    centers = (np.arange(grid) + 0.5) * stride
    cy, cx = np.meshgrid(centers, centers, indexing="ij")
    inside = ((cx[..., None] >= gts[:, 0]) & (cx[..., None] < gts[:, 2])
              & (cy[..., None] >= gts[:, 1]) & (cy[..., None] < gts[:, 3]))
    gcx, gcy = (gts[:, 0] + gts[:, 2]) / 2, (gts[:, 1] + gts[:, 3]) / 2
    d2 = (cx[..., None] - gcx) ** 2 + (cy[..., None] - gcy) ** 2
    d2 = np.where(inside, d2, np.inf)
    pos = inside.any(-1)
    assigned[pos] = np.argmin(d2, axis=-1)[pos]
    return pos.astype(np.float64), assigned


def spd_loss_terms(preds: torch.Tensor, gt_boxes: list, stride: int = 8, giou_weight: float = 1.0):
    """Differentiable (l_bce, l_giou) over a batch; ``gt_boxes`` holds one
    (k, 4) array of tile-pixel boxes per sample."""
    B, _, g, _ = preds.shape
    targets = np.zeros((B, g, g))
    pos_gt = []
    pos_idx = []
    for b, gts in enumerate(gt_boxes):
        t, a = assign_targets(gts, g, stride)
        targets[b] = t
        vs, us = np.nonzero(a >= 0)
        gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
        for v, u in zip(vs, us):
            pos_idx.append((b, v, u))
            pos_gt.append(gts[a[v, u]])
    obj = preds[:, 0]
    l_bce = F.binary_cross_entropy_with_logits(obj, torch.as_tensor(targets, dtype=preds.dtype))
    if pos_idx:
        boxes = decode_boxes(preds, stride, g * stride)
        bi, vi, ui = (torch.as_tensor(c) for c in zip(*pos_idx))
        pred_boxes = boxes[bi, vi, ui]
        l_giou = giou_weight * (1.0 - giou_t(pred_boxes, torch.as_tensor(np.array(pos_gt), dtype=preds.dtype))).mean()
    else:
        l_giou = preds.new_zeros(())
    return l_bce, l_giou


def spd_loss(preds, gt_boxes, stride: int = 8, giou_weight: float = 1.0) -> TrainingStats:
    preds = torch.as_tensor(preds)
    if preds.dim() == 3:
        preds, gt_boxes = preds[None], [gt_boxes]
    l_bce, l_giou = spd_loss_terms(preds, gt_boxes, stride, giou_weight)
    l_bce, l_giou = float(l_bce), float(l_giou)
    return TrainingStats(l_bce=l_bce, l_giou=l_giou, l_spd=l_bce + l_giou)


@dataclass
class TrainHyper:
    lr: float = 0.01
    momentum: float = 0.937
    weight_decay: float = 0.0005
    epochs: int = 60
    batch: int = 16
    seed: int = 0
    augment: bool = True
    warmup_epochs: int = 2
    cosine: bool = True


def make_optimizer(params, hyper: TrainHyper):
    return torch.optim.SGD(params, lr=hyper.lr, momentum=hyper.momentum,
                           nesterov=hyper.momentum > 0, weight_decay=hyper.weight_decay)


def lr_at(hyper: TrainHyper, epoch: float) -> float:
    if hyper.warmup_epochs and epoch < hyper.warmup_epochs:
        return hyper.lr * (epoch + 1) / (hyper.warmup_epochs + 1)
    if not hyper.cosine or hyper.epochs <= 1:
        return hyper.lr
    t = (epoch - hyper.warmup_epochs) / max(hyper.epochs - hyper.warmup_epochs, 1)
    return hyper.lr * (0.05 + 0.95 * 0.5 * (1 + math.cos(math.pi * t)))


def transpose_sample(tile: np.ndarray, boxes: np.ndarray):
    """Swap query and reference roles: transpose the map and mirror boxes."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return tile.T.copy(), b[:, [1, 0, 3, 2]]


def _check_finite(value: float, step: int):
    if not math.isfinite(value):
        raise DivergenceError(f"loss became {value} at step {step}")


def train_spd(dataset, cfg: DetectorConfig = DetectorConfig(), hyper: TrainHyper = TrainHyper(),
              init: DetectorParams | None = None, dtype=torch.float32, callback=None) -> DetectorParams:
    """Train on ``dataset``: a list of (G x G tile, (k, 4) gt boxes) pairs."""
    if not dataset:
        raise DataError("empty training set")
    torch.manual_seed(hyper.seed)
    theta = (init.to(dtype) if init is not None else init_params(cfg, dtype)).requires_grad_()
    theta.config = cfg
    opt = make_optimizer(list(theta.values()), hyper)
    rng = np.random.default_rng(hyper.seed)
    tiles = np.stack([np.asarray(t, dtype=np.float32) for t, _ in dataset])
    boxes = [np.asarray(b, dtype=np.float64).reshape(-1, 4) for _, b in dataset]
    n, step = len(dataset), 0
    for epoch in range(hyper.epochs):
        for grp in opt.param_groups:
            grp["lr"] = lr_at(hyper, epoch)
        order = rng.permutation(n)
        flips = rng.random(n) < 0.5 if hyper.augment else np.zeros(n, dtype=bool)
        total = TrainingStats()
        for s in range(0, n, hyper.batch):
            idx = order[s : s + hyper.batch]
            bt, bb = [], []
            for i in idx:
                t, b = (transpose_sample(tiles[i], boxes[i]) if flips[i] else (tiles[i], boxes[i]))
                bt.append(t)
                bb.append(b)
            preds = forward(theta, np.stack(bt))
            l_bce, l_giou = spd_loss_terms(preds, bb, cfg.stride, cfg.giou_weight)
            loss = l_bce + l_giou
            _check_finite(loss.item(), step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            w = len(idx) / n
            total.l_bce += w * l_bce.item()
            total.l_giou += w * l_giou.item()
        total.l_spd = total.l_bce + total.l_giou
        log.info("spd epoch %d: l_bce=%.4f l_giou=%.4f", epoch, total.l_bce, total.l_giou)
        if callback is not None:
            callback(epoch, total)
    return theta.requires_grad_(False)


def flat_params(theta: DetectorParams) -> list[tuple[str, int]]:
    return [(k, i) for k, v in theta.items() for i in range(v.numel())]


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - b| / max(|a|, |b|, floor); the floor keeps exact-zero gradients from
    turning roundoff into a relative error of 1."""
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def central_differences(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at flat vector ``x``."""
    g = np.empty_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def pack(theta: DetectorParams) -> np.ndarray:
    return np.concatenate([v.detach().cpu().numpy().ravel() for v in theta.values()]).astype(np.float64)


def unpack(x: np.ndarray, like: DetectorParams) -> DetectorParams:
    out, pos = DetectorParams(config=like.config), 0
    for k, v in like.items():
        out[k] = torch.tensor(x[pos : pos + v.numel()].reshape(v.shape), dtype=v.dtype)
        pos += v.numel()
    return out


def grad_check(theta: DetectorParams, sample, h: float = 1e-5) -> float:
    """Max relative error between autograd and central differences of l_spd
    with respect to every detector parameter (run in float64)."""
    tile, boxes = sample
    theta = theta.to(torch.float64)
    stride = theta.config.stride if theta.config else 8

    def loss_of(p: DetectorParams):
        preds = forward(p, np.asarray(tile, dtype=np.float64)[None])
        l_bce, l_giou = spd_loss_terms(preds, [boxes], stride)
        return l_bce + l_giou

    p = theta.clone().requires_grad_()
    loss_of(p).backward()
    analytic = np.concatenate([v.grad.numpy().ravel() for v in p.values()])
    numeric = central_differences(lambda x: float(loss_of(unpack(x, theta))), pack(theta), h)
    return float(relative_error(analytic, numeric).max())


def nms(dets: list[Detection], iou_threshold: float = 0.5, max_keep: int | None = None) -> list[Detection]:
    """Greedy NMS; ties in score are broken by box coordinates."""
    if not dets:
        return []
    boxes = np.array([d.box for d in dets], dtype=np.float64)
    scores = np.array([d.score for d in dets])
    order = np.lexsort((boxes[:, 3], boxes[:, 2], boxes[:, 1], boxes[:, 0], -scores))
    area = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    keep = []
    alive = np.ones(len(dets), dtype=bool)
    for i in order:
        if not alive[i]:
            continue
        keep.append(i)
        if max_keep is not None and len(keep) >= max_keep:
            break
        iw = np.clip(np.minimum(boxes[i, 2], boxes[:, 2]) - np.maximum(boxes[i, 0], boxes[:, 0]), 0, None)
        ih = np.clip(np.minimum(boxes[i, 3], boxes[:, 3]) - np.maximum(boxes[i, 1], boxes[:, 1]), 0, None)
        inter = iw * ih
        ov = inter / np.maximum(area[i] + area - inter, 1e-12)
        alive &= ~(ov > iou_threshold)
    return [dets[i] for i in keep]


@dataclass
class DetectOptions:
    min_score: float = 0.05
    nms_iou: float = 0.5
    max_dets: int = 20


def detect_values(theta: DetectorParams, values: np.ndarray, opts: DetectOptions = DetectOptions()) -> list[Detection]:
    """Detections in map-cell coordinates of a dense value matrix."""
    cfg = theta.config or DetectorConfig()
    if values.size == 0 or not np.any(values > 0):
        return []
    tiles = prepare_detector_input(values, cfg.input_size, cfg.stride)
    with torch.no_grad():
        preds = forward(theta, np.stack([t for t, _ in tiles]))
    rows, cols = values.shape
    dets = []
    for k, (_, off) in enumerate(tiles):
        for d in decode(preds[k], off, cfg.input_size, cfg.stride, opts.min_score):
            x1, y1, x2, y2 = d.box
            x1, x2 = min(max(x1, 0.0), cols), min(max(x2, 0.0), cols)
            y1, y2 = min(max(y1, 0.0), rows), min(max(y2, 0.0), rows)
            if x1 < x2 and y1 < y2:
                dets.append(Detection((x1, y1, x2, y2), d.score))
    return nms(dets, opts.nms_iou, opts.max_dets)


def detection_to_match(M: SimilarityMap, d: Detection) -> SegmentMatch:
    x1, y1, x2, y2 = d.box
    q0, q1 = M.to_original_rows(y1, "left"), M.to_original_rows(y2, "right")
    r0, r1 = M.to_original_cols(x1, "left"), M.to_original_cols(x2, "right")
    return SegmentMatch(float(q0) / M.row_fps, float(q1) / M.row_fps,
                        float(r0) / M.col_fps, float(r1) / M.col_fps, d.score)


def detect_pair(theta: DetectorParams, M: SimilarityMap, masks=None,
                opts: DetectOptions = DetectOptions()) -> tuple[list[SegmentMatch], float]:
    """Segments found in a pair's map plus the video similarity (best box score).

    ``masks`` is an optional (row_scores, col_scores) pair fused into the map.
    """
    values = M.dense()
    if masks is not None:
        r, c = (np.asarray(getattr(m, "scores", m), dtype=np.float64) for m in masks)
        values = r[:, None] * c[None, :] * values
    dets = detect_values(theta, values, opts)
    matches = [detection_to_match(M, d) for d in dets]
    return matches, max((m.score for m in matches), default=0.0)


def _config_block(cfg: DetectorConfig, extra: dict | None = None) -> bytes:
    meta = {"config": asdict(cfg)}
    if extra:
        meta.update(extra)
    return json.dumps(meta, sort_keys=True).encode("utf-8")


def params_to_bytes(theta: DetectorParams, extra: dict | None = None) -> bytes:
    cfg = theta.config or DetectorConfig()
    meta = _config_block(cfg, extra)
    out = [SGDM_MAGIC, struct.pack("<II", SGDM_VERSION, len(meta)), meta]
    for k in PARAM_ORDER:
        out.append(theta[k].detach().cpu().numpy().astype("<f4").tobytes())
    return b"".join(out)


def params_from_bytes(data: bytes, offset: int = 0) -> tuple[DetectorParams, dict, int]:
    if data[offset : offset + 4] != SGDM_MAGIC:
        raise DataError("not an SGDM model")
    version, n = struct.unpack_from("<II", data, offset + 4)
    if version != SGDM_VERSION:
        raise DataError(f"unsupported SGDM version {version}")
    pos = offset + 12
    meta = json.loads(data[pos : pos + n].decode("utf-8"))
    pos += n
    cfg = DetectorConfig(**meta["config"])
    shapes = init_params(cfg, zero=True)
    theta = DetectorParams(config=cfg)
    for k in PARAM_ORDER:
        cnt = shapes[k].numel()
        arr = np.frombuffer(data, dtype="<f4", count=cnt, offset=pos).reshape(shapes[k].shape)
        theta[k] = torch.tensor(arr.copy(), dtype=torch.float32)
        pos += 4 * cnt
    return theta, meta, pos


def save_model(theta: DetectorParams, path, extra: dict | None = None) -> None:
    Path(path).write_bytes(params_to_bytes(theta, extra))


def load_model(path) -> tuple[DetectorParams, dict]:
    theta, meta, _ = params_from_bytes(Path(path).read_bytes())
    return theta, meta


def map_samples(values: np.ndarray, boxes, G: int, stride: int = 8, min_side: float = 1.0):
    """Training samples (tile, tile-local gt boxes) for one map; gt boxes are
    clipped to each tile and dropped when less than ``min_side`` remains."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    out = []
    for tile, (r0, c0) in prepare_detector_input(values, G, stride):
        b = boxes - np.array([c0, r0, c0, r0], dtype=np.float64)
        b = np.clip(b, 0.0, float(G))
        ok = (b[:, 2] - b[:, 0] >= min_side) & (b[:, 3] - b[:, 1] >= min_side)
        out.append((tile, b[ok]))
    return out
