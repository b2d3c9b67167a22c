"""Keyframe extraction: teacher labels, a differentiable per-frame scorer,
quantization, sparse-uniform interpolation and the tiled-canvas geometry."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from .features import FeatureSequence, cosine_sim

EPS = 1e-7
NOVELTY_WINDOW = 8


@dataclass(frozen=True)
class TeacherParams:
    sim_threshold: float = 0.85
    min_gap: int = 4
    max_gap: float = 64  # math.inf disables the forced refresh

    def __post_init__(self):
        if not 0.0 <= self.sim_threshold <= 1.0:
            raise ValueError("sim_threshold must lie in [0, 1]")
        if self.min_gap < 1 or self.max_gap < self.min_gap:
            raise ValueError("need 1 <= min_gap <= max_gap")


@dataclass
class KeyframeScores:
    video_id: str
    scores: np.ndarray
    labels: np.ndarray | None = None

    def __len__(self):
        return len(self.scores)

    def to_json(self) -> str:
        rec = {"video_id": self.video_id,
               "labels": None if self.labels is None else [int(x) for x in self.labels],
               "scores": [float(x) for x in self.scores]}
        return json.dumps(rec)

    @classmethod
    def from_json(cls, line: str) -> "KeyframeScores":
        rec = json.loads(line)
        labels = rec.get("labels")
        return cls(rec["video_id"], np.asarray(rec["scores"], dtype=np.float64),
                   None if labels is None else np.asarray(labels, dtype=np.int8))


def write_jsonl(items, path) -> None:
    with open(path, "w") as fh:
        for k in items:
            fh.write(k.to_json() + "\n")


def read_jsonl(path) -> dict[str, KeyframeScores]:
    out = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                k = KeyframeScores.from_json(line)
                out[k.video_id] = k
    return out


@dataclass
class ScorerParams:
    weights: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bias: float = 0.0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(3)
        self.bias = float(self.bias)
        if not (np.all(np.isfinite(self.weights)) and math.isfinite(self.bias)):
            raise ValueError("scorer parameters must be finite")

    def as_vector(self) -> np.ndarray:
        return np.append(self.weights, self.bias)

    @classmethod
    def from_vector(cls, v) -> "ScorerParams":
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:3], v[3])


@dataclass(frozen=True)
class TilingSpec:
    block_size: int = 32
    grid_m: int = 24

    def __post_init__(self):
        if self.block_size <= 0 or self.grid_m <= 0:
            raise ValueError("block_size and grid_m must be positive")


def teacher_select(seq: FeatureSequence, p: TeacherParams = TeacherParams(), low_quality=None) -> np.ndarray:
    """Greedy single pass: a frame becomes a keyframe when it has drifted away
    from the last keyframe (cosine < threshold) after at least ``min_gap``
    frames, or when ``max_gap`` frames have passed regardless.

    Low-quality frames get label 0 and are never used as the reference
    keyframe; if frame 0 is low-quality the first good frame starts the pass.
    """
    n = len(seq)
    if n == 0:
        raise ValueError("empty sequence")
    if low_quality is None:
        low_quality = seq.low_quality
    bad = np.zeros(n, dtype=bool) if low_quality is None else np.asarray(low_quality, dtype=bool)
    labels = np.zeros(n, dtype=np.int8)
    good = np.flatnonzero(~bad)
    if good.size == 0:
        return labels
    last = int(good[0])
    labels[last] = 1
    v = seq.vectors
    for i in range(last + 1, n):
        if bad[i]:
            continue
        gap = i - last
        if gap >= p.max_gap or (gap >= p.min_gap and cosine_sim(v[i], v[last]) < p.sim_threshold):
            labels[i] = 1
            last = i
    return labels


def sparse_uniform_interpolate(labels, interval) -> np.ndarray:
    """Make every window ``[k*interval, (k+1)*interval)`` hold a positive,
    turning on the window's first frame where needed. ``None`` = no-op."""
    out = np.asarray(labels, dtype=np.int8).copy()
    if interval is None or interval == math.inf:
        return out
    interval = int(interval)
    if interval < 1:
        raise ValueError("interval must be >= 1")
    for start in range(0, len(out), interval):
        if not out[start : start + interval].any():
            out[start] = 1
    return out


def uniform_mask(n: int, interval) -> np.ndarray:
    """Binary mask that is 1 at the first frame of every interval window."""
    m = np.zeros(n, dtype=np.float64)
    if interval is not None and interval != math.inf:
        m[:: int(interval)] = 1.0
    return m


def novelty_descriptor(seq: FeatureSequence, window: int = NOVELTY_WINDOW) -> np.ndarray:
    """Per-frame (1 - cos to previous, 1 - max cos over the last ``window``
    frames, mean cos over the last ``window`` frames); frame 0 is (1, 1, 0)."""
    v = seq.vectors.astype(np.float64)
    n = len(v)
    lagged = np.full((n, window), np.nan)
    for k in range(1, min(window, n - 1) + 1):
        lagged[k:, k - 1] = np.einsum("ij,ij->i", v[k:], v[:-k])
    phi = np.empty((n, 3))
    phi[0] = (1.0, 1.0, 0.0)
    if n > 1:
        win = lagged[1:]
        phi[1:, 0] = 1.0 - win[:, 0]
        phi[1:, 1] = 1.0 - np.nanmax(win, axis=1)
        phi[1:, 2] = np.nanmean(win, axis=1)
    return phi


def score_logits(phi: np.ndarray, theta: ScorerParams) -> np.ndarray:
    return phi @ theta.weights + theta.bias


def score_frames(seq: FeatureSequence, theta: ScorerParams, phi=None) -> KeyframeScores:
    if phi is None:
        phi = novelty_descriptor(seq)
    return KeyframeScores(seq.video_id, expit(score_logits(phi, theta)))


def ske_loss(scores, labels) -> float:
    p = np.asarray(getattr(scores, "scores", scores), dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.size} scores vs {y.size} labels")
    p = np.clip(p, EPS, 1 - EPS)
    return float(np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p))))


def ske_loss_and_grad(phi: np.ndarray, labels, theta: ScorerParams) -> tuple[float, np.ndarray]:
    """Loss and its gradient with respect to (weights, bias)."""
    y = np.asarray(labels, dtype=np.float64)
    p = expit(score_logits(phi, theta))
    loss = ske_loss(p, y)
    # the clamp kills the gradient wherever it is active
    live = (p > EPS) & (p < 1 - EPS)
    dz = np.where(live, p - y, 0.0) / len(y)
    return loss, np.append(phi.T @ dz, dz.sum())


def train_scorer(phis, labels, l2: float = 1e-4, init: ScorerParams | None = None) -> ScorerParams:
    """Fit the scorer to teacher labels by minimizing mean BCE (L-BFGS)."""
    phi = np.concatenate(phis)
    y = np.concatenate([np.asarray(l, dtype=np.float64) for l in labels])
    x0 = (init or ScorerParams()).as_vector()

    def f(v):
        loss, g = ske_loss_and_grad(phi, y, ScorerParams.from_vector(v))
        return loss + l2 * v[:3] @ v[:3], g + np.append(2 * l2 * v[:3], 0.0)

    res = minimize(f, x0, jac=True, method="L-BFGS-B")
    return ScorerParams.from_vector(res.x)


def quantize_scores(scores, threshold: float = 0.5) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    s = np.asarray(getattr(scores, "scores", scores))
    idx = np.flatnonzero(s >= threshold)
    return idx if idx.size else np.array([0])


def compression_ratio(keyframes, n_frames: int) -> float:
    return len(keyframes) / n_frames


def tile_bbox(i: int, t: TilingSpec = TilingSpec()) -> list[int]:
    """Pixel box of frame ``i`` on an m x m tiled canvas (row-major)."""
    if not 0 <= i < t.grid_m * t.grid_m:
        raise IndexError(f"frame {i} outside a {t.grid_m}x{t.grid_m} canvas")
    row, col = divmod(i, t.grid_m)
    s = t.block_size
    return [col * s, row * s, (col + 1) * s, (row + 1) * s]
