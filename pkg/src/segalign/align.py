"""Classical temporal-alignment baselines: Hough voting, temporal network, DP."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .simmap import SimilarityMap


@dataclass(frozen=True)
class SegmentMatch:
    q_start: float
    q_end: float
    r_start: float
    r_end: float
    score: float = 1.0

    def __post_init__(self):
        if not (self.q_start < self.q_end and self.r_start < self.r_end):
            raise ValueError(f"degenerate segment {self}")

    def as_dict(self) -> dict:
        return {"q_start": self.q_start, "q_end": self.q_end,
                "r_start": self.r_start, "r_end": self.r_end, "score": self.score}


@dataclass(frozen=True)
class HoughParams:
    offset_bin: float = 1.0
    min_votes: int = 3
    min_sim: float = 0.7


@dataclass(frozen=True)
class TNParams:
    max_frame_gap: int = 3
    min_sim: float = 0.7


@dataclass(frozen=True)
class DPParams:
    min_sim: float = 0.7
    gap_penalty: float = 0.1
    band_width: int | None = None  # max drift from the starting diagonal; None = unbounded
    min_score: float = 1.0
    max_segments: int = 10


def cells_to_match(M: SimilarityMap, rows, cols, score: float) -> SegmentMatch:
    """Segment spanning the given cells (original frame coordinates), in seconds."""
    r0, r1 = min(rows), max(rows)
    c0, c1 = min(cols), max(cols)
    r0, r1 = M.to_original_rows(r0, "left"), M.to_original_rows(r1 + 1, "right")
    c0, c1 = M.to_original_cols(c0, "left"), M.to_original_cols(c1 + 1, "right")
    return SegmentMatch(float(r0) / M.row_fps, float(r1) / M.row_fps,
                        float(c0) / M.col_fps, float(c1) / M.col_fps, float(score))


def hough_align(M: SimilarityMap, p: HoughParams = HoughParams()) -> list[SegmentMatch]:
    D = M.dense()
    rows, cols = np.nonzero(D >= p.min_sim)
    qt = M.to_original_rows(rows) / M.row_fps
    rt = M.to_original_cols(cols) / M.col_fps
    bins: dict[int, list[int]] = defaultdict(list)
    for k, off in enumerate(np.asarray(rt - qt, dtype=np.float64)):
        bins[math.floor(off / p.offset_bin + 0.5)].append(k)
    out = []
    for b in sorted(bins):
        members = bins[b]
        if len(members) < p.min_votes:
            continue
        r, c = rows[members], cols[members]
        score = float(sum(D[i, j] for i, j in sorted(zip(r.tolist(), c.tolist()))))
        out.append(cells_to_match(M, r, c, score))
    return sorted(out, key=lambda m: (-m.score, m.q_start, m.r_start))


def _longest_path(W: np.ndarray, node: np.ndarray, gap: int):
    """Node-weighted longest path over the DAG of ``node`` cells, edges to
    cells strictly down-right within ``gap``. Returns (best, predecessor)."""
    n, m = W.shape
    best = np.full((n, m), -np.inf)
    pred = np.full((n, m, 2), -1, dtype=np.int64)
    for i in range(n):
        prev_best = np.zeros(m)
        prev_arg = np.full((m, 2), -1, dtype=np.int64)
        for di in range(1, gap + 1):
            if i - di < 0:
                break
            for dj in range(1, gap + 1):
                cand = np.full(m, -np.inf)
                cand[dj:] = best[i - di, : m - dj]
                better = cand > prev_best
                prev_best = np.where(better, cand, prev_best)
                prev_arg[better] = (i - di, 0)
                prev_arg[better, 1] = np.arange(m)[better] - dj
        row = np.where(node[i], W[i] + prev_best, -np.inf)
        best[i] = row
        pred[i] = prev_arg
    return best, pred


def tn_align(M: SimilarityMap, p: TNParams = TNParams(), max_segments: int = 10) -> list[SegmentMatch]:
    D = M.dense()
    node = D >= p.min_sim
    out = []
    while node.any() and len(out) < max_segments:
        best, pred = _longest_path(D, node, p.max_frame_gap)
        flat = int(np.argmax(best))
        i, j = divmod(flat, D.shape[1])
        if not best[i, j] >= 2 * p.min_sim:
            break
        path = []
        while i >= 0:
            path.append((i, j))
            i, j = pred[i, j]
        rows, cols = zip(*path)
        out.append(cells_to_match(M, rows, cols, float(best[path[0]])))
        node[list(rows), list(cols)] = False
    return out


def dp_best_block(C: np.ndarray, gap_penalty: float, band_width: int | None = None):
    """Best local monotone path over the gain matrix ``C`` (similarity minus
    threshold). Steps are diagonal, down or right; the last two cost
    ``gap_penalty``. Returns (score, path cells) with path start first.

    Unbounded band uses the plain 2D recurrence; a finite band tracks the drift
    from the starting diagonal as an extra state.
    """
    n, m = C.shape
    g = gap_penalty
    c = C.tolist()
    b = band_width
    if b is None:
        A = [[0.0] * m for _ in range(n)]
        back = [[0] * m for _ in range(n)]  # 0 start, 1 diag, 2 up, 3 left
        for i in range(n):
            for j in range(m):
                best, mv = 0.0, 0
                if i > 0 and j > 0:
                    best, mv = A[i - 1][j - 1], (1 if A[i - 1][j - 1] > 0 else 0)
                if i > 0 and A[i - 1][j] - g > best:
                    best, mv = A[i - 1][j] - g, 2
                if j > 0 and A[i][j - 1] - g > best:
                    best, mv = A[i][j - 1] - g, 3
                v = best + c[i][j]
                if v > 0:
                    A[i][j], back[i][j] = v, mv
        top, bi, bj = 0.0, -1, -1
        for i in range(n):
            for j in range(m):
                if A[i][j] > top:
                    top, bi, bj = A[i][j], i, j
        if bi < 0:
            return 0.0, []
        path, i, j = [], bi, bj
        while True:
            path.append((i, j))
            mv = back[i][j]
            if mv == 0:
                break
            i, j = (i - 1, j - 1) if mv == 1 else (i - 1, j) if mv == 2 else (i, j - 1)
        return top, path[::-1]

    ninf = -math.inf
    W = 2 * b + 1
    A = [[[ninf] * W for _ in range(m)] for _ in range(n)]
    back = [[[0] * W for _ in range(m)] for _ in range(n)]
    for i in range(n):
        for j in range(m):
            for k in range(W):
                d = k - b
                best, mv = ninf, -1
                if d == 0:
                    best, mv = 0.0, 0
                    if i > 0 and j > 0 and A[i - 1][j - 1][k] > 0:
                        best, mv = A[i - 1][j - 1][k], 1
                elif i > 0 and j > 0:
                    best, mv = A[i - 1][j - 1][k], 1
                if i > 0 and k + 1 < W and A[i - 1][j][k + 1] - g > best:
                    best, mv = A[i - 1][j][k + 1] - g, 2
                if j > 0 and k - 1 >= 0 and A[i][j - 1][k - 1] - g > best:
                    best, mv = A[i][j - 1][k - 1] - g, 3
                if mv < 0 or best == ninf:
                    continue
                A[i][j][k], back[i][j][k] = best + c[i][j], mv
    top, arg = 0.0, None
    for i in range(n):
        for j in range(m):
            for k in range(W):
                if A[i][j][k] > top:
                    top, arg = A[i][j][k], (i, j, k)
    if arg is None:
        return 0.0, []
    path, (i, j, k) = [], arg
    while True:
        path.append((i, j))
        mv = back[i][j][k]
        if mv == 0:
            break
        if mv == 1:
            i, j = i - 1, j - 1
        elif mv == 2:
            i, k = i - 1, k + 1
        else:
            j, k = j - 1, k - 1
    return top, path[::-1]


def dp_align(M: SimilarityMap, p: DPParams = DPParams()) -> list[SegmentMatch]:
    """Repeatedly extract the best diagonal block and suppress its bounding box."""
    D = M.dense()
    C = D - p.min_sim
    out = []
    while len(out) < p.max_segments:
        score, path = dp_best_block(C, p.gap_penalty, p.band_width)
        if not path or score < p.min_score:
            break
        rows, cols = zip(*path)
        out.append(cells_to_match(M, rows, cols, score))
        C[min(rows) : max(rows) + 1, min(cols) : max(cols) + 1] = -math.inf
    return out


def video_score(matches: list[SegmentMatch], query_frames: int) -> float:
    """Baseline video-level similarity: best raw score over query length."""
    return max((m.score for m in matches), default=0.0) / max(query_frames, 1)
