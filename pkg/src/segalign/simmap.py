"""Frame-to-frame similarity maps, keyframe masking and detector tiling."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .features import FeatureSequence, ltr_matmul


@dataclass(frozen=True, eq=False)
class SimilarityMap:
    """Cosine scores between the frames of a query (rows) and a reference (cols).

    Either ``values`` (dense) or the coordinate triple ``coords`` is set.
    ``row_index``/``col_index`` map compacted rows/cols back to original
    basis-frame indices (drop-mode keyframe maps); ``None`` means identity.
    """

    query_id: str
    ref_id: str
    rows: int
    cols: int
    row_fps: float
    col_fps: float
    values: np.ndarray | None = None
    coords: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None
    row_index: np.ndarray | None = None
    col_index: np.ndarray | None = None

    def __post_init__(self):
        if (self.values is None) == (self.coords is None):
            raise ValueError("exactly one of values/coords must be given")
        if self.values is not None and self.values.shape != (self.rows, self.cols):
            raise ValueError(f"values shape {self.values.shape} != ({self.rows}, {self.cols})")

    @property
    def is_sparse(self) -> bool:
        return self.coords is not None

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols

    def dense(self) -> np.ndarray:
        if self.values is not None:
            return self.values
        out = np.zeros((self.rows, self.cols), dtype=np.float64)
        r, c, v = self.coords
        out[r, c] = v
        return out

    def with_values(self, values: np.ndarray, **kw) -> "SimilarityMap":
        fields = dict(
            query_id=self.query_id, ref_id=self.ref_id, rows=values.shape[0], cols=values.shape[1],
            row_fps=self.row_fps, col_fps=self.col_fps, values=values,
            row_index=self.row_index, col_index=self.col_index,
        )
        fields.update(kw)
        return SimilarityMap(**fields)

    def to_original_rows(self, pos, side="left"):
        return _back_map(pos, self.row_index, side)

    def to_original_cols(self, pos, side="left"):
        return _back_map(pos, self.col_index, side)


def _back_map(pos, index, side="left"):
    """Map a continuous cell coordinate of a compacted axis to original frames.

    Cell ``c`` of the compacted axis covers original ``[index[c], index[c] + 1)``.
    A right box edge sitting exactly on a cell boundary belongs to the cell
    before it, hence ``side``.
    """
    if index is None:
        return pos
    pos = np.asarray(pos, dtype=np.float64)
    c = np.floor(pos) if side == "left" else np.ceil(pos) - 1
    c = np.clip(c, 0, len(index) - 1).astype(int)
    return index[c] + (pos - c)


def dense_map(a: FeatureSequence, b: FeatureSequence) -> SimilarityMap:
    if a.dim != b.dim:
        raise ValueError(f"dim mismatch: {a.video_id} has {a.dim}, {b.video_id} has {b.dim}")
    vals = np.clip(ltr_matmul(a.vectors, b.vectors), -1.0, 1.0)
    return SimilarityMap(a.video_id, b.video_id, len(a), len(b), a.basis_fps, b.basis_fps, values=vals)


def sparse_map(query_id, ref_id, shape, fps, rows, cols, vals) -> SimilarityMap:
    return SimilarityMap(
        query_id, ref_id, shape[0], shape[1], fps[0], fps[1],
        coords=(np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64),
                np.asarray(vals, dtype=np.float64)),
    )


def fuse_mask(values, row_scores, col_scores):
    """``row_scores[i] * col_scores[j] * values[i, j]``; works for numpy arrays
    and torch tensors alike (the torch path is what makes it differentiable)."""
    return row_scores[:, None] * col_scores[None, :] * values


@dataclass(frozen=True, eq=False)
class MaskedMap:
    base: SimilarityMap
    row_scores: np.ndarray
    col_scores: np.ndarray
    values: np.ndarray


def apply_keyframe_mask(S: SimilarityMap, p1, p2) -> MaskedMap:
    r = np.asarray(getattr(p1, "scores", p1), dtype=np.float64)
    c = np.asarray(getattr(p2, "scores", p2), dtype=np.float64)
    if r.shape != (S.rows,) or c.shape != (S.cols,):
        raise ValueError(f"score lengths ({r.size}, {c.size}) do not match map {S.shape}")
    return MaskedMap(S, r, c, fuse_mask(S.dense(), r, c))


def keyframe_submatrix(
    S: SimilarityMap, k1, k2, mode: Literal["zero-fill", "drop", "hold"] = "zero-fill"
) -> SimilarityMap:
    """Keyframe-only similarities. ``zero-fill`` keeps the basis grid and zeroes
    non-keyframe cells, ``drop`` compacts to keyframes and records the back-map,
    ``hold`` keeps the basis grid and lets each keyframe stand in for the frames
    up to the next keyframe (only keyframe pairs are ever read)."""
    k1 = np.unique(np.asarray(list(k1), dtype=np.int64))
    k2 = np.unique(np.asarray(list(k2), dtype=np.int64))
    if k1.size == 0 or k2.size == 0:
        raise ValueError("empty keyframe set; interpolate before building a keyframe map")
    if k1[0] < 0 or k1[-1] >= S.rows or k2[0] < 0 or k2[-1] >= S.cols:
        raise IndexError("keyframe index out of map bounds")
    D = S.dense()
    if mode == "zero-fill":
        out = np.zeros_like(D)
        out[np.ix_(k1, k2)] = D[np.ix_(k1, k2)]
        return S.with_values(out)
    if mode == "drop":
        if S.row_index is not None or S.col_index is not None:
            raise ValueError("map is already compacted")
        return S.with_values(D[np.ix_(k1, k2)].copy(), row_index=k1, col_index=k2)
    if mode == "hold":
        own1 = k1[np.maximum(np.searchsorted(k1, np.arange(S.rows), side="right") - 1, 0)]
        own2 = k2[np.maximum(np.searchsorted(k2, np.arange(S.cols), side="right") - 1, 0)]
        return S.with_values(D[np.ix_(own1, own2)].copy())
    raise ValueError(f"unknown mode {mode!r}")


def tile_offsets(n: int, G: int) -> list[int]:
    """Window starts along one axis: multiples of G/2, the last snapped to the end."""
    if n <= G:
        return [0]
    step = G // 2
    count = max(2, (n - G) // step + 1)
    return [k * step for k in range(count - 1)] + [n - G]


def prepare_detector_input(M, G: int, stride: int = 8) -> list[tuple[np.ndarray, tuple[int, int]]]:
    """Cut a map into G x G tiles with 50% overlap; small maps are zero-padded
    bottom/right. Negative cosines are clamped to 0. Offsets are (row, col)."""
    if G <= 0 or G % stride:
        raise ValueError(f"G={G} must be a positive multiple of {stride}")
    values = M.dense() if isinstance(M, SimilarityMap) else np.asarray(M)
    values = np.clip(values, 0.0, None)
    rows, cols = values.shape
    tiles = []
    for r0 in tile_offsets(rows, G):
        for c0 in tile_offsets(cols, G):
            tile = np.zeros((G, G), dtype=np.float32)
            block = values[r0 : r0 + G, c0 : c0 + G]
            tile[: block.shape[0], : block.shape[1]] = block
            tiles.append((tile, (r0, c0)))
    return tiles


def write_pgm(M, path) -> None:
    values = M.dense() if isinstance(M, SimilarityMap) else np.asarray(M)
    img = np.rint(np.clip(values, 0.0, 1.0) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
