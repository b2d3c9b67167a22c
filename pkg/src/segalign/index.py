"""Top-N keyframe search (flat and IVF), candidate grouping and sparse maps."""
from __future__ import annotations

import struct
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError
from .features import FeatureStore, ltr_matmul
from .simmap import SimilarityMap, sparse_map

SGIX_MAGIC = b"SGIX"
SGIX_VERSION = 1
KIND_FLAT, KIND_IVF = 0, 1


@dataclass(frozen=True, order=True)
class FrameRef:
    video_id: str
    frame_index: int
    timestamp: float = 0.0


@dataclass(frozen=True)
class Hit:
    ref: FrameRef
    score: float


@dataclass
class CandidateGroup:
    ref_video_id: str
    hits: list[tuple[int, Hit]]


@dataclass(frozen=True)
class QueryPlan:
    query_video_id: str
    keyframe_indices: tuple[int, ...]
    topN: int = 50

    def __post_init__(self):
        if not self.keyframe_indices:
            raise ValueError("a query plan needs at least one keyframe")
        if self.topN < 1:
            raise ValueError("topN must be positive")


class FlatIndex:
    """Rows are ordered by (video_id, frame_index), so row order doubles as the
    tie-break order of the hit contract."""

    kind = KIND_FLAT

    def __init__(self, vectors: np.ndarray, refs: Sequence[FrameRef]):
        if len(vectors) != len(refs):
            raise ValueError("vectors and refs differ in length")
        self.vectors = np.ascontiguousarray(vectors, dtype=np.float32)
        self.vectors.setflags(write=False)
        self.refs = list(refs)

    def __len__(self):
        return len(self.refs)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


class IVFIndex(FlatIndex):
    kind = KIND_IVF

    def __init__(self, vectors, refs, centroids: np.ndarray, assignment: np.ndarray):
        super().__init__(vectors, refs)
        self.centroids = np.asarray(centroids, dtype=np.float64)
        self.assignment = np.asarray(assignment, dtype=np.int64)
        self.lists = [np.flatnonzero(self.assignment == c) for c in range(len(self.centroids))]

    @property
    def k_c(self) -> int:
        return len(self.centroids)

    @property
    def trained(self) -> bool:
        return self.k_c > 0


def _gather(store: FeatureStore, keys: Mapping[str, Sequence[int]]):
    unknown = sorted(set(keys) - set(store))
    if unknown:
        raise DataError(f"keyframes reference unknown video ids: {unknown[:5]}")
    vecs, refs = [], []
    for vid in sorted(keys):
        seq = store[vid]
        frames = sorted(set(int(i) for i in keys[vid]))
        if not frames:
            raise DataError(f"video {vid!r} has an empty keyframe set")
        if frames[0] < 0 or frames[-1] >= len(seq):
            raise DataError(f"video {vid!r}: keyframe index out of range")
        vecs.append(seq.vectors[frames])
        refs.extend(FrameRef(vid, i, i / seq.basis_fps) for i in frames)
    if not refs:
        raise DataError("no keyframes to index")
    return np.concatenate(vecs), refs


def build_flat(store: FeatureStore, keys: Mapping[str, Sequence[int]] | None = None) -> FlatIndex:
    if keys is None:
        keys = {vid: range(len(s)) for vid, s in store.items()}
    vecs, refs = _gather(store, keys)
    return FlatIndex(vecs, refs)


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]


def kmeans(x: np.ndarray, k: int, iters: int = 20, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's k-means with seeded farthest-point initialization.

    Assignment is row-wise independent (argmin, ties to the lower centroid id),
    so any row partitioning of the assignment step gives the same result.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if not 1 <= k <= n:
        raise ValueError(f"k_c={k} must be in [1, {n}]")
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(n))]
    mind = _sq_dists(x, x[chosen]).ravel()
    for _ in range(1, k):
        nxt = int(np.argmax(mind))
        chosen.append(nxt)
        mind = np.minimum(mind, _sq_dists(x, x[[nxt]]).ravel())
    cent = x[chosen].copy()
    assign = np.argmin(_sq_dists(x, cent), axis=1)
    for _ in range(iters):
        for c in range(k):
            members = x[assign == c]
            if len(members):
                cent[c] = members.mean(axis=0)
        new = np.argmin(_sq_dists(x, cent), axis=1)
        if np.array_equal(new, assign):
            break
        assign = new
    return cent, assign


def build_ivf(store: FeatureStore, keys=None, k_c: int = 16, iters: int = 20, seed: int = 0) -> IVFIndex:
    flat = build_flat(store, keys)
    if k_c > len(flat):
        raise DataError(f"k_c={k_c} exceeds the {len(flat)} indexed rows")
    cent, assign = kmeans(flat.vectors, k_c, iters, seed)
    return IVFIndex(flat.vectors, flat.refs, cent, assign)


def _check_query(index: FlatIndex, q) -> np.ndarray:
    if len(index) == 0:
        raise DataError("search on an empty index")
    q = np.asarray(q, dtype=np.float32).ravel()
    if q.size != index.dim:
        raise ValueError(f"query dim {q.size} != index dim {index.dim}")
    return q


def _top_rows(rows: np.ndarray, scores: np.ndarray, topN: int) -> list[int]:
    if len(rows) > topN:
        # keep every row tied with the cut-off so tie-breaking stays exact
        cut = np.partition(scores, len(scores) - topN)[len(scores) - topN]
        keep = scores >= cut
        rows, scores = rows[keep], scores[keep]
    order = np.lexsort((rows, -scores))[:topN]
    return [int(rows[i]) for i in order]


def _hits(index: FlatIndex, rows, scores) -> list[Hit]:
    return [Hit(index.refs[r], float(s)) for r, s in zip(rows, scores)]


def search_flat(index: FlatIndex, q, topN: int) -> list[Hit]:
    q = _check_query(index, q)
    scores = ltr_matmul(q, index.vectors)
    rows = _top_rows(np.arange(len(index)), scores, topN)
    return _hits(index, rows, scores[rows])


def search_ivf(index: IVFIndex, q, topN: int, nprobe: int = 1) -> list[Hit]:
    if not getattr(index, "trained", False):
        raise DataError("IVF index is not trained")
    if not 1 <= nprobe <= index.k_c:
        raise ValueError(f"nprobe={nprobe} must be in [1, {index.k_c}]")
    q = _check_query(index, q)
    d = _sq_dists(q[None, :], index.centroids).ravel()
    probe = np.lexsort((np.arange(index.k_c), d))[:nprobe]
    rows = np.sort(np.concatenate([index.lists[c] for c in probe]))
    if rows.size == 0:
        return []
    scores = ltr_matmul(q, index.vectors[rows])
    top = _top_rows(rows, scores, topN)
    pos = np.searchsorted(rows, top)
    return _hits(index, top, scores[pos])


def search(index: FlatIndex, q, topN: int, nprobe: int = 1) -> list[Hit]:
    if isinstance(index, IVFIndex):
        return search_ivf(index, q, topN, nprobe)
    return search_flat(index, q, topN)


def plan_and_group(
    plan: QueryPlan,
    store: FeatureStore,
    index: FlatIndex,
    topN: int | None = None,
    nprobe: int = 1,
    floor: float | None = 0.5,
    exclude_self: bool = True,
) -> list[CandidateGroup]:
    """Search every query keyframe and bucket the hits by reference video."""
    topN = plan.topN if topN is None else topN
    seq = store[plan.query_video_id]
    buckets: dict[str, list[tuple[int, Hit]]] = defaultdict(list)
    for qi in plan.keyframe_indices:
        if not 0 <= qi < len(seq):
            raise DataError(f"query keyframe {qi} outside video {plan.query_video_id!r}")
        for h in search(index, seq.vectors[qi], topN, nprobe):
            if exclude_self and h.ref.video_id == plan.query_video_id:
                continue
            if floor is not None and h.score < floor:
                continue
            buckets[h.ref.video_id].append((int(qi), h))
    return [CandidateGroup(vid, buckets[vid]) for vid in sorted(buckets)]


def sparse_map_from_group(group: CandidateGroup, plan: QueryPlan, shapes, fps=(1.0, 1.0)) -> SimilarityMap:
    """Merge one group's hits into a sparse query x reference map (max on duplicates)."""
    if not group.hits:
        raise ValueError("empty candidate group")
    cells: dict[tuple[int, int], float] = {}
    for qi, h in group.hits:
        key = (qi, h.ref.frame_index)
        if h.score > cells.get(key, -np.inf):
            cells[key] = h.score
    keys = sorted(cells)
    return sparse_map(
        plan.query_video_id, group.ref_video_id, shapes, fps,
        [k[0] for k in keys], [k[1] for k in keys], [cells[k] for k in keys],
    )


def save_index(index: FlatIndex, path) -> None:
    with open(path, "wb") as fh:
        fh.write(SGIX_MAGIC + struct.pack("<IIII", SGIX_VERSION, index.kind, index.dim, len(index)))
        for r in index.refs:
            vid = r.video_id.encode("utf-8")
            fh.write(struct.pack("<H", len(vid)) + vid + struct.pack("<Id", r.frame_index, r.timestamp))
        fh.write(index.vectors.astype("<f4").tobytes())
        if isinstance(index, IVFIndex):
            fh.write(struct.pack("<I", index.k_c))
            fh.write(index.centroids.astype("<f8").tobytes())
            for rows in index.lists:
                fh.write(struct.pack("<I", len(rows)) + rows.astype("<u4").tobytes())


def load_index(path) -> FlatIndex:
    data = Path(path).read_bytes()
    if data[:4] != SGIX_MAGIC:
        raise DataError(f"{path}: not an SGIX file")
    version, kind, dim, n = struct.unpack_from("<IIII", data, 4)
    if version != SGIX_VERSION:
        raise DataError(f"{path}: unsupported SGIX version {version}")
    pos, refs = 20, []
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", data, pos)
        vid = data[pos + 2 : pos + 2 + ln].decode("utf-8")
        pos += 2 + ln
        fi, ts = struct.unpack_from("<Id", data, pos)
        pos += 12
        refs.append(FrameRef(vid, fi, ts))
    vecs = np.frombuffer(data, dtype="<f4", count=n * dim, offset=pos).reshape(n, dim)
    pos += 4 * n * dim
    if kind == KIND_FLAT:
        return FlatIndex(vecs, refs)
    (kc,) = struct.unpack_from("<I", data, pos)
    pos += 4
    cent = np.frombuffer(data, dtype="<f8", count=kc * dim, offset=pos).reshape(kc, dim)
    pos += 8 * kc * dim
    assign = np.empty(n, dtype=np.int64)
    for c in range(kc):
        (cnt,) = struct.unpack_from("<I", data, pos)
        rows = np.frombuffer(data, dtype="<u4", count=cnt, offset=pos + 4)
        assign[rows] = c
        pos += 4 + 4 * cnt
    return IVFIndex(vecs, refs, cent, assign)
