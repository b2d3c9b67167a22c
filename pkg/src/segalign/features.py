"""Frame-embedding sequences, the SGAF container format and the cosine kernel."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import IngestError

SGAF_MAGIC = b"SGAF"
SGAF_VERSION = 1


def ltr_dot(a: np.ndarray, b: np.ndarray) -> float:
    """Dot product accumulated strictly left to right in float64."""
    s = 0.0
    for x, y in zip(a.tolist(), b.tolist()):
        s += x * y
    return s


def ltr_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b.T`` where every entry is accumulated left to right in float64.

    Bitwise equal to calling :func:`ltr_dot` on each row pair, which is what
    makes the brute-force oracles in the tests exact.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 1:
        return ltr_matmul(a[None, :], b)[0]
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dim mismatch: {a.shape[1]} vs {b.shape[1]}")
    out = np.zeros((a.shape[0], b.shape[0]), dtype=np.float64)
    for k in range(a.shape[1]):
        out += np.multiply.outer(a[:, k], b[:, k])
    return out


def normalize_rows(x: np.ndarray, video_id: str = "?") -> np.ndarray:
    """L2-normalize rows into float32. Rows already unit within 1e-6 are kept
    bit-for-bit so that normalization is idempotent."""
    x = np.asarray(x, dtype=np.float32)
    norms = np.sqrt(np.sum(x.astype(np.float64) ** 2, axis=1))
    bad = np.flatnonzero(~(norms > 0) | ~np.isfinite(norms))
    if bad.size:
        raise IngestError(f"video {video_id!r}: zero-norm or non-finite vector at frame {int(bad[0])}")
    out = x.copy()
    redo = np.abs(norms - 1.0) > 1e-6
    out[redo] = (x[redo].astype(np.float64) / norms[redo, None]).astype(np.float32)
    return out


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"dim mismatch: {a.size} vs {b.size}")
    # rescale first so tiny (but nonzero) inputs do not underflow the norm
    ma, mb = np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0)
    if ma == 0 or mb == 0:
        raise ValueError("cosine of a zero vector is undefined")
    a, b = a / ma, b / mb
    na = np.sqrt(ltr_dot(a, a))
    nb = np.sqrt(ltr_dot(b, b))
    if na == 0 or nb == 0:
        raise ValueError("cosine of a zero vector is undefined")
    s = ltr_dot(a / na, b / nb)
    return min(1.0, max(-1.0, s))


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    video_id: str
    basis_fps: float
    vectors: np.ndarray  # (frames, dim) float32, unit rows
    low_quality: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if not self.basis_fps > 0:
            raise IngestError(f"video {self.video_id!r}: basis_fps must be > 0")
        v = np.asarray(self.vectors)
        if v.ndim != 2 or v.shape[0] == 0:
            raise IngestError(f"video {self.video_id!r}: expected a non-empty (frames, dim) array")
        object.__setattr__(self, "vectors", normalize_rows(v, self.video_id))
        self.vectors.setflags(write=False)
        if self.low_quality is not None:
            lq = np.asarray(self.low_quality, dtype=bool)
            if lq.shape != (len(self),):
                raise IngestError(f"video {self.video_id!r}: low_quality mask has wrong length")
            object.__setattr__(self, "low_quality", lq)

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def timestamps(self) -> np.ndarray:
        return np.arange(len(self)) / self.basis_fps

    @property
    def duration(self) -> float:
        return len(self) / self.basis_fps

    def __eq__(self, other):
        if not isinstance(other, FeatureSequence):
            return NotImplemented
        return (
            self.video_id == other.video_id
            and np.float32(self.basis_fps) == np.float32(other.basis_fps)
            and self.vectors.shape == other.vectors.shape
            and np.array_equal(self.vectors, other.vectors)
        )


class FeatureStore(Mapping[str, FeatureSequence]):
    """Immutable map video_id -> FeatureSequence."""

    def __init__(self, sequences: Iterable[FeatureSequence] = ()):
        self._seqs: dict[str, FeatureSequence] = {}
        for s in sequences:
            if s.video_id in self._seqs:
                raise IngestError(f"duplicate video_id {s.video_id!r}")
            self._seqs[s.video_id] = s

    def __getitem__(self, key: str) -> FeatureSequence:
        return self._seqs[key]

    def __iter__(self):
        return iter(self._seqs)

    def __len__(self) -> int:
        return len(self._seqs)

    def __eq__(self, other):
        if not isinstance(other, FeatureStore):
            return NotImplemented
        return list(self._seqs) == list(other._seqs) and all(self[k] == other[k] for k in self)

    @property
    def total_frames(self) -> int:
        return sum(len(s) for s in self._seqs.values())

    @property
    def dim(self) -> int | None:
        for s in self._seqs.values():
            return s.dim
        return None


def write_sgaf(store: Iterable[FeatureSequence] | FeatureStore, path) -> None:
    seqs = list(store.values()) if isinstance(store, FeatureStore) else list(store)
    with open(path, "wb") as fh:
        fh.write(SGAF_MAGIC + struct.pack("<I", SGAF_VERSION))
        for s in seqs:
            vid = s.video_id.encode("utf-8")
            fh.write(struct.pack("<H", len(vid)) + vid)
            fh.write(struct.pack("<fII", s.basis_fps, s.dim, len(s)))
            fh.write(np.ascontiguousarray(s.vectors, dtype="<f4").tobytes())


def ingest(path) -> FeatureStore:
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != SGAF_MAGIC:
        raise IngestError(f"{path}: not an SGAF file (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != SGAF_VERSION:
        raise IngestError(f"{path}: unsupported SGAF version {version}")
    pos, dim, seqs = 8, None, []
    while pos < len(data):
        if pos + 2 > len(data):
            raise IngestError(f"{path}: truncated record header at byte {pos}")
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if pos + n + 12 > len(data):
            raise IngestError(f"{path}: truncated record header at byte {pos}")
        try:
            vid = data[pos : pos + n].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise IngestError(f"{path}: video_id is not valid UTF-8 at byte {pos}") from exc
        pos += n
        fps, d, count = struct.unpack_from("<fII", data, pos)
        pos += 12
        if d == 0:
            raise IngestError(f"{path}: video {vid!r} declares dim 0")
        if dim is None:
            dim = d
        elif d != dim:
            raise IngestError(f"{path}: video {vid!r} has dim {d}, expected {dim}")
        nbytes = 4 * d * count
        if pos + nbytes > len(data):
            raise IngestError(f"{path}: video {vid!r} truncated ({count} frames declared)")
        vec = np.frombuffer(data, dtype="<f4", count=d * count, offset=pos).reshape(count, d)
        pos += nbytes
        seqs.append(FeatureSequence(vid, float(fps), vec))
    return FeatureStore(seqs)
