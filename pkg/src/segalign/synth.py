"""Synthetic frame-embedding videos and copied-segment pairs with exact ground truth.

Edits are simulated in feature space: temporal edits resample frame indices
(and return the exact index mapping), spatial edits are noise plus a small
fixed rotation.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .align import SegmentMatch
from .errors import DataError
from .features import FeatureSequence, FeatureStore, ingest, write_sgaf

TEMPORAL_EDITS = ("clip", "concat", "accelerate", "decelerate", "drop", "fps_change")


@dataclass(frozen=True)
class SynthConfig:
    dim: int = 64
    length_range: tuple[int, int] = (48, 96)
    alpha: float = 0.8
    mean_shot_len: float = 24.0
    shot_count: int | None = None
    noise: float = 0.1
    low_quality_frac: float = 0.02
    fps: float = 2.0
    extent_range: tuple[int, int] = (8, 24)  # copied extent on either axis, frames
    spatial_sigma: tuple[float, float] = (0.03, 0.10)
    rotation_angle: float = 0.3
    rotations: int = 8
    hold_range: tuple[int, int] = (1, 1)  # frames a latent state is held within a shot
    jitter: float = 0.0  # per-frame noise around a held state
    seed: int = 0

    def __post_init__(self):
        if self.noise < 0 or not 0 <= self.alpha < 1:
            raise ValueError("need noise >= 0 and 0 <= alpha < 1")
        object.__setattr__(self, "length_range", tuple(self.length_range))
        object.__setattr__(self, "extent_range", tuple(self.extent_range))
        object.__setattr__(self, "spatial_sigma", tuple(self.spatial_sigma))
        object.__setattr__(self, "hold_range", tuple(self.hold_range))
        if not 1 <= self.hold_range[0] <= self.hold_range[1]:
            raise ValueError("hold_range needs 1 <= lo <= hi")


@dataclass
class GroundTruthPair:
    query: FeatureSequence
    ref: FeatureSequence
    segments: list[SegmentMatch]
    tags: list[str] = field(default_factory=list)

    def boxes(self) -> np.ndarray:
        """gt boxes in map cells: (r_start, q_start, r_end, q_end) * fps."""
        qf, rf = self.query.basis_fps, self.ref.basis_fps
        return np.array([[s.r_start * rf, s.q_start * qf, s.r_end * rf, s.q_end * qf] for s in self.segments],
                        dtype=np.float64).reshape(-1, 4)


def pair_seed(master_seed: int, index: int) -> int:
    """Per-pair seed derived from (master, index), independent of scheduling."""
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def _unit(rng, dim):
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def gen_video(cfg: SynthConfig, video_id: str = "v", seed: int | None = None, length: int | None = None) -> FeatureSequence:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    n = int(length) if length is not None else int(rng.integers(cfg.length_range[0], cfg.length_range[1] + 1))
    if cfg.shot_count:
        cuts = np.sort(rng.choice(np.arange(1, n), size=min(cfg.shot_count - 1, n - 1), replace=False))
    else:
        cuts, pos = [], 0
        while True:
            pos += 1 + int(rng.geometric(1.0 / max(cfg.mean_shot_len, 1.0)))
            if pos >= n:
                break
            cuts.append(pos)
    starts = set(int(c) for c in cuts)
    x = np.empty((n, cfg.dim))
    anchor = _unit(rng, cfg.dim)
    prev = anchor
    lo, hi = cfg.hold_range
    held = 0
    for i in range(n):
        if i in starts:
            anchor = _unit(rng, cfg.dim)
            prev = anchor
            held = 0
        if held == 0:
            v = cfg.alpha * prev + (1 - cfg.alpha) * anchor + cfg.noise * rng.standard_normal(cfg.dim)
            prev = v / np.linalg.norm(v)
            held = int(rng.integers(lo, hi + 1)) if hi > lo else lo
        held -= 1
        if cfg.jitter > 0:
            v = prev + cfg.jitter * rng.standard_normal(cfg.dim)
            x[i] = v / np.linalg.norm(v)
        else:
            x[i] = prev
    low = rng.random(n) < cfg.low_quality_frac
    for i in np.flatnonzero(low):
        v = x[i] + 3.0 * rng.standard_normal(cfg.dim) / math.sqrt(cfg.dim)
        x[i] = v / np.linalg.norm(v)
    return FeatureSequence(video_id, cfg.fps, x.astype(np.float32), low_quality=low)


def apply_temporal(seq: FeatureSequence, kind: str, *, k: int = 2, p: float = 0.2, r: float = 1.5,
                   start: int = 0, end: int | None = None, other: FeatureSequence | None = None,
                   seed: int = 0) -> tuple[FeatureSequence, np.ndarray]:
    """Apply one temporal edit. Returns the edited sequence and, per output
    frame, the source frame index it shows (-1 for frames of ``other``)."""
    n = len(seq)
    if kind == "clip":
        end = n if end is None else end
        if not 0 <= start < end <= n:
            raise ValueError(f"bad clip range [{start}, {end}) for {n} frames")
        mapping = np.arange(start, end)
    elif kind == "concat":
        if other is None:
            raise ValueError("concat needs the sequence to append")
        mapping = np.concatenate([np.arange(n), np.full(len(other), -1)])
        vec = np.concatenate([seq.vectors, other.vectors])
        return FeatureSequence(seq.video_id, seq.basis_fps, vec), mapping
    elif kind == "accelerate":
        if k not in (2, 3):
            raise ValueError("k must be 2 or 3")
        mapping = np.arange(0, n, k)
    elif kind == "decelerate":
        if k not in (2, 3):
            raise ValueError("k must be 2 or 3")
        mapping = np.arange(n * k) // k
    elif kind == "drop":
        if not 0 < p < 0.5:
            raise ValueError("p must lie in (0, 0.5)")
        keep = np.random.default_rng(seed).random(n) >= p
        mapping = np.flatnonzero(keep)
    elif kind == "fps_change":
        if not r > 0:
            raise ValueError("r must be > 0")
        mapping = np.minimum(np.floor(np.arange(int(round(n * r))) / r).astype(np.int64), n - 1)
    else:
        raise ValueError(f"unknown temporal edit {kind!r}")
    if mapping.size == 0:
        raise DataError(f"{kind} left an empty sequence")
    return FeatureSequence(seq.video_id, seq.basis_fps, seq.vectors[mapping]), mapping


def givens_rotation(dim: int, n_rot: int, angle: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    R = np.eye(dim)
    for _ in range(n_rot):
        a, b = rng.choice(dim, size=2, replace=False)
        G = np.eye(dim)
        c, s = math.cos(angle), math.sin(angle)
        G[a, a], G[a, b], G[b, a], G[b, b] = c, -s, s, c
        R = G @ R
    return R


def apply_spatial_proxy(seq: FeatureSequence, sigma_extra: float, rotation_seed: int | None = None,
                        seed: int = 0, n_rot: int = 8, angle: float = 0.3) -> FeatureSequence:
    """Seeded Gaussian noise per vector (then renormalized) and an optional
    fixed small rotation applied to every frame."""
    if sigma_extra < 0:
        raise ValueError("sigma_extra must be >= 0")
    x = seq.vectors.astype(np.float64)
    if rotation_seed is not None:
        x = x @ givens_rotation(seq.dim, n_rot, angle, rotation_seed).T
    if sigma_extra > 0:
        x = x + sigma_extra * np.random.default_rng(seed).standard_normal(x.shape)
    if sigma_extra == 0 and rotation_seed is None:
        return seq
    return FeatureSequence(seq.video_id, seq.basis_fps, x.astype(np.float32))


def self_similarity(a: FeatureSequence, b: FeatureSequence) -> float:
    """Mean cosine between corresponding frames."""
    return float(np.mean(np.einsum("ij,ij->i", a.vectors.astype(np.float64), b.vectors.astype(np.float64))))


@dataclass(frozen=True)
class EditSpec:
    kind: str = "clip"  # one of TEMPORAL_EDITS or "identity"
    spatial: bool = True


def _source_range(kind: str, lo: int, hi: int, rng) -> tuple[int, dict]:
    """Pick a source length and edit params so both copied extents lie in [lo, hi]."""
    if kind in ("identity", "clip"):
        return int(rng.integers(lo, hi + 1)), {}
    if kind == "accelerate":
        return int(rng.integers(2 * lo, max(2 * lo, hi) + 1)), {"k": 2}
    if kind == "decelerate":
        return int(rng.integers(lo, max(lo, hi // 2) + 1)), {"k": 2}
    if kind == "drop":
        p = float(rng.uniform(0.1, 0.3))
        return int(rng.integers(int(math.ceil(lo / (1 - p))) + 2, hi + 1)), {"p": p, "seed": int(rng.integers(2**31))}
    if kind == "fps_change":
        r = float(rng.choice([0.75, 1.5]))
        L0, L1 = int(math.ceil(max(lo, lo / r))), int(math.floor(min(hi, hi / r)))
        return int(rng.integers(L0, L1 + 1)), {"r": r}
    raise ValueError(f"unknown edit {kind!r}")


def _copy_piece(cfg, ref, kind, rng):
    """Source pieces of one copy as (edit kind, source length, edit params);
    concat yields two clips from different parts of the source."""
    lo, hi = cfg.extent_range
    if kind == "concat":
        la = int(rng.integers(lo, hi + 1))
        lb = int(rng.integers(lo, hi + 1))
        return [("clip", la, {}), ("clip", lb, {})]
    L, params = _source_range(kind, lo, hi, rng)
    return [(kind, L, params)]


def make_pair(cfg: SynthConfig, edits, seed: int = 0, query_id: str = "q", ref_id: str = "r") -> GroundTruthPair:
    """Splice transformed copies of reference segments into an unrelated query video."""
    edits = [e if isinstance(e, EditSpec) else EditSpec(e) for e in edits]
    if not edits:
        raise ValueError("at least one copied segment is required")
    rng = np.random.default_rng(seed)
    plans = [(e, _copy_piece(cfg, None, e.kind, rng)) for e in edits]
    src_total = sum(L for _, pieces in plans for _, L, _ in pieces)
    ref_len = max(int(rng.integers(cfg.length_range[0], cfg.length_range[1] + 1)), src_total + 8)
    ref = gen_video(cfg, ref_id, seed=int(rng.integers(2**31)), length=ref_len)

    # disjoint source ranges in the reference, in random order
    pieces = [(ei, pi, kind, L, params) for ei, (e, pl) in enumerate(plans) for pi, (kind, L, params) in enumerate(pl)]
    order = rng.permutation(len(pieces))
    slack = ref_len - src_total
    cuts = np.sort(rng.integers(0, slack + 1, size=len(pieces)))
    src_start, pos = {}, 0
    for rank, pidx in enumerate(order):
        src_start[pidx] = pos + int(cuts[rank])
        pos += pieces[pidx][3]

    # build each copied block: transformed frames + (query-local offset, mapping)
    blocks = []
    for ei, (e, pl) in enumerate(plans):
        frames, maps = [], []
        offset = 0
        for pi in range(len(pl)):
            pidx = next(k for k, pc in enumerate(pieces) if pc[0] == ei and pc[1] == pi)
            _, _, kind, L, params = pieces[pidx]
            s0 = src_start[pidx]
            src = FeatureSequence(ref_id, ref.basis_fps, ref.vectors[s0 : s0 + L])
            edited, mp = apply_temporal(src, "clip" if kind in ("identity", "concat") else kind, **params)
            frames.append(edited.vectors)
            maps.append((offset, mp + s0))
            offset += len(edited)
        block = FeatureSequence(query_id, cfg.fps, np.concatenate(frames))
        if e.spatial:
            sigma = float(rng.uniform(*cfg.spatial_sigma))
            block = apply_spatial_proxy(block, sigma, rotation_seed=int(rng.integers(2**31)),
                                        seed=int(rng.integers(2**31)), n_rot=cfg.rotations, angle=cfg.rotation_angle)
        blocks.append((e, block, maps))

    copy_total = sum(len(b) for _, b, _ in blocks)
    q_len = max(int(rng.integers(cfg.length_range[0], cfg.length_range[1] + 1)), copy_total + 8)
    host = gen_video(cfg, query_id, seed=int(rng.integers(2**31)), length=q_len)
    qv = host.vectors.copy()
    lowq = host.low_quality.copy()
    slack = q_len - copy_total
    cuts = np.sort(rng.integers(0, slack + 1, size=len(blocks)))
    segments, tags, pos = [], [], 0
    for rank, (e, block, maps) in enumerate(blocks):
        start = pos + int(cuts[rank])
        qv[start : start + len(block)] = block.vectors
        lowq[start : start + len(block)] = False
        for off, mp in maps:
            qs = start + off
            segments.append(SegmentMatch(qs / cfg.fps, (qs + len(mp)) / cfg.fps,
                                         mp.min() / cfg.fps, (mp.max() + 1) / cfg.fps, 1.0))
            tags.append(e.kind + ("+spatial" if e.spatial else ""))
        pos += len(block)
    query = FeatureSequence(query_id, cfg.fps, qv, low_quality=lowq)
    return GroundTruthPair(query, ref, segments, tags)


def sample_edits(rng, mix, n_segments: int = 1) -> list[EditSpec]:
    return [EditSpec(str(rng.choice(list(mix)))) for _ in range(n_segments)]


def format_annotation(qid: str, rid: str, s: SegmentMatch) -> str:
    return f"{qid},{rid},{s.q_start:.3f},{s.q_end:.3f},{s.r_start:.3f},{s.r_end:.3f}"


def read_annotations(path) -> dict[tuple[str, str], list[SegmentMatch]]:
    out: dict[tuple[str, str], list[SegmentMatch]] = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        qid, rid, *vals = line.split(",")
        q0, q1, r0, r1 = (float(v) for v in vals)
        out.setdefault((qid, rid), []).append(SegmentMatch(q0, q1, r0, r1, 1.0))
    return out


def write_annotations(items, path) -> None:
    with open(path, "w") as fh:
        for qid, rid, segs in items:
            for s in segs:
                fh.write(format_annotation(qid, rid, s) + "\n")


def dataset_pairs(n_pairs: int, cfg: SynthConfig, edit_mix=TEMPORAL_EDITS, seed: int = 0,
                  n_segments: int = 1, prefix: str = "") -> list[GroundTruthPair]:
    pairs = []
    for i in range(n_pairs):
        s = pair_seed(seed, i)
        edits = sample_edits(np.random.default_rng(s), edit_mix, n_segments)
        pairs.append(make_pair(cfg, edits, seed=s, query_id=f"{prefix}q{i:05d}", ref_id=f"{prefix}r{i:05d}"))
    return pairs


def make_dataset(out_dir, n_pairs: int, cfg: SynthConfig = SynthConfig(), edit_mix=TEMPORAL_EDITS,
                 seed: int = 0, n_segments: int = 1, extra_manifest: dict | None = None) -> dict:
    """Write features.sgaf, annotations.txt and manifest.json; byte-identical
    for equal arguments."""
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pairs = dataset_pairs(n_pairs, cfg, edit_mix, seed, n_segments)
    seqs = []
    for p in pairs:
        seqs.extend([p.query, p.ref])
    write_sgaf(seqs, out / "features.sgaf")
    write_annotations([(p.query.video_id, p.ref.video_id, p.segments) for p in pairs], out / "annotations.txt")
    lq = {s.video_id: np.flatnonzero(s.low_quality).tolist() for s in seqs if s.low_quality is not None}
    manifest = {
        "kind": "pairs",
        "config": asdict(cfg),
        "n_pairs": n_pairs,
        "seed": seed,
        "edit_mix": list(edit_mix),
        "n_segments": n_segments,
        "pairs": [{"query": p.query.video_id, "ref": p.ref.video_id, "tags": p.tags} for p in pairs],
        "low_quality": lq,
        "files": ["features.sgaf", "annotations.txt"],
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


@dataclass
class LoadedDataset:
    store: FeatureStore
    annotations: dict
    manifest: dict

    def pairs(self) -> list[GroundTruthPair]:
        lq = self.manifest.get("low_quality", {})
        out = []
        for rec in self.manifest["pairs"]:
            q, r = self.store[rec["query"]], self.store[rec["ref"]]
            q = _with_low_quality(q, lq.get(q.video_id))
            r = _with_low_quality(r, lq.get(r.video_id))
            out.append(GroundTruthPair(q, r, self.annotations.get((q.video_id, r.video_id), []), rec.get("tags", [])))
        return out


def _with_low_quality(seq, frames):
    if frames is None:
        return seq
    mask = np.zeros(len(seq), dtype=bool)
    mask[frames] = True
    return FeatureSequence(seq.video_id, seq.basis_fps, seq.vectors, low_quality=mask)


def load_dataset(d) -> LoadedDataset:
    d = Path(d)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"{d}: unreadable manifest ({exc})") from exc
    return LoadedDataset(ingest(d / "features.sgaf"), read_annotations(d / "annotations.txt"), manifest)


def make_retrieval_set(cfg: SynthConfig, n_gallery: int = 20, n_queries: int = 5, seed: int = 0,
                       edit_mix=TEMPORAL_EDITS, max_copies: int = 2):
    """Gallery videos plus queries that splice copies from 1..max_copies gallery videos.

    Returns (gallery, queries, annotations[(qid, gid)] -> segments).
    """
    rng = np.random.default_rng(pair_seed(seed, 10**6))
    gallery = [gen_video(cfg, f"g{i:04d}", seed=pair_seed(seed, i)) for i in range(n_gallery)]
    queries, ann = [], {}
    for qi in range(n_queries):
        qid = f"query{qi:03d}"
        n_copy = int(rng.integers(1, max_copies + 1))
        srcs = rng.choice(n_gallery, size=n_copy, replace=False)
        host_len = int(rng.integers(cfg.length_range[0], cfg.length_range[1] + 1))
        parts = []
        for gi in srcs:
            g = gallery[int(gi)]
            kind = str(rng.choice(list(edit_mix)))
            parts.append((g, kind, int(rng.integers(2**31))))
        host = gen_video(cfg, qid, seed=int(rng.integers(2**31)), length=host_len + 30 * n_copy)
        qv = host.vectors.copy()
        cursor = int(rng.integers(0, 8))
        for g, kind, s in parts:
            prng = np.random.default_rng(s)
            pieces = _copy_piece(cfg, g, kind, prng)
            frames, segs = [], []
            local = 0
            for pkind, L, params in pieces:
                L = min(L, len(g))
                s0 = int(prng.integers(0, len(g) - L + 1))
                src = FeatureSequence(g.video_id, g.basis_fps, g.vectors[s0 : s0 + L])
                edited, mp = apply_temporal(src, "clip" if pkind in ("identity", "concat") else pkind, **params)
                frames.append(edited.vectors)
                segs.append((local, len(mp), mp + s0))
                local += len(edited)
            block = FeatureSequence(qid, cfg.fps, np.concatenate(frames))
            block = apply_spatial_proxy(block, float(prng.uniform(*cfg.spatial_sigma)),
                                        rotation_seed=int(prng.integers(2**31)), seed=int(prng.integers(2**31)),
                                        n_rot=cfg.rotations, angle=cfg.rotation_angle)
            if cursor + len(block) > len(qv):
                break
            qv[cursor : cursor + len(block)] = block.vectors
            for off, ln, mp in segs:
                qs = cursor + off
                ann.setdefault((qid, g.video_id), []).append(
                    SegmentMatch(qs / cfg.fps, (qs + ln) / cfg.fps, mp.min() / cfg.fps, (mp.max() + 1) / cfg.fps, 1.0))
            cursor += len(block) + int(rng.integers(4, 16))
        queries.append(FeatureSequence(qid, cfg.fps, qv))
    return gallery, queries, ann
