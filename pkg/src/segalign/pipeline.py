"""End-to-end run: synthetic corpus, keyframes, index, query, alignment, report."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import torch

from . import align, spd
from .config import canonical, config_hash
from .errors import ConfigError, DataError, VerificationError
from .evaluate import map_eval, segment_f1, sweep_f1
from .features import FeatureStore, write_sgaf
from .index import QueryPlan, build_flat, build_ivf, plan_and_group, save_index, sparse_map_from_group
from .keyframe import KeyframeScores, TeacherParams, sparse_uniform_interpolate, teacher_select, uniform_mask, write_jsonl
from .simmap import SimilarityMap, dense_map, keyframe_submatrix
from .ssan import frame_scores, load_ssan
from .synth import SynthConfig, dataset_pairs, make_retrieval_set, write_annotations

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
TIMING_KEY = "timings"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def synth_config(cfg: dict) -> SynthConfig:
    s = cfg["synth"]
    return SynthConfig(dim=s["dim"], fps=s["fps"], length_range=tuple(s["length_range"]),
                       extent_range=tuple(s["extent_range"]), seed=cfg["seed"])


def teacher_params(cfg: dict) -> TeacherParams:
    t = cfg["teacher"]
    max_gap = float("inf") if t["max_gap"] is None else t["max_gap"]
    return TeacherParams(t["threshold"], t["min_gap"], max_gap)


def select_keyframes(seq, cfg: dict, scorer=None) -> tuple[np.ndarray, KeyframeScores]:
    """Keyframe indices for one video under ``keyframe.source``."""
    k = cfg["keyframe"]
    n = len(seq)
    if k["source"] == "all":
        labels = np.ones(n, dtype=np.int8)
        scores = labels.astype(np.float64)
    elif k["source"] == "uniform":
        labels = uniform_mask(n, k["interval"]).astype(np.int8)
        scores = labels.astype(np.float64)
    elif k["source"] == "teacher":
        labels = sparse_uniform_interpolate(teacher_select(seq, teacher_params(cfg), seq.low_quality), k["interval"])
        scores = labels.astype(np.float64)
    else:
        if scorer is None:
            raise ConfigError("keyframe.source=scorer needs an SGSM model in detector.model")
        scores = np.maximum(frame_scores(scorer, seq), uniform_mask(n, k["interval"]))
        labels = (scores >= k["threshold"]).astype(np.int8)
    idx = np.flatnonzero(labels)
    if len(idx) == 0:
        idx = np.array([int(np.argmax(scores))])
        labels[idx] = 1
    return idx, KeyframeScores(seq.video_id, scores, labels)


def train_detector(cfg: dict, chash: str) -> spd.DetectorParams:
    """Small detector trained on keyframe zero-fill maps of fresh synthetic pairs."""
    sc = synth_config(cfg)
    pairs = dataset_pairs(cfg["synth"]["train_pairs"], sc, seed=cfg["seed"] + 1, prefix="train_")
    G = cfg["detector"]["input_size"]
    samples = []
    for p in pairs:
        kq, _ = select_keyframes(p.query, cfg)
        kr, _ = select_keyframes(p.ref, cfg)
        M = keyframe_submatrix(dense_map(p.query, p.ref), kq, kr, "zero-fill")
        samples += spd.map_samples(M.dense(), p.boxes(), G)
    t = cfg["train"]
    hyper = spd.TrainHyper(lr=t["lr"], momentum=t["momentum"], weight_decay=t["weight_decay"],
                           epochs=t["epochs"], batch=t["batch"], seed=cfg["seed"])
    return spd.train_spd(samples, spd.DetectorConfig(input_size=G, seed=cfg["seed"]), hyper)


def load_any_model(path):
    """(detector, scorer or None) from an SGDM or SGSM file."""
    data = Path(path).read_bytes()[:4]
    if data == b"SGSM":
        p, _ = load_ssan(path)
        return p.detector, p.scorer
    theta, _ = spd.load_model(path)
    return theta, None


def align_map(M: SimilarityMap, cfg: dict, theta=None) -> tuple[list, float]:
    """Segments and a video-level similarity for one candidate map."""
    a = cfg["align"]
    method = a["method"]
    if method == "spd":
        d = cfg["detector"]
        return spd.detect_pair(theta, M, opts=spd.DetectOptions(d["min_score"], d["nms_iou"], d["max_dets"]))
    if method == "dp":
        matches = align.dp_align(M, align.DPParams(**a["dp"]))
    elif method == "hough":
        matches = align.hough_align(M, align.HoughParams(**a["hough"]))
    else:
        matches = align.tn_align(M, align.TNParams(**a["tn"]))
    return matches, align.video_score(matches, M.rows)


@contextmanager
def _stage(timings: dict, name: str):
    t0 = time.perf_counter()
    yield
    timings[name] = round(time.perf_counter() - t0, 6)
    log.info("stage %s: %.3fs", name, timings[name])


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def run_pipeline(cfg: dict, out_dir) -> dict:
    """Full run into ``out_dir``; returns the report dict (also written to report.json)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.get("threads"):
        torch.set_num_threads(int(cfg["threads"]))
    chash = config_hash(cfg)
    timings: dict = {}
    sc = synth_config(cfg)
    s = cfg["synth"]

    with _stage(timings, "synth"):
        gallery, queries, ann = make_retrieval_set(sc, s["n_gallery"], s["n_queries"], cfg["seed"],
                                                   max_copies=s["max_copies"])
        write_sgaf(gallery, out / "gallery.sgaf")
        write_sgaf(queries, out / "queries.sgaf")
        write_annotations([(q, g, segs) for (q, g), segs in sorted(ann.items())], out / "annotations.txt")

    theta = scorer = None
    if cfg["detector"]["model"]:
        theta, scorer = load_any_model(cfg["detector"]["model"])
    elif cfg["align"]["method"] == "spd":
        with _stage(timings, "train"):
            theta = train_detector(cfg, chash)
        spd.save_model(theta, out / "model.sgdm", {"config_hash": chash})

    with _stage(timings, "keyframes"):
        kf, records = {}, []
        for seq in list(gallery) + list(queries):
            kf[seq.video_id], rec = select_keyframes(seq, cfg, scorer)
            records.append(rec)
        write_jsonl(records, out / "keyframes.jsonl")
        n_total = sum(len(v) for v in list(gallery) + list(queries))
        ratio = sum(len(v) for v in kf.values()) / n_total

    ix = cfg["index"]
    store = FeatureStore(list(gallery) + list(queries))
    gallery_ids = [g.video_id for g in gallery]
    with _stage(timings, "index"):
        keys = {g: kf[g] for g in gallery_ids}
        gstore = FeatureStore(gallery)
        index = (build_ivf(gstore, keys, ix["k_c"], ix["kmeans_iters"], cfg["seed"]) if ix["kind"] == "ivf"
                 else build_flat(gstore, keys))
        save_index(index, out / "index.sgix")

    with _stage(timings, "query"):
        groups = {}
        for q in queries:
            plan = QueryPlan(q.video_id, tuple(int(i) for i in kf[q.video_id]), ix["topN"])
            groups[q.video_id] = (plan, plan_and_group(plan, store, index, ix["topN"], ix["nprobe"], ix["floor"]))

    with _stage(timings, "align"):
        preds, rankings = {}, {}
        for q in queries:
            plan, gs = groups[q.video_id]
            ranked = []
            for g in gs:
                ref = store[g.ref_video_id]
                M = sparse_map_from_group(g, plan, (len(q), len(ref)), (q.basis_fps, ref.basis_fps))
                matches, vscore = align_map(M, cfg, theta)
                preds[(q.video_id, g.ref_video_id)] = matches
                ranked.append((g.ref_video_id, float(vscore)))
            ranked.sort(key=lambda t: (-t[1], t[0]))
            rankings[q.video_id] = ranked

    with _stage(timings, "eval"):
        gts = {k: v for k, v in ann.items()}
        relevance = {}
        for (qid, gid) in ann:
            relevance.setdefault(qid, set()).add(gid)
        thr = cfg["eval"]["score_threshold"]
        sweep = sweep_f1(preds, gts, cfg["eval"]["unit"])
        fixed = segment_f1(preds, gts, thr, cfg["eval"]["unit"])
        m = map_eval(rankings, relevance)

    pred_json = {
        "config_hash": chash,
        "pairs": [{"query": k[0], "ref": k[1], "matches": [x.as_dict() for x in v]}
                  for k, v in sorted(preds.items())],
    }
    _write_json(out / "predictions.json", pred_json)
    report = {
        "config_hash": chash,
        "config": cfg,
        "method": cfg["align"]["method"],
        "compression_ratio": ratio,
        "index": {"kind": ix["kind"], "rows": len(index)},
        "metrics": {
            "segment_f1": fixed.f1, "segment_precision": fixed.precision, "segment_recall": fixed.recall,
            "segment_macro_f1": fixed.macro_f1, "score_threshold": thr,
            "best_f1": sweep.f1, "best_threshold": sweep.threshold,
            "mAP": m.mAP, "skipped_queries": m.skipped_queries,
        },
        "per_query": {q: {"ranking": r, "ap": m.ap_per_query.get(q)} for q, r in sorted(rankings.items())},
        TIMING_KEY: timings,
    }
    _write_json(out / "report.json", report)
    write_manifest(out, cfg)
    return report


def write_manifest(out: Path, cfg: dict) -> dict:
    files = sorted(p.name for p in out.iterdir() if p.is_file() and p.name != MANIFEST)
    man = {"config_hash": config_hash(cfg), "config": cfg,
           "files": {name: sha256_file(out / name) for name in files}}
    _write_json(out / MANIFEST, man)
    return man


def verify_run(run_dir) -> list[str]:
    """Check a run directory's hash chain; returns the checked file names.

    The manifest's config must hash to its config_hash, every listed file must
    match its sha256, and every artifact that carries a config hash (JSON
    artifacts, detector model headers) must carry the same one.
    """
    d = Path(run_dir)
    try:
        man = json.loads((d / MANIFEST).read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"{d}: unreadable manifest ({exc})") from exc
    want = man.get("config_hash")
    if config_hash(man.get("config", {})) != want:
        raise VerificationError("manifest config does not match its config hash")
    for name, digest in sorted(man.get("files", {}).items()):
        p = d / name
        if not p.exists():
            raise VerificationError(f"{name}: missing")
        if sha256_file(p) != digest:
            raise VerificationError(f"{name}: sha256 mismatch")
        if name.endswith(".json"):
            got = json.loads(p.read_text()).get("config_hash")
            if got is not None and got != want:
                raise VerificationError(f"{name}: config hash {got} != {want}")
        elif name.endswith(".sgdm"):
            _, meta = spd.load_model(p)
            if meta.get("config_hash") not in (None, want):
                raise VerificationError(f"{name}: config hash mismatch")
    return sorted(man.get("files", {}))


def strip_timings(report: dict) -> bytes:
    """Canonical report bytes without timing fields (for determinism checks)."""
    r = dict(report)
    r.pop(TIMING_KEY, None)
    return canonical(r)
