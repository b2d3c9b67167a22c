"""Command-line entry point.

Exit codes: 0 ok, 2 config error, 3 data error, 4 training divergence,
5 verification failure.
"""
from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
import numpy as np
import torch

from . import align, pipeline, spd
from .config import config_hash, flag_overrides, resolve
from .errors import ConfigError, DataError, SegalignError
from .evaluate import dump_map_image, segment_f1, sweep_f1
from .features import ingest
from .index import QueryPlan, build_flat, build_ivf, load_index, plan_and_group, save_index
from .keyframe import (KeyframeScores, TeacherParams, novelty_descriptor, read_jsonl, sparse_uniform_interpolate,
                       teacher_select, train_scorer, write_jsonl)
from .simmap import dense_map, keyframe_submatrix
from .ssan import (SsanHyper, SsanParams, load_scorer, make_sample, save_scorer, save_ssan, ssan_forward,
                   train_ssan)
from .synth import SynthConfig, load_dataset, make_dataset, read_annotations

log = logging.getLogger("segalign")


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _pairs(data, query=None, ref=None):
    ds = load_dataset(data)
    pairs = ds.pairs()
    if query:
        pairs = [p for p in pairs if p.query.video_id == query and (ref is None or p.ref.video_id == ref)]
        if not pairs:
            raise DataError(f"no pair with query {query!r}" + (f" and ref {ref!r}" if ref else ""))
    return pairs


def _preds_json(preds: dict, extra: dict | None = None) -> dict:
    out = {"pairs": [{"query": k[0], "ref": k[1], "matches": [m.as_dict() for m in v]}
                     for k, v in sorted(preds.items())]}
    if extra:
        out.update(extra)
    return out


def _read_preds(path) -> dict:
    try:
        rec = json.loads(Path(path).read_text())
        return {(p["query"], p["ref"]): [align.SegmentMatch(**m) for m in p["matches"]] for p in rec["pairs"]}
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: unreadable predictions ({exc})") from exc


def _emit(preds: dict, out, extra: dict) -> None:
    """Predictions JSON to ``out``, or one JSON line per match on stdout."""
    if out:
        _write_json(out, _preds_json(preds, extra))
        click.echo(f"{sum(len(v) for v in preds.values())} segments -> {out}")
        return
    for (q, r), matches in sorted(preds.items()):
        for m in matches:
            click.echo(json.dumps({"query": q, "ref": r, **m.as_dict()}, sort_keys=True))


def _keyframes_of(seq, labels: dict | None, interval):
    if labels is None:
        return np.arange(len(seq))
    if seq.video_id not in labels:
        raise DataError(f"no keyframe labels for {seq.video_id!r}")
    lab = labels[seq.video_id].labels
    idx = np.flatnonzero(sparse_uniform_interpolate(lab, interval))
    return idx if len(idx) else np.array([0])


@click.group()
@click.option("-v", "--verbose", count=True, help="Repeat for more logging.")
@click.option("--threads", type=int, default=None, help="Cap torch worker threads.")
def main(verbose, threads):
    """Segment-level video retrieval and alignment."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    if threads:
        torch.set_num_threads(threads)


@main.command()
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Output directory.")
@click.option("--pairs", "n_pairs", default=100, show_default=True, help="Number of pairs.")
@click.option("--seed", default=0, show_default=True)
@click.option("--segments", default=1, show_default=True, help="Copied segments per pair.")
@click.option("--edits", default=None, help="Comma-separated temporal edit kinds (default: all).")
@click.option("--dim", default=64, show_default=True)
@click.option("--fps", default=2.0, show_default=True)
def synth(out, n_pairs, seed, segments, edits, dim, fps):
    """Write a synthetic pair dataset (features.sgaf, annotations.txt, manifest.json)."""
    from .synth import TEMPORAL_EDITS
    mix = tuple(edits.split(",")) if edits else TEMPORAL_EDITS
    bad = set(mix) - set(TEMPORAL_EDITS)
    if bad:
        raise ConfigError(f"unknown edit kinds {sorted(bad)}")
    man = make_dataset(out, n_pairs, SynthConfig(dim=dim, fps=fps, seed=seed), mix, seed, segments)
    click.echo(f"wrote {man['n_pairs']} pairs to {out}")


@main.command("teacher-label")
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Output JSONL.")
@click.option("--threshold", default=0.85, show_default=True, help="Similarity threshold.")
@click.option("--min-gap", default=4, show_default=True)
@click.option("--max-gap", default=64.0, show_default=True)
def teacher_label(data, out, threshold, min_gap, max_gap):
    """Teacher keyframe labels for every video of a dataset."""
    ds = load_dataset(data)
    p = TeacherParams(threshold, min_gap, max_gap)
    recs = []
    for p_ in ds.pairs():
        for seq in (p_.query, p_.ref):
            lab = teacher_select(seq, p, seq.low_quality)
            recs.append(KeyframeScores(seq.video_id, lab.astype(np.float64), lab))
    write_jsonl(recs, out)
    n = sum(len(r) for r in recs)
    click.echo(f"{len(recs)} videos, ratio {sum(int(r.labels.sum()) for r in recs) / n:.4f}")


@main.command("train-ske")
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--labels", required=True, type=click.Path(exists=True, dir_okay=False), help="Teacher JSONL.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--l2", default=1e-4, show_default=True)
def train_ske(data, labels, out, l2):
    """Fit the per-frame keyframe scorer to teacher labels."""
    lab = read_jsonl(labels)
    phis, ys = [], []
    for p in load_dataset(data).pairs():
        for seq in (p.query, p.ref):
            if seq.video_id in lab:
                phis.append(novelty_descriptor(seq))
                ys.append(lab[seq.video_id].labels)
    if not phis:
        raise DataError("no labelled videos in the dataset")
    scorer = train_scorer(phis, ys, l2)
    save_scorer(scorer, out)
    click.echo(f"scorer weights {scorer.weights.tolist()} bias {scorer.bias:.4f}")


@main.command("train-spd")
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--seed", default=0, show_default=True)
@click.option("--epochs", default=30, show_default=True)
@click.option("--lr", default=0.01, show_default=True)
@click.option("--batch", default=16, show_default=True)
@click.option("--input-size", default=128, show_default=True, help="Tile side G.")
@click.option("--keyframes", "kf_path", default=None, type=click.Path(exists=True, dir_okay=False),
              help="Train on keyframe maps from this JSONL.")
@click.option("--interval", default=8, show_default=True, help="Sparse-uniform interval for --keyframes.")
@click.option("--map-mode", type=click.Choice(["zero-fill", "hold"]), default="zero-fill", show_default=True,
              help="How non-keyframe cells are filled when --keyframes is given.")
@click.option("--init", "init_path", default=None, type=click.Path(exists=True, dir_okay=False))
def train_spd_cmd(data, out, seed, epochs, lr, batch, input_size, kf_path, interval, map_mode, init_path):
    """Train the pattern detector on a dataset's similarity maps."""
    labels = read_jsonl(kf_path) if kf_path else None
    samples = []
    for p in _pairs(data):
        M = dense_map(p.query, p.ref)
        if labels is not None:
            M = keyframe_submatrix(M, _keyframes_of(p.query, labels, interval), _keyframes_of(p.ref, labels, interval),
                                   map_mode)
        samples += spd.map_samples(M.dense(), p.boxes(), input_size)
    cfg = spd.DetectorConfig(input_size=input_size, seed=seed)
    init = spd.load_model(init_path)[0] if init_path else None
    hyper = spd.TrainHyper(lr=lr, epochs=epochs, batch=batch, seed=seed)
    theta = spd.train_spd(samples, cfg, hyper, init=init,
                          callback=lambda e, s: log.info("epoch %d l_bce %.4f l_giou %.4f", e, s.l_bce, s.l_giou))
    spd.save_model(theta, out, {"seed": seed, "epochs": epochs, "data": str(data)})
    click.echo(f"saved detector ({theta.n_params()} params) to {out}")


@main.command("train-ssan")
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--init-spd", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--init-ske", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--seed", default=0, show_default=True)
@click.option("--epochs", default=15, show_default=True)
@click.option("--lr", default=0.01, show_default=True)
@click.option("--interval", default=8, show_default=True)
@click.option("--threshold", default=0.5, show_default=True, help="Score threshold for the reported ratio.")
@click.option("--freeze-scorer", is_flag=True, help="Update only the detector.")
def train_ssan_cmd(data, init_spd, init_ske, out, seed, epochs, lr, interval, threshold, freeze_scorer):
    """Joint scorer + detector fine-tuning from pretrained parts."""
    samples = [make_sample(p) for p in _pairs(data)]
    init = SsanParams(load_scorer(init_ske), spd.load_model(init_spd)[0])
    hyper = SsanHyper(lr=lr, epochs=epochs, seed=seed, interval=interval, threshold=threshold,
                      freeze_scorer=freeze_scorer)
    params, hist = train_ssan(samples, init, hyper)
    for h in hist:
        click.echo(f"epoch {h.epoch} l_ske {h.l_ske:.4f} l_spd {h.l_spd:.4f} ratio {h.compression_ratio:.4f}")
    save_ssan(params, out, {"seed": seed, "epochs": epochs, "interval": interval})


@main.command("build-index")
@click.option("--features", required=True, type=click.Path(exists=True, dir_okay=False), help="SGAF file.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--keyframes", "kf_path", default=None, type=click.Path(exists=True, dir_okay=False),
              help="Index only these keyframes (JSONL); default all frames.")
@click.option("--interval", default=8, show_default=True)
@click.option("--kind", type=click.Choice(["flat", "ivf"]), default="flat", show_default=True)
@click.option("--k-c", "--kc", "k_c", default=16, show_default=True, help="IVF centroids.")
@click.option("--iters", default=20, show_default=True)
@click.option("--seed", default=0, show_default=True)
def build_index(features, out, kf_path, interval, kind, k_c, iters, seed):
    """Index frame (or keyframe) vectors of an SGAF file."""
    store = ingest(features)
    labels = read_jsonl(kf_path) if kf_path else None
    keys = None if labels is None else {v: _keyframes_of(store[v], labels, interval) for v in store}
    index = build_ivf(store, keys, k_c, iters, seed) if kind == "ivf" else build_flat(store, keys)
    save_index(index, out)
    click.echo(f"{kind} index with {len(index)} rows -> {out}")


@main.command()
@click.option("--index", "index_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--features", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--query-id", default=None, help="Single query video (default: every video).")
@click.option("--keyframes", "kf_path", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--interval", default=8, show_default=True)
@click.option("--topn", default=50, show_default=True)
@click.option("--nprobe", default=4, show_default=True)
@click.option("--floor", default=0.5, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Candidate groups JSON.")
def query(index_path, features, query_id, kf_path, interval, topn, nprobe, floor, out):
    """Top-N search per query keyframe, grouped by reference video."""
    index = load_index(index_path)
    store = ingest(features)
    labels = read_jsonl(kf_path) if kf_path else None
    ids = [query_id] if query_id else list(store)
    res = []
    for qid in ids:
        if qid not in store:
            raise DataError(f"unknown query video {qid!r}")
        plan = QueryPlan(qid, tuple(int(i) for i in _keyframes_of(store[qid], labels, interval)), topn)
        for g in plan_and_group(plan, store, index, topn, nprobe, floor):
            res.append({"query": qid, "ref": g.ref_video_id,
                        "hits": [[qi, h.ref.frame_index, h.score] for qi, h in g.hits]})
    _write_json(out, {"groups": res})
    click.echo(f"{len(res)} candidate groups -> {out}")


@main.command("align")
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--method", type=click.Choice(["dp", "hough", "tn", "spd"]), default="dp", show_default=True)
@click.option("--model", default=None, type=click.Path(exists=True, dir_okay=False), help="SGDM file for spd.")
@click.option("--query", "qid", default=None)
@click.option("--ref", "rid", default=None)
@click.option("--pair", nargs=2, default=None, help="Query and reference id (same as --query Q --ref R).")
@click.option("--config", "config_path", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--set", "sets", multiple=True, help="Config override section.key=value.")
@click.option("--out", default=None, type=click.Path(dir_okay=False), help="JSON file (default: JSON lines on stdout).")
def align_cmd(data, method, model, qid, rid, pair, config_path, sets, out):
    """Alignment on the dense maps of a dataset's pairs."""
    cfg = resolve(config_path, flag_overrides(list(sets) + [f"align.method=\"{method}\""]))
    theta = None
    if method == "spd":
        if model is None:
            raise click.UsageError("--method spd needs --model")
        theta = spd.load_model(model)[0]
    qid, rid = pair or (qid, rid)
    preds = {}
    for p in _pairs(data, qid, rid):
        preds[(p.query.video_id, p.ref.video_id)], _ = pipeline.align_map(dense_map(p.query, p.ref), cfg, theta)
    _emit(preds, out, {"method": method, "config_hash": config_hash(cfg)})


@main.command()
@click.option("--model", required=True, type=click.Path(exists=True, dir_okay=False), help="SGDM or SGSM file.")
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--query", "qid", default=None)
@click.option("--ref", "rid", default=None)
@click.option("--keyframes", "kf_path", default=None, type=click.Path(exists=True, dir_okay=False),
              help="Restrict the map to these keyframes (SGDM only).")
@click.option("--interval", default=8, show_default=True)
@click.option("--map-mode", type=click.Choice(["zero-fill", "hold"]), default="zero-fill", show_default=True,
              help="How non-keyframe cells are filled when --keyframes is given.")
@click.option("--min-score", default=0.05, show_default=True)
@click.option("--pair", nargs=2, default=None, help="Query and reference id (same as --query Q --ref R).")
@click.option("--out", default=None, type=click.Path(dir_okay=False), help="JSON file (default: JSON lines on stdout).")
def detect(model, data, qid, rid, kf_path, interval, map_mode, min_score, pair, out):
    """Pattern-detector segments for a dataset's pairs."""
    theta, scorer = pipeline.load_any_model(model)
    labels = read_jsonl(kf_path) if kf_path else None
    opts = spd.DetectOptions(min_score=min_score)
    qid, rid = pair or (qid, rid)
    preds = {}
    for p in _pairs(data, qid, rid):
        M = dense_map(p.query, p.ref)
        key = (p.query.video_id, p.ref.video_id)
        if scorer is not None:
            preds[key], _ = ssan_forward(SsanParams(scorer, theta), (p.query, p.ref), M, interval, opts)
        else:
            if labels is not None:
                M = keyframe_submatrix(M, _keyframes_of(p.query, labels, interval),
                                       _keyframes_of(p.ref, labels, interval), map_mode)
            preds[key], _ = spd.detect_pair(theta, M, opts=opts)
    _emit(preds, out, {"method": "spd", "model": str(model)})


@main.command("eval")
@click.option("--pred", "--preds", "pred", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--gt", "--gts", "gt", required=True, type=click.Path(exists=True, dir_okay=False), help="annotations.txt")
@click.option("--protocol", type=click.Choice(["seconds"]), default="seconds", show_default=True,
              help="Per-second overlap on both timelines (the only protocol).")
@click.option("--threshold", default=None, type=float, help="Score threshold (default: sweep for best F1).")
@click.option("--out", default=None, type=click.Path(dir_okay=False))
def eval_cmd(pred, gt, protocol, threshold, out):
    """Per-second segment precision / recall / F1."""
    preds = _read_preds(pred)
    gts = read_annotations(gt)
    gts = {k: v for k, v in gts.items() if k in preds} or gts
    rep = segment_f1(preds, gts, threshold) if threshold is not None else sweep_f1(preds, gts)
    if threshold is None and rep.threshold is not None:
        fixed = segment_f1(preds, gts, rep.threshold)
        rep.macro_f1, rep.per_pair = fixed.macro_f1, fixed.per_pair
    summary = {"precision": rep.precision, "recall": rep.recall, "f1": rep.f1, "macro_f1": rep.macro_f1,
               "threshold": rep.threshold}
    click.echo(json.dumps(summary, sort_keys=True))
    if out:
        _write_json(out, rep.as_dict())


@main.command("dump-map")
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--query", "qid", required=True)
@click.option("--ref", "rid", default=None)
@click.option("--pred", default=None, type=click.Path(exists=True, dir_okay=False), help="Predictions JSON to overlay.")
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="PPM (P6) image.")
def dump_map(data, qid, rid, pred, out):
    """Render a pair's similarity map with gt (green) and predicted (red) boxes."""
    p = _pairs(data, qid, rid)[0]
    M = dense_map(p.query, p.ref)
    boxes = []
    if pred:
        for m in _read_preds(pred).get((p.query.video_id, p.ref.video_id), []):
            boxes.append((m.r_start * M.col_fps, m.q_start * M.row_fps, m.r_end * M.col_fps, m.q_end * M.row_fps))
    dump_map_image(M, out, p.boxes(), boxes)
    click.echo(f"{M.rows}x{M.cols} map -> {out}")


@main.command()
@click.option("--config", "config_path", default=None, type=click.Path(exists=True, dir_okay=False),
              help="JSON or YAML config file.")
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Run directory.")
@click.option("--method", type=click.Choice(["spd", "dp", "hough", "tn"]), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--set", "sets", multiple=True, help="Config override section.key=value (repeatable).")
def run(config_path, out, method, seed, sets):
    """Full pipeline: synth, keyframes, index, query, align, eval."""
    extra = list(sets)
    if method:
        extra.append(f"align.method=\"{method}\"")
    if seed is not None:
        extra.append(f"seed={seed}")
    cfg = resolve(config_path, flag_overrides(extra))
    rep = pipeline.run_pipeline(cfg, out)
    click.echo(json.dumps({"metrics": rep["metrics"], "timings": rep["timings"]}, sort_keys=True))


@main.command()
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
def verify(run_dir):
    """Check the sha256 / config-hash chain of a run directory."""
    files = pipeline.verify_run(run_dir)
    click.echo(f"ok: {len(files)} files verified")


def entry(argv=None) -> int:
    """Console entry point mapping package errors to exit codes."""
    try:
        main.main(args=argv, standalone_mode=False)
    except SegalignError as exc:
        click.echo(f"error: {exc}", err=True)
        return exc.exit_code
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return 2
    except click.exceptions.Abort:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(entry())
