import json

import pytest
import yaml

from segalign import cli, pipeline
from segalign.config import DEFAULTS, config_hash, flag_overrides, resolve
from segalign.errors import ConfigError, DivergenceError

SMALL = ["--set", "synth.train_pairs=16", "--set", "train.epochs=2", "--set", "synth.n_gallery=6",
         "--set", "synth.n_queries=3"]


def test_config_layering(tmp_path):
    assert resolve(None, {}, environ={}) == DEFAULTS
    f = tmp_path / "c.yaml"
    f.write_text(yaml.safe_dump({"seed": 3, "index": {"topN": 10, "nprobe": 2}}))
    env = {"SEGALIGN_INDEX__TOPN": "20", "SEGALIGN_SEED": "5", "UNRELATED": "x"}
    cfg = resolve(f, flag_overrides(["index.topN=30"]), environ=env)
    assert cfg["index"]["topN"] == 30 and cfg["seed"] == 5 and cfg["index"]["nprobe"] == 2
    assert resolve(f, {}, environ={})["index"]["topN"] == 10
    assert resolve(None, flag_overrides(['align.method="dp"']), environ={})["align"]["method"] == "dp"
    with pytest.raises(ConfigError):
        resolve(None, flag_overrides(["index.bogus=1"]), environ={})
    with pytest.raises(ConfigError):
        flag_overrides(["no-equals-sign"])


def test_config_hash_canonical():
    a = {"b": 1, "a": {"y": [1, 2], "x": None}}
    b = {"a": {"x": None, "y": [1, 2]}, "b": 1}
    assert config_hash(a) == config_hash(b) != config_hash({"b": 2, "a": a["a"]})


def test_exit_codes(tmp_path, monkeypatch, capsys):
    assert cli.entry(["--help"]) == 0
    assert cli.entry(["run", "--out", str(tmp_path / "x"), "--set", "nope.key=1"]) == 2
    assert cli.entry(["verify", str(tmp_path / "does-not-exist")]) == 2  # usage error
    bad = tmp_path / "p.json"
    bad.write_text("{not json")
    ann = tmp_path / "a.txt"
    ann.write_text("")
    assert cli.entry(["eval", "--pred", str(bad), "--gt", str(ann)]) == 3

    def boom(cfg, out):
        raise DivergenceError("loss became nan at step 0")

    monkeypatch.setattr(pipeline, "run_pipeline", boom)
    assert cli.entry(["run", "--out", str(tmp_path / "y")]) == 4


def test_pair_commands_smoke(tmp_path, capsys):
    d = tmp_path / "data"
    assert cli.entry(["synth", "--out", str(d), "--pairs", "3", "--seed", "1", "--dim", "16"]) == 0
    assert cli.entry(["synth", "--out", str(d), "--edits", "warp"]) == 2
    for method in ("dp", "hough", "tn"):
        out = tmp_path / f"{method}.json"
        assert cli.entry(["align", "--data", str(d), "--method", method, "--out", str(out)]) == 0
        assert cli.entry(["eval", "--pred", str(out), "--gt", str(d / "annotations.txt")]) == 0
    capsys.readouterr()
    assert cli.entry(["eval", "--pred", str(tmp_path / "dp.json"), "--gt", str(d / "annotations.txt"),
                      "--threshold", "0.5"]) == 0
    rep = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert set(rep) == {"precision", "recall", "f1", "macro_f1", "threshold"}
    assert cli.entry(["teacher-label", "--data", str(d), "--out", str(tmp_path / "k.jsonl")]) == 0
    kf = ["--keyframes", str(tmp_path / "k.jsonl"), "--map-mode", "hold"]
    assert cli.entry(["train-spd", "--data", str(d), "--out", str(tmp_path / "h.sgdm"), "--epochs", "1",
                      "--input-size", "32", *kf]) == 0
    assert cli.entry(["detect", "--model", str(tmp_path / "h.sgdm"), "--data", str(d), *kf,
                      "--out", str(tmp_path / "h.json")]) == 0
    assert cli.entry(["detect", "--model", str(tmp_path / "h.sgdm"), "--data", str(d), "--map-mode", "drop",
                      "--out", str(tmp_path / "x.json")]) == 2
    # spec-style spellings: --pair, JSON lines on stdout, --preds/--gts/--protocol
    capsys.readouterr()
    assert cli.entry(["align", "--data", str(d), "--method", "spd", "--model", str(tmp_path / "h.sgdm"),
                      "--pair", "q00001", "r00001"]) == 0
    lines = [json.loads(x) for x in capsys.readouterr().out.splitlines()]
    assert all(x["query"] == "q00001" and {"q_start", "q_end", "r_start", "r_end", "score"} <= set(x) for x in lines)
    assert cli.entry(["align", "--data", str(d), "--method", "spd", "--pair", "q00001", "r00001"]) == 2
    assert cli.entry(["eval", "--preds", str(tmp_path / "tn.json"), "--gts", str(d / "annotations.txt"),
                      "--protocol", "seconds"]) == 0
    feats, idx = str(d / "features.sgaf"), str(tmp_path / "i.sgix")
    assert cli.entry(["build-index", "--features", feats, "--keyframes", str(tmp_path / "k.jsonl"), "--kind", "ivf",
                      "--kc", "4", "--out", idx]) == 0
    assert cli.entry(["query", "--index", idx, "--features", feats, "--query-id", "q00000", "--topn", "10",
                      "--nprobe", "4", "--out", str(tmp_path / "g.json")]) == 0
    groups = json.loads((tmp_path / "g.json").read_text())["groups"]
    assert groups and {g["query"] for g in groups} == {"q00000"}
    assert cli.entry(["dump-map", "--data", str(d), "--query", "q00000", "--pred", str(tmp_path / "dp.json"),
                      "--out", str(tmp_path / "m.ppm")]) == 0
    assert (tmp_path / "m.ppm").read_bytes().startswith(b"P6")


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("runs")
    out = {}
    for name, extra in (("spd1", []), ("spd2", []), ("dp", ["--method", "dp"])):
        assert cli.entry(["run", "--out", str(base / name), "--seed", "4", *SMALL, *extra]) == 0
        out[name] = base / name
    return out


def test_run_outputs_and_schema(runs):
    rep = json.loads((runs["spd1"] / "report.json").read_text())
    for f in ("report.json", "predictions.json", "manifest.json", "index.sgix", "keyframes.jsonl", "model.sgdm"):
        assert (runs["spd1"] / f).exists()
    assert rep["config_hash"] == config_hash(rep["config"])
    assert set(rep["timings"]) >= {"synth", "keyframes", "index", "query", "align", "eval"}
    dp = json.loads((runs["dp"] / "report.json").read_text())
    assert set(dp) == set(rep) and set(dp["metrics"]) == set(rep["metrics"])
    assert dp["method"] == "dp" and rep["method"] == "spd"


def test_run_determinism(runs):
    a = json.loads((runs["spd1"] / "report.json").read_text())
    b = json.loads((runs["spd2"] / "report.json").read_text())
    assert pipeline.strip_timings(a) == pipeline.strip_timings(b)
    assert (runs["spd1"] / "predictions.json").read_bytes() == (runs["spd2"] / "predictions.json").read_bytes()


def test_verify_and_tamper(runs, tmp_path):
    import shutil
    assert cli.entry(["verify", str(runs["dp"])]) == 0
    t = tmp_path / "t"
    shutil.copytree(runs["dp"], t)
    p = t / "predictions.json"
    p.write_text(p.read_text() + " ")
    assert cli.entry(["verify", str(t)]) == 5
    u = tmp_path / "u"
    shutil.copytree(runs["dp"], u)
    man = json.loads((u / "manifest.json").read_text())
    man["config"]["seed"] = 99
    (u / "manifest.json").write_text(json.dumps(man))
    assert cli.entry(["verify", str(u)]) == 5
