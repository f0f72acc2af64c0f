import json
import subprocess
import sys

import numpy as np
import pytest

from trackpool.cli import main
from trackpool.data import TemplateRecord, TrackRecord, read_templates, read_tracks, write_templates, write_tracks

TRAIN_FLAGS = [
    "--heads", "2", "--blocks", "1", "--iterations", "20", "--eval-every", "10",
    "--templates-per-batch", "8", "--identities-per-batch", "4", "--frames-per-template", "4",
]


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    tracks = root / "tracks.jsonl"
    assert run("synth", "--out", tracks, "--identities", 12, "--sessions", 3, "--frames", 6, "--dim", 8, "--seed", 1) == 0
    ckpt = root / "model.ckpt"
    assert run("train", "--tracks", tracks, "--out", ckpt, "--log", root / "train.log", *TRAIN_FLAGS,
               "--iterations", 150, "--eval-every", 50, "--log-every", 15, "--lr", 1e-2) == 0
    return root, tracks, ckpt


def test_synth_single_and_multi(tmp_path):
    out = tmp_path / "s.jsonl"
    assert run("synth", "--out", out, "--identities", 3, "--sessions", 2, "--frames", 4, "--dim", 6, "--sigma", 0) == 0
    tracks = read_tracks(out)
    assert len(tracks) == 6
    for t in tracks:
        np.testing.assert_allclose(t.embeddings, t.embeddings[[0]].repeat(4, axis=0), atol=0)

    videos, truth = tmp_path / "v.jsonl", tmp_path / "truth.jsonl"
    assert run("synth", "--kind", "multi", "--out", videos, "--truth", truth, "--identities", 6, "--sessions", 2,
               "--frames", 5, "--dim", 6, "--videos", 4, "--min-identities", 2, "--max-identities", 3,
               "--frames-sampled", 12) == 0
    recs = [json.loads(line) for line in truth.read_text().splitlines()]
    assert len(read_tracks(videos)) == len(recs) == 4
    for rec in recs:
        assert 2 <= rec["true_k"] <= 3
        assert len(rec["mask"]) == len(rec["labels"]) <= 12
    assert run("synth", "--kind", "multi", "--out", tmp_path / "w.jsonl") == 1
    assert not (tmp_path / "w.jsonl").exists()


def test_train_writes_checkpoint_and_log(workspace):
    root, _, ckpt = workspace
    assert ckpt.stat().st_size > 0
    records = [json.loads(line) for line in (root / "train.log").read_text().splitlines()]
    assert records[0]["iteration"] == 0 and "icpg" in records[0]
    losses = [r["loss"] for r in records if "loss" in r]
    assert len(losses) == 10
    assert losses[-1] < losses[0]


def test_train_invalid_batch_spec_leaves_nothing(workspace, tmp_path):
    _, tracks, _ = workspace
    out, logf = tmp_path / "bad.ckpt", tmp_path / "bad.log"
    flags = list(TRAIN_FLAGS)
    flags[flags.index("--templates-per-batch") + 1] = "9"
    assert run("train", "--tracks", tracks, "--out", out, "--log", logf, *flags) == 1
    assert not out.exists() and not logf.exists()
    assert list(tmp_path.iterdir()) == []


def test_aggregate_single_frame_and_baseline(tmp_path, workspace):
    _, _, ckpt = workspace
    rng = np.random.default_rng(0)
    tracks = [TrackRecord("one", "a", [4], rng.standard_normal((1, 8))),
              TrackRecord("many", "b", [0, 1, 2], rng.standard_normal((3, 8)))]
    src = tmp_path / "in.jsonl"
    write_tracks(src, tracks)
    stored = read_tracks(src)
    assert run("aggregate", "--tracks", src, "--ckpt", ckpt, "--out", tmp_path / "sa.jsonl") == 0
    sa = read_templates(tmp_path / "sa.jsonl")
    np.testing.assert_allclose(sa[0].vector, stored[0].embeddings[0], rtol=2.0**-23)
    assert run("aggregate", "--tracks", src, "--baseline-avg", "--out", tmp_path / "avg.jsonl") == 0
    avg = read_templates(tmp_path / "avg.jsonl")
    np.testing.assert_allclose(avg[1].vector, stored[1].embeddings.mean(axis=0), rtol=2.0**-23)
    assert [t.identity for t in avg] == ["a", "b"]


def test_aggregate_multi_two_clusters(tmp_path, workspace):
    _, _, ckpt = workspace
    rng = np.random.default_rng(1)
    x = np.vstack([np.eye(8)[0] + 0.01 * rng.standard_normal((5, 8)), np.eye(8)[3] + 0.01 * rng.standard_normal((4, 8))])
    x = x[rng.permutation(9)]
    src = tmp_path / "video.jsonl"
    write_tracks(src, [TrackRecord("v", "who", np.arange(0, 18, 2), x)])
    out, sidecar = tmp_path / "t.jsonl", tmp_path / "map.jsonl"
    assert run("aggregate", "--tracks", src, "--ckpt", ckpt, "--multi", "--map", sidecar, "--out", out,
               "--select", "biggest") == 0
    templates = read_templates(out)
    rows = [json.loads(line) for line in sidecar.read_text().splitlines()]
    assert len(templates) == 2
    assert sorted(len(r["frames"]) for r in rows) == [4, 5]
    chosen = [r for r in rows if r["selected"]]
    assert len(chosen) == 1 and len(chosen[0]["frames"]) == 5
    assert [t.identity for t in templates] == ["who" if r["selected"] else None for r in rows]
    assert run("aggregate", "--tracks", src, "--ckpt", ckpt, "--multi", "--out", tmp_path / "x.jsonl") == 1


def test_aggregate_errors(tmp_path, workspace):
    _, tracks, ckpt = workspace
    assert run("aggregate", "--tracks", tracks, "--ckpt", tmp_path / "missing.ckpt", "--out", tmp_path / "o") == 1
    assert run("aggregate", "--tracks", tracks, "--out", tmp_path / "o") == 1
    other = tmp_path / "d4.jsonl"
    write_tracks(other, [TrackRecord("x", "a", [0], np.ones((1, 4)))])
    assert run("aggregate", "--tracks", other, "--ckpt", ckpt, "--out", tmp_path / "o") == 1
    assert not (tmp_path / "o").exists()
    with pytest.raises(SystemExit) as info:
        run("aggregate", "--out", tmp_path / "o")
    assert info.value.code != 0


def test_split_reports_mpe(tmp_path):
    videos, truth = tmp_path / "v.jsonl", tmp_path / "truth.jsonl"
    assert run("synth", "--kind", "multi", "--out", videos, "--truth", truth, "--identities", 10, "--sessions", 1,
               "--frames", 8, "--dim", 32, "--sigma", 0.02, "--min-centroid-distance", 0.5, "--videos", 10,
               "--min-identities", 2, "--max-identities", 4) == 0
    report = tmp_path / "report.txt"
    assert run("split", "--tracks", videos, "--truth", truth, "--out", tmp_path / "s.jsonl", "--report", report) == 0
    values = dict(line.split("=") for line in report.read_text().splitlines())
    assert float(values["mpe"]) == 0.0 and float(values["exact_k"]) == 1.0
    truths = [json.loads(line) for line in truth.read_text().splitlines()]
    for rec, t in zip((json.loads(line) for line in (tmp_path / "s.jsonl").read_text().splitlines()), truths):
        assert rec["k"] == t["true_k"]


def _kv(text):
    return dict(line.split("=", 1) if line.count("=") == 1 else line.rsplit("=", 1) for line in text.splitlines())


def test_eval_hand_pairs(tmp_path, capsys):
    def at(cos):
        return np.array([cos, np.sqrt(1 - cos**2)])

    recs = [TemplateRecord("anchor", "A", np.array([1.0, 0.0])), TemplateRecord("x1", "A", at(0.9)),
            TemplateRecord("x2", "B", at(0.8)), TemplateRecord("x3", "A", at(0.7)), TemplateRecord("x4", "C", at(0.1))]
    tpl, pairs = tmp_path / "t.jsonl", tmp_path / "pairs.csv"
    write_templates(tpl, recs)
    pairs.write_text("template_a,template_b\nanchor,x1\nanchor,x2\nanchor,x3\nanchor,x4\n")
    assert run("eval", "--templates", tpl, "--pairs", pairs, "--roc", tmp_path / "roc.csv") == 0
    values = _kv(capsys.readouterr().out)
    assert float(values["auc"]) == pytest.approx(0.75, abs=1e-6)
    assert (tmp_path / "roc.csv").read_text().startswith("far,tar\n")


def test_eval_separable_and_shuffled(tmp_path, capsys):
    rng = np.random.default_rng(2)
    vecs = np.repeat(np.eye(16), 3, axis=0) + 0.01 * rng.standard_normal((48, 16))
    labels = [f"p{i // 3}" for i in range(48)]
    tpl = tmp_path / "t.jsonl"
    write_templates(tpl, [TemplateRecord(f"t{i}", lab, v) for i, (lab, v) in enumerate(zip(labels, vecs))])
    assert run("eval", "--templates", tpl) == 0
    values = _kv(capsys.readouterr().out)
    assert float(values["tar@far=1e-06"]) == 1.0
    assert float(values["rank1"]) == 1.0

    noise = rng.standard_normal((600, 16))
    shuffled = [f"p{i}" for i in rng.integers(0, 20, 600)]
    write_templates(tpl, [TemplateRecord(f"t{i}", lab, v) for i, (lab, v) in enumerate(zip(shuffled, noise))])
    assert run("eval", "--templates", tpl) == 0
    assert abs(float(_kv(capsys.readouterr().out)["auc"]) - 0.5) < 0.05


def test_eval_compare_avg(workspace, tmp_path):
    _, tracks, ckpt = workspace
    out = tmp_path / "report.txt"
    assert run("eval", "--tracks", tracks, "--ckpt", ckpt, "--compare", "avg", "--out", out) == 0
    values = _kv(out.read_text())
    for key in ("sa.auc", "avg.auc", "delta.auc", "delta.rank1"):
        assert key in values
    assert float(values["delta.auc"]) == pytest.approx(float(values["sa.auc"]) - float(values["avg.auc"]), abs=2e-6)
    assert run("eval", "--tracks", tracks, "--baseline-avg", "--multi") == 0
    assert run("eval", "--tracks", tracks, "--templates", tracks) == 1


def _all_bytes(folder):
    return {p.name: p.read_bytes() for p in sorted(folder.iterdir())}


def test_every_subcommand_is_deterministic(tmp_path):
    def pipeline(folder):
        folder.mkdir()
        tracks, videos, truth = folder / "tracks.jsonl", folder / "videos.jsonl", folder / "truth.jsonl"
        ckpt = folder / "m.ckpt"
        common = ["--seed", 5]
        assert run("synth", "--out", tracks, "--identities", 10, "--sessions", 3, "--frames", 5, "--dim", 8,
                   "--degraded", 0.2, *common) == 0
        assert run("synth", "--kind", "multi", "--out", videos, "--truth", truth, "--identities", 10, "--sessions", 2,
                   "--frames", 5, "--dim", 8, "--videos", 3, "--max-identities", 4, "--frames-sampled", 12, *common) == 0
        assert run("train", "--tracks", tracks, "--out", ckpt, "--log", folder / "log.jsonl", *TRAIN_FLAGS, *common) == 0
        assert run("train", "--tracks", tracks, "--out", folder / "multi.ckpt", "--multi", "--heads", 2, "--blocks", 1,
                   "--iterations", 10, "--eval-every", 5, "--max-identities", 3, "--frames-sampled", 8,
                   "--horizon", 5, *common) == 0
        assert run("aggregate", "--tracks", tracks, "--ckpt", ckpt, "--out", folder / "tpl.jsonl", "--workers", 2, *common) == 0
        assert run("aggregate", "--tracks", videos, "--ckpt", ckpt, "--multi", "--map", folder / "map.jsonl",
                   "--out", folder / "mtpl.jsonl", *common) == 0
        assert run("split", "--tracks", videos, "--truth", truth, "--out", folder / "split.jsonl",
                   "--report", folder / "split.txt", *common) == 0
        assert run("eval", "--tracks", tracks, "--ckpt", ckpt, "--compare", "avg", "--out", folder / "eval.txt",
                   "--roc", folder / "roc.csv", *common) == 0
        return _all_bytes(folder)

    first, second = pipeline(tmp_path / "a"), pipeline(tmp_path / "b")
    assert first.keys() == second.keys()
    for name in first:
        assert first[name] == second[name], name


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "trackpool", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for sub in ("synth", "train", "aggregate", "split", "eval"):
        assert sub in proc.stdout
