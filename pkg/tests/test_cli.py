import json
import os

import numpy as np
import pytest

from segfusion import cli
from segfusion.segstack import MaskStack, write_segstack

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


def run(*argv):
    return cli.main([str(a) for a in argv])


# ------------------------------------------------------------------ grounding


def test_ground_examples_reproduce_labels():
    for name, finding, want, got in cli.run_ground_examples():
        assert got == want, name


def test_ground_examples_command(capsys):
    assert run("ground", "--examples") == 0
    out = capsys.readouterr().out
    assert "report-only" in out and "FAIL" not in out


def test_ground_labels_cover_all_quadrants():
    masks = np.zeros((212, 16, 16), np.uint8)
    masks[182, :4, :4] = 1  # effusion present, reported
    masks[189, :4, :4] = 1  # pneumothorax present, not reported
    rows = {r["finding"]: r for r in cli.cmd_ground("Left pleural effusion. Atelectasis.", MaskStack.from_array(masks))}
    assert rows["Pleural Effusion"]["label"] == "both-positive"
    assert rows["Atelectasis"]["label"] == "report-only"
    assert rows["Pneumothorax"]["label"] == "segmentation-only"
    assert rows["Fracture"]["label"] == "both-negative"
    assert rows["Edema"]["label"] == "unmapped" and rows["Edema"]["segmentation"] is None
    assert "No Finding" not in rows


def test_ground_missing_mapping_entry_is_unmapped():
    stack = MaskStack.from_array(np.zeros((212, 4, 4), np.uint8))
    rows = {r["finding"]: r for r in cli.cmd_ground("Pneumothorax.", stack, mapping={"Atelectasis": [177]})}
    assert rows["Pneumothorax"]["label"] == "unmapped"
    assert rows["Atelectasis"]["label"] == "both-negative"


def test_ground_from_files(tmp_path, capsys):
    masks = np.zeros((212, 16, 16), np.uint8)
    masks[182, 2:8, 2:8] = 1
    stack = tmp_path / "s.sstk"
    stack.write_bytes(write_segstack(MaskStack.from_array(masks)))
    out = tmp_path / "out"
    assert run("ground", "--report", "There is a left pleural effusion.", "--segstack", stack, "--out", out) == 0
    rows = json.loads((out / "grounding.json").read_text())
    assert {r["finding"]: r["label"] for r in rows}["Pleural Effusion"] == "both-positive"
    assert "Pleural Effusion" in capsys.readouterr().out


def test_ground_bad_segstack(tmp_path):
    bad = tmp_path / "bad.sstk"
    bad.write_bytes(b"JUNK")
    assert run("ground", "--report", "x", "--segstack", bad) == 2
    assert run("ground", "--report", "x", "--segstack", tmp_path / "missing.sstk") == 3


# ------------------------------------------------------------------ stats / eval / convert


def test_stats_command(tmp_path, capsys):
    spec = {
        "groups": [{"label": "segmaps", "scores": [0.4149 + d for d in (-0.004, 0.0, 0.002, 0.003)]},
                   {"label": "baseline", "scores": [0.3872 + d for d in (-0.004, 0.001, 0.0, 0.004)]}],
        "comparisons": [["segmaps", "baseline", "greater"]],
    }
    path = tmp_path / "g.json"
    path.write_text(json.dumps(spec))
    assert run("stats", path, "--out", tmp_path / "o") == 0
    rows = json.loads((tmp_path / "o" / "stats.json").read_text())
    assert rows[0]["p"] < 0.001
    assert "segmaps" in capsys.readouterr().out


def test_stats_validation_and_io_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    assert run("stats", bad) == 2
    deg = tmp_path / "deg.json"
    deg.write_text(json.dumps({"groups": [{"label": "a", "scores": [1, 1]}, {"label": "b", "scores": [2, 2]}],
                               "comparisons": [["a", "b", "two"]]}))
    assert run("stats", deg) == 2
    assert run("stats", tmp_path / "missing.json") == 3


def test_eval_pairs(tmp_path):
    out = tmp_path / "o"
    assert run("eval", "--pairs", os.path.join(FIXTURES, "metric_pairs.jsonl"), "--out", out) == 0
    text = (out / "metrics.json").read_text()
    obj = json.loads(text)
    assert 0 < obj["bleu1"] <= 1 and 0 < obj["ciderD"] <= 10
    assert '"f1": ' in text


def test_eval_needs_inputs(tmp_path):
    assert run("eval") == 2
    bad = tmp_path / "p.jsonl"
    bad.write_text('{"id": 1}\n')
    assert run("eval", "--pairs", bad) == 2


def test_convert_vqa(tmp_path, capsys):
    out = tmp_path / "chats.jsonl"
    assert run("--seed", 7, "convert-vqa", os.path.join(FIXTURES, "reports.jsonl"), out) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 100 and "wrote 100 chats" in capsys.readouterr().out
    assert run("convert-vqa", tmp_path / "none.jsonl", out) == 3


def test_demo_fusion(capsys):
    assert run("demo-fusion") == 0
    out = capsys.readouterr().out
    assert "concatenation+segmaps" in out and "(2, 68, 64)" in out


def test_seed_range():
    assert run("--seed", 2**64, "demo-fusion") == 2
    assert run("--seed", -1, "demo-fusion") == 2


def test_global_flags_survive_subcommand():
    args = cli.build_parser().parse_args(["--seed", "3", "--preset", "paper", "demo-fusion"])
    assert args.seed == 3 and args.preset == "paper"
    args = cli.build_parser().parse_args(["demo-fusion", "--seed", "4"])
    assert args.seed == 4 and args.preset == "desk"


def test_grad_check_command(capsys):
    assert run("grad-check", "--max-entries", 2) == 0
    out = capsys.readouterr().out
    assert "14/14 passed" in out


# ------------------------------------------------------------------ train / eval / ablate


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    cfg = base / "cfg.json"
    cfg.write_text(json.dumps({"use_segmaps": True, "n_samples": 40, "batch_size": 8}))
    dirs = []
    for seed in (0, 1):
        out = base / f"seed{seed}"
        assert run("train", "--config", cfg, "--seed", seed, "--out", out) == 0
        dirs.append(out)
    again = base / "again"
    assert run("train", "--config", cfg, "--seed", 0, "--out", again) == 0
    return base, cfg, dirs, again


def test_train_writes_manifest_and_checkpoints(runs):
    _, _, dirs, _ = runs
    m = cli.RunManifest.read(dirs[0] / "manifest.json")
    assert m.command == "train" and m.seed == 0 and m.variant == "concatenation+segmaps"
    assert m.checkpoints == ["stage1.asrg", "stage2.asrg"] and m.finished >= m.started
    assert m.config_hash == cli.config_hash(m.config)
    assert (dirs[0] / "loss_curve.csv").exists() and (dirs[0] / "data" / "index.jsonl").exists()


def test_train_is_reproducible(runs):
    _, _, dirs, again = runs
    a, b = cli.RunManifest.read(dirs[0] / "manifest.json"), cli.RunManifest.read(again / "manifest.json")
    assert a.config_hash == b.config_hash
    for name in ("stage1.asrg", "stage2.asrg", "loss_curve.csv"):
        assert (dirs[0] / name).read_bytes() == (again / name).read_bytes()


def test_train_rejects_bad_config(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"variant": "replace", "use_segmaps": True}))
    assert run("train", "--config", cfg, "--out", tmp_path / "o") == 2
    cfg.write_text(json.dumps({"learning_rate": 1}))
    assert run("train", "--config", cfg, "--out", tmp_path / "o") == 2


def test_eval_checkpoint_shuffle_none_equals_default(runs, tmp_path):
    _, _, dirs, _ = runs
    ck, data = dirs[0] / "stage2.asrg", dirs[0] / "data"
    assert run("eval", "--checkpoint", ck, "--data", data, "--out", tmp_path / "a") == 0
    assert run("eval", "--checkpoint", ck, "--data", data, "--out", tmp_path / "b") == 0
    assert (tmp_path / "a" / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()
    assert run("eval", "--checkpoint", ck, "--data", data, "--shuffle-seed", 3, "--out", tmp_path / "c") == 0


def test_ablate_shuffle_command(runs, tmp_path, capsys):
    _, _, dirs, _ = runs
    argv = ["ablate-shuffle", "--data", dirs[0] / "data", "--out", tmp_path]
    for d in dirs:
        argv += ["--checkpoint", d / "stage2.asrg"]
    assert run(*argv) == 0
    rep = json.loads((tmp_path / "ablate_shuffle.json").read_text())
    assert len(rep["sorted"]) == len(rep["shuffled"]) == 2
    assert 0.0 <= rep["welch"]["p"] <= 1.0 and rep["welch"]["sided"] == "greater"
    assert "Welch" in capsys.readouterr().out


def test_ablate_shuffle_needs_segmap_checkpoints(runs):
    _, _, dirs, _ = runs
    argv = ["ablate-shuffle", "--data", dirs[0] / "data"]
    for d in dirs:
        argv += ["--checkpoint", d / "stage1.asrg"]
    assert run(*argv) == 2
    assert run("ablate-shuffle", "--data", dirs[0] / "data", "--checkpoint", dirs[0] / "stage2.asrg") == 2
