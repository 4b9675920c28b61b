import hashlib
import json
import subprocess
import sys
from pathlib import Path

import pytest

from poma import formats
from poma.cli import main

TINY_CFG = """\
# small enough for a few seconds per verb
image_size = 32
n_cameras = 6
views_per_scene = 3
dim = 16
depth = 1
heads = 2
patch = 8
max_views = 3
lora_rank = 4
lora_alpha = 8
predictor_depth = 1
batch_size = 2
steps = 4
lr = 1e-3
seed = 3
"""


def tree_digest(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def run(args, capsys):
    code = main([str(a) for a in args])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """generate -> pretrain warmup -> pretrain main -> embed, run once for the module."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    data = root / "data"
    assert main(["generate", "--seed", "5", "--scenes", "4", "--out", str(data), "--config", str(cfg)]) == 0
    manifest = data / "manifest.jsonl"
    assert main(["pretrain", "--stage", "warmup", "--config", str(cfg), "--manifest", str(manifest),
                 "--out", str(root / "warm.pomc")]) == 0
    assert main(["pretrain", "--stage", "main", "--config", str(cfg), "--manifest", str(manifest),
                 "--init", str(root / "warm.pomc"), "--out", str(root / "main.pomc")]) == 0
    assert main(["embed", "--ckpt", str(root / "main.pomc"), "--manifest", str(manifest),
                 "--out", str(root / "index.pomi")]) == 0
    return root


def test_generate_is_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        code, out, _ = run(["generate", "--seed", 7, "--scenes", 2, "--out", tmp_path / name], capsys)
        assert code == 0 and out.startswith("2\t")
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    queries = (tmp_path / "a" / "queries.jsonl").read_text().splitlines()
    assert {json.loads(q)["scene_id"] for q in queries} == {"scene_0000", "scene_0001"}


def test_unknown_flag_writes_nothing(tmp_path, capsys):
    code, out, err = run(["generate", "--seed", 1, "--scenes", 1, "--out", tmp_path / "x", "--colour"], capsys)
    assert code == 1 and out == ""
    assert len(err.strip().splitlines()) == 1
    assert not (tmp_path / "x").exists()


def test_missing_verb_and_bad_config_key(tmp_path, capsys):
    assert run([], capsys)[0] == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("colour = red\n")
    code, _, err = run(["gradcheck", "--config", bad], capsys)
    assert code == 1 and "colour" in err


def test_pretrain_outputs(workspace):
    report = (workspace / "main.pomc.report.jsonl").read_text().splitlines()
    head = json.loads(report[0])
    assert head["stage"] == "main" and head["steps"] == 4 and len(report) == 5
    assert (workspace / "main.pomc.loss.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert len(formats.load_index(workspace / "index.pomi")) == 4


def test_retrieve_output_is_stable(workspace, capsys):
    args = ["retrieve", "--index", workspace / "index.pomi", "--query", "a room containing a bed", "--top", 3]
    code, first, _ = run(args, capsys)
    assert code == 0
    lines = [line.split("\t") for line in first.splitlines()]
    assert [r for r, _, _ in lines] == ["1", "2", "3"]
    scores = [float(s) for _, _, s in lines]
    assert scores == sorted(scores, reverse=True)
    assert run(args, capsys)[1] == first


def test_localize_with_figure(workspace, capsys):
    fig = workspace / "loc.png"
    code, out, _ = run(["localize", "--index", workspace / "index.pomi", "--scene", "scene_0001",
                        "--query", "facing north", "--manifest", workspace / "data" / "manifest.jsonl",
                        "--figure", fig], capsys)
    views = [int(line.split("\t")[1]) for line in out.splitlines()]
    assert code == 0 and len(views) == 3 == len(set(views))
    assert fig.stat().st_size > 0


def test_localize_unknown_scene(workspace, capsys):
    code, out, err = run(["localize", "--index", workspace / "index.pomi", "--scene", "nope",
                          "--query", "x"], capsys)
    assert code == 2 and out == "" and len(err.splitlines()) == 1


def test_eval_retrieval(workspace, capsys):
    before = tree_digest(workspace / "data")
    code, out, _ = run(["eval-retrieval", "--index", workspace / "index.pomi",
                        "--queries", workspace / "data" / "queries.jsonl", "--m", 1, "--n", 4,
                        "--figure", workspace / "recall.png"], capsys)
    label, value = out.strip().split("\t")
    assert code == 0 and label == "R@1-4" and float(value) == 1.0  # N equals the index size
    assert (workspace / "recall.png").exists()
    assert tree_digest(workspace / "data") == before


def test_data_errors_exit_two(workspace, tmp_path, capsys):
    junk = tmp_path / "junk.pomi"
    junk.write_bytes(b"POMI\x01\x00")
    code, _, err = run(["retrieve", "--index", junk, "--query", "x"], capsys)
    assert code == 2 and "truncated" in err
    bad_q = tmp_path / "q.jsonl"
    bad_q.write_text('{"texts": ["x"]}\n')
    code, _, _ = run(["eval-retrieval", "--index", workspace / "index.pomi", "--queries", bad_q,
                      "--m", 1, "--n", 1], capsys)
    assert code == 2
    code, _, _ = run(["embed", "--ckpt", junk, "--manifest", workspace / "data" / "manifest.jsonl",
                      "--out", tmp_path / "i.pomi"], capsys)
    assert code == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "poma", "retrieve"], capture_output=True, text=True)
    assert proc.returncode == 1
    assert len(proc.stderr.strip().splitlines()) == 1
