import json
import subprocess
import sys


from namelink.cli import config_hash, main


def run(*argv):
    return main([str(a) for a in argv])


def test_help_and_usage_errors(capsys):
    assert run("--help") == 0
    assert "gen" in capsys.readouterr().out
    assert run("frobnicate") == 2
    assert run("gen", "--count", "3", "--bogus") == 2
    assert run("eval", "--corpus", "x") == 2   # needs --checkpoint or --baseline


def test_domain_errors_exit_one(tmp_path, capsys):
    assert run("eval", "--corpus", tmp_path / "none", "--baseline", "random",
               "--out-dir", tmp_path) == 1
    err = capsys.readouterr().err.strip().splitlines()[-1]
    assert json.loads(err)["level"] == "error"
    bad = tmp_path / "bad.yaml"
    bad.write_text("- not a mapping\n")
    assert run("gen", "--config", bad, "--count", "5", "--out-dir", tmp_path / "c") == 1


def test_config_hash_is_stable():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def pipeline(root, seed=3):
    corpus, mine, train, ev = (root / d for d in ("corpus", "mine", "train", "eval"))
    assert run("gen", "--count", 300, "--seed", seed, "--out-dir", corpus) == 0
    assert run("mine", "--corpus", corpus, "--out-dir", mine) == 0
    assert run("train", "--corpus", corpus, "--links", mine / "links.jsonl", "--preset", "tiny",
               "--out-dir", train) == 0
    assert run("eval", "--corpus", corpus, "--checkpoint", train / "model.ckpt",
               "--inference", "bipartite", "--out-dir", ev) == 0
    assert run("baseline", "--corpus", corpus, "--seed", seed, "--out-dir", ev) == 0
    return corpus, mine, train, ev


def test_tiny_pipeline_is_reproducible(tmp_path):
    a = pipeline(tmp_path / "a")
    b = pipeline(tmp_path / "b")
    for da, db in zip(a, b):
        names = sorted(p.name for p in da.iterdir())
        assert names == sorted(p.name for p in db.iterdir())
        for name in names:
            if name.startswith("run-"):
                ma, mb = (json.loads((d / name).read_text()) for d in (da, db))
                assert ma["config_hash"] == mb["config_hash"] and ma["command"] == mb["command"]
            else:
                assert (da / name).read_bytes() == (db / name).read_bytes(), name
    manifest = json.loads((a[2] / "run-train.json").read_text())
    assert {"command", "config_hash", "seed", "inputs", "outputs", "version",
            "wall_time_s"} <= set(manifest)

    ev = a[3]
    out = tmp_path / "report"
    runs = [ev / "report.json", ev / "report-l2r-largest.json", ev / "report-random.json"]
    assert run("report", "--runs", *runs, "--out-dir", out) == 0
    rows = (out / "comparison.tsv").read_text().splitlines()
    assert rows[0].split("\t")[:2] == ["run", "accuracy"] and len(rows) == 4
    assert (out / "comparison.png").stat().st_size > 0
    assert run("report", "--runs", *runs, "--labels", "x", "--out-dir", out) == 1


def test_config_file_and_flags(tmp_path):
    cfg = tmp_path / "world.yaml"
    cfg.write_text("n_identities: 80\nseed: 1\n")
    assert run("gen", "--config", cfg, "--count", 20, "--seed", 9, "--out-dir", tmp_path) == 0
    world = json.loads((tmp_path / "world.json").read_text())
    assert world["n_identities"] == 80 and world["seed"] == 9


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "namelink", "--version"], capture_output=True,
                         text=True)
    assert out.returncode == 0 and out.stdout.startswith("namelink ")
