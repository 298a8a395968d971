import csv
import re
import subprocess
import sys

import pytest

from seqdelta.cli import run

FAST = """[synthetic]
places = 20
frames = 60
[train]
epochs = 2
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A generated dataset, a short training run and both traverses indexed."""
    d = tmp_path_factory.mktemp("cli")
    (d / "fast.ini").write_text(FAST)
    assert run(["gen-synth", "--spec", str(d / "fast.ini"), "--out", str(d / "data")]) == 0
    assert run(["train", "--config", str(d / "fast.ini"), "--data", str(d / "data"), "--out", str(d / "m.sdck")]) == 0
    for side in ("ref", "query"):
        frames = str(d / "data" / f"{side}_frames.sdvd")
        assert run(["encode", "--ckpt", str(d / "m.sdck"), "--frames", frames, "--mode", "seq", "--out", str(d / f"{side}_seq.sdvd")]) == 0
        assert run(["encode", "--ckpt", str(d / "m.sdck"), "--frames", frames, "--mode", "frame", "--out", str(d / f"{side}_fr.sdvd")]) == 0
        assert run([
            "index", "--seq", str(d / f"{side}_seq.sdvd"), "--frame", str(d / f"{side}_fr.sdvd"),
            "--poses", str(d / "data" / f"{side}_poses.csv"), "--out", str(d / f"{side}_idx"),
        ]) == 0
    return d


def test_gradcheck_default(capsys):
    assert run(["gradcheck", "--seed", "0"]) == 0
    out = capsys.readouterr().out
    err = float(re.search(r"max_rel_error=(\S+)", out).group(1))
    assert err < 1e-4 and "PASS" in out


def test_gradcheck_failure_exit_code(capsys):
    assert run(["gradcheck", "--seed", "0", "--tolerance", "0"]) == 3
    assert "FAIL" in capsys.readouterr().out


def test_unknown_flag(capsys):
    assert run(["train", "--bogus"]) == 1
    err = capsys.readouterr().err
    assert err.startswith("usage: seqdelta train")


def test_missing_subcommand(capsys):
    assert run([]) == 1
    assert "usage: seqdelta" in capsys.readouterr().err


def test_bad_value_is_usage_error(capsys):
    assert run(["eval", "--results", "r", "--poses", "p", "--out", "o", "--ks", "1,x"]) == 1
    assert "usage:" in capsys.readouterr().err


def test_help_exits_zero(capsys):
    assert run(["--help"]) == 0
    assert "gen-synth" in capsys.readouterr().out


def test_data_errors(tmp_path, capsys):
    assert run(["encode", "--ckpt", str(tmp_path / "none"), "--frames", "x", "--out", "y"]) == 2
    (tmp_path / "bad.sdck").write_bytes(b"SDCK garbage")
    assert run(["encode", "--ckpt", str(tmp_path / "bad.sdck"), "--frames", "x", "--out", "y"]) == 2
    (tmp_path / "c.ini").write_text("[train]\nepoch = 1\n")
    assert run(["gen-synth", "--spec", str(tmp_path / "c.ini"), "--out", str(tmp_path / "d")]) == 2
    assert "unknown key" in capsys.readouterr().err


def test_eval_perfect_rankings(tmp_path):
    (tmp_path / "poses.csv").write_text("frame,index\n" + "".join(f"{i},{i}.0\n" for i in range(30)))
    with open(tmp_path / "r.csv", "w") as fh:
        fh.write("query_id,k_star,p_top1,q_top1,ranking\n")
        for q in range(30):
            ranking = [q] + [(q + 10 + j) % 30 for j in range(19)]
            fh.write(f"{q},{q},0.0,0.0,{' '.join(map(str, ranking))}\n")
    assert run(["eval", "--results", str(tmp_path / "r.csv"), "--poses", str(tmp_path / "poses.csv"),
                "--radius", "1", "--metric", "frames", "--ks", "1,5,10,20", "--out", str(tmp_path / "rep")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "rep" / "recall.csv")))
    assert [r["K"] for r in rows] == ["1", "5", "10", "20"]
    assert all(float(r["recall"]) == 1.0 for r in rows)
    assert (tmp_path / "rep" / "recall.svg").exists()


def test_eval_metric_mismatch(tmp_path):
    (tmp_path / "poses.csv").write_text("frame,index\n0,0\n")
    (tmp_path / "r.csv").write_text("query_id,k_star,p_top1,q_top1,ranking\n0,0,0,0,0\n")
    code = run(["eval", "--results", str(tmp_path / "r.csv"), "--poses", str(tmp_path / "poses.csv"),
                "--metric", "meters", "--ks", "1", "--out", str(tmp_path / "o")])
    assert code == 2


def test_pipeline_end_to_end(workspace):
    d = workspace
    assert (d / "m.sdck").exists() and (d / "m.last.sdck").exists()
    for threads in ("1", "8"):
        assert run(["retrieve", "--index", str(d / "ref_idx"), "--query", str(d / "query_idx"),
                    "--threads", threads, "--out", str(d / f"r{threads}.csv")]) == 0
    assert (d / "r1.csv").read_bytes() == (d / "r8.csv").read_bytes()
    assert run(["eval", "--results", str(d / "r1.csv"), "--poses", str(d / "data" / "ref_poses.csv"),
                "--query-poses", str(d / "data" / "query_poses.csv"), "--out", str(d / "rep")]) == 0
    recalls = [float(r["recall"]) for r in csv.DictReader(open(d / "rep" / "recall.csv"))]
    assert recalls == sorted(recalls) and recalls[-1] > 0.5


def test_train_is_deterministic(workspace, tmp_path):
    d = workspace
    args = ["train", "--config", str(d / "fast.ini"), "--data", str(d / "data"), "--quiet"]
    assert run(args + ["--out", str(tmp_path / "a.sdck")]) == 0
    assert run(args + ["--out", str(tmp_path / "b.sdck")]) == 0
    assert (tmp_path / "a.sdck").read_bytes() == (tmp_path / "b.sdck").read_bytes()
    assert (tmp_path / "a.sdck").read_bytes() == (d / "m.sdck").read_bytes()
    assert run(args + ["--out", str(tmp_path / "c.sdck"), "--seed", "1"]) == 0
    assert (tmp_path / "c.sdck").read_bytes() != (tmp_path / "a.sdck").read_bytes()


def test_bench(workspace, capsys):
    d = workspace
    assert run(["bench", "--index", str(d / "ref_idx"), "--query", str(d / "query_idx"), "--reps", "5"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "variant,mean_ms,stdev_ms,median_ms"
    assert [l.split(",")[0] for l in lines[1:]] == ["s1", "s5", "s5to1"]
    assert run(["bench", "--index", str(d / "ref_idx"), "--query", str(d / "query_idx"), "--reps", "5",
                "--ckpt", str(d / "m.sdck"), "--out", str(d / "bench.csv")]) == 0
    assert (d / "bench.csv").read_text().count("\n") == 4
    assert run(["bench", "--index", str(d / "ref_idx"), "--query", str(d / "query_idx"), "--variants", "s3"]) == 2
    assert run(["bench", "--index", str(d / "ref_idx"), "--query", str(d / "query_idx"), "--variants", "x9"]) == 1


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "seqdelta", "gradcheck", "--seed", "1"], capture_output=True, text=True)
    assert proc.returncode == 0 and "PASS" in proc.stdout
