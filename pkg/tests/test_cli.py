import os

import pytest

from tnlcfrs.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from tnlcfrs.corpus import read_discbracket

TINY = ["d=8", "r1=2", "r2=2", "r3=2", "r4=2", "preterminals=3", "nt1=2", "nt2=2",
        "precision=f64", "curriculum_start_len=8", "curriculum_max_len=8", "batch_size=10",
        "max_epochs=2", "patience=2"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def synthetic(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    text, gold = root / "train.txt", root / "train.discbracket"
    assert run("sample", "--n", 60, "--max-len", 8, "--seed", 3, "--v", 8,
               "--out-text", text, "--out-gold", gold, "--save-grammar", root / "g.npm") == 0
    return root


@pytest.fixture(scope="module")
def trained(synthetic):
    out = synthetic / "run"
    argv = ["train", "--train", synthetic / "train.txt", "--out-dir", out, "--seed", 0]
    for item in TINY:
        argv += ["--set", item]
    assert run(*argv) == EXIT_OK
    return out


def test_missing_required_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        run("train", "--out-dir", "x")
    assert exc.value.code == EXIT_USAGE


def test_bad_override_is_usage_error(synthetic, tmp_path):
    code = run("train", "--train", synthetic / "train.txt", "--out-dir", tmp_path,
               "--set", "batch_size=0")
    assert code == EXIT_USAGE


def test_missing_file_is_data_error(tmp_path):
    assert run("eval", "--gold", tmp_path / "nope", "--pred", tmp_path / "nope") == EXIT_DATA


def test_sample_is_reproducible(synthetic, tmp_path):
    again = tmp_path / "again.txt"
    run("sample", "--n", 60, "--max-len", 8, "--seed", 3, "--v", 8, "--out-text", again)
    assert again.read_bytes() == (synthetic / "train.txt").read_bytes()
    trees = read_discbracket(synthetic / "train.discbracket")
    texts = (synthetic / "train.txt").read_text().splitlines()
    assert len(trees) == len(texts) == 60
    assert all(" ".join(w) == t for (w, _), t in zip(trees, texts))


def test_eval_gold_against_itself(synthetic, tmp_path, capsys):
    gold = synthetic / "train.discbracket"
    report, figure = tmp_path / "report.tsv", tmp_path / "f1.png"
    assert run("eval", "--gold", gold, "--pred", gold, "--seed", 0, "--report", report,
               "--figure", figure) == EXIT_OK
    out = capsys.readouterr().out
    assert out.startswith("system\tF1\tDF1\nmodel\t100.00\t")
    assert report.read_text() == out
    assert figure.stat().st_size > 0


def test_eval_length_mismatch(tmp_path):
    gold, pred = tmp_path / "g", tmp_path / "p"
    gold.write_text("(S (A 0=a 1=b) 2=c)\n(S 0=a 1=b)\n")
    pred.write_text("(S (A 0=a 1=b) 2=c)\n")
    assert run("eval", "--gold", gold, "--pred", pred, "--seed", 0) == EXIT_DATA


def test_eval_left_branching_hand_count(tmp_path, capsys):
    gold, pred = tmp_path / "g", tmp_path / "p"
    gold.write_text("(S (A (B 0=a 1=b) 2=c) (D 3=d 4=e))\n")
    pred.write_text("(S (X (X (X 0=a 1=b) 2=c) 3=d) 4=e)\n")
    assert run("eval", "--gold", gold, "--pred", pred, "--seed", 0,
               "--baselines", "left") == EXIT_OK
    rows = dict(line.split("\t", 1) for line in capsys.readouterr().out.splitlines()
                if not line.startswith(("#", "recall")))
    assert rows["model"] == "66.67\tn/a"
    assert rows["left"] == "66.67\tn/a"


def test_gradcheck_passes(capsys):
    assert run("gradcheck", "--seed", 0, "--probes", 40, "--length", 4) == EXIT_OK
    assert "max_relative_error=" in capsys.readouterr().out


def test_train_writes_run_directory(trained):
    names = set(os.listdir(trained))
    assert {"best.npm", "vocab.txt", "config.txt", "BEST", "training_curve.png"} <= names
    config = (trained / "config.txt").read_text().splitlines()
    assert "d=8" in config and "seed=0" in config


def test_parse_worker_counts_agree(synthetic, trained, tmp_path):
    one, eight = tmp_path / "one", tmp_path / "eight"
    logz = tmp_path / "logz.tsv"
    text = synthetic / "train.txt"
    assert run("parse", "--model", trained, "--input", text, "--output", one,
               "--workers", 1, "--logz", logz) == EXIT_OK
    assert run("parse", "--model", trained, "--input", text, "--output", eight,
               "--workers", 8) == EXIT_OK
    assert one.read_bytes() == eight.read_bytes()
    preds = read_discbracket(one)
    assert [w for w, _ in preds] == [w for w, _ in read_discbracket(synthetic / "train.discbracket")]
    lines = logz.read_text().splitlines()
    assert lines[0] == "index\tlength\tlogZ" and len(lines) == 61
    assert run("eval", "--gold", synthetic / "train.discbracket", "--pred", one,
               "--seed", 0) == EXIT_OK


def test_parse_empty_input(trained, tmp_path):
    empty, out = tmp_path / "empty.txt", tmp_path / "out"
    empty.write_text("")
    assert run("parse", "--model", trained, "--input", empty, "--output", out) == EXIT_OK
    assert out.read_text() == ""


def test_bench_rows_and_figure(tmp_path, capsys):
    fig = tmp_path / "scaling.png"
    assert run("bench", "--lengths", "4,6", "--m1", 3, "--m2", 3, "--p", 4, "--v", 10,
               "--ranks", "4,2,4,2", "--repeats", 1, "--seed", 0, "--figure", fig) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "method\tlength\tmedian_ms\tp95_ms\tcensored"
    assert {tuple(l.split("\t")[:2]) for l in lines[1:]} == \
        {("rank", "4"), ("rank", "6"), ("explicit", "4"), ("explicit", "6")}
    assert fig.stat().st_size > 0
