from pathlib import Path

import pytest

from crossalign import cli
from crossalign import training
from crossalign.errors import DivergenceError
from crossalign.persist import load_checkpoint, read_config_file

TINY = """\
d_emb = 8
d_y = 4
d_z = 10
cnn_filters = 4
d_disc = 8
batch_size = 4
"""


def gen(tmp: Path, name="data", *extra) -> Path:
    out = tmp / name
    argv = ["gen-data", "--task", "cipher", "--rate", "1.0", "--n-vocab", "12", "--n-train", "40", "--n-dev", "8",
            "--n-test", "8", "--max-len", "6", "--seed", "3", "--out", str(out), *extra]
    assert cli.main(argv) == 0
    return out


def tiny_config(tmp: Path) -> Path:
    p = tmp / "tiny.cfg"
    p.write_text(TINY)
    return p


def run_train(tmp: Path, data: Path, out: str, *extra) -> Path:
    argv = ["train", "--data", str(data), "--out", str(tmp / out), "--config", str(tiny_config(tmp)),
            "--variant", "cross", "--max-steps", "4", "--lr", "0.003", *extra]
    assert cli.main(argv) == 0
    return tmp / out


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    data = gen(tmp)
    return tmp, data, run_train(tmp, data, "run")


def read_bytes(d: Path) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_gen_data_writes_files_and_is_deterministic(tmp_path):
    a, b = gen(tmp_path, "a"), gen(tmp_path, "b")
    files = read_bytes(a)
    assert {"x1.train.txt", "x2.train.txt", "d1.test.txt", "d2.test.txt", "vocab.txt", "key.tsv", "run.cfg"} <= set(files)
    other = read_bytes(b)
    other["run.cfg"] = files["run.cfg"]  # differs only by the --out path
    assert files == other


def test_gen_data_refuses_non_empty_out_without_force(tmp_path, capsys):
    out = gen(tmp_path)
    argv = ["gen-data", "--n-vocab", "12", "--n-train", "40", "--n-dev", "8", "--n-test", "8", "--out", str(out)]
    assert cli.main(argv) == 2
    assert "--force" in capsys.readouterr().err
    assert cli.main(argv + ["--force"]) == 0


def test_train_outputs(trained):
    _, _, run = trained
    assert {"checkpoint.ckpt", "metrics.log", "run.cfg"} <= {p.name for p in run.iterdir()}
    lines = (run / "metrics.log").read_text().splitlines()
    assert len(lines) == 4 and lines[-1].startswith("step=4")
    cfg = read_config_file(run / "run.cfg")
    assert cfg["d_emb"] == 8 and cfg["max_steps"] == 4


def test_train_is_byte_identical(trained):
    tmp, data, run = trained
    before = read_bytes(run)
    run_train(tmp, data, "run", "--force")
    assert read_bytes(run) == before


def test_checkpoint_roundtrip_transfer_is_bitwise(trained):
    tmp, data, run = trained
    ck = load_checkpoint(run / "checkpoint.ckpt")
    out1, out2 = tmp / "t1.txt", tmp / "t2.txt"
    argv = ["transfer", "--checkpoint", str(run / "checkpoint.ckpt"), "--input", str(data / "d2.test.txt")]
    assert cli.main(argv + ["--output", str(out1)]) == 0
    assert cli.main(argv + ["--output", str(out2)]) == 0
    assert out1.read_bytes() == out2.read_bytes()
    assert len(out1.read_text().splitlines()) == len((data / "d2.test.txt").read_text().splitlines())
    assert ck.state.step == 4


def test_resume_matches_uninterrupted_run(trained):
    tmp, data, run = trained
    full = read_bytes(run)
    run_train(tmp, data, "run", "--max-steps", "2", "--force")
    argv = ["train", "--resume", str(run / "checkpoint.ckpt"), "--data", str(data), "--out", str(run),
            "--max-steps", "4"]
    assert cli.main(argv) == 0
    assert read_bytes(run) == full


def test_config_precedence(tmp_path):
    data = gen(tmp_path)
    cfg = tiny_config(tmp_path)
    cfg.write_text(TINY + "gamma = 0.5\nlam = 0.25\n")
    argv = ["train", "--data", str(data), "--out", str(tmp_path / "r"), "--config", str(cfg), "--max-steps", "1",
            "--lambda", "0.75"]
    assert cli.main(argv) == 0
    got = read_config_file(tmp_path / "r" / "run.cfg")
    assert got["lam"] == 0.75  # flag beats file
    assert got["gamma"] == 0.5  # file beats default
    assert got["dropout"] == 0.5  # default
    assert got["max_steps"] == 1


def test_unknown_config_key_is_a_config_error(tmp_path, capsys):
    data = gen(tmp_path)
    bad = tmp_path / "bad.cfg"
    bad.write_text("d_embed = 8\n")
    argv = ["train", "--data", str(data), "--out", str(tmp_path / "r"), "--config", str(bad)]
    assert cli.main(argv) == 2
    assert "d_embed" in capsys.readouterr().err


def test_transfer_refuses_other_vocabulary(trained, tmp_path):
    _, data, run = trained
    vocab = tmp_path / "v.txt"
    vocab.write_text((data / "vocab.txt").read_text() + "extra\n")
    argv = ["transfer", "--checkpoint", str(run / "checkpoint.ckpt"), "--input", str(data / "d2.test.txt"),
            "--output", str(tmp_path / "o.txt"), "--vocab", str(vocab)]
    assert cli.main(argv) == 2


def test_transfer_of_empty_input(trained, tmp_path):
    _, _, run = trained
    empty = tmp_path / "empty.txt"
    empty.write_text("")
    out = tmp_path / "o.txt"
    argv = ["transfer", "--checkpoint", str(run / "checkpoint.ckpt"), "--input", str(empty), "--output", str(out)]
    assert cli.main(argv) == 0
    assert out.read_text() == ""


def test_eval_rows(trained, tmp_path, capsys):
    _, data, _ = trained
    ref = data / "d1.test.txt"
    report = tmp_path / "report.txt"
    argv = ["eval", "--candidates", str(ref), "--references", str(ref), "--source", str(data / "d2.test.txt"),
            "--data", str(data), "--report", str(report)]
    assert cli.main(argv) == 0
    lines = capsys.readouterr().out.splitlines()
    assert [ln.split()[0] for ln in lines] == ["row=transfer", "row=copy", "row=unigram-match"]
    assert "bleu=100.0000" in lines[0]
    assert "bleu=0.0000" in lines[1]
    assert report.read_text().splitlines() == lines


def test_eval_with_classifier(trained, capsys):
    _, data, _ = trained
    argv = ["eval", "--candidates", str(data / "d1.test.txt"), "--references", str(data / "d1.test.txt"),
            "--data", str(data), "--classifier", "--classifier-steps", "20", "--direction", "2to1"]
    assert cli.main(argv) == 0
    last = capsys.readouterr().out.splitlines()[-1]
    assert last.startswith("row=classifier accuracy=")


def test_missing_data_exits_3(tmp_path):
    argv = ["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "r")]
    assert cli.main(argv) == 3
    (tmp_path / "d").mkdir()
    assert cli.main(["train", "--data", str(tmp_path / "d"), "--out", str(tmp_path / "r")]) == 3
    argv = ["eval", "--candidates", str(tmp_path / "none.txt"), "--references", str(tmp_path / "none.txt")]
    assert cli.main(argv) == 3


def test_divergence_exits_4(tmp_path, monkeypatch, capsys):
    data = gen(tmp_path)

    def boom(state, b1, b2):
        raise DivergenceError("L_rec became non-finite (nan) at step 0", step=0)

    monkeypatch.setitem(training.STEP_FUNCTIONS, "cross", boom)
    argv = ["train", "--data", str(data), "--out", str(tmp_path / "r"), "--config", str(tiny_config(tmp_path)),
            "--max-steps", "2"]
    assert cli.main(argv) == 4
    assert "diverged" in capsys.readouterr().err


def test_theory_demo(capsys):
    assert cli.main(["theory-demo"]) == 0
    out = capsys.readouterr().out
    assert "100/100" in out and "50/50" in out


def test_grad_check_subset(capsys):
    assert cli.main(["grad-check", "--n-seeds", "2", "--only", "matmul", "tanh"]) == 0
    out = capsys.readouterr().out
    assert "2/2 checks" in out


def test_module_entry_point_parses(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["--help"])
    assert e.value.code == 0
    assert "gen-data" in capsys.readouterr().out
