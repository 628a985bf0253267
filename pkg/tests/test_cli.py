import json
import os
import subprocess
import sys
from pathlib import Path

import pytest

from lkt.cli import main
from lkt.models import load_checkpoint, save_checkpoint
from lkt.tokenizer import Vocabulary

TINY = ["--d-model", "8", "--layers", "1", "--heads", "2", "--d-ff", "16", "--max-len", "128"]
FAST = ["--epochs", "2", "--patience", "2", "--batch-size", "4", "--warmup", "0"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def work(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


@pytest.fixture
def data(work):
    assert run("gen-data", "--out", "d", "--students", 30, "--questions", 10, "--concepts", 3,
               "--min-interactions", 8, "--max-interactions", 12, "--seed", 1) == 0
    assert run("build-vocab", "--data", "d/interactions.csv", "--out", "vocab.txt") == 0
    return work


def reports(path="reports.jsonl"):
    return [json.loads(line) for line in Path(path).read_text().splitlines()]


def test_gen_data(work, capsys):
    assert run("gen-data", "--out", "a", "--students", 10, "--questions", 5, "--seed", 3) == 0
    assert run("gen-data", "--out", "b", "--students", 10, "--questions", 5, "--seed", 3) == 0
    for name in ("interactions.csv", "true_p.csv", "manifest.json"):
        assert (work / "a" / name).read_bytes() == (work / "b" / name).read_bytes()
    manifest = json.loads((work / "a" / "manifest.json").read_text())
    assert 0.5 < manifest["bayes_auc"] < 1
    assert manifest["students"] == 10
    assert "bayes_auc=" in capsys.readouterr().out


def test_gen_data_unwritable(work):
    (work / "file").write_text("x")
    assert run("gen-data", "--out", "file/sub") == 1


def test_vocab_round_trip(data):
    v = Vocabulary.load("vocab.txt")
    v.save("vocab2.txt")
    assert Path("vocab.txt").read_bytes() == Path("vocab2.txt").read_bytes()


def test_train_eval_consistency(data, capsys):
    assert run("train", "--model", "lkt", "--data", "d/interactions.csv", "--vocab", "vocab.txt",
               "--out", "m.ckpt", "--seed", 7, *TINY, *FAST) == 0
    assert run("eval", "--checkpoint", "m.ckpt", "--data", "d/interactions.csv", "--vocab", "vocab.txt",
               "--split", "val", "--seed", 7, *TINY) == 0
    trained, evaluated = reports()
    assert abs(trained["auc"] - evaluated["auc"]) <= 1e-9
    history = [json.loads(l) for l in Path("m.ckpt.history.jsonl").read_text().splitlines()]
    assert len(history) == 2
    out = capsys.readouterr().out
    assert out.count("auc=") == 2


def test_train_determinism_float64(data):
    for name in ("a", "b"):
        assert run("train", "--model", "lkt", "--data", "d/interactions.csv", "--vocab", "vocab.txt",
                   "--out", f"{name}.ckpt", "--seed", 7, "--precision", "float64", *TINY, *FAST) == 0
    a, b = reports()
    assert a["auc"] == b["auc"] and a["acc"] == b["acc"]
    assert Path("a.ckpt").read_bytes() == Path("b.ckpt").read_bytes()
    assert Path("a.ckpt.history.jsonl").read_text() == Path("b.ckpt.history.jsonl").read_text()


def test_checkpoint_round_trip_bytes(data):
    assert run("train", "--model", "dkt", "--data", "d/interactions.csv", "--out", "d.ckpt",
               "--hidden", 4, *FAST) == 0
    save_checkpoint(load_checkpoint("d.ckpt"), "d2.ckpt")
    assert Path("d.ckpt").read_bytes() == Path("d2.ckpt").read_bytes()
    assert run("eval", "--checkpoint", "d.ckpt", "--data", "d/interactions.csv", "--split", "val") == 0
    trained, evaluated = reports()
    assert abs(trained["auc"] - evaluated["auc"]) <= 1e-9


def test_reports_round_trip(data):
    assert run("train", "--model", "dkt", "--data", "d/interactions.csv", "--out", "d.ckpt",
               "--hidden", 4, *FAST) == 0
    line = Path("reports.jsonl").read_text().splitlines()[0]
    assert json.dumps(json.loads(line)) == line


def test_full_pipeline(data, capsys):
    beta = ["gen-data", "--out", "b", "--students", 12, "--questions", 10, "--concepts", 3,
            "--min-interactions", 5, "--max-interactions", 9, "--domain", "beta", "--seed", 2]
    assert run(*beta) == 0
    d = "d/interactions.csv"
    assert run("pretrain", "--data", d, "--vocab", "vocab.txt", "--out", "pre.ckpt", *TINY, *FAST) == 0
    assert run("train", "--model", "lkt", "--data", d, "--vocab", "vocab.txt", "--init", "pre.ckpt",
               "--out", "lkt.ckpt", *TINY, *FAST) == 0
    assert run("train", "--model", "dkt", "--data", d, "--out", "dkt.ckpt", "--hidden", 4, *FAST) == 0
    assert run("eval", "--checkpoint", "lkt.ckpt", "--data", d, "--vocab", "vocab.txt", *TINY) == 0
    assert run("zeroshot", "--checkpoint", "lkt.ckpt", "--dkt-checkpoint", "dkt.ckpt",
               "--data", "b/interactions.csv", "--vocab", "vocab.txt", *TINY) == 0
    zs = [r for r in reports() if r["protocol"] == "zero-shot"]
    assert [r["model"] for r in zs] == ["lkt", "dkt"]
    assert zs[1]["auc"] == 0.5
    assert run("coldstart", "--pretrained", "pre.ckpt", "--data", "b/interactions.csv",
               "--vocab", "vocab.txt", "--fractions", "0.5,1.0", "--hidden", 4, *TINY, *FAST) == 0
    assert len([r for r in reports() if r["protocol"] == "fraction"]) == 4
    assert run("seqlen", "--checkpoint", "lkt.ckpt", "--data", d, "--vocab", "vocab.txt",
               "--buckets", "3,5", *TINY) == 0
    assert run("explain", "--checkpoint", "lkt.ckpt", "--data", d, "--vocab", "vocab.txt",
               "--student", "as0", "--samples", 60, "--out", "expl.jsonl") == 0
    assert len(Path("expl.jsonl").read_text().splitlines()) == 2
    assert run("export-embeddings", "--checkpoint", "lkt.ckpt", "--data", d, "--vocab", "vocab.txt",
               "--out", "emb.csv") == 0
    rows = Path("emb.csv").read_text().splitlines()
    assert len(rows) == 1 + 30
    assert all(len(r.split(",")) == 8 + 2 for r in rows)
    out = capsys.readouterr().out
    assert "zero-shot" in out and "lime top" in out


def test_config_file_and_override(data):
    Path("run.ini").write_text("[common]\nseed = 5\n\n[train]\nepochs = 1\nhidden = 4\n")
    assert run("train", "--config", "run.ini", "--model", "dkt", "--data", "d/interactions.csv",
               "--out", "x.ckpt", "--batch-size", 4) == 0
    assert len(Path("x.ckpt.history.jsonl").read_text().splitlines()) == 1
    assert reports()[-1]["seed"] == 5
    assert run("train", "--config", "run.ini", "--model", "dkt", "--data", "d/interactions.csv",
               "--out", "y.ckpt", "--epochs", 2, "--batch-size", 4) == 0
    assert len(Path("y.ckpt.history.jsonl").read_text().splitlines()) == 2


@pytest.mark.parametrize("ini", [
    "[train]\nbogus_key = 1\n",
    "[nosuchcommand]\nseed = 1\n",
    "[train]\nprecision = float16\n",
    "[train]\nepochs = many\n",
])
def test_bad_config_exits_1(data, ini, capsys):
    Path("bad.ini").write_text(ini)
    code = run("train", "--config", "bad.ini", "--model", "dkt", "--data", "d/interactions.csv", "--out", "z.ckpt")
    assert code == 1
    assert "error" in capsys.readouterr().err


def test_missing_inputs_exit_1(data, capsys):
    assert run("eval", "--checkpoint", "nope.ckpt", "--data", "d/interactions.csv") == 1
    assert "nope.ckpt" in capsys.readouterr().err
    assert run("train", "--model", "lkt", "--data", "d/interactions.csv", "--vocab", "missing.txt",
               "--out", "m.ckpt") == 1
    assert "missing.txt" in capsys.readouterr().err
    assert run("train", "--model", "lkt") == 1
    assert run("no-such-command") == 1


def test_bad_data_exit_1(work):
    Path("bad.csv").write_text("student_id,step,question_id,concept_id,question_text,concept_text,response\n"
                               "s,0,q,c,t,c,7\n")
    assert run("build-vocab", "--data", "bad.csv", "--out", "v.txt") == 1


def test_runtime_failure_exit_2(data):
    Path("broken.ckpt").write_text("# lkt checkpoint v1\n[config]\nkind = lkt\n[tensors]\n[data]\n")
    assert run("eval", "--checkpoint", "broken.ckpt", "--data", "d/interactions.csv",
               "--vocab", "vocab.txt") == 2


def test_data_dir_env(data, monkeypatch):
    monkeypatch.setenv("LKT_DATA_DIR", str(data / "d"))
    assert run("build-vocab", "--data", "interactions.csv", "--out", "v2.txt") == 0
    assert Path("v2.txt").read_bytes() == Path("vocab.txt").read_bytes()


def test_module_entry_point(work):
    env = dict(os.environ, PYTHONPATH=str(Path(__file__).resolve().parents[1] / "src"))
    proc = subprocess.run([sys.executable, "-m", "lkt", "train"], capture_output=True, text=True, env=env)
    assert proc.returncode == 1
    assert "required" in proc.stderr
