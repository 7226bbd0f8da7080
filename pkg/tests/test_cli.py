import subprocess
import sys

import pytest

from attnlab.cli import main


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def trained(toy_small, tmp_path_factory):
    work = tmp_path_factory.mktemp("cli")
    cfg = work / "tiny.cfg"
    cfg.write_text("model.enc_layers = 2\nmodel.enc_units = 8\nmodel.dec_units = 8\n"
                   "train.epochs = 2\nbpe.merges = 20\nmodel.final_red = 32\n")
    code = main(["train", "--config", str(cfg), "--train", str(toy_small["train"]), "--dev",
                 str(toy_small["dev"]), "--out", str(work / "run")])
    assert code == 0
    return work, cfg


def test_train_outputs(trained):
    work, _ = trained
    run_dir = work / "run"
    for name in ("epoch-1.ckpt", "epoch-2.ckpt", "final.ckpt", "merges.txt", "vocab.txt", "metrics.tsv",
                 "config.resolved"):
        assert (run_dir / name).exists(), name
    assert len((run_dir / "metrics.tsv").read_text().splitlines()) == 2


def test_decode_format_and_determinism(trained, toy_small, capsys):
    work, _ = trained
    ckpt = work / "run" / "final.ckpt"
    code, out, _ = run(capsys, "decode", "--checkpoint", ckpt, "--manifest", toy_small["dev"], "--beam", 2)
    assert code == 0
    lines = out.splitlines()
    assert len(lines) == 5
    for line in lines:
        uid, score, *_ = line.split("\t")
        assert uid.startswith("dev-") and float(score) <= 0
    assert run(capsys, "decode", "--checkpoint", ckpt, "--manifest", toy_small["dev"], "--beam", 2)[1] == out


def test_score_and_analysis(trained, toy_small, capsys):
    work, _ = trained
    ckpt = work / "run" / "final.ckpt"
    code, out, _ = run(capsys, "score", "--checkpoint", ckpt, "--manifest", toy_small["dev"])
    assert code == 0 and len(out.splitlines()) == 5
    code, out, _ = run(capsys, "analyze-search", "--checkpoint", ckpt, "--manifest", toy_small["dev"], "--beam", 2)
    assert code == 0 and out.splitlines()[-1].startswith("search_errors=")


def test_lm_commands(trained, toy_small, capsys):
    work, cfg = trained
    run_dir = work / "run"
    text = toy_small["train"].with_suffix(".txt")
    bpe = ["--merges", run_dir / "merges.txt", "--vocab", run_dir / "vocab.txt"]
    assert run(capsys, "lm-train-ngram", "--text", text, "--out", work / "lm.arpa", "--order", 2, *bpe)[0] == 0
    code, out, _ = run(capsys, "ppl", "--lm", work / "lm.arpa", "--text", text, *bpe)
    assert code == 0 and out.startswith("ppl=")
    code, _, _ = run(capsys, "lm-train-lstm", "--text", text, "--out", work / "lm.ckpt", "--epochs", 1,
                     "--checkpoint", run_dir / "final.ckpt")
    assert code == 0
    code, out, _ = run(capsys, "decode", "--checkpoint", run_dir / "final.ckpt", "--manifest", toy_small["dev"],
                       "--beam", 2, "--lm", work / "lm.ckpt", "--lm-weight", 0.2)
    assert code == 0 and len(out.splitlines()) == 5


def test_bpe_commands(tmp_path, capsys):
    text = tmp_path / "t.txt"
    text.write_text("low lower lowest\nnewer wider\n")
    code, _, _ = run(capsys, "bpe-learn", "--text", text, "--merges", 5, "--out-merges", tmp_path / "m",
                     "--out-vocab", tmp_path / "v")
    assert code == 0
    code, out, _ = run(capsys, "bpe-apply", "--merges", tmp_path / "m", "--vocab", tmp_path / "v", "--text", text)
    assert code == 0
    assert [line.replace("@@ ", "") for line in out.splitlines()] == ["low lower lowest", "newer wider"]


def test_featurize(toy_small, tmp_path, capsys):
    assert run(capsys, "featurize", "--manifest", toy_small["dev"], "--out", tmp_path)[0] == 0
    assert len(list(tmp_path.glob("*.feat"))) == 5


def test_wer_command(tmp_path, capsys):
    (tmp_path / "ref").write_text("u1\ta b c\nu2\td e\n")
    (tmp_path / "hyp").write_text("u2\t-1.0\td e\nu1\t-2.0\ta b c\n")
    code, out, _ = run(capsys, "wer", "--ref", tmp_path / "ref", "--hyp", tmp_path / "hyp")
    assert code == 0 and out.strip() == "wer=0.0000"
    (tmp_path / "hyp2").write_text("a x c d\nd e\n")
    (tmp_path / "ref2").write_text("a b c\nd e\n")
    assert run(capsys, "wer", "--ref", tmp_path / "ref2", "--hyp", tmp_path / "hyp2")[1].strip() == "wer=0.4000"


def test_exit_codes(tmp_path, capsys):
    assert run(capsys, "no-such-command")[0] == 1
    assert run(capsys, "decode", "--manifest", "x")[0] == 1
    assert run(capsys, "wer", "--ref", tmp_path / "missing", "--hyp", tmp_path / "missing")[0] == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("model.nonsense = 1\n")
    code, _, err = run(capsys, "train", "--config", bad, "--train", "a", "--dev", "b", "--out", tmp_path)
    assert code == 2 and "model.nonsense" in err


def test_fusion_weight_without_lm_is_usage_error(trained, toy_small, capsys):
    work, _ = trained
    code, _, _ = run(capsys, "decode", "--checkpoint", work / "run" / "final.ckpt", "--manifest",
                     toy_small["dev"], "--lm-weight", 0.3)
    assert code == 1


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "attnlab.cli", "make-toy-data", "--out", str(tmp_path),
                           "--num-train", "2", "--num-dev", "1"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "train.tsv").exists() and (tmp_path / "dev.tsv").exists()
