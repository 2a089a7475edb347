import numpy as np
import pytest

from orthospot.cli import main
from orthospot.dataset import write_wav
from orthospot.frontend import read_feature_dump

TINY = ["mode=synthetic", "synthetic_keywords=3", "synthetic_speakers=10", "synthetic_clips_per_pair=2",
        "tconv_channels=4", "tconv_width=3", "gru_hidden=6", "gru_layers=1", "batch_size=32", "max_epochs=2"]


def sets(*pairs):
    out = []
    for p in pairs:
        out += ["--set", p]
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--out", str(out)] + sets(*TINY, "lambda_orth=0")) == 0
    return out


def test_train_outputs(trained):
    for name in ("metrics.csv", "best.ckpt", "last.ckpt", "config.resolved"):
        assert (trained / name).exists()
    snapshot = (trained / "config.resolved").read_text()
    assert "lambda_orth = 0.0" in snapshot


def test_eval_report(trained, capsys):
    args = ["eval", "--checkpoint", str(trained / "best.ckpt"), "--out", str(trained), "--dump-trials"]
    assert main(args + sets(*TINY)) == 0
    kv = dict(line.split("=", 1) for line in (trained / "eer_test.kv").read_text().split())
    for task in ("kws", "sv"):
        assert 0.0 <= float(kv[f"eer_{task}"]) <= 1.0
        assert int(kv[f"n_trials_{task}"]) > 0
    assert (trained / "trials_test_sv.tsv").exists()
    assert "SV EER" in capsys.readouterr().out


def test_eval_shape_mismatch_exit_4(trained):
    args = ["eval", "--checkpoint", str(trained / "best.ckpt"), "--out", str(trained)]
    assert main(args + sets(*TINY, "gru_hidden=7")) == 4


def test_eval_bad_magic_exit_4(trained, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOPE" + (trained / "best.ckpt").read_bytes()[4:])
    assert main(["eval", "--checkpoint", str(bad), "--out", str(tmp_path)] + sets(*TINY)) == 4


def test_config_error_exit_2(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("seed = 1\nwhat = 2\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert "line 2" in capsys.readouterr().err


def test_missing_dataset_exit_3(tmp_path, monkeypatch):
    monkeypatch.delenv("ORTHOSPOT_DATA", raising=False)
    assert main(["train", "--out", str(tmp_path)] + sets("mode=gscd", f"data_root={tmp_path / 'none'}")) == 3
    assert main(["train", "--out", str(tmp_path)] + sets("mode=gscd")) == 3


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "full_model_tiny" in out


def test_gradcheck_command_fails_on_wrong_backward(monkeypatch, capsys):
    from orthospot import autodiff
    monkeypatch.setattr(autodiff, "_tanh_grad", lambda y: 1.0 - y)
    assert main(["gradcheck"]) == 5
    assert "FAIL  tanh" in capsys.readouterr().out


def test_make_synthetic_manifest_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    common = sets("synthetic_keywords=2", "synthetic_speakers=4", "synthetic_clips_per_pair=1")
    assert main(["make-synthetic", "--out", str(a), "--wav"] + common) == 0
    assert main(["make-synthetic", "--out", str(b)] + common) == 0
    assert (a / "manifest.tsv").read_text() == (b / "manifest.tsv").read_text()
    assert len((a / "manifest.tsv").read_text().splitlines()) == 8
    assert len(list((a / "wav").rglob("*.wav"))) == 8


def test_splits_command(gscd_root, tmp_path, capsys):
    out = tmp_path / "split.tsv"
    args = ["splits", "--root", str(gscd_root), "--seed", "3", "--out", str(out)] + sets("partition=2,1,1")
    assert main(args) == 0
    first = out.read_text()
    assert main(args) == 0
    assert out.read_text() == first
    rows = [line.split("\t") for line in first.splitlines()]
    assert not any(r[1] == "happy" and r[3] == "train" for r in rows)
    assert "57 utterances" in capsys.readouterr().out


def test_splits_needs_root(tmp_path, monkeypatch):
    monkeypatch.delenv("ORTHOSPOT_DATA", raising=False)
    assert main(["splits", "--out", str(tmp_path / "s.tsv")]) == 3


def test_extract_features(tmp_path):
    wav = tmp_path / "a.wav"
    write_wav(wav, 0.1 * np.sin(np.arange(8000) / 5.0))
    assert main(["extract-features", "--input", str(wav), "--out", str(tmp_path / "a.bin")]) == 0
    assert read_feature_dump(tmp_path / "a.bin").shape == (99, 40)
