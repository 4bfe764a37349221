import json
import subprocess
import sys
from fractions import Fraction

import numpy as np
import pytest

from neurobf.cli import main
from neurobf.config import RunConfig
from neurobf.container import load_container
from neurobf.data import read_pgm

TINY = {
    "data": {"n": 24, "height": 16, "width": 16},
    "scheme_config": {"height": 16, "width": 16, "patch": 8, "blocks": 1, "dim": 8, "heads": 2},
    "attacker": {"dim": 8, "depth": 1, "heads": 2, "batch": 8},
    "train": {"steps": 4, "batch": 8, "decoder_depth": 1},
    "eval": {"n_eval": 8, "data_samples": 1, "keys": 2, "epochs": 2},
    "classifier": {"dim": 8, "depth": 1, "heads": 2, "epochs": 2, "batch": 4},
    "dp_image": {"epochs": 1, "latent": 8, "width": 2, "batch": 8},
    "export": {"count": 2, "decoder_epochs": 1},
    "fractions": [0.5, 1.0],
}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "run.json"
    p.write_text(json.dumps(TINY))
    return p


def run(*argv):
    return main([str(a) for a in argv])


# --- exit codes -----------------------------------------------------------------


def test_missing_dataset_is_a_data_error_with_no_outputs(tmp_path, capsys):
    out = tmp_path / "out"
    assert run("attack", "--data", tmp_path / "nope.ckpt", "--out", out) == 3
    assert not out.exists()
    assert "nope.ckpt" in capsys.readouterr().err


def test_config_errors_exit_2_with_no_outputs(tmp_path, capsys):
    out = tmp_path / "out"
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"stepz": 3}}))
    assert run("gen-data", "--config", bad, "--out", out) == 2
    assert "train.stepz" in capsys.readouterr().err
    assert run("gen-data", "--config", tmp_path / "missing.json", "--out", out) == 2
    assert run("attack", "--scheme", "rot13", "--out", out) == 2
    assert run("utility", "--fraction", "1.5", "--out", out) == 2
    assert run("gen-data", "--set", "data.n=two", "--out", out) == 2
    assert run("report", "--out", out) == 2
    assert not out.exists()


def test_corrupt_container_is_a_data_error(tmp_path):
    bad = tmp_path / "d.ckpt"
    bad.write_bytes(b"\x05\x00\x00\x00\x00\x00\x00\x00{}")
    assert run("attack", "--data", bad, "--out", tmp_path / "out") == 3
    assert not (tmp_path / "out").exists()


def test_obfuscator_scheme_needs_its_checkpoint(tmp_path, cfg_path):
    out = tmp_path / "out"
    assert run("encode", "--config", cfg_path, "--scheme", "obfuscator", "--out", out) == 2
    assert run("encode", "--config", cfg_path, "--scheme", "obfuscator", "--set", "artifacts.obfuscator=nope", "--out", out) == 3
    assert not out.exists()


def test_bad_thread_count(tmp_path, monkeypatch):
    monkeypatch.setenv("OBF_NUM_THREADS", "many")
    assert run("gen-data", "--out", tmp_path / "o") == 2


def test_console_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "neurobf.cli", "attack", "--data", str(tmp_path / "x"), "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert r.returncode == 3 and "error:" in r.stderr


# --- reference points --------------------------------------------------------------


def test_uniform_null_guesswork(tmp_path):
    out = tmp_path / "u"
    assert run("attack", "--scheme", "uniform-null", "--set", "eval.n_eval=16", "--set", "data.n=16", "--set", "data.height=8", "--set", "data.width=8", "--out", out) == 0
    report = json.loads((out / "privacy.json").read_text())
    assert Fraction(report["guesswork"]["mean"]).limit_denominator(100) == Fraction(257, 17)
    assert report["guesswork"]["mean"] == pytest.approx(257 / 17, abs=1e-12)
    assert report["reid_auc"]["mean"] == 0.5


def test_identity_scheme_is_broken(tmp_path):
    out = tmp_path / "id"
    cfg = tmp_path / "id.json"
    cfg.write_text(json.dumps({"data": {"n": 64, "seed": 5}, "attacker": {"dim": 32, "depth": 1}, "eval": {"n_eval": 64, "data_samples": 1, "keys": 2, "epochs": 40}}))
    assert run("attack", "--config", cfg, "--scheme", "identity", "--out", out) == 0
    report = json.loads((out / "privacy.json").read_text())
    assert report["guesswork"]["mean"] <= 2
    assert report["scheme"] == "identity"


# --- commands end to end -------------------------------------------------------------


def test_pipeline_commands(tmp_path, cfg_path, capsys):
    d = tmp_path
    assert run("gen-data", "--config", cfg_path, "--out", d / "data") == 0
    data = d / "data" / "dataset.ckpt"
    tensors, meta = load_container(data)
    assert tensors["data/images"].shape == (24, 16, 16) and "synthetic_spec" in meta
    assert RunConfig.load(d / "data" / "config.json").data.n == 24

    base = ["--config", cfg_path, "--data", data]
    assert run("train-syfer", *base, "--out", d / "obf") == 0
    log = [json.loads(line) for line in (d / "obf" / "train_log.jsonl").read_text().splitlines()]
    assert len(log) == 4 and {"L_reid", "L_rec", "which_updated"} <= set(log[0])
    obf = d / "obf" / "obfuscator.ckpt"
    assert all(k.startswith("scheme/") for k in load_container(obf)[0])

    syfer = base + ["--scheme", "syfer", "--set", f"artifacts.obfuscator={obf}"]
    assert run("encode", *syfer, "--out", d / "enc") == 0
    enc, _ = load_container(d / "enc" / "encoded.ckpt")
    assert enc["encoded/tokens"].shape == (24, 4, 8)
    assert set(load_container(d / "enc" / "key.ckpt")[0]) >= {"key/weights", "key/perm"}

    assert run("train-attacker", *syfer, "--out", d / "att") == 0
    assert run("attack", *syfer, "--set", f"artifacts.attacker={d / 'att' / 'attacker.ckpt'}", "--out", d / "atk") == 0
    privacy = json.loads((d / "atk" / "privacy.json").read_text())
    assert privacy["n"] == 8 and set(privacy["provenance"]) == {"config", "dataset", "obfuscator", "attacker"}

    assert run("utility", *syfer, "--out", d / "util") == 0
    utility = json.loads((d / "util" / "utility.json").read_text())
    assert 0 <= utility["auc"] <= 1 and utility["scheme"] == "obfuscator"
    assert run("learning-curve", *base, "--out", d / "lc") == 0
    assert [r["fraction"] for r in json.loads((d / "lc" / "learning_curve.json").read_text())] == [0.5, 1.0]

    assert run("train-dp-image", *base, "--out", d / "dpi") == 0
    dpi = ["--scheme", "dp-image", "--set", f"artifacts.dp_image={d / 'dpi' / 'dp_image.ckpt'}"]
    assert run("encode", *base, *dpi, "--out", d / "dpenc") == 0
    assert not (d / "dpenc" / "key.ckpt").exists()

    assert run("export-images", *syfer, "--out", d / "img") == 0
    for group in ("raw", "encoded", "reconstructed"):
        files = sorted((d / "img" / group).iterdir())
        assert len(files) == 2 and read_pgm(files[0]).dtype == np.uint8

    capsys.readouterr()
    assert run("report", d / "atk" / "privacy.json", d / "util" / "utility.json", "--out", d / "rep") == 0
    text = (d / "rep" / "report.txt").read_text()
    assert text == capsys.readouterr().out
    assert "guesswork" in text and "obfuscator" in text and "avg" in text


def test_resume_continues_the_log(tmp_path, cfg_path):
    base = ["--config", cfg_path, "--set", "train.checkpoint_every=2"]
    full, part = tmp_path / "full", tmp_path / "part"
    assert run("train-syfer", *base, "--out", full) == 0
    assert run("train-syfer", *base, "--set", "train.steps=2", "--out", part) == 0
    assert run("train-syfer", *base, "--resume", "--out", part) == 0
    assert (part / "train_log.jsonl").read_text() == (full / "train_log.jsonl").read_text()
    assert (part / "obfuscator.ckpt").read_bytes() == (full / "obfuscator.ckpt").read_bytes()


def test_reruns_in_separate_directories_are_byte_identical(tmp_path, monkeypatch):
    trees = []
    for name in ("a", "b"):
        root = tmp_path / name
        root.mkdir()
        (root / "run.json").write_text(json.dumps(TINY))
        monkeypatch.chdir(root)
        assert run("gen-data", "--config", "run.json", "--out", "data") == 0
        assert run("train-syfer", "--config", "run.json", "--data", "data/dataset.ckpt", "--out", "obf") == 0
        syfer = ["--config", "run.json", "--data", "data/dataset.ckpt", "--scheme", "syfer", "--set", "artifacts.obfuscator=obf/obfuscator.ckpt"]
        assert run("attack", *syfer, "--out", "atk") == 0
        assert run("utility", *syfer, "--out", "util") == 0
        trees.append({p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()})
    assert trees[0] == trees[1]
    assert len(trees[0]) >= 10


def test_seed_changes_outputs(tmp_path, cfg_path):
    assert run("gen-data", "--config", cfg_path, "--out", tmp_path / "a") == 0
    assert run("gen-data", "--config", cfg_path, "--seed", "1", "--set", "data.seed=1", "--out", tmp_path / "b") == 0
    assert (tmp_path / "a" / "dataset.ckpt").read_bytes() != (tmp_path / "b" / "dataset.ckpt").read_bytes()
    assert json.loads((tmp_path / "b" / "config.json").read_text())["seed"] == 1
