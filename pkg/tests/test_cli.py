import json
import subprocess
import sys

import numpy as np
import pytest

from convcaps3d.cli import main
from convcaps3d.config import DEFAULTS, DOCS, ConfigError, RunConfig
from convcaps3d.model import ModelConfig, build_convcaps, count_params, load_checkpoint

TINY = """\
in_channels=1
classes=2
visual_channels=4,4,8
encoder_channels=16,16
capsule_types=2,2
capsule_dims=4,4,8
decoder_channels=16,8,4
recon_hidden=8
patch_size=16,16,16
learning_rate=0.003
val_every=10
"""


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--out", str(out), "--count", "2", "--size", "16",
                 "--classes", "2", "--modalities", "1", "--seed", "3"]) == 0
    return out


def tiny_config(tmp_path, data_dir, name, iterations):
    cfg = tmp_path / f"{name}.cfg"
    cfg.write_text(TINY + f"max_iterations={iterations}\n"
                   f"data={data_dir / 'manifest.json'}\nout={tmp_path / name}\n")
    return cfg


# ---- gen-data --------------------------------------------------------------

def test_gen_data_is_byte_identical(tmp_path):
    for run in ("a", "b"):
        assert main(["gen-data", "--out", str(tmp_path / run), "--count", "1",
                     "--seed", "7", "--size", "16"]) == 0
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_gen_data_rejects_indivisible_size(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path), "--size", "20,20,20"]) == 2
    assert "divisible by 8" in capsys.readouterr().err


def test_gen_data_manifest_lists_cases(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "--count", "3", "--size", "16"]) == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert len(manifest["cases"]) == 3
    assert [c["seed"] for c in manifest["cases"]] == [0, 1, 2]


def test_gen_data_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gen-data", "--out", str(blocker / "sub"), "--size", "16"]) == 3


# ---- train -----------------------------------------------------------------

def test_train_smoke_checkpoint_loadable(tmp_path, data_dir, capsys):
    cfg = tiny_config(tmp_path, data_dir, "run", 200)
    assert main(["train", "--config", str(cfg)]) == 0
    echoed = capsys.readouterr().out
    out = tmp_path / "run"
    assert (out / "config.txt").read_text() in echoed
    net = load_checkpoint(out / "checkpoint.ckpt")
    assert net.architecture == "convcaps"
    lines = (out / "train_log.csv").read_text().splitlines()
    assert lines[0] == "# architecture: convcaps"
    assert lines[1] == "iter,lr,margin,ce,recon,total,val_dsc"
    assert len(lines) == 202
    assert (out / "train_log.png").stat().st_size > 0


def test_train_baseline_tags_log(tmp_path, data_dir):
    cfg = tiny_config(tmp_path, data_dir, "base", 3)
    assert main(["train", "--config", str(cfg), "--arch", "baseline"]) == 0
    first = (tmp_path / "base" / "train_log.csv").read_text().splitlines()[0]
    assert first == "# architecture: conv_baseline"


def test_train_is_deterministic_and_config_round_trips(tmp_path, data_dir, capsys):
    cfg = tiny_config(tmp_path, data_dir, "one", 12)
    assert main(["train", "--config", str(cfg)]) == 0
    echoed = capsys.readouterr().out
    # feed the echoed effective config back in, redirecting only the output dir
    text = "".join(line + "\n" for line in echoed.splitlines() if "=" in line)
    replay = tmp_path / "replay.cfg"
    replay.write_text(text)
    assert main(["train", "--config", str(replay), "--out", str(tmp_path / "two")]) == 0
    a = (tmp_path / "one" / "train_log.csv").read_bytes()
    b = (tmp_path / "two" / "train_log.csv").read_bytes()
    assert a == b
    ca = (tmp_path / "one" / "checkpoint.ckpt").read_bytes()
    assert ca == (tmp_path / "two" / "checkpoint.ckpt").read_bytes()


def test_train_missing_data(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(TINY + f"data={tmp_path / 'nope.json'}\nout={tmp_path / 'o'}\n")
    assert main(["train", "--config", str(cfg)]) == 3


def test_train_unknown_key_is_usage_error(tmp_path):
    assert main(["train", "--bogus_key", "1"]) == 2


# ---- eval and infer --------------------------------------------------------

@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory, data_dir):
    tmp = tmp_path_factory.mktemp("ckpt")
    cfg = tiny_config(tmp, data_dir, "run", 5)
    assert main(["train", "--config", str(cfg)]) == 0
    return tmp / "run" / "checkpoint.ckpt"


def test_eval_oracle_is_perfect(data_dir, tmp_path, capsys):
    out = tmp_path / "oracle.json"
    assert main(["eval", "--oracle", "--data", str(data_dir / "manifest.json"),
                 "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    for row in report["classes"].values():
        assert row["dsc"] == 1.0 and row["asd_mm"] == 0.0
    assert out.with_suffix(".png").exists()


def test_eval_schema_and_macro(checkpoint, data_dir, capsys):
    assert main(["eval", "--checkpoint", str(checkpoint), "--data",
                 str(data_dir / "manifest.json"), "--patch", "16"]) == 0
    report = json.loads(capsys.readouterr().out)
    for row in report["classes"].values():
        assert set(row) == {"dsc", "asd_mm", "precision", "recall"}
    dscs = [row["dsc"] for row in report["classes"].values()]
    assert abs(report["macro"]["dsc"] - np.mean(dscs)) < 1e-9


def test_eval_class_mismatch(tmp_path, data_dir):
    from convcaps3d.model import save_checkpoint

    path = tmp_path / "c4.ckpt"
    save_checkpoint(build_convcaps(ModelConfig.tiny(classes=4)), path)
    assert main(["eval", "--checkpoint", str(path), "--data",
                 str(data_dir / "manifest.json")]) == 2


def test_infer_writes_labels_and_figure(checkpoint, data_dir, tmp_path):
    from convcaps3d.pipeline import read_labels

    out = tmp_path / "pred.vol"
    assert main(["infer", "--checkpoint", str(checkpoint), "--input",
                 str(data_dir / "case_000_image.vol"), "--out", str(out),
                 "--patch", "16"]) == 0
    labels, meta = read_labels(out)
    assert labels.shape == (16, 16, 16) and labels.max() <= 1
    assert out.with_suffix(".png").exists()


def test_bad_checkpoint_is_io_error(tmp_path, data_dir):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    assert main(["infer", "--checkpoint", str(bad), "--input",
                 str(data_dir / "case_000_image.vol"), "--out", str(tmp_path / "p.vol")]) == 3


# ---- inspect ---------------------------------------------------------------

def _total(text):
    line = [ln for ln in text.splitlines() if ln.startswith("total")][0]
    return int(line.split()[-1].replace(",", ""))


def test_inspect_default_and_baseline(capsys):
    assert main(["inspect"]) == 0
    caps = _total(capsys.readouterr().out)
    assert main(["inspect", "--arch", "baseline"]) == 0
    base = _total(capsys.readouterr().out)
    assert 3_000_000 <= caps <= 5_000_000 and base > caps


def test_inspect_tiny_config_matches_closed_form(tmp_path, capsys):
    from test_model import closed_form_count

    cfg = tmp_path / "t.cfg"
    cfg.write_text(TINY)
    assert main(["inspect", "--config", str(cfg)]) == 0
    out = capsys.readouterr().out
    assert _total(out) == closed_form_count(ModelConfig.tiny())
    assert "caps3" in out and "4x4x4x2x8" in out


def test_inspect_checkpoint(checkpoint, capsys):
    assert main(["inspect", "--checkpoint", str(checkpoint)]) == 0
    assert _total(capsys.readouterr().out) == count_params(load_checkpoint(checkpoint))


def test_inspect_invalid_file(tmp_path):
    bad = tmp_path / "x.ckpt"
    bad.write_bytes(b"3DCC\x00001")
    assert main(["inspect", "--checkpoint", str(bad)]) == 3


# ---- selftest --------------------------------------------------------------

def test_selftest_passes(capsys):
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "PASS  grad.conv3d" in out and "FAIL" not in out


def test_selftest_sabotage_fails_naming_check(capsys):
    assert main(["selftest", "--sabotage", "squash"]) == 1
    out = capsys.readouterr().out
    assert "FAIL  capsule.squash_range" in out


def test_module_entry_point_exit_code():
    proc = subprocess.run([sys.executable, "-m", "convcaps3d", "selftest", "--sabotage", "squash"],
                          capture_output=True, text=True)
    assert proc.returncode == 1


def test_usage_error_exit_code():
    assert main(["no-such-command"]) == 2


# ---- config ----------------------------------------------------------------

def test_every_key_documented():
    assert set(DOCS) == set(DEFAULTS)


def test_config_text_round_trip():
    cfg = RunConfig.from_text(TINY)
    again = RunConfig.from_text(cfg.to_text())
    assert again.values == cfg.values
    assert again.model_config() == ModelConfig.tiny()


def test_config_rejects_unknown_and_malformed():
    with pytest.raises(ConfigError):
        RunConfig.from_text("nonsense=1\n")
    with pytest.raises(ConfigError):
        RunConfig.from_text("classes\n")
    with pytest.raises(ConfigError):
        RunConfig.from_text("classes=two\n")
