"""Exit codes and end-to-end command behavior."""

import subprocess
import sys

from lrmm_extract.cli import run

from conftest import write_manifest

from lrmm.data import load_image_features


def test_happy_path(tmp_path, image_dir, capsys):
    manifest = write_manifest(tmp_path / "items.csv",
                              [("i1", image_dir / "red.png"),
                               ("i2", image_dir / "gradient.png")], header=True)
    out = tmp_path / "features.lrmmfeat"
    assert run(["--manifest", str(manifest), "--out", str(out)]) == 0
    assert "records=2" in capsys.readouterr().out
    loaded, dim = load_image_features(out)
    assert (len(loaded), dim) == (2, 4096)


def test_leading_subcommand_token_accepted(tmp_path, image_dir):
    manifest = write_manifest(tmp_path / "items.csv",
                              [("i1", image_dir / "red.png")])
    out = tmp_path / "features.lrmmfeat"
    code = run(["extract", "--manifest", str(manifest), "--out", str(out),
                "--model", "hash-proj/v1"])
    assert code == 0
    assert out.exists()


def test_missing_flags_usage_error():
    assert run([]) == 1
    assert run(["--manifest", "x.csv"]) == 1


def test_unknown_model_data_error(tmp_path, image_dir, capsys):
    manifest = write_manifest(tmp_path / "items.csv",
                              [("i1", image_dir / "red.png")])
    code = run(["--manifest", str(manifest), "--out", str(tmp_path / "f"),
                "--model", "nonsense/v0"])
    assert code == 2
    assert "unknown model" in capsys.readouterr().err


def test_unreadable_manifest_data_error(tmp_path):
    code = run(["--manifest", str(tmp_path / "absent.csv"),
                "--out", str(tmp_path / "f")])
    assert code == 2


def test_all_images_broken_data_error(tmp_path, image_dir, capsys):
    manifest = write_manifest(tmp_path / "items.csv",
                              [("i1", image_dir / "broken.jpg")])
    code = run(["--manifest", str(manifest), "--out", str(tmp_path / "f")])
    assert code == 2
    assert "no image" in capsys.readouterr().err


def test_module_entry_point(tmp_path, image_dir):
    manifest = write_manifest(tmp_path / "items.csv",
                              [("i1", image_dir / "noise.png")])
    out = tmp_path / "features.lrmmfeat"
    proc = subprocess.run(
        [sys.executable, "-m", "lrmm_extract.cli", "extract",
         "--manifest", str(manifest), "--out", str(out)],
        capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert out.exists() and (tmp_path / "features.lrmmfeat.meta.txt").exists()
