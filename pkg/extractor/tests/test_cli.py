"""Tests for the extractor command line."""

import numpy as np
import pytest
from PIL import Image

from memextract.cli import EXIT_DATA, EXIT_INTERNAL, EXIT_OK, EXIT_USAGE, main


def run_cli(*argv):
    return main(list(argv))


def make_image(path, size, seed):
    rng = np.random.default_rng(seed)
    arr = rng.integers(0, 256, size=(size[1], size[0], 3), dtype=np.uint8)
    Image.fromarray(arr).save(path)


@pytest.fixture()
def workdir(tmp_path):
    img_dir = tmp_path / "imgs"
    img_dir.mkdir()
    for i in range(3):
        make_image(img_dir / f"m{i}.png", (64 + 16 * i, 48), seed=i)
    lines = [
        "id,image,caption,label,split",
        "m0,imgs/m0.png,an ordinary cat photo,0,train",
        "m1,imgs/m1.png,a slur pasted over a portrait,1,val",
        "m2,imgs/m2.png,a birthday greeting card,0,test",
    ]
    (tmp_path / "manifest.csv").write_text("\n".join(lines) + "\n")
    return tmp_path


class TestExitCodes:
    def test_missing_required_flag_is_usage_error(self, capsys):
        assert run_cli("--out", "x.mbe2") == EXIT_USAGE
        assert "--manifest" in capsys.readouterr().err

    def test_unknown_backend_is_usage_error(self, workdir, capsys):
        code = run_cli(
            "--manifest", str(workdir / "manifest.csv"),
            "--out", str(workdir / "x.mbe2"), "--backend", "resnet",
        )
        assert code == EXIT_USAGE
        assert "resnet" in capsys.readouterr().err

    def test_zero_batch_size_is_usage_error(self, workdir, capsys):
        code = run_cli(
            "--manifest", str(workdir / "manifest.csv"),
            "--out", str(workdir / "x.mbe2"), "--backend", "stub",
            "--batch-size", "0",
        )
        assert code == EXIT_USAGE
        assert "--batch-size" in capsys.readouterr().err

    def test_absent_manifest_is_data_error(self, tmp_path, capsys):
        code = run_cli(
            "--manifest", str(tmp_path / "absent.csv"),
            "--out", str(tmp_path / "x.mbe2"), "--backend", "stub",
        )
        assert code == EXIT_DATA
        assert "error:" in capsys.readouterr().err

    def test_invalid_manifest_is_data_error(self, tmp_path, capsys):
        path = tmp_path / "manifest.csv"
        path.write_text("id,image,caption,label\nm0,a.png,text,7\n")
        code = run_cli(
            "--manifest", str(path), "--out", str(tmp_path / "x.mbe2"),
            "--backend", "stub",
        )
        assert code == EXIT_DATA
        assert "label must be 0 or 1" in capsys.readouterr().err

    def test_zero_surviving_rows_is_internal_error(self, tmp_path, capsys):
        path = tmp_path / "manifest.csv"
        path.write_text("id,image,caption,label\nm0,gone.png,text,0\n")
        code = run_cli(
            "--manifest", str(path), "--out", str(tmp_path / "x.mbe2"),
            "--backend", "stub",
        )
        assert code == EXIT_INTERNAL
        assert "no rows survived" in capsys.readouterr().err


class TestHappyPath:
    def test_binary_extraction(self, workdir, capsys):
        out = workdir / "memes.mbe2"
        code = run_cli(
            "--manifest", str(workdir / "manifest.csv"), "--out", str(out),
            "--backend", "stub", "--quiet",
        )
        captured = capsys.readouterr()
        assert code == EXIT_OK
        assert "wrote 3 records" in captured.out
        assert out.read_bytes()[:4] == b"MBE2"
        assert (workdir / "memes.jsonl").exists()
        assert (workdir / "memes.skipped.jsonl").read_text() == ""

    def test_jsonl_target_stops_at_interchange(self, workdir, capsys):
        out = workdir / "memes.jsonl"
        code = run_cli(
            "--manifest", str(workdir / "manifest.csv"), "--out", str(out),
            "--backend", "stub", "--quiet",
        )
        captured = capsys.readouterr()
        assert code == EXIT_OK
        assert f"wrote 3 records to {out}" in captured.out
        assert out.exists()
        assert not (workdir / "memes.mbe2").exists()

    def test_sidecar_flags_are_respected(self, workdir, capsys):
        code = run_cli(
            "--manifest", str(workdir / "manifest.csv"),
            "--out", str(workdir / "memes.mbe2"),
            "--jsonl-out", str(workdir / "inter.jsonl"),
            "--skip-log", str(workdir / "drops.jsonl"),
            "--backend", "stub", "--quiet",
        )
        assert code == EXIT_OK
        assert (workdir / "inter.jsonl").exists()
        assert (workdir / "drops.jsonl").exists()
        assert "drops.jsonl" in capsys.readouterr().out

    def test_progress_goes_to_stderr_unless_quiet(self, workdir, capsys):
        argv = [
            "--manifest", str(workdir / "manifest.csv"),
            "--out", str(workdir / "a.jsonl"), "--backend", "stub",
            "--batch-size", "2",
        ]
        assert run_cli(*argv) == EXIT_OK
        assert capsys.readouterr().err.splitlines() == ["encoded 2/3", "encoded 3/3"]
        assert run_cli(*argv, "--quiet") == EXIT_OK
        assert capsys.readouterr().err == ""
