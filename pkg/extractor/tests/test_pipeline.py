"""Tests for image loading, stub encoding, and the extraction pipeline."""

import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from memextract import (
    IMG_WIDTH,
    TXT_WIDTH,
    ExtractError,
    StubBackend,
    WidthError,
    convert_to_dataset,
    extract_to_jsonl,
    load_image,
    load_manifest,
    run,
)

RECORD_KEYS = {"id", "img_emb", "txt_emb", "label", "split"}


def make_image(path: Path, size, seed: int, mode: str = "RGB") -> None:
    rng = np.random.default_rng(seed)
    if mode == "L":
        arr = rng.integers(0, 256, size=(size[1], size[0]), dtype=np.uint8)
    else:
        arr = rng.integers(0, 256, size=(size[1], size[0], 3), dtype=np.uint8)
    Image.fromarray(arr, mode=mode).save(path)


def make_fixture(tmp_path: Path, with_bad_rows: bool = False):
    """A small manifest of generated PNGs; optionally adds one missing
    and one undecodable row."""
    img_dir = tmp_path / "imgs"
    img_dir.mkdir(exist_ok=True)
    make_image(img_dir / "m0.png", (64, 48), seed=0)
    make_image(img_dir / "m1.png", (320, 240), seed=1)
    make_image(img_dir / "m2.png", (224, 224), seed=2)
    lines = [
        "id,image,caption,label,split",
        "m0,imgs/m0.png,an ordinary cat photo,0,train",
        "m1,imgs/m1.png,a slur pasted over a portrait,1,val",
        "m2,imgs/m2.png,a birthday greeting card,0,test",
    ]
    if with_bad_rows:
        (img_dir / "m4.png").write_bytes(b"this is not a png")
        lines.insert(2, "m3,imgs/absent.png,caption for a lost file,1,train")
        lines.append("m4,imgs/m4.png,caption for a broken file,1,train")
    path = tmp_path / "manifest.csv"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return load_manifest(path)


class FixedWidthBackend:
    """Test double returning constant matrices of configurable widths."""

    def __init__(self, img_width=IMG_WIDTH, txt_width=TXT_WIDTH, drop_last=False):
        self.img_width = img_width
        self.txt_width = txt_width
        self.drop_last = drop_last

    def encode_images(self, images):
        n = len(images) - (1 if self.drop_last else 0)
        return np.zeros((n, self.img_width), dtype=np.float32)

    def encode_texts(self, texts):
        return np.zeros((len(texts), self.txt_width), dtype=np.float32)


class TestLoadImage:
    @pytest.mark.parametrize("size", [(64, 48), (224, 224), (1000, 30)])
    def test_resizes_to_fixed_resolution(self, tmp_path, size):
        path = tmp_path / "img.png"
        make_image(path, size, seed=3)
        arr = load_image(path)
        assert arr.shape == (224, 224, 3)
        assert arr.dtype == np.uint8

    def test_grayscale_promoted_to_rgb(self, tmp_path):
        path = tmp_path / "gray.png"
        make_image(path, (80, 80), seed=4, mode="L")
        arr = load_image(path)
        assert arr.shape == (224, 224, 3)
        np.testing.assert_array_equal(arr[..., 0], arr[..., 1])
        np.testing.assert_array_equal(arr[..., 0], arr[..., 2])

    def test_repeat_decode_is_bit_identical(self, tmp_path):
        path = tmp_path / "img.png"
        make_image(path, (200, 150), seed=5)
        np.testing.assert_array_equal(load_image(path), load_image(path))


class TestStubBackend:
    def test_output_shapes_and_dtype(self):
        backend = StubBackend()
        images = [np.zeros((224, 224, 3), dtype=np.uint8) for _ in range(3)]
        img_emb = backend.encode_images(images)
        txt_emb = backend.encode_texts(["a", "b", "c"])
        assert img_emb.shape == (3, IMG_WIDTH) and img_emb.dtype == np.float32
        assert txt_emb.shape == (3, TXT_WIDTH) and txt_emb.dtype == np.float32

    def test_vectors_keyed_by_content_not_position(self):
        backend = StubBackend()
        rng = np.random.default_rng(6)
        a = rng.integers(0, 256, size=(224, 224, 3), dtype=np.uint8)
        b = rng.integers(0, 256, size=(224, 224, 3), dtype=np.uint8)
        first = backend.encode_images([a, b])
        second = backend.encode_images([b, a, a])
        np.testing.assert_array_equal(first[0], second[1])
        np.testing.assert_array_equal(first[0], second[2])
        np.testing.assert_array_equal(first[1], second[0])
        assert np.max(np.abs(first[0] - first[1])) > 0.1

    def test_caption_changes_the_vector(self):
        backend = StubBackend()
        emb = backend.encode_texts(["hello there", "hello there", "hello therf"])
        np.testing.assert_array_equal(emb[0], emb[1])
        assert np.max(np.abs(emb[0] - emb[2])) > 0.1

    def test_rows_are_roughly_unit_gaussian(self):
        backend = StubBackend()
        rng = np.random.default_rng(7)
        for trial in range(5):
            image = rng.integers(0, 256, size=(224, 224, 3), dtype=np.uint8)
            row = backend.encode_images([image])[0]
            assert abs(float(np.mean(row))) < 0.15
            np.testing.assert_allclose(float(np.std(row)), 1.0, atol=0.15)


class TestExtractToJsonl:
    def test_records_preserve_manifest_fields(self, tmp_path):
        manifest = make_fixture(tmp_path)
        out = tmp_path / "out.jsonl"
        written, skips = extract_to_jsonl(manifest, StubBackend(), out)
        assert written == 3 and skips.entries == []
        records = [json.loads(line) for line in out.read_text().splitlines()]
        assert [set(r) for r in records] == [RECORD_KEYS] * 3
        assert [r["id"] for r in records] == ["m0", "m1", "m2"]
        assert [r["label"] for r in records] == [0, 1, 0]
        assert [r["split"] for r in records] == ["train", "val", "test"]
        assert all(len(r["img_emb"]) == IMG_WIDTH for r in records)
        assert all(len(r["txt_emb"]) == TXT_WIDTH for r in records)

    def test_bad_rows_are_skipped_and_logged(self, tmp_path):
        manifest = make_fixture(tmp_path, with_bad_rows=True)
        out = tmp_path / "out.jsonl"
        written, skips = extract_to_jsonl(manifest, StubBackend(), out)
        assert written == 3
        assert len(skips.entries) == 2
        by_id = {entry["id"]: entry for entry in skips.entries}
        assert by_id["m3"]["reason"] == "image file not found"
        assert by_id["m4"]["reason"].startswith("image not decodable")
        surviving = [json.loads(line)["id"] for line in out.read_text().splitlines()]
        assert surviving == ["m0", "m1", "m2"]

    def test_skipped_rows_do_not_shift_pairings(self, tmp_path):
        full = make_fixture(tmp_path)
        out_full = tmp_path / "full.jsonl"
        extract_to_jsonl(full, StubBackend(), out_full)
        noisy = make_fixture(tmp_path, with_bad_rows=True)
        out_noisy = tmp_path / "noisy.jsonl"
        extract_to_jsonl(noisy, StubBackend(), out_noisy)
        clean = {json.loads(line)["id"]: json.loads(line) for line in out_full.read_text().splitlines()}
        mixed = {json.loads(line)["id"]: json.loads(line) for line in out_noisy.read_text().splitlines()}
        for id_ in ("m0", "m1", "m2"):
            np.testing.assert_array_equal(clean[id_]["img_emb"], mixed[id_]["img_emb"])
            np.testing.assert_array_equal(clean[id_]["txt_emb"], mixed[id_]["txt_emb"])

    @pytest.mark.parametrize("batch_size", [1, 2, 8])
    def test_batch_size_does_not_change_output(self, tmp_path, batch_size):
        manifest = make_fixture(tmp_path)
        baseline = tmp_path / "baseline.jsonl"
        extract_to_jsonl(manifest, StubBackend(), baseline, batch_size=3)
        out = tmp_path / f"bs{batch_size}.jsonl"
        extract_to_jsonl(manifest, StubBackend(), out, batch_size=batch_size)
        assert out.read_bytes() == baseline.read_bytes()

    def test_progress_reports_monotone_counts(self, tmp_path):
        manifest = make_fixture(tmp_path)
        calls = []
        extract_to_jsonl(
            manifest, StubBackend(), tmp_path / "out.jsonl",
            batch_size=2, progress=lambda done, total: calls.append((done, total)),
        )
        assert calls == [(2, 3), (3, 3)]

    def test_all_rows_skipped_is_an_error(self, tmp_path):
        path = tmp_path / "manifest.csv"
        path.write_text(
            "id,image,caption,label\nm0,nowhere.png,text,0\nm1,gone.png,text,1\n"
        )
        manifest = load_manifest(path)
        with pytest.raises(ExtractError, match="no rows survived"):
            extract_to_jsonl(manifest, StubBackend(), tmp_path / "out.jsonl")

    def test_wrong_image_width_aborts(self, tmp_path):
        manifest = make_fixture(tmp_path)
        backend = FixedWidthBackend(img_width=IMG_WIDTH - 1)
        with pytest.raises(WidthError, match=f"expected width {IMG_WIDTH}"):
            extract_to_jsonl(manifest, backend, tmp_path / "out.jsonl")

    def test_wrong_text_width_aborts(self, tmp_path):
        manifest = make_fixture(tmp_path)
        backend = FixedWidthBackend(txt_width=TXT_WIDTH + 5)
        with pytest.raises(WidthError, match=f"expected width {TXT_WIDTH}"):
            extract_to_jsonl(manifest, backend, tmp_path / "out.jsonl")

    def test_row_count_mismatch_aborts(self, tmp_path):
        manifest = make_fixture(tmp_path)
        backend = FixedWidthBackend(drop_last=True)
        with pytest.raises(WidthError, match="for a batch of"):
            extract_to_jsonl(manifest, backend, tmp_path / "out.jsonl")

    def test_zero_batch_size_rejected(self, tmp_path):
        manifest = make_fixture(tmp_path)
        with pytest.raises(ExtractError, match="batch_size"):
            extract_to_jsonl(manifest, StubBackend(), tmp_path / "out.jsonl", batch_size=0)


class TestRun:
    def test_jsonl_target_stops_at_interchange(self, tmp_path):
        manifest = make_fixture(tmp_path)
        result = run(manifest, StubBackend(), tmp_path / "out.jsonl")
        assert result.written == 3 and result.skipped == 0
        assert result.dataset_path is None
        assert result.jsonl_path == tmp_path / "out.jsonl"
        assert result.jsonl_path.exists()
        assert result.skip_log_path == tmp_path / "out.skipped.jsonl"
        assert result.skip_log_path.read_text() == ""

    def test_binary_target_runs_the_consumer_converter(self, tmp_path):
        manifest = make_fixture(tmp_path, with_bad_rows=True)
        result = run(manifest, StubBackend(), tmp_path / "memes.mbe2")
        assert result.written == 3 and result.skipped == 2
        assert result.dataset_path == tmp_path / "memes.mbe2"
        assert result.dataset_path.read_bytes()[:4] == b"MBE2"
        assert result.jsonl_path == tmp_path / "memes.jsonl"
        skipped = [json.loads(line) for line in result.skip_log_path.read_text().splitlines()]
        assert sorted(entry["id"] for entry in skipped) == ["m3", "m4"]

    def test_explicit_sidecar_paths(self, tmp_path):
        manifest = make_fixture(tmp_path)
        result = run(
            manifest, StubBackend(), tmp_path / "memes.mbe2",
            jsonl_path=tmp_path / "inter.jsonl", skip_log_path=tmp_path / "drops.jsonl",
        )
        assert result.jsonl_path == tmp_path / "inter.jsonl"
        assert result.skip_log_path == tmp_path / "drops.jsonl"
        assert result.jsonl_path.exists() and result.skip_log_path.exists()

    def test_repeat_runs_are_byte_identical(self, tmp_path):
        manifest = make_fixture(tmp_path)
        (tmp_path / "a").mkdir()
        (tmp_path / "b").mkdir()
        first = run(manifest, StubBackend(), tmp_path / "a" / "memes.mbe2")
        second = run(manifest, StubBackend(), tmp_path / "b" / "memes.mbe2")
        assert first.jsonl_path.read_bytes() == second.jsonl_path.read_bytes()
        assert first.dataset_path.read_bytes() == second.dataset_path.read_bytes()

    def test_converter_failure_surfaces_its_message(self, tmp_path):
        bad = tmp_path / "bad.jsonl"
        bad.write_text("this is not a json record\n")
        with pytest.raises(ExtractError, match="conversion failed"):
            convert_to_dataset(bad, tmp_path / "out.mbe2")
