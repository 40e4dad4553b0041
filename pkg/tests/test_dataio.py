"""Dataset format and pipeline tests.  The binary layout is pinned by a
hand-packed conformance fixture checked into the repo; negative cases
corrupt those bytes surgically."""

import json
import struct
from pathlib import Path

import numpy as np
import pytest

from memefusion import ndcore
from memefusion.dataio import (
    FORMAT_VERSION,
    MAGIC,
    SPLITS,
    DatasetHeader,
    EmbeddingRecord,
    StratificationWarning,
    SyntheticSpec,
    batches,
    read_dataset,
    read_header,
    read_jsonl,
    split_dataset,
    split_of,
    synth,
    to_arrays,
    write_dataset,
    write_jsonl,
)
from memefusion.errors import (
    ConfigError,
    CorruptionError,
    DataError,
    FormatError,
    VersionError,
)

FIXTURES = Path(__file__).parent / "fixtures"


def hand_packed_fixture() -> bytes:
    """The conformance dataset assembled field by field with struct."""
    out = bytearray()
    out += struct.pack("<4sIIII", b"MBE2", 1, 2, 4, 3)
    rid = b"alpha"
    out += struct.pack("<H", len(rid)) + rid
    out += struct.pack("<BB", 0, 0)
    out += np.array([0.5, -1.25, 2.0, 0.0], dtype="<f4").tobytes()
    out += np.array([1.0, -0.5, 3.75], dtype="<f4").tobytes()
    rid = b"beta-2"
    out += struct.pack("<H", len(rid)) + rid
    out += struct.pack("<BB", 1, 2)
    out += np.array([-1.0, 0.25, 0.125, 8.0], dtype="<f4").tobytes()
    out += np.array([0.0625, -2.5, 1.5], dtype="<f4").tobytes()
    return bytes(out)


def expected_fixture_records() -> list[EmbeddingRecord]:
    return [
        EmbeddingRecord(
            "alpha",
            np.array([0.5, -1.25, 2.0, 0.0], dtype=np.float32),
            np.array([1.0, -0.5, 3.75], dtype=np.float32),
            0,
            "train",
        ),
        EmbeddingRecord(
            "beta-2",
            np.array([-1.0, 0.25, 0.125, 8.0], dtype=np.float32),
            np.array([0.0625, -2.5, 1.5], dtype=np.float32),
            1,
            "test",
        ),
    ]


def assert_records_equal(a: list[EmbeddingRecord], b: list[EmbeddingRecord]):
    assert len(a) == len(b)
    for x, y in zip(a, b):
        assert x.id == y.id
        assert x.label == y.label
        assert x.split == y.split
        np.testing.assert_array_equal(x.img_emb, y.img_emb)
        np.testing.assert_array_equal(x.txt_emb, y.txt_emb)


def random_records(n, img_dim=6, txt_dim=4, seed=0):
    rng = ndcore.make_rng(seed)
    return [
        EmbeddingRecord(
            f"rec-{i}",
            rng.normal(size=img_dim).astype(np.float32),
            rng.normal(size=txt_dim).astype(np.float32),
            int(rng.integers(0, 2)),
            SPLITS[int(rng.integers(0, 3))],
        )
        for i in range(n)
    ]


class TestConformanceFixture:
    """Two-sided format pinning: the checked-in fixture must equal the
    hand-packed bytes, parse to the expected records, and re-serialize
    byte-identically."""

    def test_checked_in_file_matches_hand_packed_bytes(self):
        assert (FIXTURES / "conformance.mbe2").read_bytes() == hand_packed_fixture()

    def test_parses_to_expected_records(self):
        records = read_dataset(FIXTURES / "conformance.mbe2")
        assert_records_equal(records, expected_fixture_records())

    def test_writer_reproduces_fixture_bytes(self, tmp_path):
        out = tmp_path / "out.mbe2"
        write_dataset(expected_fixture_records(), out)
        assert out.read_bytes() == hand_packed_fixture()

    def test_jsonl_fixture_parses_to_same_records(self):
        records = read_jsonl(FIXTURES / "conformance.jsonl")
        assert_records_equal(records, expected_fixture_records())

    def test_header_of_fixture(self):
        h = read_header(FIXTURES / "conformance.mbe2")
        assert h == DatasetHeader(MAGIC, FORMAT_VERSION, 2, 4, 3)


class TestBinaryRoundTrip:
    def test_ten_random_records_bit_identical(self, tmp_path):
        records = random_records(10)
        path = tmp_path / "d.mbe2"
        write_dataset(records, path)
        back = read_dataset(path)
        assert_records_equal(back, records)
        # byte-exact: write(read(x)) == x
        path2 = tmp_path / "d2.mbe2"
        write_dataset(back, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_unicode_ids_roundtrip(self, tmp_path):
        records = random_records(2)
        records[0].id = "mémé-λ-001"
        path = tmp_path / "d.mbe2"
        write_dataset(records, path)
        assert read_dataset(path)[0].id == "mémé-λ-001"

    def test_write_validates(self, tmp_path):
        records = random_records(3)
        records[1].label = 2
        with pytest.raises(DataError, match="label"):
            write_dataset(records, tmp_path / "x.mbe2")
        records = random_records(3)
        records[2].id = records[0].id
        with pytest.raises(DataError, match="duplicate"):
            write_dataset(records, tmp_path / "x.mbe2")
        records = random_records(3)
        records[1].txt_emb = records[1].txt_emb[:2]
        with pytest.raises(DataError, match="width"):
            write_dataset(records, tmp_path / "x.mbe2")
        with pytest.raises(DataError, match="at least one"):
            write_dataset([], tmp_path / "x.mbe2")


class TestBinaryNegativeCases:
    def write_fixture(self, tmp_path, data: bytes) -> Path:
        path = tmp_path / "bad.mbe2"
        path.write_bytes(data)
        return path

    def test_bad_magic(self, tmp_path):
        data = b"XBE2" + hand_packed_fixture()[4:]
        with pytest.raises(FormatError, match="magic"):
            read_dataset(self.write_fixture(tmp_path, data))

    def test_bad_version(self, tmp_path):
        data = bytearray(hand_packed_fixture())
        data[4:8] = struct.pack("<I", 9)
        with pytest.raises(VersionError, match="version 9"):
            read_dataset(self.write_fixture(tmp_path, bytes(data)))

    def test_zero_count(self, tmp_path):
        data = bytearray(hand_packed_fixture())
        data[8:12] = struct.pack("<I", 0)
        with pytest.raises(FormatError, match="count"):
            read_dataset(self.write_fixture(tmp_path, bytes(data)))

    def test_truncated_header(self, tmp_path):
        with pytest.raises(CorruptionError, match="header"):
            read_dataset(self.write_fixture(tmp_path, hand_packed_fixture()[:10]))

    def test_truncated_mid_record_names_offset(self, tmp_path):
        data = hand_packed_fixture()[:-5]  # cut inside record 1's text vector
        with pytest.raises(CorruptionError, match=r"record 1: .* at byte \d+"):
            read_dataset(self.write_fixture(tmp_path, data))

    def test_truncation_returns_no_partial_records(self, tmp_path):
        path = self.write_fixture(tmp_path, hand_packed_fixture()[:-5])
        try:
            read_dataset(path)
        except CorruptionError:
            pass
        else:
            pytest.fail("expected CorruptionError")

    def test_undersized_text_vector_names_record_index(self, tmp_path):
        # header claims dims (1408, 768) but the record carries only 767
        # text values: parsing runs out of bytes inside that record
        out = bytearray()
        out += struct.pack("<4sIIII", b"MBE2", 1, 1, 1408, 768)
        out += struct.pack("<H", 1) + b"a" + struct.pack("<BB", 0, 0)
        out += np.zeros(1408, dtype="<f4").tobytes()
        out += np.zeros(767, dtype="<f4").tobytes()
        with pytest.raises(FormatError, match="record 0"):
            read_dataset(self.write_fixture(tmp_path, bytes(out)))

    def test_trailing_bytes(self, tmp_path):
        data = hand_packed_fixture() + b"\x00\x00"
        with pytest.raises(FormatError, match="trailing"):
            read_dataset(self.write_fixture(tmp_path, data))

    def test_bad_label_byte(self, tmp_path):
        data = bytearray(hand_packed_fixture())
        # record 0's label byte sits right after the header, id length, and id
        offset = 20 + 2 + 5
        data[offset] = 7
        with pytest.raises(FormatError, match="label byte 7"):
            read_dataset(self.write_fixture(tmp_path, bytes(data)))

    def test_bad_split_tag(self, tmp_path):
        data = bytearray(hand_packed_fixture())
        data[20 + 2 + 5 + 1] = 9
        with pytest.raises(FormatError, match="split tag 9"):
            read_dataset(self.write_fixture(tmp_path, bytes(data)))

    def test_corruption_is_a_format_error(self):
        assert issubclass(CorruptionError, FormatError)
        assert issubclass(VersionError, FormatError)


class TestJsonl:
    def test_roundtrip(self, tmp_path):
        records = random_records(8)
        path = tmp_path / "d.jsonl"
        write_jsonl(records, path)
        assert_records_equal(read_jsonl(path), records)

    def test_split_defaults_to_train(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text('{"id":"x","label":1,"img_emb":[1.0],"txt_emb":[2.0]}\n')
        assert read_jsonl(path)[0].split == "train"

    def test_invalid_json_names_line(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text(
            '{"id":"x","label":0,"img_emb":[1.0],"txt_emb":[2.0]}\n{oops\n'
        )
        with pytest.raises(FormatError, match="line 2"):
            read_jsonl(path)

    def test_missing_key_names_line(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text('{"id":"x","label":0,"img_emb":[1.0]}\n')
        with pytest.raises(FormatError, match="line 1"):
            read_jsonl(path)

    def test_width_mismatch_across_lines(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text(
            '{"id":"x","label":0,"img_emb":[1.0,2.0],"txt_emb":[3.0]}\n'
            '{"id":"y","label":1,"img_emb":[1.0],"txt_emb":[3.0]}\n'
        )
        with pytest.raises(FormatError, match="line 2"):
            read_jsonl(path)

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text("\n")
        with pytest.raises(DataError, match="no records"):
            read_jsonl(path)

    def test_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text(
            '{"id":"x","label":0,"img_emb":[1.0],"txt_emb":[2.0]}\n\n'
            '{"id":"y","label":1,"img_emb":[3.0],"txt_emb":[4.0]}\n'
        )
        assert [r.id for r in read_jsonl(path)] == ["x", "y"]


class TestSplitDataset:
    def balanced(self, n=1000):
        records = random_records(n)
        for i, r in enumerate(records):
            r.label = i % 2
            r.split = "train"
        return records

    def test_1000_balanced_gives_850_50_100(self):
        out = split_dataset(self.balanced(), seed=3)
        counts = {s: sum(1 for r in out if r.split == s) for s in SPLITS}
        assert counts == {"train": 850, "val": 50, "test": 100}
        for s in SPLITS:
            members = [r for r in out if r.split == s]
            ones = sum(r.label for r in members)
            assert abs(ones - len(members) / 2) <= 1  # class ratio preserved

    def test_deterministic_for_seed(self):
        a = split_dataset(self.balanced(200), seed=5)
        b = split_dataset(self.balanced(200), seed=5)
        assert [r.split for r in a] == [r.split for r in b]
        c = split_dataset(self.balanced(200), seed=6)
        assert [r.split for r in a] != [r.split for r in c]

    def test_all_train_fractions(self):
        out = split_dataset(self.balanced(50), fractions=(1.0, 0.0, 0.0), seed=0)
        assert all(r.split == "train" for r in out)

    def test_partition_is_total_and_order_preserving(self):
        records = self.balanced(97)
        out = split_dataset(records, seed=1)
        assert [r.id for r in out] == [r.id for r in records]
        assert all(r.split in SPLITS for r in out)

    def test_tiny_class_degrades_with_warning(self):
        records = random_records(40)
        for r in records:
            r.label = 0
        records[0].label = 1
        records[1].label = 1
        with pytest.warns(StratificationWarning, match="class 1"):
            out = split_dataset(records, fractions=(0.5, 0.25, 0.25), seed=2)
        assert len(out) == 40

    def test_bad_fractions(self):
        with pytest.raises(ConfigError, match="sum"):
            split_dataset(self.balanced(10), fractions=(0.8, 0.1, 0.2))
        with pytest.raises(ConfigError, match="nonnegative"):
            split_dataset(self.balanced(10), fractions=(1.2, -0.1, -0.1))
        with pytest.raises(DataError):
            split_dataset([], seed=0)

    def test_split_of_filter(self):
        out = split_dataset(self.balanced(100), seed=0)
        val = split_of(out, "val")
        assert all(r.split == "val" for r in val)
        with pytest.raises(ConfigError):
            split_of(out, "dev")


class TestBatches:
    def test_sizes_with_partial_tail(self):
        records = random_records(130)
        out = batches(records, 64, shuffle_seed=1, epoch=0)
        assert [len(b) for b in out] == [64, 64, 2]

    def test_epoch_keyed_shuffle(self):
        records = random_records(50)
        e0 = batches(records, 16, shuffle_seed=9, epoch=0)
        e0_again = batches(records, 16, shuffle_seed=9, epoch=0)
        e1 = batches(records, 16, shuffle_seed=9, epoch=1)
        ids = lambda bs: [r.id for b in bs for r in b]
        assert ids(e0) == ids(e0_again)
        assert ids(e0) != ids(e1)

    def test_covers_dataset_exactly_once(self):
        records = random_records(77)
        out = batches(records, 10, shuffle_seed=4, epoch=2)
        flat = sorted(r.id for b in out for r in b)
        assert flat == sorted(r.id for r in records)

    def test_no_shuffle_keeps_order(self):
        records = random_records(7)
        out = batches(records, 3)
        assert [r.id for b in out for r in b] == [r.id for r in records]

    def test_batch_size_guard(self):
        with pytest.raises(ConfigError):
            batches(random_records(5), 0)


class TestToArrays:
    def test_shapes_and_dtypes(self):
        records = random_records(5)
        x_img, x_txt, y = to_arrays(records)
        assert x_img.shape == (5, 6) and x_img.dtype == np.float32
        assert x_txt.shape == (5, 4) and x_txt.dtype == np.float32
        assert y.shape == (5,) and y.dtype == np.int64
        np.testing.assert_array_equal(x_img[2], records[2].img_emb)

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            to_arrays([])


class TestSynth:
    def test_deterministic(self):
        spec = SyntheticSpec(n=20, img_dim=8, txt_dim=5, seed=4)
        a, b = synth(spec), synth(spec)
        assert_records_equal(a, b)

    def test_different_seed_differs(self):
        a = synth(SyntheticSpec(n=10, img_dim=8, txt_dim=5, seed=1))
        b = synth(SyntheticSpec(n=10, img_dim=8, txt_dim=5, seed=2))
        assert not np.array_equal(a[0].img_emb, b[0].img_emb)

    def test_balanced_within_one(self):
        for n in (10, 11, 1):
            records = synth(SyntheticSpec(n=n, img_dim=4, txt_dim=3, seed=0))
            ones = sum(r.label for r in records)
            assert abs(ones - n / 2) <= 0.5 + 1e-9

    def test_finite_and_correct_shapes(self):
        records = synth(SyntheticSpec(n=6, img_dim=12, txt_dim=7, seed=3))
        for r in records:
            assert r.img_emb.shape == (12,) and r.txt_emb.shape == (7,)
            assert np.isfinite(r.img_emb).all() and np.isfinite(r.txt_emb).all()
            assert r.split == "train"
        assert len({r.id for r in records}) == 6

    def test_label_noise_one_flips_everything(self):
        clean = synth(SyntheticSpec(n=30, img_dim=4, txt_dim=3, seed=7, label_noise=0.0))
        noisy = synth(SyntheticSpec(n=30, img_dim=4, txt_dim=3, seed=7, label_noise=1.0))
        for c, n in zip(clean, noisy):
            assert n.label == 1 - c.label
            np.testing.assert_array_equal(c.img_emb, n.img_emb)

    def test_separation_moves_class_means_apart(self):
        records = synth(SyntheticSpec(n=400, img_dim=16, txt_dim=16, seed=5, class_separation=8.0))
        x_img, _, y = to_arrays(records)
        mu0 = x_img[y == 0].mean(axis=0)
        mu1 = x_img[y == 1].mean(axis=0)
        gap = np.linalg.norm(mu1 - mu0)
        assert 6.0 < gap < 10.0  # designed gap 8, sample noise ~0.3

    def test_spec_validation(self):
        with pytest.raises(ConfigError):
            SyntheticSpec(n=0)
        with pytest.raises(ConfigError):
            SyntheticSpec(n=1, class_separation=-1.0)
        with pytest.raises(ConfigError):
            SyntheticSpec(n=1, label_noise=1.5)
        with pytest.raises(ConfigError):
            SyntheticSpec(n=1, img_dim=0)


class TestRecordValidation:
    def test_validate_messages_name_the_record(self):
        rec = EmbeddingRecord("r7", np.zeros(4, np.float32), np.zeros(3, np.float32), 0)
        rec.validate(4, 3)
        rec.label = 3
        with pytest.raises(DataError, match="r7"):
            rec.validate(4, 3)
        rec.label = 0
        rec.split = "dev"
        with pytest.raises(DataError, match="r7"):
            rec.validate(4, 3)
        rec.split = "train"
        with pytest.raises(DataError, match="width"):
            rec.validate(5, 3)
