"""Dataset I/O: the embedding-pair binary format, a JSON-lines
interchange format, stratified splitting, epoch batching, and a
synthetic generator so every experiment runs without real encoders.

Binary format (all little-endian), version 1:

    header:  magic "MBE2" (4 bytes), version u32, count u32,
             img_dim u32, txt_dim u32
    record:  id_len u16, id (UTF-8, id_len bytes), label u8,
             split u8 (0=train, 1=val, 2=test),
             img_dim float32 values, txt_dim float32 values

JSON-lines interchange: one object per line with keys id (string),
label (0/1), split (optional, default "train"), img_emb and txt_emb
(arrays of base-10 floats).
"""

from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import ndcore
from .errors import (
    ConfigError,
    CorruptionError,
    DataError,
    FormatError,
    VersionError,
)

MAGIC = b"MBE2"
FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")
_SPLIT_TO_TAG = {name: i for i, name in enumerate(SPLITS)}

_HEADER = struct.Struct("<4sIIII")
_REC_FIXED = struct.Struct("<H")  # id length; label/split/vectors follow


class StratificationWarning(UserWarning):
    """A label class was too small to split stratified."""


@dataclass
class EmbeddingRecord:
    """One sample: paired embeddings, binary label, and a split tag."""

    id: str
    img_emb: np.ndarray
    txt_emb: np.ndarray
    label: int
    split: str = "train"

    def validate(self, img_dim: int | None = None, txt_dim: int | None = None) -> None:
        if self.label not in (0, 1):
            raise DataError(f"record {self.id!r}: label must be 0 or 1, got {self.label}")
        if self.split not in SPLITS:
            raise DataError(f"record {self.id!r}: split must be one of {SPLITS}")
        if self.img_emb.ndim != 1 or self.txt_emb.ndim != 1:
            raise DataError(f"record {self.id!r}: embeddings must be 1-D vectors")
        if img_dim is not None and self.img_emb.shape[0] != img_dim:
            raise DataError(
                f"record {self.id!r}: image width {self.img_emb.shape[0]} != {img_dim}"
            )
        if txt_dim is not None and self.txt_emb.shape[0] != txt_dim:
            raise DataError(
                f"record {self.id!r}: text width {self.txt_emb.shape[0]} != {txt_dim}"
            )


@dataclass(frozen=True)
class DatasetHeader:
    magic: bytes
    version: int
    count: int
    img_dim: int
    txt_dim: int


def _dims_of(records: list[EmbeddingRecord]) -> tuple[int, int]:
    if not records:
        raise DataError("dataset must contain at least one record")
    return records[0].img_emb.shape[0], records[0].txt_emb.shape[0]


def _validate_records(records: list[EmbeddingRecord]) -> tuple[int, int]:
    img_dim, txt_dim = _dims_of(records)
    seen: set[str] = set()
    for rec in records:
        rec.validate(img_dim, txt_dim)
        if rec.id in seen:
            raise DataError(f"duplicate record id {rec.id!r}")
        seen.add(rec.id)
    return img_dim, txt_dim


def write_dataset(records: list[EmbeddingRecord], path) -> None:
    """Serialize records in dataset order; round-trips bit-exactly."""
    img_dim, txt_dim = _validate_records(records)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(records), img_dim, txt_dim))
        for rec in records:
            id_bytes = rec.id.encode("utf-8")
            if len(id_bytes) > 0xFFFF:
                raise DataError(f"record id {rec.id[:32]!r}... longer than 65535 bytes")
            fh.write(_REC_FIXED.pack(len(id_bytes)))
            fh.write(id_bytes)
            fh.write(struct.pack("<BB", rec.label, _SPLIT_TO_TAG[rec.split]))
            fh.write(np.ascontiguousarray(rec.img_emb, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(rec.txt_emb, dtype="<f4").tobytes())


def read_header(path) -> DatasetHeader:
    """Parse and validate only the fixed-size header."""
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise CorruptionError(f"file ends inside the header at byte {len(raw)}")
    magic, version, count, img_dim, txt_dim = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported format version {version}, expected {FORMAT_VERSION}")
    if count < 1:
        raise FormatError(f"header count must be >= 1, got {count}")
    if img_dim < 1 or txt_dim < 1:
        raise FormatError(f"header dims must be >= 1, got ({img_dim}, {txt_dim})")
    return DatasetHeader(magic, version, count, img_dim, txt_dim)


def read_dataset(path) -> list[EmbeddingRecord]:
    """Read a complete dataset; the header is validated before any record."""
    header = read_header(path)
    with open(path, "rb") as fh:
        buf = fh.read()
    offset = _HEADER.size
    img_bytes = header.img_dim * 4
    txt_bytes = header.txt_dim * 4
    records: list[EmbeddingRecord] = []
    seen: set[str] = set()
    for index in range(header.count):
        def _take(n: int, what: str) -> bytes:
            nonlocal offset
            chunk = buf[offset : offset + n]
            if len(chunk) < n:
                raise CorruptionError(
                    f"record {index}: file truncated reading {what} at byte {offset}"
                )
            offset += n
            return chunk

        (id_len,) = _REC_FIXED.unpack(_take(_REC_FIXED.size, "id length"))
        try:
            rec_id = _take(id_len, "id").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptionError(f"record {index}: id is not valid UTF-8") from exc
        label, split_tag = struct.unpack("<BB", _take(2, "label/split"))
        if label not in (0, 1):
            raise FormatError(f"record {index}: label byte {label} is not 0 or 1")
        if split_tag > 2:
            raise FormatError(f"record {index}: split tag {split_tag} is not 0, 1, or 2")
        img = np.frombuffer(_take(img_bytes, "image vector"), dtype="<f4").copy()
        txt = np.frombuffer(_take(txt_bytes, "text vector"), dtype="<f4").copy()
        if rec_id in seen:
            raise DataError(f"duplicate record id {rec_id!r} at record {index}")
        seen.add(rec_id)
        records.append(
            EmbeddingRecord(rec_id, img, txt, int(label), SPLITS[split_tag])
        )
    if offset != len(buf):
        raise FormatError(
            f"{len(buf) - offset} trailing bytes after {header.count} records"
        )
    return records


def write_jsonl(records: list[EmbeddingRecord], path) -> None:
    """One JSON object per line; floats in base-10 notation."""
    _validate_records(records)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            obj = {
                "id": rec.id,
                "label": rec.label,
                "split": rec.split,
                "img_emb": [float(v) for v in rec.img_emb],
                "txt_emb": [float(v) for v in rec.txt_emb],
            }
            fh.write(json.dumps(obj, separators=(",", ":")) + "\n")


def read_jsonl(path) -> list[EmbeddingRecord]:
    records: list[EmbeddingRecord] = []
    img_dim = txt_dim = None
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"line {lineno}: invalid JSON: {exc}") from exc
            try:
                rec = EmbeddingRecord(
                    id=str(obj["id"]),
                    img_emb=np.asarray(obj["img_emb"], dtype=np.float32),
                    txt_emb=np.asarray(obj["txt_emb"], dtype=np.float32),
                    label=int(obj["label"]),
                    split=obj.get("split", "train"),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"line {lineno}: malformed record: {exc}") from exc
            if img_dim is None:
                img_dim, txt_dim = rec.img_emb.shape[0], rec.txt_emb.shape[0]
            try:
                rec.validate(img_dim, txt_dim)
            except DataError as exc:
                raise FormatError(f"line {lineno}: {exc}") from exc
            if rec.id in seen:
                raise DataError(f"line {lineno}: duplicate record id {rec.id!r}")
            seen.add(rec.id)
            records.append(rec)
    if not records:
        raise DataError(f"{path}: no records")
    return records


def split_dataset(
    records: list[EmbeddingRecord],
    fractions: tuple[float, float, float] = (0.85, 0.05, 0.10),
    seed: int = 0,
) -> list[EmbeddingRecord]:
    """Assign split tags, stratified by label, with a seeded shuffle.

    Per class: floor(n * fraction) records go to val and test, the
    remainder to train.  Classes with fewer than 3 members cannot be
    stratified; they are pooled and split together, with a warning.
    Returns new records in the original dataset order.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must sum to 1, got {fractions} (sum {sum(fractions)})")
    if any(f < 0 for f in fractions):
        raise ConfigError(f"fractions must be nonnegative, got {fractions}")
    if not records:
        raise DataError("cannot split an empty dataset")

    rng = ndcore.make_rng(ndcore.derive_seed(seed, "split"))
    by_class: dict[int, list[int]] = {}
    for i, rec in enumerate(records):
        by_class.setdefault(rec.label, []).append(i)

    groups: list[list[int]] = []
    pooled: list[int] = []
    for label in sorted(by_class):
        members = by_class[label]
        if len(members) < 3:
            warnings.warn(
                f"class {label} has only {len(members)} record(s); "
                "splitting it unstratified",
                StratificationWarning,
                stacklevel=2,
            )
            pooled.extend(members)
        else:
            groups.append(members)
    if pooled:
        groups.append(pooled)

    assignment = ["train"] * len(records)
    for members in groups:
        order = rng.permutation(len(members))
        n = len(members)
        n_val = math.floor(n * fractions[1])
        n_test = math.floor(n * fractions[2])
        for pos, j in enumerate(order):
            idx = members[j]
            if pos < n_val:
                assignment[idx] = "val"
            elif pos < n_val + n_test:
                assignment[idx] = "test"

    return [
        EmbeddingRecord(r.id, r.img_emb, r.txt_emb, r.label, assignment[i])
        for i, r in enumerate(records)
    ]


def split_of(records: list[EmbeddingRecord], split: str) -> list[EmbeddingRecord]:
    if split not in SPLITS:
        raise ConfigError(f"split must be one of {SPLITS}, got {split!r}")
    return [r for r in records if r.split == split]


def batches(
    records: list[EmbeddingRecord],
    batch_size: int,
    shuffle_seed: int | None = None,
    epoch: int = 0,
) -> list[list[EmbeddingRecord]]:
    """Partition records into consecutive batches; the last may be short.

    With a shuffle_seed, order is a seeded permutation keyed by
    (shuffle_seed, epoch); with None, dataset order is kept (evaluation).
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if shuffle_seed is None:
        order = range(len(records))
    else:
        rng = ndcore.make_rng(ndcore.derive_seed(shuffle_seed, f"epoch:{epoch}"))
        order = rng.permutation(len(records))
    shuffled = [records[i] for i in order]
    return [shuffled[i : i + batch_size] for i in range(0, len(shuffled), batch_size)]


def to_arrays(records: list[EmbeddingRecord]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack records into (images [n, img_dim], texts [n, txt_dim], labels [n])."""
    if not records:
        raise DataError("cannot stack an empty record list")
    x_img = np.stack([r.img_emb for r in records]).astype(np.float32, copy=False)
    x_txt = np.stack([r.txt_emb for r in records]).astype(np.float32, copy=False)
    y = np.array([r.label for r in records], dtype=np.int64)
    return x_img, x_txt, y


@dataclass(frozen=True)
class SyntheticSpec:
    """Class-conditional Gaussian embedding pairs.

    Per class and modality, the mean sits at +/- (class_separation / 2)
    along a seeded random unit direction; unit-variance noise is added
    per coordinate.  Labels start balanced within one count, then flip
    independently with probability label_noise.
    """

    n: int
    img_dim: int = 1408
    txt_dim: int = 768
    class_separation: float = 6.0
    label_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError("SyntheticSpec.n must be >= 1")
        if self.img_dim < 1 or self.txt_dim < 1:
            raise ConfigError("SyntheticSpec dims must be >= 1")
        if self.class_separation < 0:
            raise ConfigError("class_separation must be >= 0")
        if not 0.0 <= self.label_noise <= 1.0:
            raise ConfigError("label_noise must be a probability")


def synth(spec: SyntheticSpec) -> list[EmbeddingRecord]:
    """Generate a deterministic synthetic dataset (all records tagged train)."""
    rng = ndcore.make_rng(ndcore.derive_seed(spec.seed, "synth"))
    half = spec.class_separation / 2.0

    def unit(dim):
        v = rng.normal(size=dim)
        return v / np.linalg.norm(v)

    d_img = unit(spec.img_dim)
    d_txt = unit(spec.txt_dim)

    labels = np.zeros(spec.n, dtype=np.int64)
    labels[spec.n // 2 :] = 1  # balanced within one count
    labels = labels[rng.permutation(spec.n)]
    signs = np.where(labels == 1, 1.0, -1.0)[:, None]

    x_img = (signs * (half * d_img)[None, :] + rng.normal(size=(spec.n, spec.img_dim))).astype(
        np.float32
    )
    x_txt = (signs * (half * d_txt)[None, :] + rng.normal(size=(spec.n, spec.txt_dim))).astype(
        np.float32
    )

    observed = labels.copy()
    if spec.label_noise > 0.0:
        flips = rng.random(spec.n) < spec.label_noise
        observed[flips] = 1 - observed[flips]

    return [
        EmbeddingRecord(f"synth-{i:06d}", x_img[i], x_txt[i], int(observed[i]), "train")
        for i in range(spec.n)
    ]
