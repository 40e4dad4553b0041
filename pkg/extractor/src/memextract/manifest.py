"""Source manifest loading.

A manifest lists the samples to extract: one row per meme with a
unique id, an image path, the caption text, a binary label, and an
optional split tag.  Two formats are accepted:

* CSV with a header row naming at least ``id,image,caption,label``
  and optionally ``split``;
* JSON lines with one object per row using the same keys.

Labels must be 0 or 1; split tags, when present, must be one of
train/val/test (missing tags default to train).  Image paths are
resolved relative to the manifest file's directory.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ManifestError

SPLITS = ("train", "val", "test")


@dataclass
class SourceRow:
    id: str
    image: Path
    caption: str
    label: int
    split: str = "train"


@dataclass
class SourceManifest:
    path: Path
    rows: list[SourceRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)


def _check_row(
    where: str, id_: str, image: str, caption: str, label, split, base: Path
) -> SourceRow:
    if not id_:
        raise ManifestError(f"{where}: empty id")
    if not image:
        raise ManifestError(f"{where}: empty image path")
    try:
        label_int = int(str(label))
    except (TypeError, ValueError):
        raise ManifestError(f"{where}: label {label!r} is not an integer") from None
    if label_int not in (0, 1):
        raise ManifestError(f"{where}: label must be 0 or 1, got {label_int}")
    if split in (None, ""):
        split = "train"
    if split not in SPLITS:
        raise ManifestError(f"{where}: unknown split tag {split!r}")
    image_path = Path(image)
    if not image_path.is_absolute():
        image_path = base / image_path
    return SourceRow(id=id_, image=image_path, caption=caption, label=label_int, split=split)


def _finish(path: Path, rows: list[SourceRow]) -> SourceManifest:
    if not rows:
        raise ManifestError(f"{path}: manifest has no rows")
    seen: set[str] = set()
    for row in rows:
        if row.id in seen:
            raise ManifestError(f"{path}: duplicate id {row.id!r}")
        seen.add(row.id)
    return SourceManifest(path=path, rows=rows)


def _load_csv(path: Path) -> SourceManifest:
    base = path.parent
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ManifestError(f"{path}: empty file")
        missing = {"id", "image", "caption", "label"} - set(reader.fieldnames)
        if missing:
            raise ManifestError(
                f"{path}: missing column(s): {', '.join(sorted(missing))}"
            )
        rows = []
        for lineno, record in enumerate(reader, start=2):
            rows.append(
                _check_row(
                    f"{path}: line {lineno}",
                    (record.get("id") or "").strip(),
                    (record.get("image") or "").strip(),
                    record.get("caption") or "",
                    record.get("label"),
                    (record.get("split") or "").strip(),
                    base,
                )
            )
    return _finish(path, rows)


def _load_jsonl(path: Path) -> SourceManifest:
    base = path.parent
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}: line {lineno}"
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{where}: invalid JSON: {exc}") from None
            if not isinstance(record, dict):
                raise ManifestError(f"{where}: expected an object")
            missing = {"id", "image", "caption", "label"} - set(record)
            if missing:
                raise ManifestError(f"{where}: missing key(s): {', '.join(sorted(missing))}")
            rows.append(
                _check_row(
                    where,
                    str(record["id"]).strip(),
                    str(record["image"]).strip(),
                    str(record["caption"]),
                    record["label"],
                    str(record.get("split") or "").strip(),
                    base,
                )
            )
    return _finish(path, rows)


def load_manifest(path) -> SourceManifest:
    """Read a CSV or JSON-lines manifest, deciding by file extension."""
    path = Path(path)
    if path.suffix == ".jsonl":
        return _load_jsonl(path)
    return _load_csv(path)
