"""Extraction pipeline.

Per manifest row: load the image, convert to RGB, resize to 224x224,
batch it through the frozen encoders, and write one JSON-lines record
(id, 1408-d image vector, 768-d text vector, label, split).  Rows whose
image is missing or undecodable are skipped and logged to a sidecar
report; a backend returning the wrong vector width aborts the whole
run.  The JSON-lines file is then converted to the binary dataset
format by calling the consumer's own command-line tool, so this package
touches that format only through its public interface.
"""

from __future__ import annotations

import json
import shutil
import subprocess
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .backends import IMG_WIDTH, TXT_WIDTH
from .errors import ExtractError, WidthError
from .manifest import SourceManifest, SourceRow

TARGET_SIZE = (224, 224)


@dataclass
class SkipReport:
    """Rows dropped during extraction, with machine-readable reasons."""

    entries: list[dict] = field(default_factory=list)

    def add(self, row: SourceRow, reason: str) -> None:
        self.entries.append({"id": row.id, "image": str(row.image), "reason": reason})

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for entry in self.entries:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")


@dataclass
class ExtractResult:
    written: int
    skipped: int
    jsonl_path: Path
    dataset_path: Path | None
    skip_log_path: Path | None


def load_image(path: Path) -> np.ndarray:
    """Decode, convert to RGB, and resize to the fixed input resolution."""
    with Image.open(path) as img:
        rgb = img.convert("RGB").resize(TARGET_SIZE, Image.Resampling.BILINEAR)
    return np.asarray(rgb, dtype=np.uint8)


def _check_width(kind: str, matrix: np.ndarray, expected: int) -> None:
    if matrix.ndim != 2 or matrix.shape[1] != expected:
        raise WidthError(
            f"backend produced {kind} vectors of shape {matrix.shape}; "
            f"expected width {expected}"
        )


def extract_to_jsonl(
    manifest: SourceManifest,
    backend,
    jsonl_path,
    batch_size: int = 8,
    progress=None,
) -> tuple[int, SkipReport]:
    """Run the encoders over every decodable row; returns (written, skips)."""
    if batch_size < 1:
        raise ExtractError("batch_size must be >= 1")
    jsonl_path = Path(jsonl_path)
    skips = SkipReport()
    loaded_rows: list[SourceRow] = []
    loaded_images: list[np.ndarray] = []
    for row in manifest.rows:
        try:
            loaded_images.append(load_image(row.image))
        except FileNotFoundError:
            skips.add(row, "image file not found")
            continue
        except (UnidentifiedImageError, OSError) as exc:
            skips.add(row, f"image not decodable: {exc}")
            continue
        loaded_rows.append(row)

    written = 0
    with open(jsonl_path, "w", encoding="utf-8") as fh:
        for start in range(0, len(loaded_rows), batch_size):
            rows = loaded_rows[start : start + batch_size]
            images = loaded_images[start : start + batch_size]
            img_emb = np.asarray(backend.encode_images(images), dtype=np.float32)
            txt_emb = np.asarray(
                backend.encode_texts([r.caption for r in rows]), dtype=np.float32
            )
            _check_width("image", img_emb, IMG_WIDTH)
            _check_width("text", txt_emb, TXT_WIDTH)
            if len(img_emb) != len(rows) or len(txt_emb) != len(rows):
                raise WidthError(
                    f"backend returned {len(img_emb)}/{len(txt_emb)} vectors "
                    f"for a batch of {len(rows)}"
                )
            for i, row in enumerate(rows):
                record = {
                    "id": row.id,
                    "img_emb": [float(v) for v in img_emb[i]],
                    "txt_emb": [float(v) for v in txt_emb[i]],
                    "label": row.label,
                    "split": row.split,
                }
                fh.write(json.dumps(record) + "\n")
                written += 1
            if progress is not None:
                progress(min(start + batch_size, len(loaded_rows)), len(loaded_rows))
    if written == 0:
        raise ExtractError("no rows survived extraction; see the skip report")
    return written, skips


def _consumer_cli() -> list[str]:
    """Locate the dataset consumer's command-line tool."""
    exe = shutil.which("memefusion")
    if exe:
        return [exe]
    return [sys.executable, "-m", "memefusion.cli"]


def convert_to_dataset(jsonl_path, dataset_path) -> None:
    """Convert the JSON-lines interchange file to the binary format by
    invoking the consumer's ``convert`` command."""
    command = _consumer_cli() + [
        "convert", "--data", str(jsonl_path), "--out", str(dataset_path),
    ]
    proc = subprocess.run(command, capture_output=True, text=True)
    if proc.returncode != 0:
        raise ExtractError(
            f"dataset conversion failed (exit {proc.returncode}): "
            f"{proc.stderr.strip() or proc.stdout.strip()}"
        )


def run(
    manifest: SourceManifest,
    backend,
    out_path,
    jsonl_path=None,
    skip_log_path=None,
    batch_size: int = 8,
    progress=None,
) -> ExtractResult:
    """Extract a manifest to the binary dataset format plus sidecar files.

    ``out_path`` ending in ``.jsonl`` stops after the interchange file;
    anything else also runs the binary conversion.
    """
    out_path = Path(out_path)
    to_binary = out_path.suffix != ".jsonl"
    if jsonl_path is None:
        jsonl_path = out_path.with_suffix(".jsonl") if to_binary else out_path
    jsonl_path = Path(jsonl_path)
    written, skips = extract_to_jsonl(
        manifest, backend, jsonl_path, batch_size=batch_size, progress=progress
    )
    dataset_path = None
    if to_binary:
        convert_to_dataset(jsonl_path, out_path)
        dataset_path = out_path
    if skip_log_path is None:
        skip_log_path = jsonl_path.with_name(jsonl_path.stem + ".skipped.jsonl")
    skip_log_path = Path(skip_log_path)
    skips.write(skip_log_path)
    return ExtractResult(
        written=written,
        skipped=len(skips.entries),
        jsonl_path=jsonl_path,
        dataset_path=dataset_path,
        skip_log_path=skip_log_path,
    )
