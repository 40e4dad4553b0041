"""Command line for the extractor.

One job: read a source manifest (CSV or JSON lines of id, image path,
caption, label, optional split), run the frozen encoders over every
decodable row, and write the consumer's dataset formats plus a skip
report.  Exit codes: 0 success, 2 usage error, 3 manifest/data error,
4 backend or internal error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .backends import BACKENDS, make_backend
from .errors import BackendError, ExtractError, ManifestError
from .manifest import load_manifest
from .pipeline import run

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_INTERNAL = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="memextract",
        description=(
            "extract image/text embeddings from an id,image,caption,label manifest "
            "into the memefusion dataset format"
        ),
    )
    parser.add_argument("--manifest", type=Path, required=True,
                        help="source manifest (.csv or .jsonl)")
    parser.add_argument("--out", type=Path, required=True,
                        help="output dataset (.mbe2), or .jsonl to stop at the interchange file")
    parser.add_argument("--backend", choices=sorted(BACKENDS), default="blip2",
                        help="encoder backend (default: blip2)")
    parser.add_argument("--model-name", default="Salesforce/blip2-opt-2.7b",
                        help="checkpoint for the blip2 backend")
    parser.add_argument("--device", default="cpu", help="device for the blip2 backend")
    parser.add_argument("--batch-size", type=int, default=8, help="extraction batch size")
    parser.add_argument("--jsonl-out", type=Path, default=None,
                        help="where to keep the interchange file (default: beside --out)")
    parser.add_argument("--skip-log", type=Path, default=None,
                        help="sidecar report of skipped rows (default: beside the interchange file)")
    parser.add_argument("--quiet", action="store_true", help="suppress progress output")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.batch_size < 1:
        print("error: --batch-size must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        manifest = load_manifest(args.manifest)
        if args.backend == "blip2":
            backend = make_backend("blip2", model_name=args.model_name, device=args.device)
        else:
            backend = make_backend(args.backend)

        def progress(done: int, total: int) -> None:
            if not args.quiet:
                print(f"encoded {done}/{total}", file=sys.stderr)

        result = run(
            manifest,
            backend,
            args.out,
            jsonl_path=args.jsonl_out,
            skip_log_path=args.skip_log,
            batch_size=args.batch_size,
            progress=progress,
        )
        target = result.dataset_path or result.jsonl_path
        print(
            f"wrote {result.written} records to {target} "
            f"({result.skipped} skipped; see {result.skip_log_path})"
        )
        return EXIT_OK
    except ManifestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except BackendError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except ExtractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
