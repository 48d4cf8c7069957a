"""CLI entry points: export-embeddings (image tower) and export-captions
(text tower). Exit codes: 0 ok, 1 runtime failure, 2 malformed manifest."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import __version__
from .core import export, export_captions
from .encoder import BUILTIN_MODEL_ID
from .errors import ExporterError, ManifestError


def _parser(prog: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog=prog)
    p.add_argument("--manifest", required=True,
                   help='JSONL: {"id": int, "image_path": str, "caption": str}')
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--model-id", default=BUILTIN_MODEL_ID)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--version", action="version", version=__version__)
    return p


def _run(fn, prog: str, argv: list[str] | None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr)
    args = _parser(prog).parse_args(argv)
    try:
        report = fn(args.manifest, args.out, model_id=args.model_id,
                    batch_size=args.batch_size)
    except ManifestError as e:
        print(json.dumps({"error": e.code, "detail": str(e)}), file=sys.stderr)
        return 2
    except ExporterError as e:
        print(json.dumps({"error": e.code, "detail": str(e)}), file=sys.stderr)
        return 1
    print(json.dumps({**report.to_dict(), "tool_version": __version__}))
    return 0


def main_images(argv: list[str] | None = None) -> int:
    return _run(export, "export-embeddings", argv)


def main_captions(argv: list[str] | None = None) -> int:
    return _run(export_captions, "export-captions", argv)


if __name__ == "__main__":
    sys.exit(main_images())
