"""Command line entry: keds-export <manifest.json> [--out DIR]."""

from __future__ import annotations

import argparse
import logging
import sys

from .export import ExportManifest, export


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="keds-export", description=__doc__)
    parser.add_argument("manifest", help="export manifest JSON")
    parser.add_argument("--out", default=None, help="override manifest output_dir")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    manifest = ExportManifest.from_json(args.manifest)
    if args.out:
        manifest.output_dir = args.out
    result = export(manifest)
    print(f"exported {result.exported} pairs ({result.skipped} skipped), "
          f"vocab size {result.vocab_size}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
