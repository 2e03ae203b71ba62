"""CLI for the checkpoint bridge: export-weights and capture-stats."""

from __future__ import annotations

import argparse
import sys

from .bridge import BridgeError, ExportManifest, capture_stats, export_weights


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="polyprune-bridge",
        description="export Llama-family checkpoints and activation statistics "
        "into polyprune containers",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export-weights", help="write the checkpoint as an f32 model container")
    p.add_argument("--manifest", required=True, help="json manifest path")
    p.set_defaults(op=export_weights)

    p = sub.add_parser("capture-stats", help="hooked calibration forwards -> stats container")
    p.add_argument("--manifest", required=True, help="json manifest path")
    p.set_defaults(op=capture_stats)

    args = parser.parse_args(list(sys.argv[1:]) if argv is None else list(argv))
    try:
        out = args.op(ExportManifest.from_file(args.manifest))
    except BridgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"written {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
