"""Command-line entry point: export checkpoints and emit parity vectors."""
from __future__ import annotations

import argparse
import sys


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rtdw-export",
        description="ELECTRA checkpoint conversion to the RTDW container format")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export", help="convert a checkpoint to RTDW")
    p.add_argument("--source", required=True,
                   help="local checkpoint directory or hub model id")
    p.add_argument("--out", required=True, help="RTDW output path")
    p.add_argument("--kind", choices=("discriminator", "generator"),
                   default="discriminator")

    p = sub.add_parser("parity", help="write reference P(replaced) vectors")
    p.add_argument("--source", required=True)
    p.add_argument("--inputs", required=True,
                   help="file with one space-separated token-id sequence per line")
    p.add_argument("--out", required=True, help="CSV output path")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "export":
            from .export import export_checkpoint
            manifest = export_checkpoint(args.source, args.out, kind=args.kind)
            print(f"exported {len(manifest.mapping)} tensors from "
                  f"{args.source} to {args.out}")
        else:
            from .parity import emit_parity
            rows = emit_parity(args.source, args.inputs, args.out)
            print(f"wrote {rows} parity rows to {args.out}")
        return 0
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
