"""Command line entry points.

Exit codes: 0 success, 2 usage or mapping errors, 3 export errors
(shape, dtype, coverage, batch-norm, failed validation), 4 I/O and
container errors.
"""

import argparse
import json
import subprocess
import sys

from .container import ExportError
from .export import export
from .mapping import load_mapping
from .sources import load_checkpoint

USAGE_CODES = ("bad-mapping", "unsupported-kind")
IO_CODES = ("io", "bad-container")


def _exit_code(err: ExportError) -> int:
    if err.code in USAGE_CODES:
        return 2
    if err.code in IO_CODES:
        return 4
    return 3


def _cmd_export(args) -> int:
    mapping = load_mapping(args.mapping) if args.mapping else None
    report = export(args.checkpoint, args.output, mapping)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as f:
            f.write(report.to_json())
    print(f"wrote {report.path} ({report.arch}, {len(report.tensors)} tensors)")
    if args.validate:
        proc = subprocess.run(
            [sys.executable, "-m", "baryfuse", "validate", report.path],
            capture_output=True,
            text=True,
        )
        sys.stdout.write(proc.stdout)
        sys.stderr.write(proc.stderr)
        if proc.returncode != 0:
            raise ExportError(
                "shape-rule",
                f"exported file failed validation (exit {proc.returncode})",
            )
    return 0


def _cmd_inspect(args) -> int:
    tensors = load_checkpoint(args.checkpoint)
    rows = [
        {"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)}
        for name, arr in tensors.items()
    ]
    if args.json:
        print(json.dumps(rows, indent=2))
    else:
        for row in rows:
            shape = "x".join(str(s) for s in row["shape"]) or "scalar"
            print(f"{row['name']}\t{shape}\t{row['dtype']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mfir-export",
        description="Convert trained checkpoints into MFIR model files.",
    )
    sub = parser.add_subparsers(dest="command")

    p_export = sub.add_parser("export", help="convert a checkpoint")
    p_export.add_argument("checkpoint", help=".npz, .pt/.pth, or .mfir file")
    p_export.add_argument(
        "-m", "--mapping", help="mapping JSON (optional for .mfir sources)"
    )
    p_export.add_argument("-o", "--output", required=True, help="output .mfir path")
    p_export.add_argument("--report", help="write an export report JSON here")
    p_export.add_argument(
        "--validate",
        action="store_true",
        help="run the model toolkit's validate command on the result",
    )
    p_export.set_defaults(func=_cmd_export)

    p_inspect = sub.add_parser("inspect", help="list checkpoint tensors")
    p_inspect.add_argument("checkpoint")
    p_inspect.add_argument("--json", action="store_true", help="emit JSON")
    p_inspect.set_defaults(func=_cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args)
    except ExportError as e:
        print(f"error: {e}", file=sys.stderr)
        return _exit_code(e)
    except OSError as e:
        print(f"error: [io] {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
