"""CLI wrapper around the exporter: kscd-export."""

import argparse
import sys

from .capture import ExportConfig, export
from .errors import ExportError


def build_parser():
    parser = argparse.ArgumentParser(
        prog="kscd-export",
        description="Capture per-layer post-rotary Q/K/V (and attention "
                    "input/output hidden states) into KSCD trace files.",
    )
    parser.add_argument("--model", required=True,
                        help="tiny:<k=v,...> spec or checkpoint directory")
    parser.add_argument("--prompts", required=True, help="one prompt per line")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--max-tokens", type=int, default=512)
    xy = parser.add_mutually_exclusive_group()
    xy.add_argument("--capture-xy", dest="capture_xy", action="store_true", default=True)
    xy.add_argument("--no-capture-xy", dest="capture_xy", action="store_false")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    config = ExportConfig(
        model=args.model,
        prompt_file=args.prompts,
        output_dir=args.out,
        max_tokens=args.max_tokens,
        capture_xy=args.capture_xy,
    )
    try:
        written = export(config)
    except (ExportError, OSError) as e:
        sys.stderr.write(f"kscd-export: {e}\n")
        return 2
    print(f"wrote {len(written)} trace file(s) to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
