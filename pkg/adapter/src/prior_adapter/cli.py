"""prior-extract: export estimator priors into the dataset layout."""

from __future__ import annotations

import argparse
import sys

from .errors import AdapterError
from .extract import extract


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="prior-extract",
        description="Convert video frames plus depth/flow estimator "
                    "outputs into a reconstruction-ready dataset")
    ap.add_argument("--frames", required=True,
                    help="directory of frames (or a dataset root with frames/)")
    ap.add_argument("--out", required=True, help="output dataset directory")
    ap.add_argument("--depth-backend", default="passthrough")
    ap.add_argument("--flow-backend", default="passthrough")
    ap.add_argument("--source",
                    help="backend input directory (default: --frames)")
    ap.add_argument("--intrinsics",
                    help="fx,fy,cx,cy override when no backend supplies them")
    ap.add_argument("--short-side", type=int, default=None,
                    help="downscale frames so the shortest side matches")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    intr = None
    if args.intrinsics:
        vals = [float(v) for v in args.intrinsics.split(",")]
        if len(vals) != 4:
            print("error[BadInput]: --intrinsics needs fx,fy,cx,cy",
                  file=sys.stderr)
            return 2
        intr = tuple(vals)
    try:
        out = extract(args.frames, args.out,
                      depth_backend=args.depth_backend,
                      flow_backend=args.flow_backend,
                      source=args.source, intrinsics=intr,
                      short_side=args.short_side)
    except AdapterError as e:
        print(f"error[{type(e).__name__}]: {e}", file=sys.stderr)
        return 2
    print(f"dataset written to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
