"""aanet-export: encode an image directory into AAFM maps + manifest."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional

from .backbone import BACKBONES
from .export import ExportJob, export


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="aanet-export", description=__doc__)
    parser.add_argument("--images", type=Path, required=True, help="input image directory")
    parser.add_argument("--out", type=Path, required=True, help="output directory")
    parser.add_argument("--size", type=int, default=24, help="spatial side of exported maps")
    parser.add_argument("--resize", type=int, default=384, help="inference resolution")
    parser.add_argument("--backbone", default="gradient-bank", choices=sorted(BACKBONES))
    parser.add_argument("--role", default="database", choices=("database", "query"))
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    try:
        job = ExportJob(
            image_dir=args.images,
            output_dir=args.out,
            target_size=args.size,
            backbone=args.backbone,
            resize=args.resize,
            role=args.role,
        )
        report = export(job)
    except (ValueError, OSError) as e:
        print(f"aanet-export: error: {e}", file=sys.stderr)
        return 2
    print(f"exported {len(report.exported)} maps to {args.out}")
    if report.failed:
        print(f"skipped {len(report.failed)}: {sorted(report.failed)}", file=sys.stderr)
    return 0 if report.exported else 2


if __name__ == "__main__":
    sys.exit(main())
