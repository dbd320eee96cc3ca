"""sage-convert command line: h5ad inputs -> native dataset directory."""

import argparse
import logging
import sys

from . import ConversionError
from .convert import ConversionSpec, convert


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sage-convert",
        description="Convert h5ad spatial containers into the native "
                    "manifest/genes/spots/matrix layout.")
    parser.add_argument("--in", dest="inputs", action="append", required=True,
                        metavar="FILE.h5ad", help="input file (repeatable)")
    tissue = parser.add_mutually_exclusive_group(required=True)
    tissue.add_argument("--tissue", help="fixed tissue label for all samples")
    tissue.add_argument("--tissue-col",
                        help="per-observation metadata column with the label")
    parser.add_argument("--sample-id",
                        help="fixed sample id (single input only); default "
                             "is the file stem")
    parser.add_argument("--coord-key", default="spatial",
                        help="obsm key holding spot coordinates")
    parser.add_argument("--layer",
                        help="counts layer name; default is X")
    parser.add_argument("--out", required=True, help="output directory")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    spec = ConversionSpec(
        inputs=args.inputs,
        out_dir=args.out,
        tissue=args.tissue,
        tissue_col=args.tissue_col,
        sample_id=args.sample_id,
        coord_key=args.coord_key,
        layer=args.layer,
    )
    try:
        report = convert(spec)
    except ConversionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {len(report.samples)} samples x {report.n_genes} genes "
          f"to {spec.out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
