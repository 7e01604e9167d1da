"""Tooling CLI: checkpoint conversion, cross-stack verification, plotting."""

from __future__ import annotations

import argparse
import sys


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="ssdr-tooling")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="convert a public VGG16 checkpoint")
    p.add_argument("--source", required=True, help="checkpoint file (.pth)")
    p.add_argument("--out", required=True, help="output weight container")
    p.add_argument("--sha256", help="full checksum override for the manifest")

    p = sub.add_parser("verify", help="compare engine output against the torch reference")
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--tolerance", type=float, default=1e-3)

    p = sub.add_parser("plot", help="render one figure from a results CSV")
    p.add_argument("--csv", required=True)
    p.add_argument("--kind", required=True)
    p.add_argument("--out", required=True)

    args = parser.parse_args(argv)

    if args.command == "convert":
        from .convert import ConversionError, convert_weights, torchvision_vgg16_manifest

        manifest = torchvision_vgg16_manifest()
        if args.sha256:
            manifest.sha256 = args.sha256
        try:
            convert_weights(args.source, manifest, args.out)
        except (ConversionError, OSError) as e:
            print(f"conversion failed: {e}", file=sys.stderr)
            return 1
        return 0

    if args.command == "verify":
        from .verify import ReferenceUnavailable, VerificationError, verify_against_reference

        try:
            err = verify_against_reference(args.weights, args.image)
        except ReferenceUnavailable as e:
            print(f"reference stack unavailable, skipping: {e}")
            return 0
        except VerificationError as e:
            print(f"verification failed: {e}", file=sys.stderr)
            return 1
        print(f"max abs deviation: {err:.3e}")
        if err >= args.tolerance:
            print(f"exceeds tolerance {args.tolerance:g}", file=sys.stderr)
            return 1
        return 0

    from .plots import PlotSpec, SchemaError, plot

    try:
        plot(PlotSpec(args.csv, args.kind, args.out))
    except (SchemaError, OSError) as e:
        print(f"plotting failed: {e}", file=sys.stderr)
        return 1
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
