"""Command-line front end.

Subcommands: ``rank`` scores a library against a target, ``fuse`` runs the
full fusion chain, ``phantom`` generates synthetic cohorts, ``eval``
compares two label maps, ``info`` summarizes a volume or manifest.
Exit codes: 0 success, 2 usage error, 1 runtime failure.
"""

import argparse
import sys

from . import io as vio
from . import phantom
from .pipeline import load_atlases, load_config, run_pipeline
from .similarity import rank_atlases
from .volume import dice, resample


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="atlasfuse",
        description="Multi-atlas label fusion on regular 3-d grids.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_rank = sub.add_parser("rank", help="score library atlases against a target")
    p_rank.add_argument("--target", required=True, help="target intensity volume")
    p_rank.add_argument("--manifest", required=True, help="atlas library manifest CSV")
    p_rank.add_argument("--metric", choices=("mi", "ssd"), default="mi")
    p_rank.add_argument("--bins", type=int, default=32, help="histogram bins for MI")

    p_fuse = sub.add_parser("fuse", help="fuse atlas labels onto a target")
    p_fuse.add_argument("--target", required=True, help="target intensity volume")
    p_fuse.add_argument("--manifest", required=True, help="atlas library manifest CSV")
    p_fuse.add_argument("--output", required=True, help="fused label output path")
    p_fuse.add_argument("--method",
                        choices=("mv", "staple", "wv", "crf", "patch", "combined"))
    p_fuse.add_argument("--config", help="flat key = value config file")
    p_fuse.add_argument("--truth", help="reference labels for Dice reporting")
    p_fuse.add_argument("--metrics", help="metrics CSV output path")
    p_fuse.add_argument("--roi-name", help="region name used in reports")
    p_fuse.add_argument("--native-reference",
                        help="native-space volume defining the output grid")
    p_fuse.add_argument("--target-affine",
                        help="native-to-normalized affine of the target")
    p_fuse.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config field (repeatable)")

    p_phantom = sub.add_parser("phantom", help="synthetic cohort utilities")
    phantom_sub = p_phantom.add_subparsers(dest="phantom_command", required=True)
    p_gen = phantom_sub.add_parser("generate", help="write a synthetic cohort")
    p_gen.add_argument("--spec", required=True, help="flat key = value phantom spec")
    p_gen.add_argument("--out", required=True, help="output directory")
    p_gen.add_argument("--n", type=int, default=11, help="cohort size")
    p_gen.add_argument("--target-index", type=int, default=0,
                       help="subject written as the fusion target")
    p_gen.add_argument("--format", choices=("nii", "mvol"), default="nii")

    p_eval = sub.add_parser("eval", help="Dice between two label maps")
    p_eval.add_argument("--auto", required=True, help="automatic segmentation")
    p_eval.add_argument("--truth", required=True, help="reference segmentation")

    p_info = sub.add_parser("info", help="summarize a volume or manifest")
    p_info.add_argument("path", help="volume, label map, or manifest CSV")
    return parser


def _cmd_rank(args) -> int:
    target = vio.read_volume(args.target)
    atlases = load_atlases(args.manifest)
    resampled = [resample(a.intensity, a.affine, target.geometry) for a in atlases]
    ranked = rank_atlases(target, resampled, metric=args.metric,
                          ids=[a.atlas_id for a in atlases], bins=args.bins)
    print("id,score")
    for atlas_id, score in ranked.entries:
        print(f"{atlas_id},{score:.9g}")
    return 0


def _parse_overrides(pairs) -> dict:
    overrides = {}
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"--set expects KEY=VALUE, got {pair!r}")
        key, _, val = pair.partition("=")
        overrides[key.strip()] = val.strip()
    return overrides


def _cmd_fuse(args) -> int:
    overrides = _parse_overrides(args.set)
    flag_values = {
        "target_path": args.target,
        "manifest_path": args.manifest,
        "output_path": args.output,
        "method": args.method,
        "truth_path": args.truth,
        "metrics_path": args.metrics,
        "roi_name": args.roi_name,
        "native_reference_path": args.native_reference,
        "target_affine_path": args.target_affine,
    }
    overrides.update({k: v for k, v in flag_values.items() if v is not None})
    config = load_config(args.config, overrides)
    result = run_pipeline(config)
    if result.dice is not None:
        print(f"{config.roi_name},{config.method},dice,{result.dice:.6f}")
    print(f"{config.roi_name},{config.method},seconds,"
          f"{sum(result.seconds.values()):.3f}")
    return 0


def _cmd_phantom(args) -> int:
    with open(args.spec) as fh:
        spec = phantom.parse_phantom_spec(fh.read())
    cohort = phantom.generate_cohort(spec, args.n)
    paths = phantom.write_cohort(cohort, args.out, target_index=args.target_index,
                                 fmt=args.format)
    print(f"cohort,{args.n}")
    print(f"target_intensity,{paths['target_intensity']}")
    print(f"target_labels,{paths['target_labels']}")
    print(f"manifest,{paths['manifest']}")
    return 0


def _cmd_eval(args) -> int:
    auto = vio.read_labels(args.auto)
    truth = vio.read_labels(args.truth)
    print(f"dice,{dice(auto, truth)}")
    return 0


def _cmd_info(args) -> int:
    if args.path.endswith(".csv"):
        entries = vio.read_manifest(args.path)
        print(f"manifest,{args.path}")
        print(f"atlases,{len(entries)}")
        n_affine = sum(1 for e in entries if e["affine_path"])
        n_dfield = sum(1 for e in entries if e["dfield_path"])
        print(f"with_affine,{n_affine}")
        print(f"with_dfield,{n_dfield}")
        for e in entries:
            print(f"id,{e['id']}")
        return 0
    vol = vio.read_volume(args.path)
    print(f"volume,{args.path}")
    print(f"dims,{vol.dims[0]},{vol.dims[1]},{vol.dims[2]}")
    print(f"spacing,{vol.spacing[0]:.9g},{vol.spacing[1]:.9g},{vol.spacing[2]:.9g}")
    print(f"origin,{vol.origin[0]:.9g},{vol.origin[1]:.9g},{vol.origin[2]:.9g}")
    print(f"range,{vol.data.min():.9g},{vol.data.max():.9g}")
    return 0


_COMMANDS = {
    "rank": _cmd_rank,
    "fuse": _cmd_fuse,
    "phantom": _cmd_phantom,
    "eval": _cmd_eval,
    "info": _cmd_info,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    try:
        return _COMMANDS[args.command](args)
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
