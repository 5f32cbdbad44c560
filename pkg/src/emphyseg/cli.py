"""Command-line pipeline: gen -> priors -> train -> eval -> compare/overlay.

Exit codes: 0 success, 2 usage (argparse), 3 configuration or data
problem, 4 runtime failure. Every subcommand writes only beneath its
--out target.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import torch

from .cdf import make_edges, read_cdf, scanner_prior, write_cdf
from .checkpoint import model_from_checkpoint, read_checkpoint, write_checkpoint
from .config import (
    dataset_spec_from_config,
    load_config,
    net_config_from_config,
    train_config_from_config,
)
from .data import read_manifest, read_volume
from .errors import (
    ConfigError,
    DegenerateInputError,
    GenerationError,
    TrainingDivergedError,
    VolumeFormatError,
)
from .evaluator import (
    compare_variants,
    read_report,
    render_overlay,
    run_eval,
    scan_domain_feature,
    write_ppm,
    write_report,
)
from .network import VARIANTS
from .objective import predict_scan
from .phantom import build_dataset
from .trainer import train as run_training
from .trainer import write_train_log

_USAGE_EXIT = 2
_CONFIG_EXIT = 3
_RUNTIME_EXIT = 4


def _blocks(path: str | None):
    return load_config(path) if path else []


def _load_priors(priors_dir: str | None, tags) -> dict:
    if priors_dir is None:
        raise ConfigError("this variant needs --priors (directory of <tag>.cdf files)")
    priors = {}
    for tag in tags:
        path = Path(priors_dir) / f"{tag}.cdf"
        if not path.exists():
            raise ConfigError(f"missing prior file {path}")
        feature = read_cdf(path)
        if feature.kind != "scanner":
            raise ConfigError(f"{path}: expected a scanner CDF, got kind {feature.kind!r}")
        priors[tag] = feature
    return priors


def _cmd_gen(args) -> int:
    spec = dataset_spec_from_config(_blocks(args.config), seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = build_dataset(spec, out)
    n_ood = len(manifest.split("test_ood"))
    print(f"wrote {len(manifest.records)} scans ({n_ood} test_ood) to {out}")
    return 0


def _cmd_priors(args) -> int:
    manifest = read_manifest(args.manifest)
    tags = manifest.scanners() if args.scanner == "all" else [args.scanner]
    edges = make_edges(args.lo, args.hi, args.bins)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for tag in tags:
        feature = scanner_prior(manifest, tag, k=args.k, edges=edges)
        path = out / f"{tag}.cdf"
        write_cdf(feature, path)
        print(f"{tag}: prior over {feature.n_bins} bins -> {path}")
    return 0


def _split_scanners(manifest, splits) -> list[str]:
    tags = {r.scanner for r in manifest.records if r.split in splits}
    return sorted(tags)


def _cmd_train(args) -> int:
    manifest = read_manifest(args.manifest)
    net_cfg = net_config_from_config(_blocks(args.net_config),
                                     variant=args.variant, seed=args.seed)
    train_cfg = train_config_from_config(_blocks(args.train_config), seed=args.seed)
    priors = None
    if net_cfg.uses_domain:
        priors = _load_priors(args.priors, _split_scanners(manifest, ("train", "val")))
    result = run_training(manifest, net_cfg, train_cfg, priors=priors)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.emck"
    write_checkpoint(result.checkpoint, ckpt_path)
    write_train_log(result.history, out / "train_log.tsv")
    best = result.checkpoint
    print(
        f"trained {len(result.history)} epochs, best epoch {best.best_epoch} "
        f"(val loss {best.best_val_loss:.6f}) -> {ckpt_path}"
    )
    return 0


def _cmd_eval(args) -> int:
    ckpt = read_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    manifest = read_manifest(args.manifest)
    splits = ("test_id", "test_ood") if args.split == "both" else (args.split,)
    priors = None
    if model.cfg.uses_domain:
        priors = _load_priors(args.priors, _split_scanners(manifest, splits))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split in splits:
        report = run_eval(model, manifest, split, priors)
        path = out / f"report_{split}.tsv"
        write_report(report, path)
        agg = report.overall
        print(
            f"{split}: {agg.n} scans, mean DSC {agg.mean_dsc:.4f}, "
            f"mean error {agg.mean_error:+.4f} -> {path}"
        )
    return 0


def _cmd_compare(args) -> int:
    reports = [read_report(p) for p in args.reports]
    table = compare_variants(reports)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    return 0


def _cmd_overlay(args) -> int:
    ckpt = read_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    manifest = read_manifest(args.manifest)
    record = next((r for r in manifest.records if r.scan_id == args.scan), None)
    if record is None:
        raise ConfigError(f"scan {args.scan!r} not in manifest")
    volume = read_volume(record.path)
    priors = None
    if model.cfg.uses_domain:
        priors = _load_priors(args.priors, [volume.scanner])
    domain = scan_domain_feature(volume, model.cfg, priors or {})
    pred = predict_scan(model, volume, domain)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    count = 0
    for i in range(volume.shape[0]):
        if not volume.lung_mask[i].any():
            continue
        image = render_overlay(volume.hu[i], pred[i], volume.emph_mask[i])
        write_ppm(image, out / f"{args.scan}_{i:03d}.ppm")
        count += 1
    print(f"wrote {count} overlay slices to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="override every seed in the loaded configs")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded math for byte-stable outputs")

    parser = argparse.ArgumentParser(
        prog="emphyseg",
        description="Scanner-robust emphysema segmentation on synthetic phantoms",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common],
                       help="generate a multi-scanner phantom dataset")
    p.add_argument("--config", help="dataset/phantom/scanner config file")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("priors", parents=[common],
                       help="derive scanner-prior CDF files")
    p.add_argument("--manifest", required=True)
    p.add_argument("--scanner", required=True,
                   help="scanner tag, or 'all' for every tag in the manifest")
    p.add_argument("--out", required=True, help="output directory for .cdf files")
    p.add_argument("--k", type=int, default=10, help="reference scans per scanner")
    p.add_argument("--bins", type=int, default=512)
    p.add_argument("--lo", type=float, default=-1024.0)
    p.add_argument("--hi", type=float, default=-700.0)
    p.set_defaults(func=_cmd_priors)

    p = sub.add_parser("train", parents=[common], help="train one variant")
    p.add_argument("--manifest", required=True)
    p.add_argument("--variant", required=True, choices=VARIANTS)
    p.add_argument("--net-config", help="config file with a [network] block")
    p.add_argument("--train-config", help="config file with a [train] block")
    p.add_argument("--priors", help="directory of <tag>.cdf prior files")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", parents=[common],
                       help="evaluate a checkpoint on test splits")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--priors", help="directory of <tag>.cdf prior files")
    p.add_argument("--split", choices=("test_id", "test_ood", "both"),
                   default="both")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("compare", parents=[common],
                       help="tabulate several variant reports side by side")
    p.add_argument("--reports", nargs="+", required=True)
    p.add_argument("--out", required=True, help="output table file")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("overlay", parents=[common],
                       help="render TP/FN/FP overlays for one scan")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--scan", required=True)
    p.add_argument("--priors", help="directory of <tag>.cdf prior files")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_overlay)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.deterministic:
        torch.set_num_threads(1)
    try:
        return args.func(args)
    except (ConfigError, DegenerateInputError, VolumeFormatError, ValueError) as exc:
        # ValueError covers manifest/volume validation (duplicate ids,
        # malformed rows), which is a data problem like the rest
        print(f"error: {exc}", file=sys.stderr)
        return _CONFIG_EXIT
    except (GenerationError, TrainingDivergedError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())
