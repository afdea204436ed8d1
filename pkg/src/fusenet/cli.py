"""``fusenet`` command line: group, synth, train, eval, predict, gradcheck.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

log = logging.getLogger("fusenet")


class UsageError(Exception):
    pass


def _log_base(text: str):
    if text in ("e", "ln", "natural"):
        return None
    value = float(text)
    if value <= 1:
        raise argparse.ArgumentTypeError("log base must be > 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="fusenet", description=__doc__, formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=fmt)
        p.add_argument("--config", help="JSON file of flag defaults (flags on the command line win)")
        p.add_argument("--seed", type=int, default=0, help="seed for all randomness")
        p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
        return p

    p = add("group", "cross-entropy band matrix and band grouping")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-matrix", required=True, help="CSV output path")
    p.add_argument("--out-groups", required=True, help="JSON output path")
    p.add_argument("--split", default="all", help="tile split to read, or 'all'")
    p.add_argument("--sample-budget", type=int, default=None, help="max pixels (seeded subsample)")
    p.add_argument("--log-base", type=_log_base, default=None, help="'e' or a number > 1")
    p.add_argument("--n-groups", type=int, default=2, help="number of 3-band spectral groups")
    p.add_argument("--ratio-threshold", type=float, default=0.6, help="outlier row-magnitude ratio")

    p = add("synth", "write a seeded synthetic 5-band dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--tiles", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--val-fraction", type=float, default=0.25)

    p = add("train", "train a fusion (or single-pipeline) model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--groups", required=True, help="grouping JSON from 'fusenet group'")
    p.add_argument("--checkpoint", required=True, help="checkpoint output path")
    p.add_argument("--out", default=None, help="training log CSV path")
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--classes", type=int, default=None, help="defaults to the manifest class count")
    p.add_argument("--patch-size", type=int, default=64)
    p.add_argument("--stride", type=int, default=None, help="defaults to the patch size")
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lambda", dest="aux_weight", type=float, default=0.3, help="auxiliary loss weight")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--workers", type=int, default=1, help="sample preparation threads")
    p.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    p.add_argument("--architecture", choices=["fusion", "deepunet"], default="fusion")
    p.add_argument("--group-index", type=int, default=None,
                   help="with --architecture deepunet: which group to train on")
    p.add_argument("--augment", action="store_true", help="random rotation/flip/scale")
    p.add_argument("--eval-every", type=int, default=1, help="validation interval in epochs (0 = never)")
    p.add_argument("--checkpoint-interval", type=int, default=0, help="epochs between checkpoints")
    p.add_argument("--timing", action="store_true", help="fill the seconds column of the log")

    p = add("eval", "score a checkpoint on a split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--groups", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--out", default=None, help="report JSON path (a CSV is written next to it)")
    p.add_argument("--patch-size", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--error-images", default=None, help="directory for red/green PPM images")

    p = add("predict", "per-tile class rasters")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--groups", default=None)
    p.add_argument("--out", required=True, help="output directory for <tile>_pred.pgm")
    p.add_argument("--tile", action="append", default=None, help="tile id (repeatable)")
    p.add_argument("--split", default="val", help="used when no --tile is given")
    p.add_argument("--patch-size", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--error-images", default=None)

    p = add("gradcheck", "run the float64 finite-difference gradient suite")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--width", type=int, default=4)
    return parser


def _parse(parser: argparse.ArgumentParser, argv):
    args = parser.parse_args(argv)
    if args.config:
        with open(args.config) as f:
            overrides = json.load(f)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(overrides) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        sub.set_defaults(**overrides)
        args = parser.parse_args(argv)
    return args


def _check_groups(path, expected):
    from fusenet.grouping import GroupingResult

    with open(path) as f:
        groups = GroupingResult.from_json(f.read()).groups
    if expected is not None and groups != expected:
        raise ValueError(f"grouping in {path} {groups} does not match the checkpoint {expected}")
    return groups


def cmd_group(args) -> int:
    from fusenet import data as D
    from fusenet.grouping import group_bands

    manifest = D.load_manifest(args.manifest)
    ids = None if args.split == "all" else manifest.split[args.split]
    matrix, result = group_bands(D.band_channels(manifest, ids), n_spectral_groups=args.n_groups,
                                 sample_budget=args.sample_budget, seed=args.seed,
                                 log_base=args.log_base, ratio_threshold=args.ratio_threshold)
    with open(args.out_matrix, "w") as f:
        f.write(matrix.to_csv())
    with open(args.out_groups, "w") as f:
        f.write(result.to_json())
    log.info("outliers %s, groups %s", result.outliers, result.groups)
    return 0


def cmd_synth(args) -> int:
    from fusenet.data import synth_generate

    m = synth_generate(args.out, n_tiles=args.tiles, tile_size=args.size, seed=args.seed,
                       val_fraction=args.val_fraction)
    log.info("wrote %d tiles to %s", len(m.tiles), args.out)
    return 0


def cmd_train(args) -> int:
    from fusenet import data as D
    from fusenet.fusion import FusionModelConfig
    from fusenet.grouping import GroupingResult
    from fusenet.trainer import TrainConfig, train

    manifest = D.load_manifest(args.manifest)
    with open(args.groups) as f:
        grouping = GroupingResult.from_json(f.read())
    groups = grouping.groups
    if args.architecture == "deepunet":
        if args.group_index is None:
            if len(groups) != 1:
                raise UsageError("--architecture deepunet needs --group-index for multi-group files")
            args.group_index = 0
        groups = [groups[args.group_index]]
    classes = args.classes if args.classes is not None else len(manifest.classes)
    if classes != len(manifest.classes):
        raise ValueError(f"--classes {classes} does not match the manifest ({len(manifest.classes)})")
    model_config = FusionModelConfig(groups=groups, width=args.width, depth=args.depth, classes=classes,
                                     aux_weight=args.aux_weight)
    train_config = TrainConfig(learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch_size,
                               patch_size=args.patch_size, stride=args.stride, aux_weight=args.aux_weight,
                               seed=args.seed, augment=args.augment, optimizer=args.optimizer,
                               checkpoint_interval=args.checkpoint_interval, eval_every=args.eval_every,
                               record_time=args.timing)
    train(manifest, grouping if args.architecture == "fusion" else groups, model_config, train_config,
          architecture=args.architecture, workers=args.workers, checkpoint_path=args.checkpoint,
          log_path=args.out)
    return 0


def cmd_eval(args) -> int:
    from fusenet import data as D
    from fusenet.trainer import evaluate, load_checkpoint

    ck = load_checkpoint(args.checkpoint)
    groups = _check_groups(args.groups, None)
    if ck.model.architecture == "fusion" and groups != ck.model.groups:
        raise ValueError(f"grouping {groups} does not match the checkpoint {ck.model.groups}")
    if ck.model.architecture == "deepunet" and ck.model.groups[0] not in groups:
        raise ValueError(f"checkpoint group {ck.model.groups[0]} is not in {args.groups}")
    manifest = D.load_manifest(args.manifest)
    report, _ = evaluate(ck, manifest, args.split, args.patch_size, args.batch_size, args.error_images)
    print(f"overall_accuracy {report.overall_accuracy:.6f}")
    if args.out:
        with open(args.out, "w") as f:
            f.write(report.to_json())
        with open(os.path.splitext(args.out)[0] + ".csv", "w") as f:
            f.write(report.to_csv())
    return 0


def cmd_predict(args) -> int:
    from fusenet import data as D
    from fusenet.metrics import write_error_image
    from fusenet.netpbm import write_pgm
    from fusenet.trainer import load_checkpoint, predict_tile

    ck = load_checkpoint(args.checkpoint)
    if args.groups:
        _check_groups(args.groups, ck.model.groups if ck.model.architecture == "fusion" else None)
    manifest = D.load_manifest(args.manifest)
    tile_ids = args.tile or manifest.split.get(args.split, [])
    if not tile_ids:
        raise ValueError("no tiles selected")
    size = args.patch_size or ck.train_config.get("patch_size", 64)
    os.makedirs(args.out, exist_ok=True)
    for tid in tile_ids:
        tile = D.load_tile(manifest, tid)
        pred = predict_tile(ck.model, D.normalized_groups(tile, ck.model.groups, ck.stats), size,
                            args.batch_size)
        write_pgm(os.path.join(args.out, f"{tid}_pred.pgm"), pred, maxval=255)
        if args.error_images:
            write_error_image(os.path.join(args.error_images, f"{tid}_errors.ppm"), pred, tile.label)
    return 0


def cmd_gradcheck(args) -> int:
    from fusenet.gradcheck import run_suite

    reports = run_suite(seed=args.seed, tolerance=args.tolerance, width=args.width)
    ok = True
    for name, r in reports.items():
        ok &= r.passed
        print(f"{'PASS' if r.passed else 'FAIL'} {name:18s} max_rel_error={r.max_rel_error:.3e} "
              f"checked={r.checked} skipped={r.skipped}")
    return 0 if ok else 1


COMMANDS = {"group": cmd_group, "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "predict": cmd_predict, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _parse(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (UsageError, OSError, ValueError) as exc:
        parser.print_usage(sys.stderr)
        print(f"fusenet: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    resolved = {k: v for k, v in sorted(vars(args).items())}
    log.info("resolved config: %s", json.dumps(resolved, default=str))
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"fusenet: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit code 1
        log.debug("failure", exc_info=True)
        print(f"fusenet: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
