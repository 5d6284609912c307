"""Command-line front end.

    floodseg synth --seed 7 --count 80 --size 128 --out-dir data
    floodseg train --arch dilated-1 --manifest data/manifest.json --out runs/d1
    floodseg predict --model runs/d1/dilated-1-p25.fpar --manifest data/manifest.json --split val --out pred
    floodseg eval --manifest data/manifest.json --split val --pred pred

Global flags (--config, --seed, --threads, --out) may appear before or after
the subcommand. Errors exit with the code carried by their class.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .data import LOCATIONS, labels_to_mask, read_manifest, read_pgm, write_pgm, write_synthetic_dataset
from .errors import ConfigError, FloodsegError
from .fusion import FusionModel, VoteConfig, majority_vote
from .model import load_params
from .optim import OptimConfig
from .pipeline import (
    PROTOCOLS,
    RunConfig,
    evaluate_predictions,
    fuse_train,
    predict_fused,
    predict_models,
    predict_protocol,
    predict_routed,
    train_protocol,
)

log = logging.getLogger("floodseg")

EXIT_IO = 8
EXIT_USAGE = 2


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # the same flags live on the main parser and every subparser; SUPPRESS keeps
    # a subparser from overwriting a value given before the subcommand
    d = argparse.SUPPRESS if suppress else None
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--config", default=d, help="JSON run config")
    g.add_argument("--seed", type=int, default=d, help="master seed")
    g.add_argument("--threads", type=int, default=d, help="BLAS thread limit (1 for bit-exact reruns)")
    g.add_argument("--out", default=d, help="output file or directory")
    g.add_argument("-v", "--verbose", action="store_true", default=False if not suppress else d)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="floodseg", description="Flood segmentation with CNN ensembles.",
                                     parents=[_global_flags(False)])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    common = [_global_flags(True)]

    p = sub.add_parser("synth", parents=common, help="generate a synthetic multispectral dataset")
    p.add_argument("--count", type=int, default=80, help="train+val scenes, dealt over locations")
    p.add_argument("--size", type=int, default=320)
    p.add_argument("--locations", type=int, nargs="+", default=list(LOCATIONS))
    p.add_argument("--out-dir", help="dataset directory (default: --out)")
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--test-count", type=int, default=0, help="test scenes per location")
    p.add_argument("--new-count", type=int, default=0, help="test scenes from an unseen location")

    p = sub.add_parser("train", parents=common, help="train the networks of a run config")
    p.add_argument("--protocol", choices=PROTOCOLS)
    p.add_argument("--arch", nargs="+", help="architecture names or JSON paths")
    p.add_argument("--manifest")
    p.add_argument("--patch-size", type=int, nargs="+")
    p.add_argument("--epochs", type=int)
    p.add_argument("--dtype", choices=("float32", "float64"))

    p = sub.add_parser("predict", parents=common, help="probability maps and masks for a split")
    p.add_argument("--model", nargs="+", help="parameter files")
    p.add_argument("--specialists", help="directory with location-<k>.fpar files (routed prediction)")
    p.add_argument("--fusion", help="fusion model used for location 'new' when routing")
    p.add_argument("--manifest")
    p.add_argument("--split", default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--png", action="store_true", help="also write PNG masks (white = flooded)")

    p = sub.add_parser("fuse-train", parents=common, help="fit the per-pixel SVM over >= 2 models")
    p.add_argument("--model", nargs="+")
    p.add_argument("--manifest")
    p.add_argument("--split", default="train")
    p.add_argument("--C", type=float)

    p = sub.add_parser("fuse-predict", parents=common, help="predict with a fitted fusion model")
    p.add_argument("--model", nargs="+")
    p.add_argument("--fusion", required=True)
    p.add_argument("--manifest")
    p.add_argument("--split", default="test")
    p.add_argument("--png", action="store_true")

    p = sub.add_parser("vote", parents=common, help="per-pixel majority vote over mask directories")
    p.add_argument("--pred", nargs="+", required=True, help="directories of PGM masks")
    p.add_argument("--tie-break", choices=("background", "flooded"), default="background")

    p = sub.add_parser("eval", parents=common, help="aggregate IoU of predicted masks")
    p.add_argument("--manifest")
    p.add_argument("--split", default="test")
    p.add_argument("--pred", required=True, help="directory of PGM masks")
    return parser


# -- helpers ------------------------------------------------------------------------

def _run_config(args) -> RunConfig | None:
    path = getattr(args, "config", None)
    return RunConfig.load(path) if path else None


def _manifest_path(args, run: RunConfig | None) -> str:
    path = getattr(args, "manifest", None) or (run.manifest if run else None)
    if not path:
        raise ConfigError("no manifest: pass --manifest or a --config naming one")
    return path


def _model_paths(args, run: RunConfig | None, minimum: int = 1) -> list[str]:
    paths = getattr(args, "model", None)
    if not paths and run is not None:
        run_dir = Path(run.out_dir)
        produced = run_dir / "run.json"
        if run.models:
            paths = run.models
        elif produced.exists():
            paths = [str(run_dir / p) for p in json.loads(produced.read_text())["models"]]
    if not paths or len(paths) < minimum:
        n = len(paths or [])
        raise ConfigError(f"{args.command} needs at least {minimum} model(s), got {n}")
    return list(paths)


def _out(args, default: str) -> Path:
    return Path(getattr(args, "out", None) or default)


# -- commands -----------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = args.out_dir or getattr(args, "out", None)
    if not out:
        raise ConfigError("synth needs --out-dir (or --out)")
    seed = args.seed if getattr(args, "seed", None) is not None else 0
    m = write_synthetic_dataset(out, seed, args.count, args.size, args.locations, args.val_fraction,
                                args.test_count, args.new_count)
    counts = {s: len(m.select(s)) for s in ("train", "val", "test")}
    print(f"wrote {len(m.entries)} scenes to {out} ({', '.join(f'{k} {v}' for k, v in counts.items())})")
    return 0


def cmd_train(args) -> int:
    if getattr(args, "config", None):
        run = _run_config(args)
        overrides = {}
        if getattr(args, "seed", None) is not None:
            overrides["seed"] = args.seed
        if getattr(args, "out", None):
            overrides["out_dir"] = args.out
        if args.manifest:
            overrides["manifest"] = args.manifest
        if args.epochs is not None:
            overrides["optim"] = OptimConfig.from_dict({**run.optim.to_dict(), "epochs": args.epochs})
        if args.dtype:
            overrides["dtype"] = args.dtype
        if overrides:
            run = RunConfig(**{**run.__dict__, **overrides})
    else:
        if not args.arch or not args.manifest:
            raise ConfigError("train needs --config, or --arch and --manifest")
        optim = OptimConfig() if args.epochs is None else OptimConfig(epochs=args.epochs)
        protocol = args.protocol or ("single-50" if args.patch_size == [50] else "single-25")
        run = RunConfig(protocol=protocol, manifest=args.manifest, architectures=args.arch,
                        patch_sizes=args.patch_size or [], optim=optim,
                        seed=args.seed if getattr(args, "seed", None) is not None else 0,
                        out_dir=getattr(args, "out", None) or "runs", dtype=args.dtype or "float32")
    produced = train_protocol(run)
    for p in produced["models"]:
        print(p)
    if "fusion" in produced:
        print(produced["fusion"])
    return 0


def cmd_predict(args) -> int:
    run = _run_config(args)
    out = getattr(args, "out", None)
    if run is not None and not args.model and not args.specialists:
        run.threshold = args.threshold
        if args.manifest:
            run.manifest = args.manifest
        path = predict_protocol(run, args.split, Path(out) if out else None, args.png)
        print(path)
        return 0
    manifest = read_manifest(_manifest_path(args, run))
    out = Path(out or "predictions")
    if args.specialists:
        sdir = Path(args.specialists)
        specialists = {loc: load_params(sdir / f"location-{loc}.fpar") for loc in LOCATIONS
                       if (sdir / f"location-{loc}.fpar").exists()}
        if not specialists:
            raise ConfigError(f"{sdir}: no location-<k>.fpar files")
        fpath = Path(args.fusion) if args.fusion else sdir / "location-fusion.json"
        fm = FusionModel.load(fpath) if fpath.exists() else None
        predict_routed(manifest, args.split, specialists, fm, out, args.threshold, args.png)
        print(out)
        return 0
    models = [load_params(p) for p in _model_paths(args, run)]
    for d in predict_models(manifest, args.split, models, out, args.threshold, args.png):
        print(d)
    return 0


def cmd_fuse_train(args) -> int:
    run = _run_config(args)
    paths = _model_paths(args, run, minimum=2)
    manifest = read_manifest(_manifest_path(args, run))
    C = args.C if args.C is not None else (run.C if run else None)
    seed = args.seed if getattr(args, "seed", None) is not None else (run.seed if run else 0)
    kw = {} if C is None else {"C": C}
    fm = fuse_train(manifest, [load_params(p) for p in paths], seed=seed, split=args.split, **kw)
    out = _out(args, str(Path(run.out_dir) / "fusion.json") if run else "fusion.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    fm.save(out)
    print(f"{out}: weights {', '.join(f'{w:.4f}' for w in fm.weights)} bias {fm.bias:.4f}")
    return 0


def cmd_fuse_predict(args) -> int:
    run = _run_config(args)
    paths = _model_paths(args, run, minimum=2)
    manifest = read_manifest(_manifest_path(args, run))
    out = _out(args, "predictions")
    predict_fused(manifest, args.split, [load_params(p) for p in paths], FusionModel.load(args.fusion), out, args.png)
    print(out)
    return 0


def cmd_vote(args) -> int:
    if len(args.pred) < 2:
        raise ConfigError(f"vote needs at least 2 prediction directories, got {len(args.pred)}")
    dirs = [Path(d) for d in args.pred]
    cfg = VoteConfig([str(d) for d in dirs], args.tie_break)
    stems = sorted(p.stem for p in dirs[0].glob("*.pgm"))
    if not stems:
        raise ConfigError(f"{dirs[0]}: no PGM masks")
    out = _out(args, "voted")
    out.mkdir(parents=True, exist_ok=True)
    for stem in stems:
        maps = [read_pgm(d / f"{stem}.pgm") for d in dirs]
        write_pgm(out / f"{stem}.pgm", labels_to_mask(majority_vote(maps, cfg)))
    print(out)
    return 0


def cmd_eval(args) -> int:
    run = _run_config(args)
    manifest = read_manifest(_manifest_path(args, run))
    report = evaluate_predictions(manifest, args.split, args.pred)
    out = _out(args, str(Path(args.pred) / f"eval-{args.split}.json"))
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2) + "\n")
    print(f"IoU: {report['aggregate']['iou']:.4f}")
    for loc, r in report["per_location"].items():
        print(f"  location {loc}: {r['iou']:.4f}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "predict": cmd_predict,
    "fuse-train": cmd_fuse_train,
    "fuse-predict": cmd_fuse_predict,
    "vote": cmd_vote,
    "eval": cmd_eval,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args)
    except FloodsegError as e:
        print(f"floodseg {args.command}: error: {e}", file=sys.stderr)
        return e.exit_code
    except (OSError, json.JSONDecodeError) as e:
        print(f"floodseg {args.command}: error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"floodseg {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
