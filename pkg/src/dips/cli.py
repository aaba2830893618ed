"""``dips`` command line: generate-data, harvest, train, infer, evaluate, plot, ablate."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from dips.config import RunConfig, parse_overrides
from dips.errors import DipsError

log = logging.getLogger("dips")


def _config(args):
    overrides = parse_overrides(args.set)
    if getattr(args, "data", None):
        overrides["data.root"] = args.data
    if getattr(args, "losses", None):
        overrides["loss.losses"] = args.losses
    if args.config:
        return RunConfig.from_file(args.config, overrides)
    return RunConfig.from_flat(overrides)


def _fresh_dir(path, force):
    path = Path(path)
    if path.exists() and any(path.iterdir()) and not force:
        raise DipsError(f"{path} is not empty; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_generate_data(args):
    from dips.data import SyntheticDatasetSpec, generate_synthetic_dataset

    spec = SyntheticDatasetSpec(num_images=args.num_images, image_size=args.image_size,
                                num_classes=args.num_classes, seed=args.seed)
    out = generate_synthetic_dataset(spec, args.out, force=args.force)
    print(f"wrote {spec.num_images} images to {out}")


def cmd_harvest(args):
    from dips.pipeline import harvest_cache_path, harvest_epoch

    cfg = _config(args)
    out = Path(args.out)
    for epoch in range(args.epochs):
        rows = harvest_epoch(cfg, epoch, harvest_cache_path(out, epoch))
        fallbacks = sum(r["is_fallback"] for r in rows)
        print(f"epoch {epoch}: {len(rows)} images, {fallbacks} fallbacks")


def cmd_train(args):
    from dips.pipeline import train

    cfg = _config(args)
    out = Path(args.out) if args.resume else _fresh_dir(args.out, args.force)
    result = train(cfg, out, resume=args.resume)
    last = result.history[-1] if result.history else {}
    print(f"checkpoint {result.checkpoint}; last epoch {last}")


def cmd_infer(args):
    from dips.pipeline import infer

    out = _fresh_dir(args.out, args.force)
    infer(args.checkpoint, args.manifest, out)
    print(f"predictions in {out}")


def cmd_evaluate(args):
    from dips.pipeline import evaluate

    metrics = evaluate(args.predictions, args.manifest, args.out, tag=args.tag or "")
    for name, value in metrics.items():
        print(f"{name:>16s} {value:.4f}")


def cmd_plot(args):
    from dips.plotting import plot_sweep

    plot_sweep(args.sweeps, args.out, labels=args.labels, column=args.column)
    print(f"wrote {args.out}")


def cmd_ablate(args):
    from dips.pipeline import ablate

    cfg = _config(args)
    out = _fresh_dir(args.out, args.force)
    rows = ablate(cfg, args.loss_sets, args.seeds, out)
    for r in rows:
        print(f"{r['loss_set']:>12s} seed {r['seed']}: PxAP {r['pxap']:.4f} "
              f"NewMaxBoxAcc {r['new_maxboxacc']:.4f}")


def build_parser():
    p = argparse.ArgumentParser(prog="dips", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--data", help="dataset root (same as --set data.root=...)")
        sp.add_argument("--losses", help="loss set, e.g. cpa+crf or cpa+crf+cls")

    sp = sub.add_parser("generate-data", help="write a synthetic shapes dataset")
    sp.add_argument("out")
    sp.add_argument("--num-images", type=int, default=650)
    sp.add_argument("--image-size", type=int, default=64)
    sp.add_argument("--num-classes", type=int, default=5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_generate_data)

    sp = sub.add_parser("harvest", help="cache harvested proposals and pseudo labels per epoch")
    with_config(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--epochs", type=int, default=1)
    sp.set_defaults(func=cmd_harvest)

    sp = sub.add_parser("train", help="train the localization network")
    with_config(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume", help="continue from a last.pt checkpoint")
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("infer", help="write foreground maps and class scores")
    sp.add_argument("checkpoint")
    sp.add_argument("manifest")
    sp.add_argument("--out", required=True)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("evaluate", help="WSOL metrics for a prediction directory")
    sp.add_argument("predictions")
    sp.add_argument("manifest")
    sp.add_argument("--out", required=True)
    sp.add_argument("--tag", help="loss-set tag recorded in metrics.csv")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("plot", help="plot BoxAcc threshold sweeps")
    sp.add_argument("sweeps", nargs="+")
    sp.add_argument("--out", required=True)
    sp.add_argument("--labels", nargs="+")
    sp.add_argument("--column", default="boxacc@0.5")
    sp.set_defaults(func=cmd_plot)

    sp = sub.add_parser("ablate", help="train and evaluate every loss set over several seeds")
    with_config(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--loss-sets", nargs="+", default=["cpa+crf+cls", "cpa+crf", "cpa+cls"])
    sp.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except DipsError as exc:
        print(f"dips {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
