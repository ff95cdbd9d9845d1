"""Command line entry point: ``patternid <command> [--config F] [--seed N] [--out DIR] [--arch A] [--mode M]``."""
from __future__ import annotations

import argparse
import logging
import sys

from . import __version__, pipeline
from .errors import ConfigError, PatternIDError

COMMANDS = {
    "prepare-data": "generate (or import) images and write split manifests",
    "train-inpaint": "train inpainting GANs and keep the best validation checkpoint",
    "train-classifier": "fine-tune classification heads (shallow and/or deep)",
    "ablate": "run the region-ablation grid",
    "cluster-eval": "k-means metrics for frozen and refined encoders",
    "gradcam": "write GradCAM overlays for trained classifiers",
    "report": "collate the run into report/",
    "run-all": "every stage above in order",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="patternid", description="Inpainting-pretrained encoders for individual re-identification.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")
    for name, help_ in COMMANDS.items():
        s = sub.add_parser(name, help=help_, description=help_)
        s.add_argument("--config", help="INI config file (default: the run's config.ini snapshot, else defaults)")
        s.add_argument("--seed", type=int, help="seed for every stochastic component")
        s.add_argument("--out", help="run directory")
        s.add_argument("--arch", action="append", help="restrict to this architecture (repeatable)")
        s.add_argument("--mode", action="append", choices=["shallow", "deep"], help="restrict to this fine-tuning mode")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def _config(args):
    cfg = pipeline.load_config(args.config, args.out)
    if args.seed is not None:
        cfg.experiment.seed = args.seed
    if args.out:
        cfg.experiment.out = args.out
    if args.arch:
        cfg.experiment.archs = tuple(args.arch)
    cfg.validate()
    return cfg


def run(args) -> int:
    cfg = _config(args)
    root = cfg.experiment.out
    cmd = args.command
    if cmd == "prepare-data":
        counts = pipeline.prepare_data(cfg, root)
        print(", ".join(f"{k}: {v} rows" for k, v in counts.items()))
    elif cmd == "train-inpaint":
        for arch, (it, loss) in pipeline.train_inpaint(cfg, root, args.arch).items():
            print(f"{arch}: best checkpoint at iteration {it}, validation loss {loss:.5f}")
    elif cmd == "train-classifier":
        for (arch, mode), hist in pipeline.train_classifiers(cfg, root, args.arch, args.mode).items():
            acc = hist.test.accuracy if hist.test else float("nan")
            print(f"{arch}/{mode}: best epoch {hist.best_epoch}, test accuracy {acc:.3f}")
    elif cmd == "ablate":
        table = pipeline.ablate(cfg, root)
        from .ablation import render_ablation_report
        print(render_ablation_report(table), end="")
    elif cmd == "cluster-eval":
        for r in pipeline.cluster_eval(cfg, root, args.arch):
            print(f"{r.encoder}: ARI {r.adjusted_rand:.3f}, MI {r.mutual_information:.3f}, "
                  f"silhouette {r.silhouette:.3f}")
    elif cmd == "gradcam":
        print(f"{len(pipeline.gradcam_overlays(cfg, root, args.arch, args.mode))} overlays written")
    elif cmd == "report":
        from .report import build_report
        print(build_report(root))
    elif cmd == "run-all":
        print(pipeline.run_all(cfg, root))
    else:  # argparse guards this
        raise ConfigError(f"unknown command {cmd!r}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return run(args)
    except PatternIDError as exc:
        print(f"patternid {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
