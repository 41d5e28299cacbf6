"""Command-line interface. JSON results go to stdout, logs and diagnostics to stderr.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger("pageforge")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _emit(obj) -> None:
    json.dump(obj, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def _need_dir(path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{what} {p} is not a directory")
    return p


def _need_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} {p} does not exist")
    return p


def cmd_gen(args) -> int:
    from .synth.generator import GenConfig, gen_dataset

    overrides = {}
    if args.config:
        overrides = json.loads(_need_file(args.config, "generator config").read_text())
    overrides.update({"regime": args.regime, "seed": args.seed})
    pages = dict(overrides.get("pages", {}))
    for split in ("train", "valid", "test"):
        n = getattr(args, f"{split}_pages")
        if n is not None:
            pages[split] = n
    if pages:
        overrides["pages"] = {**GenConfig().pages, **pages}
    cfg = GenConfig.from_dict(overrides)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} exists and is not empty; pass --force to overwrite")
    workers = int(os.environ.get("PAGEFORGE_THREADS", "1"))
    stats = gen_dataset(cfg, out, force=args.force, workers=workers)
    stats.pop("config", None)
    _emit(stats)
    return 0


def _load_cfg(args):
    from .config import load_config

    overrides = {}
    if args.seed is not None:
        overrides["train"] = {"seed": args.seed}
    if getattr(args, "epochs", None) is not None:
        overrides.setdefault("train", {})["epochs"] = args.epochs
    path = _need_file(args.config, "config file") if args.config else None
    return load_config(path, args.preset, overrides)


def cmd_train(args) -> int:
    from .pipeline import TrainingDiverged, train
    from .plotting import loss_curve

    data = _need_dir(args.data, "data directory")
    cfg = _load_cfg(args)
    try:
        model, state = train(data, args.setup, cfg, out=args.out, resume=args.resume)
    except TrainingDiverged as exc:
        print(f"error: {exc}; last good weights in {exc.checkpoint_path}", file=sys.stderr)
        return 2
    result = {"checkpoint": str(args.out), "setup": args.setup, "epochs": state.epoch, "steps": state.step,
              "best_epoch": state.best_epoch, "best_val_loss": state.best_val}
    if args.figures:
        result["figures"] = [str(loss_curve(state.history, Path(args.figures) / "loss_curve.png"))]
    _emit(result)
    return 0


def cmd_eval(args) -> int:
    from . import checkpoint
    from .pipeline import evaluate, load_pages, pr_points
    from .plotting import pr_curve

    data = _need_dir(args.data, "data directory")
    model, _, _ = checkpoint.load(_need_file(args.ckpt, "checkpoint"))
    report = evaluate(model, data, args.split)
    if args.figures and "ap" in report:
        pages = load_pages(data, args.split, list(model.tagset.tags), model.alphabet)
        r, p = pr_points(model, pages)
        report["figures"] = [str(pr_curve(r, p, report["ap"], Path(args.figures) / f"pr_{args.split}.png"))]
    _emit(report)
    return 0


def cmd_predict(args) -> int:
    from . import checkpoint
    from .pipeline import load_image, predict
    from .plotting import overlay

    model, _, _ = checkpoint.load(_need_file(args.ckpt, "checkpoint"))
    ink = load_image(_need_file(args.image, "image"))
    reading = predict(model, ink)
    if args.overlay:
        overlay(ink, reading, args.overlay)
    _emit(reading)
    return 0


def cmd_rf_calc(args) -> int:
    from .backbone import BackboneConfig, layers_for_config, receptive_field

    cfg = _load_cfg(args)
    bcfg = BackboneConfig.from_dict(cfg["backbone"])
    base = Path(args.config).resolve().parent if args.config else None
    layers = layers_for_config(bcfg, base)
    r, j = receptive_field(layers)
    _emit({"receptive_field": int(r), "jump": int(j), "layers": len(layers), "fixture": bcfg.rf_fixture})
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(args.seed or 0)
    _emit(results)
    return 0 if all(r["ok"] for r in results.values()) else 2


def cmd_stats(args) -> int:
    from .synth.generator import dataset_stats, load_split

    root = _need_dir(args.data, "data directory")
    records = {s: load_split(root, s) for s in ("train", "valid", "test") if (root / f"{s}.jsonl").exists()}
    if not records:
        raise UsageError(f"{root} holds no split files")
    stats = dataset_stats(records)
    _emit(stats)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pageforge", description="Joint word detection, transcription and entity tagging on pages.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True):
        sp.add_argument("--seed", type=int, default=None, help="random seed")
        if config:
            sp.add_argument("--config", help="JSON config file")
            sp.add_argument("--preset", choices=("desk", "paper"), default=None,
                            help="base preset (default: the file's own, else desk)")

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--regime", choices=("records", "forms", "prose"), required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config", help="JSON file with generator settings")
    g.add_argument("--train-pages", type=int)
    g.add_argument("--valid-pages", type=int)
    g.add_argument("--test-pages", type=int)
    g.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train one setup")
    t.add_argument("--setup", choices=("A", "B", "C", "D", "baseline"), required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--epochs", type=int, help="override train.epochs")
    t.add_argument("--resume", help="continue from a checkpoint")
    t.add_argument("--figures", help="directory for the loss curve")
    common(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=("train", "valid", "test"))
    e.add_argument("--figures", help="directory for the precision-recall curve")
    common(e, config=False)
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="read one page image")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--image", required=True)
    pr.add_argument("--overlay", help="write an annotated copy of the page here")
    common(pr, config=False)
    pr.set_defaults(func=cmd_predict)

    r = sub.add_parser("rf-calc", help="receptive field of the configured backbone")
    common(r)
    r.set_defaults(func=cmd_rf_calc)

    gc = sub.add_parser("gradcheck", help="64-bit finite-difference gradient suite")
    common(gc, config=False)
    gc.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("stats", help="dataset summary")
    s.add_argument("--data", required=True)
    common(s, config=False)
    s.set_defaults(func=cmd_stats)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit code 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
