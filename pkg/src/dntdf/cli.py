"""Command-line entry point: synth, train, eval, predict, count."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .arch import DecoderConfig, PROFILES, get_profile
from .complexity import cost_report, cost_table, format_table
from .data import load_images, load_maps, load_masks, load_samples, save_samples, synth_generate, to_u8, write_pnm
from .train import evaluate, evaluate_predictions, load_config, load_model, predict, save_model, train, \
    validation_data


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dntdf", description="Densely nested top-down flow saliency toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic dataset as netpbm files")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory (gets images/ and masks/)")

    t = sub.add_parser("train", help="train from a key = value config file")
    t.add_argument("--config", required=True)
    t.add_argument("--quiet", action="store_true")

    e = sub.add_parser("eval", help="score a model or a directory of predicted maps")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--model")
    src.add_argument("--predictions", help="directory of P5 maps named like the masks")
    e.add_argument("--images")
    e.add_argument("--masks", required=True)
    e.add_argument("--report", help="write key: value report here (PR samples go to <report>.pr.csv)")
    e.add_argument("--mode", choices=("per-image", "pooled"), default="per-image")

    pr = sub.add_parser("predict", help="write saliency maps as P5 images")
    pr.add_argument("--model", required=True)
    pr.add_argument("--images", required=True)
    pr.add_argument("--out", required=True)

    c = sub.add_parser("count", help="static parameter / MAC accounting")
    c.add_argument("--backbone", required=True, choices=sorted(PROFILES))
    c.add_argument("--r", type=int, help="compression ratio (default: the backbone's)")
    c.add_argument("--input", type=int, default=288)
    c.add_argument("--table", type=_int_list, help="comma-separated ratios for a cost table")
    c.add_argument("--pcsp", type=int, default=4)
    c.add_argument("--no-ppm", action="store_true")
    c.add_argument("--csv", action="store_true", help="per-layer CSV instead of the summary")
    return p


def cmd_synth(args) -> int:
    samples = synth_generate(args.n, args.size, args.seed)
    save_samples(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    result = train(cfg, log=None if args.quiet else print)
    print(f"trained {result.steps} steps in {result.seconds:.1f}s; final epoch loss {result.epoch_loss[-1]:.5f}"
          if result.epoch_loss else "no epochs run")
    if cfg.model:
        save_model(result.graph, cfg.model, cfg)
        print(f"model saved to {cfg.model}")
    if cfg.report:
        report = evaluate(result.graph, validation_data(cfg))
        Path(cfg.report).write_text(report.to_text())
        Path(cfg.report + ".pr.csv").write_text(report.pr_csv())
        sys.stdout.write(report.to_text())
    return 0


def _emit_report(report, path: Optional[str]) -> None:
    sys.stdout.write(report.to_text())
    if path:
        Path(path).write_text(report.to_text())
        Path(path + ".pr.csv").write_text(report.pr_csv())


def cmd_eval(args) -> int:
    if args.model:
        if not args.images:
            raise ValueError("--images is required with --model")
        graph = load_model(args.model)
        report = evaluate(graph, load_samples(args.images, args.masks), mode=args.mode)
    else:
        masks = load_masks(args.masks)
        preds = load_maps(args.predictions)
        missing = sorted(set(masks) ^ set(preds))
        if missing:
            raise FileNotFoundError(f"no prediction/mask pair for basename {missing[0]!r}")
        keys = sorted(masks)
        for k in keys:
            if preds[k].shape != masks[k].shape:
                raise ValueError(f"{k}: prediction {preds[k].shape} and mask {masks[k].shape} differ in size")
        report = evaluate_predictions([preds[k] for k in keys], [masks[k] for k in keys], args.mode)
    _emit_report(report, args.report)
    return 0


def cmd_predict(args) -> int:
    graph = load_model(args.model)
    items = load_images(args.images)
    h, w = graph.input_size
    for ident, img in items:
        if img.shape[1:] != (h, w):
            raise ValueError(f"{ident}: image is {img.shape[1]}x{img.shape[2]} after alignment, model expects {h}x{w}")
    maps = predict(graph, [img for _, img in items])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for (ident, _), m in zip(items, maps):
        write_pnm(out / f"{ident}.pgm", to_u8(m))
    print(f"wrote {len(maps)} maps to {out}")
    return 0


def cmd_count(args) -> int:
    profile = get_profile(args.backbone)
    base = DecoderConfig(r=args.r or profile.default_r, pcsp_count=args.pcsp, ppm_enabled=not args.no_ppm)
    stub = profile.encoder == "stub"
    if args.table:
        rows = cost_table(profile, base, args.table, args.input)
        sys.stdout.write(format_table(rows, profile.name, args.input, encoder_counted=not stub))
        return 0
    rep = cost_report(profile, base, args.input)
    if args.csv:
        sys.stdout.write(rep.to_csv())
        return 0
    rows = cost_table(profile, base, [base.r], args.input)
    sys.stdout.write(format_table(rows, profile.name, args.input, encoder_counted=not stub))
    sys.stdout.write(rep.to_text())
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict, "count": cmd_count}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse already printed usage to stderr
        return int(e.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (ValueError, OSError, RuntimeError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
