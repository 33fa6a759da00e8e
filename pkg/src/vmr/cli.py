"""Command-line entry points.

Subcommands: gen-data, train, eval, ood-eval, analyze-bias, report, grad-check.
Exit codes: 0 success, 1 partial failure (some experiment cells failed),
2 configuration error.
"""

import argparse
import json
import os
import sys

import numpy as np


def _common(parser):
    parser.add_argument("--config", help="experiment config JSON")
    parser.add_argument("--seed", type=int, default=None, help="override the (first) seed")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--precision", choices=["single", "double"], default=None)
    parser.add_argument("--quiet", action="store_true")
    return parser


def build_parser():
    p = argparse.ArgumentParser(prog="vmr", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_text in [
            ("gen-data", "generate a synthetic confounded dataset to disk"),
            ("train", "train a single (method, seed) cell"),
            ("eval", "evaluate a checkpoint on an annotation file"),
            ("ood-eval", "evaluate a checkpoint after the OOD transform"),
            ("analyze-bias", "write the annotation-location heatmap of a split"),
            ("report", "run the configured experiment end to end"),
            ("grad-check", "verify model gradients against finite differences")]:
        sp = _common(sub.add_parser(name, help=help_text))
        if name == "train":
            sp.add_argument("--method", default="tcn_dcm")
        if name in ("eval", "ood-eval"):
            sp.add_argument("--checkpoint", required=True)
            sp.add_argument("--annotations", required=True)
            sp.add_argument("--features", default=None)
            sp.add_argument("--format", default="canonical-json",
                            choices=["canonical-json", "charades-text"])
        if name == "ood-eval":
            sp.add_argument("--rho", type=float, required=True)
        if name == "analyze-bias":
            sp.add_argument("--annotations", required=True)
            sp.add_argument("--format", default="canonical-json",
                            choices=["canonical-json", "charades-text"])
            sp.add_argument("--clips", type=int, default=16)
        if name == "grad-check":
            sp.add_argument("--head", default="tcn", choices=["tcn", "cmi"])
            sp.add_argument("--mode", default="dcm", choices=["dcm", "baseline", "blind"])
    return p


def _load_experiment(args):
    from .harness import ExperimentConfig, load_config
    cfg = load_config(args.config) if args.config else ExperimentConfig.from_json({})
    if args.seed is not None:
        from dataclasses import replace
        cfg = replace(cfg, seeds=(args.seed,))
    if args.precision is not None:
        from dataclasses import replace as rep
        cfg = rep(cfg, train=rep(cfg.train, precision=args.precision))
    return cfg


def cmd_gen_data(args) -> int:
    from .data import save_annotations
    from .harness import load_splits
    from .tensorio import write_split_features
    cfg = _load_experiment(args)
    if cfg.synthetic is None:
        print("gen-data requires a synthetic data config", file=sys.stderr)
        return 2
    seed = cfg.seeds[0]
    splits = load_splits(cfg, seed)
    os.makedirs(args.out, exist_ok=True)
    feat_dir = os.path.join(args.out, "features")
    for name, split in splits.items():
        save_annotations(split, os.path.join(args.out, f"{name}.json"))
        write_split_features(split, feat_dir)
        if not args.quiet:
            print(f"wrote {name}: {len(split)} videos")
    return 0


def cmd_train(args) -> int:
    from .harness import run_cell
    from dataclasses import replace
    cfg = _load_experiment(args)
    cfg = replace(cfg, save_checkpoints=True)
    os.makedirs(args.out, exist_ok=True)
    cell = run_cell(cfg, args.method, cfg.seeds[0], out_dir=args.out,
                    quiet=args.quiet, with_heatmap=False)
    from .training import write_trace
    if cell["trace"]:
        write_trace(cell["trace"], os.path.join(args.out, "trace.csv"))
    with open(os.path.join(args.out, "cell.json"), "w") as fh:
        json.dump({k: v for k, v in cell.items() if k != "trace"}, fh, sort_keys=True, indent=1)
    if not args.quiet:
        for rec in cell["records"]:
            print(rec)
    return 0 if cell["status"] == "ok" else 1


def _load_eval_split(args):
    from .data import load_annotations
    from .tensorio import attach_features
    split = load_annotations(args.annotations, args.format)
    if args.features:
        attach_features(split, args.features)
    return split


def cmd_eval(args, rho=None) -> int:
    from .evaluation import evaluate, ood_transform, predict_split, save_predictions_csv
    from .training import load_checkpoint
    model, cfg, _ = load_checkpoint(args.checkpoint)
    split = _load_eval_split(args)
    if rho is not None:
        seed = args.seed if args.seed is not None else 0
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x00D]))
        split = ood_transform(split, rho, rng)
    preds, gts, durs, scores = predict_split(model, split, cfg, with_scores=True)
    rec = evaluate(preds, gts, split_tag="iid" if rho is None else "ood")
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "metrics.json"), "w") as fh:
        json.dump(rec.to_json(), fh, sort_keys=True, indent=1)
    query_ids = [f"{s.video_id}#{k}" for s in split.samples
                 for k, _ in enumerate(s.annotations)]
    save_predictions_csv(os.path.join(args.out, "predictions.csv"), query_ids, preds, scores)
    if not args.quiet:
        print(json.dumps(rec.to_json(), sort_keys=True))
    return 0


def cmd_analyze_bias(args) -> int:
    from .data import load_annotations
    from .evaluation import bias_heatmap, save_heatmap_csv, save_heatmap_png
    split = load_annotations(args.annotations, args.format)
    counts = bias_heatmap(split, args.clips)
    os.makedirs(args.out, exist_ok=True)
    save_heatmap_csv(counts, os.path.join(args.out, "heatmap.csv"))
    save_heatmap_png(counts, os.path.join(args.out, "heatmap.png"))
    if not args.quiet:
        print(f"{int(counts.sum())} annotations binned; "
              f"peak cell {np.unravel_index(np.argmax(counts), counts.shape)}")
    return 0


def cmd_report(args) -> int:
    from .harness import run_experiment
    cfg = _load_experiment(args)
    report = run_experiment(cfg, out_dir=args.out, quiet=args.quiet)
    if not args.quiet:
        from .harness import format_summary
        print(format_summary(report))
    return {"ok": 0, "partial": 1, "failed": 1}[report.status]


def cmd_grad_check(args) -> int:
    from .data import BiasSpec, GenerateConfig, generate_dataset
    from .training import TrainConfig, probe_grad_check
    tc = TrainConfig(d=16, num_clips=4, feature_dim=8, word_dim=16, batch_size=8,
                     head=args.head, mode=args.mode, precision="double",
                     seed=args.seed if args.seed is not None else 0)
    gen = GenerateConfig(bias=BiasSpec.head_biased(), n_train=16, n_val=0, n_test=1,
                         num_clips=4, feature_dim=8)
    splits = generate_dataset(gen, tc.seed)
    report = probe_grad_check(tc, splits)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "grad_check.json"), "w") as fh:
        json.dump({"groups": report.groups, "max_rel_err": report.max_rel_err},
                  fh, sort_keys=True, indent=1)
    if not args.quiet:
        print(report.format())
        print(f"max relative error: {report.max_rel_err:.3e}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gen-data":
            return cmd_gen_data(args)
        if args.command == "train":
            return cmd_train(args)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "ood-eval":
            return cmd_eval(args, rho=args.rho)
        if args.command == "analyze-bias":
            return cmd_analyze_bias(args)
        if args.command == "report":
            return cmd_report(args)
        if args.command == "grad-check":
            return cmd_grad_check(args)
    except (ValueError, FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
