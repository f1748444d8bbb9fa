"""Command-line entry point.

Subcommands: synth, pretrain, finetune, eval-retrieval, eval-recognition,
reconstruct, grad-check. Every run archives its full configuration; exit
codes: 0 success, 2 validation problem, 3 violated --require threshold or
gradient tolerance.
"""

from __future__ import annotations

import argparse
import os
import re
import sys
import time
from pathlib import Path

from .config import RunConfig, config_help_lines

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_THRESHOLD = 3

RUN_ROOT_ENV = "PVLM_RUN_ROOT"


def _config_epilog() -> str:
    return ("config keys (set via --config FILE and/or repeated "
            "--set key=value):\n" + "\n".join(config_help_lines()))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pvlm",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=_config_epilog())
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--out", help="run directory (default: "
                       f"$({RUN_ROOT_ENV} or ./runs)/<timestamp>-seed<seed>)")

    p = sub.add_parser("synth", help="generate a synthetic product dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-products", type=int, default=64)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--bundled", action="store_true",
                   help="use the fixed 64-product spec regardless of flags")

    p = sub.add_parser("pretrain", help="run the three-objective pre-training loop",
                       formatter_class=argparse.RawDescriptionHelpFormatter,
                       epilog=_config_epilog())
    add_config_args(p)
    p.add_argument("--data", help="dataset directory (overrides config data_dir)")
    p.add_argument("--init-weights", help="warm-start checkpoint; unmatched "
                   "entries are reported, not fatal")
    p.add_argument("--log-every", type=int, default=50)

    p = sub.add_parser("finetune", help="train a category head on [CLS]",
                       formatter_class=argparse.RawDescriptionHelpFormatter,
                       epilog=_config_epilog())
    add_config_args(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--granularity", choices=("main", "sub"), default="main")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--frozen-encoder", action="store_true")

    for name, help_text in (("eval-retrieval", "zero-shot candidate ranking"),
                            ("eval-recognition", "category metrics with a head")):
        p = sub.add_parser(name, help=help_text)
        add_config_args(p)
        p.add_argument("--data")
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--require", action="append", default=[],
                       metavar="METRIC>=VALUE",
                       help="fail (exit 3) unless metric meets the bound")
        if name == "eval-retrieval":
            p.add_argument("--direction", choices=("TIR", "ITR", "both"),
                           default="both")
            p.add_argument("--n-neg", type=int, default=100)
            p.add_argument("--limit", type=int, help="cap candidate sets")
        else:
            p.add_argument("--granularity", choices=("main", "sub"),
                           default="main")
            p.add_argument("--head-checkpoint", required=True)

    p = sub.add_parser("reconstruct", help="dump masked/recon/gt triptychs")
    add_config_args(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ratio", type=float)
    p.add_argument("--alpha", type=int)
    p.add_argument("--limit", type=int)

    p = sub.add_parser("grad-check", help="finite-difference check of every "
                       "primitive and loss head")
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)

    return parser


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for item in args.set:
        if "=" not in item:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        cfg = cfg.with_override(key.strip(), value.strip())
    if getattr(args, "data", None):
        cfg = cfg.with_override("data_dir", args.data)
    return cfg


def _run_dir(args, cfg: RunConfig) -> Path:
    if args.out:
        return Path(args.out)
    root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
    stamp = time.strftime("%Y%m%d-%H%M%S")
    return root / f"{stamp}-seed{cfg.seed}"


def _dataset(cfg: RunConfig):
    from .data import MANIFEST_NAME, load_manifest
    if not cfg.data_dir:
        raise ValueError("no dataset: set data_dir in the config or pass --data")
    return load_manifest(Path(cfg.data_dir) / MANIFEST_NAME)


def _load_model(cfg: RunConfig, checkpoint_path, run_dir_hint=None):
    from .checkpoint import load_checkpoint, load_into
    from .model import PretrainModel
    from .text import Vocab
    _, header = load_checkpoint(checkpoint_path)
    if "config" in header:
        cfg = RunConfig.from_dict(header["config"])
    model = PretrainModel.create(cfg, header["vocab_size"])
    load_into(model, checkpoint_path, strict=True)
    vocab_path = Path(checkpoint_path).parent / "vocab.txt"
    if run_dir_hint and not vocab_path.exists():
        vocab_path = Path(run_dir_hint) / "vocab.txt"
    vocab = Vocab.load(vocab_path)
    return model, vocab, cfg


_REQUIRE_RE = re.compile(r"^\s*([a-zA-Z0-9_@]+)\s*>=\s*([-+0-9.eE]+)\s*$")


def check_requirements(requires, metrics: dict) -> list[str]:
    """Evaluate --require bounds against a metric dict; returns violations."""
    problems = []
    for spec in requires:
        m = _REQUIRE_RE.match(spec)
        if not m:
            raise ValueError(f"--require expects METRIC>=VALUE, got {spec!r}")
        name, bound = m.group(1), float(m.group(2))
        if name not in metrics:
            raise ValueError(f"--require: unknown metric {name!r} "
                             f"(have: {', '.join(sorted(metrics))})")
        if metrics[name] < bound:
            problems.append(f"{name} = {metrics[name]:.4f} < required {bound}")
    return problems


def cmd_synth(args) -> int:
    from .data import bundled_spec, generate_synthetic
    spec = bundled_spec() if args.bundled else None
    ds = generate_synthetic(args.out, args.n_products, args.image_size,
                            spec=spec, seed=args.seed)
    print(f"wrote {len(ds)} products ({len(ds.pairs())} image-text pairs), "
          f"{ds.n_main} main / {ds.n_sub} sub categories -> {args.out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from .training import pretrain
    cfg = _load_config(args)
    dataset = _dataset(cfg)
    run_dir = _run_dir(args, cfg)
    info = pretrain(cfg, dataset, run_dir, init_weights=args.init_weights,
                    log_every=args.log_every)
    print(f"done: {info['checkpoint']} (metrics: {info['metrics_csv']})")
    return EXIT_OK


def cmd_finetune(args) -> int:
    from .checkpoint import save_checkpoint
    from .training import category_predictions, finetune_category
    from .evaluation import category_metrics
    cfg = _load_config(args)
    model, vocab, cfg = _load_model(cfg, args.checkpoint)
    if getattr(args, "data", None):
        cfg = cfg.with_override("data_dir", args.data)
    dataset = _dataset(cfg)
    run_dir = _run_dir(args, cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    head = finetune_category(model, dataset, vocab, cfg, args.granularity,
                             steps=args.steps,
                             frozen_encoder=args.frozen_encoder)
    preds, labels = category_predictions(model, head, dataset, vocab, cfg,
                                         args.granularity)
    n_classes = dataset.n_main if args.granularity == "main" else dataset.n_sub
    report = category_metrics(preds, labels, n_classes)
    params = {f"head_{args.granularity}.{k}": p
              for k, p in head.named_parameters()}
    params.update(dict(model.named_parameters()))
    out = run_dir / f"finetuned_{args.granularity}.ckpt"
    save_checkpoint(out, params, {"config": cfg.to_dict(),
                                  "vocab_size": len(vocab),
                                  "granularity": args.granularity,
                                  "n_classes": n_classes})
    print(f"train accuracy {report.accuracy:.4f}, macro-F {report.macro_f:.4f}, "
          f"sum {report.sum_c:.2f} -> {out}")
    return EXIT_OK


def cmd_eval_retrieval(args) -> int:
    from .evaluation import evaluate_retrieval
    cfg = _load_config(args)
    model, vocab, cfg = _load_model(cfg, args.checkpoint)
    if getattr(args, "data", None):
        cfg = cfg.with_override("data_dir", args.data)
    dataset = _dataset(cfg)
    run_dir = _run_dir(args, cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    directions = ("TIR", "ITR") if args.direction == "both" else (args.direction,)
    metrics = {}
    summary = []
    for d in directions:
        rep = evaluate_retrieval(model, dataset, vocab, cfg, d,
                                 n_neg=args.n_neg, limit=args.limit)
        (run_dir / f"retrieval_{d}.csv").write_text(rep.as_csv(), encoding="utf-8")
        line = (f"{d}: R@1 {rep.r1:.4f} R@5 {rep.r5:.4f} R@10 {rep.r10:.4f} "
                f"sum {rep.sum_r:.2f} over {rep.n_sets} sets")
        summary.append(line)
        print(line)
        metrics.update({f"r1@{d}": rep.r1, f"r5@{d}": rep.r5,
                        f"r10@{d}": rep.r10, f"sumr@{d}": rep.sum_r})
    (run_dir / "retrieval_summary.txt").write_text(
        "\n".join(summary) + "\n", encoding="utf-8")
    problems = check_requirements(args.require, metrics)
    for p in problems:
        print(f"requirement violated: {p}", file=sys.stderr)
    return EXIT_THRESHOLD if problems else EXIT_OK


def cmd_eval_recognition(args) -> int:
    from .checkpoint import load_checkpoint
    from .evaluation import category_metrics
    from .heads import CategoryHead
    from .seeding import derive_rng
    from .training import category_predictions
    cfg = _load_config(args)
    model, vocab, cfg = _load_model(cfg, args.checkpoint)
    if getattr(args, "data", None):
        cfg = cfg.with_override("data_dir", args.data)
    dataset = _dataset(cfg)
    run_dir = _run_dir(args, cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    head_params, head_header = load_checkpoint(args.head_checkpoint)
    n_classes = head_header["n_classes"]
    head = CategoryHead(cfg.stage_dims[-1], n_classes, derive_rng(cfg.seed, "head"))
    prefix = f"head_{args.granularity}."
    for k, p in head.named_parameters():
        p.data = head_params[prefix + k].astype(p.data.dtype)
    preds, labels = category_predictions(model, head, dataset, vocab, cfg,
                                         args.granularity)
    rep = category_metrics(preds, labels, n_classes)
    (run_dir / f"recognition_{args.granularity}.csv").write_text(
        rep.as_csv(), encoding="utf-8")
    line = (f"{args.granularity}: accuracy {rep.accuracy:.4f} "
            f"macro-F {rep.macro_f:.4f} sum {rep.sum_c:.2f}")
    (run_dir / "recognition_summary.txt").write_text(line + "\n", encoding="utf-8")
    print(line)
    problems = check_requirements(args.require,
                                  {"accuracy": rep.accuracy,
                                   "macro_f": rep.macro_f, "sum_c": rep.sum_c})
    for p in problems:
        print(f"requirement violated: {p}", file=sys.stderr)
    return EXIT_THRESHOLD if problems else EXIT_OK


def cmd_reconstruct(args) -> int:
    from .evaluation import mig_dump
    cfg = _load_config(args)
    model, vocab, cfg = _load_model(cfg, args.checkpoint)
    if getattr(args, "data", None):
        cfg = cfg.with_override("data_dir", args.data)
    dataset = _dataset(cfg)
    run_dir = _run_dir(args, cfg)
    csv_path = mig_dump(model, dataset, vocab, cfg, run_dir,
                        ratio=args.ratio, alpha=args.alpha, limit=args.limit)
    print(f"wrote triptychs and {csv_path}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .gradcheck import TOLERANCE, run_suite
    tolerance = TOLERANCE[args.dtype]
    results = run_suite(args.dtype, instances=args.instances, seed=args.seed)
    width = max(len(n) for n in results)
    failed = []
    for name, err in results.items():
        status = "ok" if err <= tolerance else "FAIL"
        print(f"{name:<{width}}  max rel err {err:.3e}  {status}")
        if err > tolerance:
            failed.append(name)
    print(f"{len(results) - len(failed)}/{len(results)} checks within "
          f"{tolerance:g} ({args.dtype})")
    return EXIT_THRESHOLD if failed else EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval-retrieval": cmd_eval_retrieval,
    "eval-recognition": cmd_eval_recognition,
    "reconstruct": cmd_reconstruct,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ValueError, KeyError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
