"""Command-line entry point: ``dpcompress <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import accountant as acc
from .config import LR_GRID, PRESETS, PipelineConfig
from .data import evaluate, load_csv, make_synthetic, write_csv
from .model import LayeredClassifier

TRAINING = ("finetune", "dpkd", "dpimp-structured", "dpimp-unstructured")

# flag -> (section, key); section None means top level
_OVERRIDES = {
    "name": (None, "name"), "epsilon": (None, "epsilon"), "preset": (None, "preset"), "delta": (None, "delta"),
    "epochs": (None, "epochs"), "teacher_epochs": (None, "teacher_epochs"),
    "student_epochs": (None, "student_epochs"), "init": (None, "init"), "blocks": (None, "blocks"),
    "student_blocks": (None, "student_blocks"), "checkpoint": (None, "checkpoint"),
    "layer_rule": (None, "layer_rule"), "sigma_mode": (None, "sigma_mode"), "teacher_share": (None, "teacher_share"),
    "lr": ("dp", "learning_rate"), "clip_norm": ("dp", "clip_norm"), "noise_multiplier": ("dp", "noise_multiplier"),
    "batch_size": ("dp", "expected_batch_size"), "sampling": ("dp", "sampling"),
    "lam": ("kd", "lam"), "temperature": ("kd", "temperature"),
    "alpha": ("imp", "alpha"), "sparsity": ("imp", "sparsity"), "layers_to_drop": ("imp", "layers_to_drop"),
    "iters_per_round": ("imp", "iters_per_round"), "final_iters": ("imp", "final_iters"),
}


def _add_training_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="JSON config; flags below override its fields")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", type=Path, default=Path("runs"), help="output root (default: runs)")
    p.add_argument("--name")
    g = p.add_argument_group("privacy")
    g.add_argument("--epsilon", type=float)
    g.add_argument("--preset", choices=sorted(PRESETS))
    g.add_argument("--delta", type=float, help="default 1/(10N)")
    g.add_argument("--sigma-mode", choices=("shared", "per-phase"))
    g.add_argument("--teacher-share", type=float)
    g = p.add_argument_group("optimiser")
    g.add_argument("--lr", type=float)
    g.add_argument("--clip-norm", type=float)
    g.add_argument("--noise-multiplier", type=float)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--sampling", choices=("poisson", "shuffle"))
    g.add_argument("--epochs", type=float)
    g.add_argument("--teacher-epochs", type=float)
    g.add_argument("--student-epochs", type=float)
    g = p.add_argument_group("model")
    g.add_argument("--checkpoint", help="starting model")
    g.add_argument("--blocks", type=int)
    g.add_argument("--student-blocks", type=int)
    g.add_argument("--init", choices=("random", "zeroshot-pt", "zeroshot-ft"))
    g.add_argument("--layer-rule", choices=("even", "first", "spread"))
    g.add_argument("--lam", type=float)
    g.add_argument("--temperature", type=float)
    g.add_argument("--alpha", type=float)
    g.add_argument("--sparsity", type=float)
    g.add_argument("--layers-to-drop", type=int)
    g.add_argument("--iters-per-round", type=int)
    g.add_argument("--final-iters", type=int)
    g = p.add_argument_group("data")
    g.add_argument("--train-csv")
    g.add_argument("--test-csv")


def build_config(args: argparse.Namespace) -> PipelineConfig:
    doc = PipelineConfig.load(args.config).to_dict() if args.config else {}
    doc["pipeline"] = args.command
    doc["seed"] = args.seed
    for flag, (section, key) in _OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        if section is None:
            doc[key] = value
        else:
            sub = doc.get(section) or {}
            if section == "imp" and key in ("sparsity", "layers_to_drop"):
                sub.pop("sparsity", None)
                sub.pop("layers_to_drop", None)
            sub[key] = value
            doc[section] = sub
    if args.preset is not None and args.epsilon is None:
        doc["epsilon"] = None
    if args.train_csv:
        doc["train"] = {"csv": args.train_csv}
    if args.test_csv:
        doc["test"] = {"csv": args.test_csv}
    if "name" not in doc and not args.name:
        doc["name"] = args.command
    cfg = PipelineConfig.from_dict(doc)
    # the run seed drives every stream
    return cfg.replace(dp={**cfg.to_dict()["dp"], "seed": args.seed})


def cmd_train(args) -> int:
    from .runner import run
    cfg = build_config(args)
    out = run(cfg, args.out)
    print((out / "metrics.json").read_text(), end="")
    return 0


def cmd_sweep(args) -> int:
    from .runner import collect, format_table, run
    base = PipelineConfig.load(args.config)
    base = base.replace(seed=args.seed, dp={**base.to_dict()["dp"], "seed": args.seed})
    dirs = []
    for lr in args.grid or LR_GRID:
        cfg = base.replace(name=f"{base.name}-lr{lr:g}", dp={**base.to_dict()["dp"], "learning_rate": lr})
        dirs.append(run(cfg, args.out))
    rows = collect(dirs)
    print(format_table(rows))
    best = max(rows, key=lambda r: r["eval_accuracy"])
    print(f"best: {best['run']} ({best['eval_accuracy']:.4f})")
    return 0


def cmd_accountant(args) -> int:
    q, steps = args.q, args.steps
    if args.n is not None:
        if args.batch_size is None or args.epochs is None:
            raise ValueError("--n needs --batch-size and --epochs")
        q = min(1.0, args.batch_size / args.n)
        steps = int(round(args.epochs * args.n / args.batch_size))
    if q is None or steps is None:
        raise ValueError("give --q and --steps, or --n, --batch-size and --epochs")
    delta = args.delta if args.delta is not None else (acc.default_delta(args.n) if args.n else None)
    if delta is None:
        raise ValueError("--delta is required without --n")
    out = {"q": q, "steps": steps, "delta": delta, "accountant": acc.ACCOUNTANT_NAME}
    if args.target_epsilon is not None:
        out["epsilon"] = args.target_epsilon
        out["sigma"] = acc.calibrate_sigma(acc.PrivacyBudget(args.target_epsilon, delta), q, steps)
    else:
        if args.sigma is None:
            raise ValueError("give --sigma (epsilon query) or --target-epsilon (sigma query)")
        state = acc.AccountantState()
        state.charge(q, args.sigma, steps)
        eps, order = state.to_epsilon(delta)
        out.update(sigma=args.sigma, epsilon=eps, order=order)
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


def cmd_synth(args) -> int:
    ds = make_synthetic(args.classes, args.n, args.d_in, args.seed, args.separation, args.modes,
                        args.task_seed, args.relabel_seed)
    write_csv(ds, args.out)
    print(f"wrote {ds.n} rows x {ds.d_in} features, {ds.classes} classes to {args.out}")
    return 0


def cmd_eval(args) -> int:
    model = LayeredClassifier.load(args.checkpoint)
    ds = load_csv(args.data, args.classes if args.classes is not None else model.dims.classes)
    print(json.dumps({"accuracy": evaluate(model, ds), "n": ds.n, "checkpoint": str(args.checkpoint)},
                     indent=2, sort_keys=True))
    return 0


def cmd_compare(args) -> int:
    from .runner import collect, format_table
    dirs = []
    for d in args.runs:
        d = Path(d)
        dirs += sorted(p.parent for p in d.glob("*/metrics.json")) if not (d / "metrics.json").exists() else [d]
    if not dirs:
        raise ValueError("no metrics.json found under the given paths")
    rows = collect(dirs)
    print(json.dumps(rows, indent=2, sort_keys=True) if args.json else format_table(rows))
    return 0


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dpcompress", description="Differentially private model compression")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in TRAINING:
        p = sub.add_parser(name, help=f"run the {name} pipeline")
        _add_training_flags(p)
        p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="run a config over the learning-rate grid")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", type=Path, default=Path("runs"))
    p.add_argument("--grid", type=float, nargs="+", help=f"default {list(LR_GRID)}")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("accountant", help="epsilon for a schedule, or sigma for a target")
    p.add_argument("--q", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--n", type=int, help="dataset size (with --batch-size and --epochs)")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--target-epsilon", type=float)
    p.add_argument("--delta", type=float)
    p.set_defaults(func=cmd_accountant)

    p = sub.add_parser("synth", help="write a synthetic dataset as CSV")
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--n", type=int, default=4096)
    p.add_argument("--d-in", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--separation", type=float, default=4.0)
    p.add_argument("--modes", type=int, default=4)
    p.add_argument("--task-seed", type=int)
    p.add_argument("--relabel-seed", type=int)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a CSV dataset")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--classes", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="tabulate metrics from run directories")
    p.add_argument("runs", nargs="+", help="run directories or roots containing them")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_compare)
    return ap


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError, KeyError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
