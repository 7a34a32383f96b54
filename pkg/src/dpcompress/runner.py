"""Execute a PipelineConfig and write its artifacts.

Output layout under ``<out>/<name>/``:

    checkpoint.json   final model
    metrics.json      task, pipeline, init_strategy, sparsity, block_count,
                      eval_accuracy, steps, seed (plus a few extras)
    privacy.json      accountant report
    config.json       the fully resolved config; rerunning it reproduces
                      the other three files byte for byte
"""

from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path

from . import pipelines as P
from .accountant import PrivacyBudget
from .config import DataSpec, PipelineConfig
from .data import Dataset, evaluate, load_csv, make_synthetic
from .dpsgd import DpSgdConfig
from .model import LayeredClassifier, Random, ZeroShotFT, ZeroShotPT, random_model

log = logging.getLogger(__name__)


class BudgetViolationError(RuntimeError):
    pass


def load_data(spec: DataSpec) -> Dataset:
    if spec.csv is not None:
        return load_csv(spec.csv)
    return make_synthetic(**dataclasses.asdict(spec.synthetic))


def starting_model(cfg: PipelineConfig) -> LayeredClassifier:
    """Checkpoint, public pre-training run, or fresh random weights (in that order)."""
    if cfg.checkpoint is not None:
        model = LayeredClassifier.load(cfg.checkpoint)
        if model.dims != cfg.dims:
            raise ValueError(f"checkpoint dims {model.dims} differ from config dims {cfg.dims}")
        return model
    model = random_model(cfg.dims, cfg.blocks, cfg.seed)
    if cfg.pretrain is None:
        return model
    public = load_data(cfg.pretrain.data)
    sgd = DpSgdConfig(float("inf"), 0.0, cfg.pretrain.learning_rate, cfg.pretrain.batch_size, cfg.seed)
    steps = P.steps_for_epochs(cfg.pretrain.epochs, public.n, cfg.pretrain.batch_size)
    return P.finetune(model, public, sgd, steps, phase="pretrain", stream="pretrain", private=False).model


def _init_strategy(cfg: PipelineConfig):
    return {"random": Random(cfg.seed), "zeroshot-pt": ZeroShotPT(), "zeroshot-ft": ZeroShotFT()}[cfg.init]


def execute(cfg: PipelineConfig) -> tuple[P.PipelineResult, dict, dict]:
    """Run the pipeline in memory; returns (result, metrics, privacy report)."""
    train = load_data(cfg.train)
    test = load_data(cfg.test) if cfg.test is not None else None
    for ds in (train, test):
        if ds is not None and (ds.d_in != cfg.dims.d_in or ds.classes != cfg.dims.classes):
            raise ValueError(f"dataset {ds.name} has d_in={ds.d_in}, classes={ds.classes}; "
                             f"config dims are {cfg.dims}")
    delta = cfg.delta if cfg.delta is not None else train.default_delta()
    budget = PrivacyBudget(cfg.epsilon, delta) if cfg.epsilon is not None else None
    dp = cfg.dp
    q = P.sampling_rate(dp, train.n)

    # calibrate before any training so an infeasible budget fails fast
    if cfg.pipeline == "dpkd":
        t_steps = P.steps_for_epochs(cfg.teacher_epochs, train.n, dp.expected_batch_size)
        s_steps = P.steps_for_epochs(cfg.student_epochs, train.n, dp.expected_batch_size)
        alloc = P.dpkd_budget(budget, cfg.share) if budget is not None else None
        if alloc is not None:
            P.dpkd_sigmas(alloc, q, t_steps, s_steps, cfg.sigma_mode)
    else:
        steps = (P.steps_for_epochs(cfg.epochs, train.n, dp.expected_batch_size) if cfg.pipeline == "finetune"
                 else P.dpimp_steps(cfg.imp))
        if budget is not None:
            dp = P.calibrated(dp, budget, train.n, steps)

    start = starting_model(cfg)
    if cfg.pipeline == "finetune":
        result = P.finetune(start, train, dp, steps)
    elif cfg.pipeline == "dpkd":
        result = P.dpkd(start, _init_strategy(cfg), train, cfg.kd, dp, t_steps, s_steps, cfg.student_blocks,
                        alloc, cfg.layer_rule, cfg.sigma_mode)
    elif cfg.pipeline == "dpimp-structured":
        result = P.structured_dpimp(start, cfg.imp, dp, train)
    else:
        result = P.unstructured_dpimp(start, cfg.imp, dp, train)
    result.delta = delta

    privacy = result.privacy()
    privacy["configured_epsilon"] = cfg.epsilon
    if cfg.epsilon is not None and privacy["total_epsilon"] > cfg.epsilon * (1 + 1e-9):
        raise BudgetViolationError(f"spent eps={privacy['total_epsilon']:.6g} exceeds configured {cfg.epsilon:g}")

    model = result.model
    metrics = {
        "task": train.name,
        "pipeline": cfg.pipeline,
        "init_strategy": result.init_strategy if cfg.pipeline == "dpkd" else None,
        "label": result.label,
        "sparsity": model.mask_sparsity(),
        "block_count": model.n_blocks,
        "eval_accuracy": evaluate(model, test if test is not None else train),
        "eval_split": "test" if test is not None else "train",
        "train_accuracy": evaluate(model, train),
        "steps": result.steps,
        "seed": cfg.seed,
        "epsilon": privacy["total_epsilon"],
    }
    return result, metrics, privacy


def _dump(path: Path, doc: dict):
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def run(cfg: PipelineConfig, out_root: str | Path = "runs") -> Path:
    """Execute ``cfg`` and write artifacts to ``out_root/cfg.name``; returns that directory."""
    result, metrics, privacy = execute(cfg)
    out = Path(out_root) / cfg.name
    out.mkdir(parents=True, exist_ok=True)
    result.model.save(out / "checkpoint.json")
    _dump(out / "metrics.json", metrics)
    _dump(out / "privacy.json", privacy)
    (out / "config.json").write_text(cfg.to_json())
    log.info("%s: accuracy %.4f, eps %.4g -> %s", cfg.name, metrics["eval_accuracy"], privacy["total_epsilon"], out)
    return out


def collect(run_dirs) -> list[dict]:
    """metrics.json plus run name for each directory."""
    rows = []
    for d in run_dirs:
        d = Path(d)
        doc = json.loads((d / "metrics.json").read_text())
        doc["run"] = d.name
        rows.append(doc)
    return rows


def format_table(rows: list[dict], columns=("run", "pipeline", "init_strategy", "block_count", "sparsity",
                                            "eval_accuracy", "epsilon", "steps", "seed")) -> str:
    def cell(v):
        if isinstance(v, float):
            return f"{v:.4f}"
        return "-" if v is None else str(v)

    table = [list(columns)] + [[cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(columns))]
    lines = ["  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in table]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
