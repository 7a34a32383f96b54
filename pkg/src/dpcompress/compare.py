"""Side-by-side comparison of the compression pipelines on synthetic data.

Per seed, a 4-block model is pre-trained without privacy on a public sample
whose cluster-to-class assignment differs from the private task. Five arms
then run under the same total budget:

    finetuned-teacher        DPSGD fine-tune of the pre-trained model
    dpimp-unstructured       50% unstructured iterative pruning of it
    dpkd-zeroshot            distillation into 2 blocks copied from it
    dpkd-random              distillation into a random 2-block student
    finetune-random-student  DPSGD on a random 2-block student directly

The private training budget is short (12 epochs by default) on purpose:
with long runs every arm converges to the same accuracy on this small task
and the comparison only measures seed noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import DataSpec, PipelineConfig, PretrainSpec, SyntheticSpec
from .distill import KdConfig
from .dpsgd import DpSgdConfig
from .model import ModelDims
from .pruning import ImpConfig
from .runner import collect, run, starting_model

ARMS = ("finetuned-teacher", "dpimp-unstructured", "dpkd-zeroshot", "dpkd-random", "finetune-random-student")


@dataclass(frozen=True)
class ComparisonSetup:
    classes: int = 3
    n: int = 4096
    d_in: int = 32
    hidden: int = 32
    blocks: int = 4
    student_blocks: int = 2
    separation: float = 4.0
    modes: int = 8
    preset: str = "eps4.0"
    epochs: float = 12.0
    teacher_fraction: float = 1 / 3
    learning_rate: float = 0.5
    batch_size: int = 128
    sparsity: float = 50.0
    alpha: float = 10.0
    round_fraction: float = 0.2
    lam: float = 0.5
    temperature: float = 2.0
    pretrain_epochs: float = 20.0

    def data(self, seed: int, split: str) -> DataSpec:
        offset = {"train": 1000, "test": 2000, "public": 3000}[split]
        return DataSpec(synthetic=SyntheticSpec(
            self.classes, self.n, self.d_in, offset + seed, self.separation, self.modes, task_seed=100 + seed,
            relabel_seed=100 + seed if split == "public" else None))

    def base(self, seed: int) -> PipelineConfig:
        return PipelineConfig(
            seed=seed, dims=ModelDims(self.d_in, self.hidden, self.classes), blocks=self.blocks,
            student_blocks=self.student_blocks, train=self.data(seed, "train"), test=self.data(seed, "test"),
            dp=DpSgdConfig(1.0, 1.0, self.learning_rate, self.batch_size, seed),
            kd=KdConfig(self.lam, self.temperature), preset=self.preset, epochs=self.epochs,
            teacher_epochs=self.epochs * self.teacher_fraction,
            student_epochs=self.epochs * (1 - self.teacher_fraction))

    def imp(self) -> ImpConfig:
        steps = int(round(self.epochs * self.n / self.batch_size))
        rounds = math.ceil(round(self.sparsity / self.alpha, 9))
        per_round = int(steps * self.round_fraction / rounds)
        return ImpConfig(self.alpha, per_round, steps - rounds * per_round, sparsity=self.sparsity)


def arm_configs(setup: ComparisonSetup, seed: int, checkpoint: str) -> dict[str, PipelineConfig]:
    b = setup.base(seed)
    return {
        "finetuned-teacher": b.replace(pipeline="finetune", name=f"finetuned-teacher-s{seed}", checkpoint=checkpoint),
        "dpimp-unstructured": b.replace(pipeline="dpimp-unstructured", name=f"dpimp-unstructured-s{seed}",
                                        checkpoint=checkpoint, imp=setup.imp()),
        "dpkd-zeroshot": b.replace(pipeline="dpkd", name=f"dpkd-zeroshot-s{seed}", checkpoint=checkpoint,
                                   init="zeroshot-pt"),
        "dpkd-random": b.replace(pipeline="dpkd", name=f"dpkd-random-s{seed}", checkpoint=checkpoint, init="random"),
        "finetune-random-student": b.replace(pipeline="finetune", name=f"finetune-random-student-s{seed}",
                                             blocks=setup.student_blocks),
    }


def pretrain(setup: ComparisonSetup, seed: int, out_root: Path) -> Path:
    cfg = setup.base(seed).replace(pretrain=PretrainSpec(setup.data(seed, "public"), setup.pretrain_epochs,
                                                         setup.learning_rate, 64))
    path = out_root / f"pretrained-s{seed}.json"
    starting_model(cfg).save(path)
    return path


def run_comparison(setup: ComparisonSetup, seeds, out_root: str | Path, arms=ARMS) -> list[dict]:
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in seeds:
        ckpt = pretrain(setup, seed, out_root)
        cfgs = arm_configs(setup, seed, str(ckpt))
        for arm in arms:
            row = collect([run(cfgs[arm], out_root)])[0]
            row["arm"] = arm
            rows.append(row)
    return rows


def medians(rows: list[dict]) -> dict[str, float]:
    arms = sorted({r["arm"] for r in rows}, key=lambda a: ARMS.index(a) if a in ARMS else len(ARMS))
    return {a: float(np.median([r["eval_accuracy"] for r in rows if r["arm"] == a])) for a in arms}


def binomial_noise(accuracy: float, n_test: int, z: float = 2.0) -> float:
    """z standard errors of an accuracy measured on ``n_test`` rows."""
    return z * math.sqrt(accuracy * (1 - accuracy) / n_test)


def summary_table(rows: list[dict]) -> str:
    med = medians(rows)
    seeds = sorted({r["seed"] for r in rows})
    head = ["arm", "median"] + [f"s{s}" for s in seeds]
    lines = [head]
    for arm, m in med.items():
        per = {r["seed"]: r["eval_accuracy"] for r in rows if r["arm"] == arm}
        lines.append([arm, f"{m:.4f}"] + [f"{per[s]:.4f}" if s in per else "-" for s in seeds])
    widths = [max(len(l[i]) for l in lines) for i in range(len(head))]
    out = ["  ".join(c.ljust(w) for c, w in zip(l, widths)).rstrip() for l in lines]
    out.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(out)
