"""Run configuration: one JSON document per run.

Every field has a default, so a config file only lists what it changes.
Epoch counts are in passes over the training set; steps are derived as
round(epochs * N / batch). Clip norm 1 follows the usual DPSGD setup; the
batch size of 1024 common at full scale is scaled down to 128 here.

Privacy: set ``epsilon`` (or a ``preset``) to calibrate the noise multiplier
to the budget before training. With ``epsilon`` null the configured
``noise_multiplier`` is used as given and the spend is only reported.
``delta`` null means 1 / (10 N).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .distill import KdConfig
from .dpsgd import DpSgdConfig
from .model import ModelDims
from .pruning import ImpConfig

PIPELINES = ("finetune", "dpkd", "dpimp-structured", "dpimp-unstructured")
INIT_STRATEGIES = ("random", "zeroshot-pt", "zeroshot-ft")
PRESETS = {"eps4.0": 4.0, "eps4.25": 4.25}
LR_GRID = (0.0001, 0.0005, 0.0008, 0.001, 0.002)


@dataclass
class SyntheticSpec:
    classes: int = 3
    n: int = 4096
    d_in: int = 32
    seed: int = 0
    separation: float = 4.0
    modes: int = 4
    task_seed: int | None = None
    relabel_seed: int | None = None


@dataclass
class DataSpec:
    """Either a CSV path or a synthetic recipe."""

    csv: str | None = None
    synthetic: SyntheticSpec | None = None

    def __post_init__(self):
        if (self.csv is None) == (self.synthetic is None):
            raise ValueError("a data spec needs exactly one of csv or synthetic")


@dataclass
class PretrainSpec:
    """Non-private SGD on public data, producing the starting checkpoint."""

    data: DataSpec
    epochs: float = 20.0
    learning_rate: float = 0.5
    batch_size: int = 64


@dataclass
class PipelineConfig:
    pipeline: str = "finetune"
    name: str = "run"
    seed: int = 0
    dims: ModelDims = field(default_factory=ModelDims)
    blocks: int = 4
    student_blocks: int = 2
    train: DataSpec = field(default_factory=lambda: DataSpec(synthetic=SyntheticSpec()))
    test: DataSpec | None = None
    checkpoint: str | None = None
    pretrain: PretrainSpec | None = None
    init: str = "random"
    layer_rule: str = "even"
    dp: DpSgdConfig = field(default_factory=lambda: DpSgdConfig(1.0, 1.0, 0.5, 128))
    kd: KdConfig = field(default_factory=KdConfig)
    imp: ImpConfig | None = None
    epsilon: float | None = None
    preset: str | None = None
    delta: float | None = None
    epochs: float = 30.0
    teacher_epochs: float = 10.0
    student_epochs: float = 20.0
    teacher_share: float | None = None
    sigma_mode: str = "shared"

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise ValueError(f"pipeline must be one of {PIPELINES}, got {self.pipeline!r}")
        if self.init not in INIT_STRATEGIES:
            raise ValueError(f"init must be one of {INIT_STRATEGIES}, got {self.init!r}")
        if self.preset is not None:
            if self.preset not in PRESETS:
                raise ValueError(f"unknown preset {self.preset!r}; known: {sorted(PRESETS)}")
            if self.epsilon is not None and self.epsilon != PRESETS[self.preset]:
                raise ValueError("epsilon and preset disagree")
            self.epsilon = PRESETS[self.preset]
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.delta is not None and not 0 < self.delta < 1:
            raise ValueError("delta must be in (0, 1)")
        if min(self.epochs, self.teacher_epochs, self.student_epochs) < 0:
            raise ValueError("epochs must be >= 0")
        if self.blocks < 0 or self.student_blocks < 0:
            raise ValueError("block counts must be >= 0")
        if self.pipeline.startswith("dpimp") and self.imp is None:
            raise ValueError(f"{self.pipeline} needs an imp section")
        if self.pipeline == "dpimp-structured" and self.imp.layers_to_drop is None:
            raise ValueError("dpimp-structured needs imp.layers_to_drop")
        if self.pipeline == "dpimp-unstructured" and self.imp.sparsity is None:
            raise ValueError("dpimp-unstructured needs imp.sparsity")
        if self.sigma_mode not in ("shared", "per-phase"):
            raise ValueError("sigma_mode must be 'shared' or 'per-phase'")
        if self.teacher_share is not None and not 0 <= self.teacher_share <= 1:
            raise ValueError("teacher_share must be in [0, 1]")

    @property
    def share(self) -> float:
        """Teacher's fraction of the budget; by default its fraction of the epochs."""
        if self.teacher_share is not None:
            return self.teacher_share
        total = self.teacher_epochs + self.student_epochs
        return self.teacher_epochs / total if total else 0.5

    # --- serialisation ------------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        return _build(cls, doc)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(doc)

    def replace(self, **changes) -> "PipelineConfig":
        return _build(PipelineConfig, {**self.to_dict(), **changes})


_NESTED = {
    "dims": ModelDims, "train": "DataSpec", "test": "DataSpec", "pretrain": PretrainSpec,
    "dp": DpSgdConfig, "kd": KdConfig, "imp": ImpConfig, "synthetic": SyntheticSpec, "data": "DataSpec",
}


def _build(cls, doc: Any):
    if dataclasses.is_dataclass(doc):
        return doc
    if not isinstance(doc, dict):
        raise ValueError(f"{cls.__name__}: expected an object, got {type(doc).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise ValueError(f"{cls.__name__}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for k, v in doc.items():
        sub = _NESTED.get(k)
        if sub == "DataSpec":
            sub = DataSpec
        if sub is not None and v is not None:
            v = _build(sub, v)
        kwargs[k] = v
    if "clip_norm" in kwargs and kwargs["clip_norm"] in ("inf", "Infinity"):
        kwargs["clip_norm"] = float("inf")
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ValueError(f"{cls.__name__}: {exc}") from None
