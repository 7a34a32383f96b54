"""Layered residual classifier used as teacher and student.

    logits = head(LN(block_{B-1}(... block_0(x @ input_proj))))
    block(h) = h + gelu(LN(h) @ (W1 * M1) + b1) @ (W2 * M2) + b2

Blocks map width H to width H, so any subset of them composes. The
normalisation sits inside the residual branch, so a block whose second
projection and bias are zero is an exact identity. Only block weight matrices
are prunable.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .kernels import Factor

CHECKPOINT_FORMAT_VERSION = 1
BLOCK_PARAMS = ("W1", "b1", "W2", "b2")


@dataclass(frozen=True)
class ModelDims:
    d_in: int = 32
    hidden: int = 64
    classes: int = 3

    def __post_init__(self):
        if min(self.d_in, self.hidden, self.classes) < 1:
            raise ValueError(f"dimensions must be positive: {self}")


@dataclass(frozen=True)
class ParamInfo:
    name: str
    shape: tuple[int, ...]
    block: int | None
    prunable: bool


def _block_name(i: int, p: str) -> str:
    return f"blocks.{i}.{p}"


class LayeredClassifier:
    """Input projection, ``B`` residual blocks, linear head.

    Parameters are plain float64 arrays in ``params``; ``masks`` holds a
    boolean array per prunable weight. ``block_origin[i]`` is the index the
    i-th block had in the model it was derived from (for drop bookkeeping).
    """

    def __init__(self, dims: ModelDims, params: dict[str, np.ndarray],
                 masks: dict[str, np.ndarray] | None = None, block_origin: Sequence[int] | None = None):
        self.dims = dims
        self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        n_blocks = len({k.split(".")[1] for k in self.params if k.startswith("blocks.")})
        self.block_origin = list(block_origin) if block_origin is not None else list(range(n_blocks))
        if len(self.block_origin) != n_blocks:
            raise ValueError("block_origin length does not match block count")
        for info in self.registry:
            if info.name not in self.params:
                raise ValueError(f"missing parameter {info.name}")
            if self.params[info.name].shape != info.shape:
                raise ValueError(f"{info.name}: shape {self.params[info.name].shape} != {info.shape}")
        if masks is None:
            masks = {i.name: np.ones(i.shape, dtype=bool) for i in self.registry if i.prunable}
        self.masks = {k: np.array(v, dtype=bool) for k, v in masks.items()}
        if set(self.masks) != {i.name for i in self.registry if i.prunable}:
            raise ValueError("masks must cover exactly the prunable parameters")

    # --- structure ----------------------------------------------------------

    @property
    def n_blocks(self) -> int:
        return len(self.block_origin)

    @property
    def registry(self) -> list[ParamInfo]:
        d, h, c = self.dims.d_in, self.dims.hidden, self.dims.classes
        infos = [ParamInfo("input_proj", (d, h), None, False)]
        for i in range(self.n_blocks):
            infos += [
                ParamInfo(_block_name(i, "W1"), (h, h), i, True),
                ParamInfo(_block_name(i, "b1"), (h,), i, False),
                ParamInfo(_block_name(i, "W2"), (h, h), i, True),
                ParamInfo(_block_name(i, "b2"), (h,), i, False),
            ]
        infos += [ParamInfo("head", (h, c), None, False), ParamInfo("head_b", (c,), None, False)]
        return infos

    def prunable_names(self) -> list[str]:
        return [i.name for i in self.registry if i.prunable]

    def num_params(self) -> int:
        return sum(int(np.prod(i.shape)) for i in self.registry)

    def copy(self) -> "LayeredClassifier":
        return copy.deepcopy(self)

    def block_params(self, i: int) -> dict[str, np.ndarray]:
        return {p: self.params[_block_name(i, p)] for p in BLOCK_PARAMS}

    def drop_block(self, i: int):
        """Remove block ``i``; later blocks shift down one index."""
        if not 0 <= i < self.n_blocks:
            raise IndexError(f"no block {i} in a {self.n_blocks}-block model")
        blocks = [(self.block_params(k), {p: self.masks[_block_name(k, p)] for p in ("W1", "W2")})
                  for k in range(self.n_blocks) if k != i]
        origin = [o for k, o in enumerate(self.block_origin) if k != i]
        for k in range(self.n_blocks):
            for p in BLOCK_PARAMS:
                self.params.pop(_block_name(k, p))
            for p in ("W1", "W2"):
                self.masks.pop(_block_name(k, p))
        for k, (bp, bm) in enumerate(blocks):
            for p in BLOCK_PARAMS:
                self.params[_block_name(k, p)] = bp[p]
            for p in ("W1", "W2"):
                self.masks[_block_name(k, p)] = bm[p]
        self.block_origin = origin

    # --- flat views ---------------------------------------------------------

    def flat_params(self) -> np.ndarray:
        return np.concatenate([self.params[i.name].reshape(-1) for i in self.registry])

    def flat_mask(self) -> np.ndarray:
        """True for trainable coordinates (everything except pruned weights)."""
        parts = []
        for i in self.registry:
            m = self.masks.get(i.name)
            parts.append(np.ones(int(np.prod(i.shape)), dtype=bool) if m is None else m.reshape(-1))
        return np.concatenate(parts)

    def unflatten(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        out, pos = {}, 0
        for i in self.registry:
            n = int(np.prod(i.shape))
            out[i.name] = flat[pos:pos + n].reshape(i.shape)
            pos += n
        if pos != flat.size:
            raise ValueError(f"flat vector has {flat.size} entries, model has {pos}")
        return out

    # --- masks --------------------------------------------------------------

    def apply_mask(self, mask: "dict[str, np.ndarray] | object"):
        """Install ``mask`` and zero the pruned weights."""
        masks = getattr(mask, "masks", mask)
        if set(masks) != set(self.prunable_names()):
            raise ValueError("mask does not cover exactly the prunable parameters")
        for name, m in masks.items():
            m = np.asarray(m, dtype=bool)
            if m.shape != self.params[name].shape:
                raise ValueError(f"mask for {name} has shape {m.shape}, weight has {self.params[name].shape}")
            self.masks[name] = m.copy()
            self.params[name] = np.where(m, self.params[name], 0.0)

    def sparsity(self) -> float:
        """Fraction of prunable weights that are exactly zero."""
        names = self.prunable_names()
        total = sum(self.params[n].size for n in names)
        zeros = sum(int(np.count_nonzero(self.params[n] == 0.0)) for n in names)
        return zeros / total if total else 0.0

    def mask_sparsity(self) -> float:
        names = self.prunable_names()
        total = sum(self.masks[n].size for n in names)
        return sum(int(np.count_nonzero(~self.masks[n])) for n in names) / total if total else 0.0

    # --- forward ------------------------------------------------------------

    def leaves(self, requires_grad: bool = True) -> dict[str, T.Tensor]:
        return {i.name: T.Tensor(self.params[i.name], requires_grad) for i in self.registry}

    def forward(self, x, leaves: dict[str, T.Tensor] | None = None, trace: list | None = None) -> T.Tensor:
        """Logits for each row of ``x``.

        ``trace``, when given, is filled (in registry order) with
        ``(kind, input, output, mask)`` records from which per-example
        gradients can be read after a backward pass.
        """
        x = T.as_tensor(x)
        if x.data.ndim != 2 or x.shape[1] != self.dims.d_in:
            raise ValueError(f"expected input of shape (batch, {self.dims.d_in}), got {x.shape}")
        P = leaves if leaves is not None else self.leaves(False)
        rec = trace.append if trace is not None else (lambda _: None)

        h = T.matmul(x, P["input_proj"])
        rec(("outer", x, h, None))
        for i in range(self.n_blocks):
            m1 = self.masks[_block_name(i, "W1")]
            m2 = self.masks[_block_name(i, "W2")]
            z = T.layernorm(h)
            pre = T.matmul(z, T.mul(P[_block_name(i, "W1")], m1.astype(np.float64)))
            pre_b = T.add(pre, P[_block_name(i, "b1")])
            u = T.gelu(pre_b)
            r = T.matmul(u, T.mul(P[_block_name(i, "W2")], m2.astype(np.float64)))
            r_b = T.add(r, P[_block_name(i, "b2")])
            rec(("outer", z, pre, m1))
            rec(("rows", None, pre_b, None))
            rec(("outer", u, r, m2))
            rec(("rows", None, r_b, None))
            h = T.add(h, r_b)
        zf = T.layernorm(h)
        logits = T.matmul(zf, P["head"])
        logits_b = T.add(logits, P["head_b"])
        rec(("outer", zf, logits, None))
        rec(("rows", None, logits_b, None))
        return logits_b

    def logits(self, x) -> np.ndarray:
        return self.forward(np.asarray(x, dtype=np.float64)).data

    def predict(self, x) -> np.ndarray:
        # argmax picks the lowest class index on ties
        return np.argmax(self.logits(x), axis=1)

    # --- persistence --------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "dims": {"d_in": self.dims.d_in, "hidden": self.dims.hidden, "classes": self.dims.classes},
            "block_count": self.n_blocks,
            "block_origin": list(self.block_origin),
            "params": {i.name: {"shape": list(i.shape), "f64_le_hex": _encode_f64(self.params[i.name])}
                       for i in self.registry},
            "masks": {n: {"shape": list(self.masks[n].shape), "bits_hex": _encode_bits(self.masks[n])}
                      for n in self.prunable_names()},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "LayeredClassifier":
        if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {doc.get('format_version')!r}")
        dims = ModelDims(**doc["dims"])
        params = {k: _decode_f64(v["f64_le_hex"], v["shape"]) for k, v in doc["params"].items()}
        masks = {k: _decode_bits(v["bits_hex"], v["shape"]) for k, v in doc["masks"].items()}
        model = cls(dims, params, masks, doc.get("block_origin"))
        if model.n_blocks != doc["block_count"]:
            raise ValueError("block_count does not match stored blocks")
        return model

    def save(self, path: str | Path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "LayeredClassifier":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _encode_f64(a: np.ndarray) -> str:
    return np.ascontiguousarray(a, dtype="<f8").tobytes().hex()


def _decode_f64(s: str, shape) -> np.ndarray:
    return np.frombuffer(bytes.fromhex(s), dtype="<f8").astype(np.float64).reshape(shape)


def _encode_bits(m: np.ndarray) -> str:
    return np.packbits(np.asarray(m, dtype=bool).reshape(-1)).tobytes().hex()


def _decode_bits(s: str, shape) -> np.ndarray:
    n = int(np.prod(shape))
    return np.unpackbits(np.frombuffer(bytes.fromhex(s), dtype=np.uint8))[:n].astype(bool).reshape(shape)


# --- construction -----------------------------------------------------------

def random_model(dims: ModelDims, n_blocks: int, seed: int) -> LayeredClassifier:
    """Fresh weights: N(0, 1/fan_in) matrices, zero biases."""
    rng = np.random.default_rng(seed)
    d, h, c = dims.d_in, dims.hidden, dims.classes

    def w(fan_in, fan_out):
        return rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)

    params = {"input_proj": w(d, h)}
    for i in range(n_blocks):
        params[_block_name(i, "W1")] = w(h, h)
        params[_block_name(i, "b1")] = np.zeros(h)
        params[_block_name(i, "W2")] = w(h, h)
        params[_block_name(i, "b2")] = np.zeros(h)
    params["head"] = w(h, c)
    params["head_b"] = np.zeros(c)
    return LayeredClassifier(dims, params)


@dataclass(frozen=True)
class Random:
    seed: int
    name = "random"


@dataclass(frozen=True)
class ZeroShotPT:
    """Copy blocks from the public pre-trained teacher (no privacy cost)."""

    source: LayeredClassifier | None = None
    name = "zeroshot-pt"


@dataclass(frozen=True)
class ZeroShotFT:
    """Copy blocks from the privately fine-tuned teacher (post-processing, no extra cost)."""

    source: LayeredClassifier | None = None
    name = "zeroshot-ft"


InitStrategy = Random | ZeroShotPT | ZeroShotFT


def choose_layers(n_teacher: int, n_keep: int, rule: str = "even") -> list[int]:
    """Teacher block indices a zero-shot student copies.

    ``even`` takes 0, 2, 4, ...; ``first`` takes 0..n_keep-1; ``spread`` takes
    evenly spaced indices including the first block.
    """
    if not 0 <= n_keep <= n_teacher:
        raise ValueError(f"cannot keep {n_keep} of {n_teacher} blocks")
    if rule == "even":
        idx = list(range(0, n_teacher, 2))[:n_keep]
        if len(idx) < n_keep:
            raise ValueError(f"only {len(idx)} even-indexed blocks in a {n_teacher}-block teacher; "
                             f"use layer rule 'spread' to keep {n_keep}")
        return idx
    if rule == "first":
        return list(range(n_keep))
    if rule == "spread":
        return [int(i) for i in np.floor(np.arange(n_keep) * n_teacher / max(n_keep, 1))]
    raise ValueError(f"unknown layer rule {rule!r}")


def init_student(teacher: LayeredClassifier, n_keep: int, strategy: InitStrategy,
                 layer_rule: str = "even") -> LayeredClassifier:
    """Build an ``n_keep``-block student shaped like ``teacher``."""
    if n_keep > teacher.n_blocks:
        raise ValueError(f"student depth {n_keep} exceeds teacher depth {teacher.n_blocks}")
    if isinstance(strategy, Random):
        return random_model(teacher.dims, n_keep, strategy.seed)
    if isinstance(strategy, ZeroShotFT) and strategy.source is None:
        raise ValueError("ZeroShotFT needs the privately fine-tuned teacher as its source")
    src = strategy.source if strategy.source is not None else teacher
    if src.dims != teacher.dims:
        raise ValueError("source checkpoint dims differ from the teacher's")
    picks = choose_layers(src.n_blocks, n_keep, layer_rule)
    params = {"input_proj": src.params["input_proj"].copy(),
              "head": src.params["head"].copy(), "head_b": src.params["head_b"].copy()}
    masks = {}
    for k, i in enumerate(picks):
        for p in BLOCK_PARAMS:
            params[_block_name(k, p)] = src.params[_block_name(i, p)].copy()
        for p in ("W1", "W2"):
            masks[_block_name(k, p)] = src.masks[_block_name(i, p)].copy()
    return LayeredClassifier(src.dims, params, masks, [src.block_origin[i] for i in picks])


def factors_from_trace(trace: list, batch: int) -> list[Factor]:
    """Per-example gradient factors after ``backward`` on a summed loss."""
    out = []
    for kind, inp, node, mask in trace:
        D = node.grad if node.grad is not None else np.zeros(node.shape)
        if kind == "outer":
            # an all-true mask multiplies by exactly 1.0; skip it
            m = None if mask is None or mask.all() else mask.astype(np.float64)
            out.append(Factor("outer", D, inp.data, m))
        else:
            out.append(Factor("rows", D))
    return out
