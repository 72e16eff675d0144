"""Adam, warmup schedule, the two training loops and the checkpoint format."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import NonFiniteError, Tensor
from .model import LengthError, ModelConfig, ModelParams, Transformer
from .pause import (
    FinetuneExample,
    PausedSequence,
    _finetune_batch,
    finetune_loss_from_logits,
    inject_corpus,
    pretrain_loss_from_logits,
    windows,
)

log = logging.getLogger(__name__)


class BudgetError(RuntimeError):
    """The corpus is too short for the requested token budget."""


class CheckpointError(ValueError):
    pass


class FormatError(CheckpointError):
    pass


class CompatibilityError(CheckpointError):
    pass


class CorruptionError(CheckpointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    warmup_steps: int = 100
    total_steps: int = 3000
    batch_size: int = 16
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip_norm: float | None = 1.0
    schedule: str = "constant"
    precision: str = "float32"

    def __post_init__(self) -> None:
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")
        if self.warmup_steps < 0 or self.total_steps < 0:
            raise ValueError("step counts must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Linear ramp 0 -> learning_rate over warmup_steps, then constant (or cosine to 0)."""
    if step < 0:
        raise ValueError("step must be non-negative")
    lr, warm = config.learning_rate, config.warmup_steps
    if step < warm:
        return lr * step / warm
    if config.schedule == "cosine" and config.total_steps > warm:
        frac = min(1.0, (step - warm) / (config.total_steps - warm))
        return lr * 0.5 * (1.0 + math.cos(math.pi * frac))
    return lr


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def global_grad_norm(grads: Iterable[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads))


def adam_step(
    params: Mapping[str, Tensor],
    state: OptimizerState,
    lr: float,
    config: TrainConfig,
) -> float:
    """One bias-corrected Adam update in place, after optional global-norm clipping.

    Returns the pre-clip gradient norm. A non-finite gradient aborts the step
    before any parameter changes.
    """
    bad = [name for name, p in params.items() if not np.isfinite(p.grad).all()]
    if bad:
        raise NonFiniteError(
            f"non-finite gradient in {len(bad)} tensor(s); step {state.step + 1} aborted",
            {"tensors": bad, "step": state.step + 1},
        )
    norm = global_grad_norm(p.grad for p in params.values())
    scale = 1.0
    if config.grad_clip_norm is not None and norm > config.grad_clip_norm:
        scale = config.grad_clip_norm / (norm + 1e-12)
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = p.grad * scale if scale != 1.0 else p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + config.eps)).astype(p.data.dtype)
    return norm


# ---------------------------------------------------------------------------
# loops


@dataclass
class CurvePoint:
    step: int
    loss: float
    lr: float
    tokens_seen: int


@dataclass
class TrainResult:
    curve: list[CurvePoint]
    tokens_seen: int = 0
    meaningful_tokens: int = 0
    loss_sums: list[float] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [c.loss for c in self.curve]

    @property
    def meaningful_share(self) -> float:
        return self.meaningful_tokens / self.tokens_seen if self.tokens_seen else 0.0


def write_curve(path: str | Path, curve: Sequence[CurvePoint]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "lr", "tokens_seen"])
        for c in curve:
            w.writerow([c.step, repr(c.loss), repr(c.lr), c.tokens_seen])


def _optimize(model: Transformer, loss: Tensor, n_terms: int, state: OptimizerState, config: TrainConfig) -> tuple[float, float, float]:
    lr = lr_schedule(state.step + 1, config)
    model.zero_grad()
    mean_loss = loss * (1.0 / max(n_terms, 1))
    ag.backward(mean_loss)
    adam_step(model.params.tensors, state, lr, config)
    return float(mean_loss.data), float(loss.data), lr


def train_pretrain(
    model: Transformer,
    corpus: np.ndarray,
    config: TrainConfig,
    mode: str,
    window: int,
    pause_id: int,
    fraction: float = 0.1,
    trim: bool = True,
    on_step: Callable[[CurvePoint], None] | None = None,
) -> TrainResult:
    """Causal pretraining over contiguous windows.

    Both modes read the same ``batch_size * window`` raw tokens per step and
    feed ``batch_size * window`` tokens to the model (pause mode trims its
    injected windows), so token budgets match by construction.
    """
    if mode not in ("standard", "pause"):
        raise ValueError(f"mode must be standard or pause, got {mode!r}")
    if mode == "pause" and not trim:
        raise ValueError("pause pretraining needs trim=True to keep the token budget equal")
    need = config.total_steps * config.batch_size * window
    corpus = np.asarray(corpus)
    if corpus.size < need:
        raise BudgetError(f"corpus holds {corpus.size} tokens; {need} required")
    corpus = corpus[:need]
    if mode == "pause":
        stream = inject_corpus(corpus, fraction, window, config.seed, pause_id, trim=True)
    else:
        stream = windows(corpus, window, pause_id)
    state = OptimizerState()
    result = TrainResult([])
    for step in range(1, config.total_steps + 1):
        batch: list[PausedSequence] = [next(stream) for _ in range(config.batch_size)]
        tokens = np.array([s.tokens for s in batch], dtype=np.int64)
        logits = model.forward(tokens)
        loss_sum, n_terms = pretrain_loss_from_logits(logits, batch)
        mean_loss, total, lr = _optimize(model, loss_sum, n_terms, state, config)
        result.tokens_seen += tokens.size
        result.meaningful_tokens += int((tokens != pause_id).sum())
        point = CurvePoint(step, mean_loss, lr, result.tokens_seen)
        result.curve.append(point)
        result.loss_sums.append(total)
        if on_step:
            on_step(point)
    return result


def check_fits(examples: Sequence[FinetuneExample], max_positions: int) -> None:
    for i, ex in enumerate(examples):
        fed = len(ex.prefix) + ex.m_ft + len(ex.target) - 1
        if fed > max_positions:
            raise LengthError(f"example {i}: fed length {fed} exceeds max_positions {max_positions}")


def index_stream(n: int, seed: int):
    """Endless example order: a fresh seeded permutation per epoch."""
    rng = np.random.default_rng([seed, 0xF1])
    while True:
        yield from rng.permutation(n).tolist()


def train_finetune(
    model: Transformer,
    examples: Sequence[FinetuneExample],
    config: TrainConfig,
    pause_id: int,
    on_step: Callable[[CurvePoint], None] | None = None,
) -> TrainResult:
    """Minimize the target-only loss; every example carries the same m_ft."""
    if not examples:
        raise ValueError("no finetuning examples")
    if len({(ex.m_ft, ex.placement) for ex in examples}) != 1:
        raise ValueError("m_ft and placement must be the same across the dataset")
    check_fits(examples, model.config.max_positions)
    order = index_stream(len(examples), config.seed)
    state = OptimizerState()
    result = TrainResult([])
    for step in range(1, config.total_steps + 1):
        batch = [examples[next(order)] for _ in range(config.batch_size)]
        tokens, allow, plens, _ = _finetune_batch(batch, pause_id, model.config.max_positions, pause_id)
        logits = model.forward(tokens, allow)
        loss_sum, n_terms = finetune_loss_from_logits(logits, batch, plens)
        mean_loss, total, lr = _optimize(model, loss_sum, n_terms, state, config)
        result.tokens_seen += tokens.size
        result.meaningful_tokens += int((tokens != pause_id).sum())
        point = CurvePoint(step, mean_loss, lr, result.tokens_seen)
        result.curve.append(point)
        result.loss_sums.append(total)
        if on_step:
            on_step(point)
    return result


# ---------------------------------------------------------------------------
# checkpoints
#
# magic b"PAUSECKPT" | u32 version | u32 n | n bytes UTF-8 JSON header
# then per tensor: u32 name_len | name | u32 rank | u32 extents... | f32 LE data

CKPT_MAGIC = b"PAUSECKPT"
CKPT_VERSION = 1
_U32 = struct.Struct("<I")


@dataclass
class Checkpoint:
    header: dict
    tensors: dict[str, np.ndarray]

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.header["model"])

    def params(self, dtype=None) -> ModelParams:
        return ModelParams.from_arrays(self.model_config, self.tensors, dtype=dtype)


def make_header(config: ModelConfig, train: TrainConfig | None, vocab_hash: int, step: int, **extra) -> dict:
    return {
        "model": config.to_dict(),
        "train_digest": train.digest() if train else None,
        "vocab_hash": vocab_hash,
        "step": step,
        **extra,
    }


def save_checkpoint(path: str | Path, params: ModelParams, header: dict) -> None:
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, _U32.pack(CKPT_VERSION), _U32.pack(len(blob)), blob]
    for name, t in params.items():
        nb = name.encode("utf-8")
        parts += [_U32.pack(len(nb)), nb, _U32.pack(t.data.ndim)]
        parts += [_U32.pack(e) for e in t.data.shape]
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path, expected: ModelConfig | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise CorruptionError(f"checkpoint truncated at byte {pos} (needed {n} more)")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    if len(raw) < len(CKPT_MAGIC) or raw[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    take(len(CKPT_MAGIC))
    (version,) = _U32.unpack(take(4))
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (n,) = _U32.unpack(take(4))
    try:
        header = json.loads(take(n).decode("utf-8"))
        config = ModelConfig.from_dict(header["model"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CorruptionError(f"unreadable checkpoint header: {exc}") from exc
    if expected is not None and expected != config:
        raise CompatibilityError(f"checkpoint model config {config} does not match {expected}")
    tensors: dict[str, np.ndarray] = {}
    while pos < len(raw):
        (nlen,) = _U32.unpack(take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = _U32.unpack(take(4))
        shape = tuple(_U32.unpack(take(4))[0] for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).copy()
    try:
        ModelParams.from_arrays(config, tensors, dtype=np.float32)
    except ValueError as exc:
        raise CorruptionError(str(exc)) from exc
    return Checkpoint(header, tensors)


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
