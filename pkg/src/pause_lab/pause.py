"""Pause-token insertion, masked losses and delayed greedy decoding.

Positions are 0-indexed throughout: logits at position k predict token k+1,
and the ignore set is {k : tokens[k+1] == pause} for k in [0, len-2].
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .model import LengthError, Transformer

PAUSE_LITERAL = "<pause>"


class ContaminationError(ValueError):
    """The input already contains the pause id."""


class EmptyLossWarning(UserWarning):
    """Every position of a sequence was ignored; the loss has no terms."""


@dataclass(frozen=True)
class PausedSequence:
    tokens: tuple[int, ...]
    pause_id: int
    ignore_set: frozenset[int] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if self.ignore_set is None:
            object.__setattr__(self, "ignore_set", ignore_positions(self.tokens, self.pause_id))

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def n_pauses(self) -> int:
        return sum(t == self.pause_id for t in self.tokens)

    @property
    def n_original(self) -> int:
        return len(self.tokens) - self.n_pauses

    def strip(self) -> list[int]:
        return [t for t in self.tokens if t != self.pause_id]

    def to_line(self) -> str:
        toks = ",".join(PAUSE_LITERAL if t == self.pause_id else str(t) for t in self.tokens)
        return toks + "\t" + ",".join(str(k) for k in sorted(self.ignore_set))

    @classmethod
    def from_line(cls, line: str, pause_id: int) -> PausedSequence:
        toks, _, ignore = line.rstrip("\n").partition("\t")
        tokens = [pause_id if t == PAUSE_LITERAL else int(t) for t in toks.split(",") if t]
        seq = cls(tokens, pause_id)
        stated = frozenset(int(k) for k in ignore.split(",") if k)
        if stated != seq.ignore_set:
            raise ValueError("ignore positions in record disagree with its tokens")
        return seq


def ignore_positions(tokens: Sequence[int], pause_id: int) -> frozenset[int]:
    return frozenset(k for k in range(len(tokens) - 1) if tokens[k + 1] == pause_id)


def random_insert(tokens: Sequence[int], m_pt: int, seed, pause_id: int) -> PausedSequence:
    """Insert ``m_pt`` pauses at gaps drawn i.i.d. uniform over the N+1 inter-token gaps.

    Gap g sits before original token g (gap N is the end). Pauses landing in
    the same gap are adjacent. ``seed`` may be an int or a numpy Generator.
    """
    p = np.asarray(tokens, dtype=np.int64)
    if m_pt < 0:
        raise ValueError("m_pt must be non-negative")
    if (p == pause_id).any():
        raise ContaminationError("input sequence already contains the pause id")
    n = p.size
    rng = np.random.default_rng(seed)
    gaps = rng.integers(0, n + 1, size=m_pt)
    before = np.cumsum(np.bincount(gaps, minlength=n + 1))[:n]
    out = np.full(n + m_pt, pause_id, dtype=np.int64)
    out[np.arange(n) + before] = p
    return PausedSequence(out.tolist(), pause_id)


def pauses_per_window(fraction: float, window: int) -> int:
    return int(math.floor(fraction * window + 0.5))


def inject_corpus(
    stream: Iterable[int],
    fraction: float,
    window: int,
    seed,
    pause_id: int,
    trim: bool = True,
) -> Iterator[PausedSequence]:
    """Cut ``stream`` into windows and insert round(fraction * window) pauses into each.

    With ``trim`` the result is cut back to ``window`` tokens by dropping the tail.
    A trailing partial window is dropped.
    """
    if not 0 <= fraction < 1:
        raise ValueError("fraction must lie in [0, 1)")
    m_pt = pauses_per_window(fraction, window)
    rng = np.random.default_rng(seed)
    buf: list[int] = []
    for tok in stream:
        buf.append(int(tok))
        if len(buf) == window:
            seq = random_insert(buf, m_pt, rng, pause_id)
            if trim:
                seq = PausedSequence(seq.tokens[:window], pause_id)
            yield seq
            buf = []


def windows(stream: Iterable[int], window: int, pause_id: int) -> Iterator[PausedSequence]:
    """Plain windows with no pauses (standard pretraining input)."""
    buf: list[int] = []
    for tok in stream:
        buf.append(int(tok))
        if len(buf) == window:
            yield PausedSequence(buf, pause_id)
            buf = []


# ---------------------------------------------------------------------------
# pretraining loss


def pretrain_targets(seq: PausedSequence) -> tuple[np.ndarray, np.ndarray]:
    """Positions that carry a loss term and the token each must predict."""
    pos = np.array([k for k in range(len(seq) - 1) if k not in seq.ignore_set], dtype=np.int64)
    tgt = np.asarray(seq.tokens, dtype=np.int64)[pos + 1] if pos.size else pos
    return pos, tgt


def pretrain_loss_from_logits(logits: Tensor, seqs: Sequence[PausedSequence]) -> tuple[Tensor, int]:
    """Summed cross entropy over non-ignored positions; logits are (B, K, V).

    Ignored positions are never gathered, so their logits cannot affect the result.
    """
    b, k, v = logits.shape
    rows, targets = [], []
    for i, seq in enumerate(seqs):
        pos, tgt = pretrain_targets(seq)
        rows.append(i * k + pos)
        targets.append(tgt)
    rows_a = np.concatenate(rows) if rows else np.zeros(0, np.int64)
    n_terms = int(rows_a.size)
    if n_terms == 0:
        warnings.warn("all positions ignored; pretraining loss has no terms", EmptyLossWarning, stacklevel=3)
        return Tensor(np.zeros((), dtype=logits.data.dtype)), 0
    picked = ag.take(logits.reshape(b * k, v), rows_a)
    return ag.cross_entropy(picked, np.concatenate(targets)), n_terms


def pause_pretrain_loss(model: Transformer, seqs, reduction: str = "sum") -> Tensor:
    """Causal next-token loss skipping positions whose next token is a pause.

    ``reduction='sum'`` is the plain sum of terms; ``'mean'`` divides by the
    number of terms (what the optimizer uses).
    """
    if isinstance(seqs, PausedSequence):
        seqs = [seqs]
    lengths = {len(s) for s in seqs}
    if len(lengths) != 1:
        raise ValueError("a pretraining batch must share one sequence length")
    if min(lengths) < 2:
        raise ValueError("pretraining sequences need at least two tokens")
    logits = model.forward(np.array([s.tokens for s in seqs]))
    total, n = pretrain_loss_from_logits(logits, seqs)
    if reduction == "mean" and n:
        return total * (1.0 / n)
    return total


# ---------------------------------------------------------------------------
# finetuning


@dataclass(frozen=True)
class FinetuneExample:
    prefix: tuple[int, ...]
    target: tuple[int, ...]
    m_ft: int = 0
    placement: str = "append"

    def __post_init__(self) -> None:
        object.__setattr__(self, "prefix", tuple(int(t) for t in self.prefix))
        object.__setattr__(self, "target", tuple(int(t) for t in self.target))
        if not self.target:
            raise ValueError("target must hold at least one token")
        if self.m_ft < 0:
            raise ValueError("m_ft must be non-negative")
        if self.placement not in ("append", "prepend"):
            raise ValueError(f"placement must be append or prepend, got {self.placement!r}")


def append_pauses(prefix: Sequence[int], m: int, pause_id: int, placement: str = "append") -> tuple[list[int], int]:
    """Delay the prefix with ``m`` pauses; returns (tokens, prefix length P = N + m)."""
    if m < 0:
        raise ValueError("pause count must be non-negative")
    prefix = [int(t) for t in prefix]
    pauses = [pause_id] * m
    if placement == "append":
        toks = prefix + pauses
    elif placement == "prepend":
        toks = pauses + prefix
    else:
        raise ValueError(f"placement must be append or prepend, got {placement!r}")
    return toks, len(toks)


def check_example(ex: FinetuneExample, pause_id: int) -> None:
    if pause_id in ex.prefix or pause_id in ex.target:
        raise ContaminationError("finetuning example contains the pause id")


def _finetune_batch(examples: Sequence[FinetuneExample], pause_id: int, max_positions: int, pad_id: int):
    seqs, prefix_lens, target_lens = [], [], []
    for i, ex in enumerate(examples):
        check_example(ex, pause_id)
        toks, p = append_pauses(ex.prefix, ex.m_ft, pause_id, ex.placement)
        fed = toks + list(ex.target[:-1])
        if len(fed) > max_positions:
            raise LengthError(f"example {i}: fed length {len(fed)} exceeds max_positions {max_positions}")
        if p == 0:
            raise ValueError(f"example {i}: empty prefix")
        seqs.append(fed)
        prefix_lens.append(p)
        target_lens.append(len(ex.target))
    k = max(len(s) for s in seqs)
    tokens = np.full((len(seqs), k), pad_id, dtype=np.int64)
    allow = np.zeros((len(seqs), k, k), dtype=bool)
    causal = np.tril(np.ones((k, k), dtype=bool))
    for i, (s, p) in enumerate(zip(seqs, prefix_lens)):
        tokens[i, : len(s)] = s
        allow[i] = causal
        allow[i, :, :p] = True
    return tokens, allow, prefix_lens, target_lens


def finetune_targets(examples: Sequence[FinetuneExample], prefix_lens, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Flattened (row, target) pairs: row P-1+j of example i predicts target[j]."""
    rows, tgts = [], []
    for i, (ex, p) in enumerate(zip(examples, prefix_lens)):
        t = len(ex.target)
        rows.append(i * k + p - 1 + np.arange(t))
        tgts.append(np.asarray(ex.target, dtype=np.int64))
    return np.concatenate(rows), np.concatenate(tgts)


def finetune_loss_from_logits(logits: Tensor, examples: Sequence[FinetuneExample], prefix_lens) -> tuple[Tensor, int]:
    b, k, v = logits.shape
    rows, tgts = finetune_targets(examples, prefix_lens, k)
    picked = ag.take(logits.reshape(b * k, v), rows)
    return ag.cross_entropy(picked, tgts), int(rows.size)


def pause_finetune_loss(model: Transformer, examples, pause_id: int, reduction: str = "sum", pad_id: int | None = None) -> Tensor:
    """Cross entropy over target tokens only, prefix (with pauses) attended bidirectionally."""
    if isinstance(examples, FinetuneExample):
        examples = [examples]
    pad = pause_id if pad_id is None else pad_id
    tokens, allow, plens, _ = _finetune_batch(examples, pause_id, model.config.max_positions, pad)
    logits = model.forward(tokens, allow)
    total, n = finetune_loss_from_logits(logits, examples, plens)
    return total * (1.0 / n) if reduction == "mean" else total


# ---------------------------------------------------------------------------
# delayed decoding


def generate_batch(
    model: Transformer,
    prefixes: Sequence[Sequence[int]],
    m_inf: int,
    eos: int,
    pause_id: int,
    max_new: int = 16,
    placement: str = "append",
    mask_pause: bool = True,
    delay_id: int | None = None,
) -> list[list[int]]:
    """Greedy delayed decoding for many prefixes.

    Each prefix gets ``m_inf`` copies of ``delay_id`` (the pause token unless a
    filler is given) and the delayed prefix is attended bidirectionally.
    Outputs at delay positions are computed and discarded. Prefixes of equal
    delayed length are decoded together.
    """
    delay = pause_id if delay_id is None else delay_id
    built = [append_pauses(p, m_inf, delay, placement)[0] for p in prefixes]
    results: list[list[int] | None] = [None] * len(built)
    groups: dict[int, list[int]] = {}
    for i, toks in enumerate(built):
        if not toks:
            raise ValueError(f"prefix {i} is empty")
        groups.setdefault(len(toks), []).append(i)
    for p_len, idx in sorted(groups.items()):
        if p_len > model.config.max_positions:
            raise LengthError(f"delayed prefix length {p_len} exceeds max_positions {model.config.max_positions}")
        seqs = np.array([built[i] for i in idx], dtype=np.int64)
        answers = [[] for _ in idx]
        done = np.zeros(len(idx), dtype=bool)
        with ag.no_grad():
            for _ in range(max_new):
                k = seqs.shape[1]
                if k > model.config.max_positions:
                    break
                allow = np.tril(np.ones((k, k), dtype=bool))
                allow[:, :p_len] = True
                logits = model.forward(seqs, allow).data[:, -1, :].astype(np.float64)
                if mask_pause:
                    logits[:, pause_id] = -np.inf
                nxt = logits.argmax(axis=-1)
                for j, t in enumerate(nxt):
                    if not done[j]:
                        if t == eos:
                            done[j] = True
                        else:
                            answers[j].append(int(t))
                if done.all():
                    break
                seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
        for j, i in enumerate(idx):
            results[i] = answers[j]
    return results  # type: ignore[return-value]


def pause_generate(
    model: Transformer,
    prefix: Sequence[int],
    m_inf: int,
    eos: int,
    pause_id: int,
    max_new: int = 16,
    placement: str = "append",
    mask_pause: bool = True,
) -> list[int]:
    """Answer tokens for one prefix (eos excluded)."""
    if not prefix:
        raise ValueError("prefix must be non-empty")
    return generate_batch(model, [prefix], m_inf, eos, pause_id, max_new, placement, mask_pause)[0]


def teacher_forced_accuracy(model: Transformer, examples: Sequence[FinetuneExample], pause_id: int, batch_size: int = 64) -> float:
    """Share of target tokens whose argmax (pause logit excluded) is correct under teacher forcing."""
    hits = total = 0
    with ag.no_grad():
        for start in range(0, len(examples), batch_size):
            chunk = examples[start : start + batch_size]
            tokens, allow, plens, _ = _finetune_batch(chunk, pause_id, model.config.max_positions, pause_id)
            logits = model.forward(tokens, allow).data
            b, k, v = logits.shape
            rows, tgts = finetune_targets(chunk, plens, k)
            flat = logits.reshape(b * k, v)[rows].astype(np.float64)
            flat[:, pause_id] = -np.inf
            hits += int((flat.argmax(axis=-1) == tgts).sum())
            total += int(tgts.size)
    return hits / total if total else 0.0
