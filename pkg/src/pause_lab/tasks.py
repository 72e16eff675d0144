"""Character vocabulary and the synthetic tasks used in place of real benchmarks.

Three task families, each rendered as ``prefix -> target`` text:

    lookup    "k3:v7;k1:v2|k1="  -> "v2"
    addition  "23+45="           -> "68"
    chain     "a=3;b=a+2;b?"     -> "5"

Train and test splits come from the same sampler and are separated by the
parity of a SHA-256 digest of ``prefix<TAB>target``, so they never overlap.
"""

from __future__ import annotations

import hashlib
import re
import string
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAUSE = "<pause>"
EOS = "<eos>"
SEP = "<sep>"
SPECIALS = (EOS, SEP, PAUSE)  # pause last: its id is the largest

TASK_KINDS = ("lookup", "addition", "chain")
_COMMON = "."  # filler character for the period baseline
_ALPHABETS = {
    "lookup": "kv" + string.digits + ":;|=",
    "addition": string.digits + "+=",
    "chain": string.ascii_lowercase + string.digits + "=+;?",
}
_SPECIAL_RE = re.compile("(" + "|".join(re.escape(s) for s in SPECIALS) + ")")


class GenerationError(ValueError):
    """Task size parameters cannot be satisfied."""


class CorpusFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    symbols: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("duplicate vocabulary symbols")
        if tuple(self.symbols[-len(SPECIALS):]) != SPECIALS:
            raise ValueError("specials must occupy the top ids")
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(self.symbols)})

    def __len__(self) -> int:
        return len(self.symbols)

    @property
    def n_standard(self) -> int:
        return len(self.symbols) - len(SPECIALS)

    @property
    def pause_id(self) -> int:
        return self._index[PAUSE]

    @property
    def eos_id(self) -> int:
        return self._index[EOS]

    @property
    def sep_id(self) -> int:
        return self._index[SEP]

    def id_of(self, symbol: str) -> int:
        try:
            return self._index[symbol]
        except KeyError:
            raise KeyError(f"symbol {symbol!r} not in vocabulary") from None

    def encode(self, text: str) -> list[int]:
        ids = []
        for piece in _SPECIAL_RE.split(text):
            if piece in SPECIALS:
                ids.append(self._index[piece])
            else:
                ids.extend(self.id_of(ch) for ch in piece)
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        n = len(self.symbols)
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < n:
                raise KeyError(f"token id {i} outside vocabulary of size {n}")
            out.append(self.symbols[i])
        return "".join(out)

    def hash32(self) -> int:
        digest = hashlib.sha256("\n".join(self.symbols).encode("utf-8")).digest()
        return int.from_bytes(digest[:4], "little")


def build_vocab(kinds: Iterable[str] = TASK_KINDS) -> Vocab:
    chars = set(_COMMON)
    for kind in kinds:
        if kind not in _ALPHABETS:
            raise ValueError(f"unknown task kind {kind!r}")
        chars.update(_ALPHABETS[kind])
    return Vocab(tuple(sorted(chars)) + SPECIALS)


# ---------------------------------------------------------------------------
# task generators


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    size: int
    split: str = "train"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be train or test, got {self.split!r}")

    def with_split(self, split: str) -> TaskSpec:
        return TaskSpec(self.kind, self.size, split, self.seed)


def _check_size(kind: str, size: int) -> None:
    limits = {"lookup": (1, 10), "addition": (1, 18), "chain": (1, 26)}
    lo, hi = limits[kind]
    if not lo <= size <= hi:
        raise GenerationError(f"{kind} size must lie in [{lo}, {hi}], got {size}")


def _sample_lookup(rng: np.random.Generator, n_keys: int) -> tuple[str, str]:
    keys = rng.permutation(10)[:n_keys]
    values = rng.integers(0, 10, size=n_keys)
    query = int(keys[rng.integers(0, n_keys)])
    table = ";".join(f"k{k}:v{v}" for k, v in zip(keys, values))
    answer = int(values[list(keys).index(query)])
    return f"{table}|k{query}=", f"v{answer}"


def _sample_addition(rng: np.random.Generator, digits: int) -> tuple[str, str]:
    lo = 0 if digits == 1 else 10 ** (digits - 1)
    a, b = (int(x) for x in rng.integers(lo, 10**digits, size=2))
    return f"{a}+{b}=", str(a + b)


def _sample_chain(rng: np.random.Generator, length: int) -> tuple[str, str]:
    names = string.ascii_lowercase[:length]
    start = int(rng.integers(0, 10))
    parts = [f"a={start}"]
    value = start
    for prev, name in zip(names, names[1:]):
        step = int(rng.integers(0, 10))
        parts.append(f"{name}={prev}+{step}")
        value += step
    return ";".join(parts) + f";{names[-1]}?", str(value)


_SAMPLERS = {"lookup": _sample_lookup, "addition": _sample_addition, "chain": _sample_chain}


def solve(kind: str, prefix: str) -> str:
    """Independent evaluator: parse a rendered prefix and compute its answer."""
    if kind == "lookup":
        table, query = prefix.rstrip("=").split("|")
        pairs = dict(item.split(":") for item in table.split(";"))
        return pairs[query]
    if kind == "addition":
        a, b = prefix.rstrip("=").split("+")
        return str(int(a) + int(b))
    if kind == "chain":
        *assigns, query = prefix.split(";")
        env: dict[str, int] = {}
        for assign in assigns:
            name, expr = assign.split("=")
            env[name] = sum(env[t] if t in env else int(t) for t in expr.split("+"))
        return str(env[query.rstrip("?")])
    raise ValueError(f"unknown task kind {kind!r}")


def split_of(prefix: str, target: str) -> str:
    digest = hashlib.sha256(f"{prefix}\t{target}".encode("utf-8")).digest()
    return "train" if digest[0] % 2 == 0 else "test"


def _instances(kind: str, size: int, rng: np.random.Generator, split: str | None):
    sampler = _SAMPLERS[kind]
    while True:
        prefix, target = sampler(rng, size)
        if split is None or split_of(prefix, target) == split:
            yield prefix, target


def gen_task_examples(spec: TaskSpec, n: int) -> list[tuple[str, str]]:
    """``n`` (prefix, target) pairs of ``spec.split``; deterministic in (spec, n)."""
    if n <= 0:
        raise ValueError("n must be positive")
    _check_size(spec.kind, spec.size)
    rng = np.random.default_rng([spec.seed, TASK_KINDS.index(spec.kind), spec.size])
    gen = _instances(spec.kind, spec.size, rng, spec.split)
    return [next(gen) for _ in range(n)]


def gen_pretrain_corpus(specs: Sequence[TaskSpec], total_tokens: int, seed: int, vocab: Vocab) -> np.ndarray:
    """Exactly ``total_tokens`` ids of solved train-split instances, each followed by <sep>."""
    if total_tokens <= 0:
        raise ValueError("total_tokens must be positive")
    if not specs:
        raise ValueError("need at least one task spec")
    for s in specs:
        _check_size(s.kind, s.size)
    rng = np.random.default_rng([seed, 0x5EED])
    gens = [_instances(s.kind, s.size, rng, "train") for s in specs]
    out = np.empty(total_tokens, dtype=np.int64)
    filled = 0
    while filled < total_tokens:
        prefix, target = next(gens[int(rng.integers(0, len(gens)))])
        doc = vocab.encode(prefix + target) + [vocab.sep_id]
        take = min(len(doc), total_tokens - filled)
        out[filled : filled + take] = doc[:take]
        filled += take
    return out


def exact_match(pred: str, gold: str) -> int:
    return int(pred.strip() == gold.strip())


def exact_match_rate(preds: Sequence[str], golds: Sequence[str]) -> float:
    if len(preds) != len(golds):
        raise ValueError("prediction and gold lists differ in length")
    if not preds:
        return 0.0
    return sum(exact_match(p, g) for p, g in zip(preds, golds)) / len(preds)


# ---------------------------------------------------------------------------
# dumps

_CORPUS_MAGIC = b"PAUSECORP"
_CORPUS_VERSION = 1
_CORPUS_HEADER = struct.Struct("<9sxHI")  # magic, pad, version, vocab hash: 16 bytes


def write_dataset(path: str | Path, examples: Iterable[tuple[str, str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for prefix, target in examples:
            fh.write(f"{prefix}\t{target}\n")


def read_dataset(path: str | Path) -> list[tuple[str, str]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            prefix, target = line.rstrip("\n").split("\t")
            out.append((prefix, target))
    return out


def write_corpus(path: str | Path, tokens: np.ndarray, vocab: Vocab) -> None:
    tokens = np.asarray(tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() > 0xFFFF):
        raise ValueError("token ids must fit in 16 bits")
    with open(path, "wb") as fh:
        fh.write(_CORPUS_HEADER.pack(_CORPUS_MAGIC, _CORPUS_VERSION, vocab.hash32()))
        fh.write(tokens.astype("<u2").tobytes())


def read_corpus(path: str | Path, vocab: Vocab | None = None) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _CORPUS_HEADER.size:
        raise CorpusFormatError("corpus file shorter than its header")
    magic, version, vhash = _CORPUS_HEADER.unpack_from(raw)
    if magic != _CORPUS_MAGIC:
        raise CorpusFormatError("bad corpus magic")
    if version != _CORPUS_VERSION:
        raise CorpusFormatError(f"unsupported corpus version {version}")
    if vocab is not None and vhash != vocab.hash32():
        raise CorpusFormatError("corpus was written with a different vocabulary")
    body = raw[_CORPUS_HEADER.size :]
    if len(body) % 2:
        raise CorpusFormatError("truncated corpus body")
    return np.frombuffer(body, dtype="<u2").astype(np.int64)
