"""Post-norm decoder-only transformer on top of the autograd core.

Layer l maps V (K x D) to
    a_k  = LN1(v_k + sum_h W_out[h]^T W_value[h] V softmax(mask(K_h^T q_k) / sqrt(D_attn)))
    v'_k = LN2(FF(a_k) + a_k)
with learned absolute positions and an untied unembedding by default.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import autograd as ag
from .autograd import DegenerateMaskError, DimensionError, Tensor


class VocabError(ValueError):
    """A token id falls outside the vocabulary."""


class LengthError(ValueError):
    """A sequence is longer than the model's position table."""


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    max_positions: int = 512
    vocab_size: int = 64
    d_attn: int = 0  # 0 -> d_model // n_heads
    activation: str = "gelu"
    tie_embeddings: bool = False
    ln_eps: float = 1e-5

    def __post_init__(self) -> None:
        for name in ("n_heads", "d_model", "d_ff", "max_positions", "vocab_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_layers < 0:
            raise ValueError("n_layers must be non-negative")
        if self.d_attn < 0:
            raise ValueError("d_attn must be positive (or 0 for d_model // n_heads)")
        if self.d_attn == 0 and self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads when d_attn is derived")
        if self.activation not in ("gelu", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def head_dim(self) -> int:
        return self.d_attn or self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)


# ---------------------------------------------------------------------------
# attention masks


@dataclass(frozen=True, eq=False)
class AttentionMask:
    """Boolean allow-matrix: rows are query positions, columns key positions."""

    allow: np.ndarray

    def __post_init__(self) -> None:
        allow = np.asarray(self.allow, dtype=bool)
        if allow.ndim != 2:
            raise DimensionError("attention mask must be a 2-D matrix")
        if not allow.any(axis=1).all():
            raise DegenerateMaskError("every query row needs at least one allowed key")
        object.__setattr__(self, "allow", allow)

    @property
    def size(self) -> int:
        return self.allow.shape[0]

    def __eq__(self, other) -> bool:
        return isinstance(other, AttentionMask) and np.array_equal(self.allow, other.allow)


def build_causal_mask(k: int) -> AttentionMask:
    if k < 1:
        raise ValueError("causal mask needs K >= 1")
    return AttentionMask(np.tril(np.ones((k, k), dtype=bool)))


def build_prefix_mask(p: int, k: int) -> AttentionMask:
    """allow[i][j] = (j < p) or (j <= i): bidirectional over the prefix, causal after it."""
    if k < 1:
        raise ValueError("prefix mask needs K >= 1")
    if not 0 <= p <= k:
        raise ValueError(f"prefix length {p} outside [0, {k}]")
    allow = np.tril(np.ones((k, k), dtype=bool))
    allow[:, :p] = True
    return AttentionMask(allow)


def _mask_array(mask, batch: int, k: int) -> np.ndarray:
    """Normalize a mask (AttentionMask, (K,K) or (B,K,K) bool array) to broadcast over heads."""
    if isinstance(mask, AttentionMask):
        allow = mask.allow
    elif isinstance(mask, (list, tuple)):
        allow = np.stack([m.allow if isinstance(m, AttentionMask) else np.asarray(m, bool) for m in mask])
    else:
        allow = np.asarray(mask, dtype=bool)
    if allow.shape[-2:] != (k, k):
        raise DimensionError(f"mask of shape {allow.shape} does not match sequence length {k}")
    if allow.ndim == 3:
        if allow.shape[0] != batch:
            raise DimensionError(f"mask batch {allow.shape[0]} != token batch {batch}")
        return allow[:, None, :, :]
    return allow


# ---------------------------------------------------------------------------
# parameters


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter names and shapes, in initialization order."""
    d, h, da, f = config.d_model, config.n_heads, config.head_dim, config.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "token_embedding": (config.vocab_size, d),
        "position_embedding": (config.max_positions, d),
    }
    for layer in range(config.n_layers):
        p = f"layers.{layer}."
        for w in ("w_query", "w_key", "w_value", "w_out"):
            shapes[p + "attn." + w] = (h, da, d)
        shapes[p + "ln1.gamma"] = (d,)
        shapes[p + "ln1.beta"] = (d,)
        shapes[p + "ff.w_in"] = (d, f)
        shapes[p + "ff.b_in"] = (f,)
        shapes[p + "ff.w_out"] = (f, d)
        shapes[p + "ff.b_out"] = (d,)
        shapes[p + "ln2.gamma"] = (d,)
        shapes[p + "ln2.beta"] = (d,)
    if not config.tie_embeddings:
        shapes["unembedding"] = (d, config.vocab_size)
    return shapes


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def copy(self) -> ModelParams:
        return ModelParams(self.config, {k: Tensor(t.data.copy(), requires_grad=True) for k, t in self.items()})

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, t in self.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: dict[str, np.ndarray], dtype=None) -> ModelParams:
        shapes = param_shapes(config)
        if set(arrays) != set(shapes):
            missing = sorted(set(shapes) - set(arrays))
            extra = sorted(set(arrays) - set(shapes))
            raise ValueError(f"parameter names do not match config (missing={missing}, extra={extra})")
        dtype = dtype or ag.get_dtype()
        tensors = {}
        for name, shape in shapes.items():
            arr = np.asarray(arrays[name])
            if arr.shape != shape:
                raise ValueError(f"{name}: shape {arr.shape} != expected {shape}")
            tensors[name] = Tensor(arr.astype(dtype), requires_grad=True)
        return cls(config, tensors)


def init_params(config: ModelConfig, seed: int, std: float = 0.02) -> ModelParams:
    """Weights ~ N(0, std^2); layer-norm gamma = 1, beta = 0; biases 0."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gamma"):
            arrays[name] = np.ones(shape)
        elif name.endswith((".beta", ".b_in", ".b_out")):
            arrays[name] = np.zeros(shape)
        else:
            arrays[name] = rng.normal(0.0, std, size=shape)
    return ModelParams.from_arrays(config, arrays)


@dataclass(frozen=True)
class ParamCount:
    token_embedding: int
    position_embedding: int
    attention: int
    feedforward: int
    layer_norm: int
    unembedding: int

    @property
    def total(self) -> int:
        return (
            self.token_embedding
            + self.position_embedding
            + self.attention
            + self.feedforward
            + self.layer_norm
            + self.unembedding
        )


def count_params(config: ModelConfig) -> ParamCount:
    d, f, n = config.d_model, config.d_ff, config.n_layers
    return ParamCount(
        token_embedding=config.vocab_size * d,
        position_embedding=config.max_positions * d,
        attention=n * 4 * config.n_heads * config.head_dim * d,
        feedforward=n * (2 * d * f + f + d),
        layer_norm=n * 4 * d,
        unembedding=0 if config.tie_embeddings else d * config.vocab_size,
    )


# ---------------------------------------------------------------------------
# the model


class Transformer:
    def __init__(self, config: ModelConfig, params: ModelParams | None = None, seed: int = 0):
        if params is not None and params.config != config:
            raise ValueError("params were built for a different ModelConfig")
        self.config = config
        self.params = params if params is not None else init_params(config, seed)

    def _act(self, x: Tensor) -> Tensor:
        return ag.gelu(x) if self.config.activation == "gelu" else ag.relu(x)

    def _check_tokens(self, tokens) -> np.ndarray:
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.ndim not in (1, 2):
            raise DimensionError("tokens must be a sequence or a batch of sequences")
        if ids.shape[-1] == 0:
            raise LengthError("empty token sequence")
        if ids.shape[-1] > self.config.max_positions:
            raise LengthError(f"sequence length {ids.shape[-1]} exceeds max_positions {self.config.max_positions}")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise VocabError(f"token id outside [0, {self.config.vocab_size})")
        return ids

    def embed(self, tokens) -> Tensor:
        """Token embedding plus position embedding (positions counted from 0)."""
        ids = self._check_tokens(tokens)
        k = ids.shape[-1]
        tok = ag.take(self.params["token_embedding"], ids)
        pos = ag.take(self.params["position_embedding"], np.arange(k))
        return tok + pos

    def attention_block(self, v: Tensor, layer: int, mask) -> Tensor:
        """Multi-head attention, residual and first layer norm. ``v`` is (K,D) or (B,K,D)."""
        squeeze = v.ndim == 2
        if squeeze:
            v = v.reshape(1, *v.shape)
        b, k, d = v.shape
        allow = _mask_array(mask, b, k)
        p = f"layers.{layer}."
        x = v.reshape(b, 1, k, d)
        wq = ag.swapaxes(self.params[p + "attn.w_query"], -1, -2)
        wk = ag.swapaxes(self.params[p + "attn.w_key"], -1, -2)
        wv = ag.swapaxes(self.params[p + "attn.w_value"], -1, -2)
        q = x @ wq  # (B,H,K,Da)
        kk = x @ wk
        vv = x @ wv
        scores = (q @ ag.swapaxes(kk, -1, -2)) * (1.0 / math.sqrt(self.config.head_dim))
        weights = ag.softmax_rows(scores, allow)
        mixed = weights @ vv  # (B,H,K,Da)
        heads = mixed @ self.params[p + "attn.w_out"]  # (B,H,K,D)
        out = ag.layer_norm(v + heads.sum(axis=1), self.params[p + "ln1.gamma"], self.params[p + "ln1.beta"], self.config.ln_eps)
        return out.reshape(k, d) if squeeze else out

    def feedforward_block(self, a: Tensor, layer: int) -> Tensor:
        p = f"layers.{layer}."
        hidden = self._act(a @ self.params[p + "ff.w_in"] + self.params[p + "ff.b_in"])
        ff = hidden @ self.params[p + "ff.w_out"] + self.params[p + "ff.b_out"]
        return ag.layer_norm(ff + a, self.params[p + "ln2.gamma"], self.params[p + "ln2.beta"], self.config.ln_eps)

    def unembed(self, v: Tensor) -> Tensor:
        if self.config.tie_embeddings:
            return v @ ag.transpose(self.params["token_embedding"])
        return v @ self.params["unembedding"]

    def forward(self, tokens, mask=None) -> Tensor:
        """Logits for every position; row k parameterizes token k+1.

        ``tokens`` is (K,) or (B,K); ``mask`` defaults to causal.
        """
        v = self.embed(tokens)
        k = v.shape[-2]
        if mask is None:
            mask = build_causal_mask(k)
        for layer in range(self.config.n_layers):
            v = self.attention_block(v, layer, mask)
            v = self.feedforward_block(v, layer)
        return self.unembed(v)

    __call__ = forward

    def zero_grad(self) -> None:
        ag.zero_grad(self.params.values())


def stack_masks(masks: Sequence[AttentionMask]) -> np.ndarray:
    return np.stack([m.allow for m in masks])
