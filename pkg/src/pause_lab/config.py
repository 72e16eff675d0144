"""``key = value`` run configuration with typed defaults.

Precedence, lowest first: built-in defaults, config file, ``PAUSE_LAB_SEED``
(train.seed only), command-line overrides (``--model.d-model 128``).
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Iterable, Mapping

from .model import ModelConfig
from .trainer import TrainConfig

SEED_ENV = "PAUSE_LAB_SEED"

DEFAULTS: dict[str, object] = {
    "model.n_layers": 4,
    "model.n_heads": 4,
    "model.d_model": 128,
    "model.d_attn": 0,
    "model.d_ff": 512,
    "model.max_positions": 512,
    "model.activation": "gelu",
    "model.tie_embeddings": False,
    "pretrain.steps": 20000,
    "pretrain.lr": 1e-3,
    "pretrain.warmup_steps": 200,
    "pretrain.batch_size": 8,
    "pretrain.window": 256,
    "train.steps": 3000,
    "train.lr": 3e-4,
    "train.warmup_steps": 100,
    "train.batch_size": 16,
    "train.seed": 0,
    "train.seeds": (0, 1, 2, 3, 4),
    "train.beta1": 0.9,
    "train.beta2": 0.999,
    "train.eps": 1e-8,
    "train.grad_clip": 1.0,
    "train.schedule": "constant",
    "train.precision": "float32",
    "pause.fraction": 0.1,
    "pause.trim": True,
    "pause.m_ft": 10,
    "pause.m_inf": -1,
    "pause.placement": "append",
    "pause.mask_logit": True,
    "task.kinds": ("lookup", "addition", "chain"),
    "task.lookup_keys": 8,
    "task.addition_digits": 2,
    "task.chain_length": 3,
    "task.n_train": 4000,
    "task.n_test": 200,
    "task.seed": 1234,
    "eval.max_new": 8,
    "sweep.mft_grid": (0, 2, 5, 10, 20, 50),
    "sweep.minf_grid": (),
    "filler.n": 10,
    "filler.char": ".",
    "report.digits": 2,
    "run.dir": "runs/default",
    "run.timing": False,
}

_COMMENTS = {
    "model.d_attn": "0 -> d_model / n_heads",
    "pause.m_inf": "-1 -> same as pause.m_ft",
    "train.grad_clip": "<= 0 disables clipping",
    "sweep.minf_grid": "empty -> {0, .2, .5, 1, 1.5, 2, 2.5} x m_ft",
    "run.timing": "false keeps metrics.csv byte-reproducible (wall_seconds left empty)",
}

_INT_LIST_KEYS = {"train.seeds", "sweep.mft_grid", "sweep.minf_grid"}


class ConfigError(ValueError):
    pass


def _coerce(key: str, raw: str) -> object:
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = tuple(x.strip() for x in raw.split(",") if x.strip())
            return tuple(int(x) for x in items) if key in _INT_LIST_KEYS else items
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def normalize_key(key: str) -> str:
    key = key.strip().lstrip("-")
    section, _, name = key.partition(".")
    return f"{section}.{name.replace('-', '_')}"


def parse_config_text(text: str) -> dict[str, object]:
    out: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        key = normalize_key(key)
        if key not in DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def parse_overrides(args: Iterable[str]) -> dict[str, object]:
    """Turn ``['--model.d-model', '128', '--pause.trim=false']`` into typed values."""
    args = list(args)
    out: dict[str, object] = {}
    i = 0
    while i < len(args):
        arg = args[i]
        if not arg.startswith("--"):
            raise ConfigError(f"unexpected argument {arg!r}")
        if "=" in arg:
            key, value = arg.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(args):
                raise ConfigError(f"missing value for {arg}")
            key, value = arg, args[i + 1]
            i += 2
        key = normalize_key(key)
        if key not in DEFAULTS:
            raise ConfigError(f"unknown option {arg!r}")
        out[key] = _coerce(key, value)
    return out


def _format(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


class LabConfig:
    def __init__(self, values: Mapping[str, object] | None = None):
        self.values = dict(DEFAULTS)
        for key, value in (values or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown key {key!r}")
            self.values[key] = value
        self._validate()

    @classmethod
    def load(
        cls,
        path: str | Path | None = None,
        overrides: Mapping[str, object] | None = None,
        environ: Mapping[str, str] | None = None,
    ) -> LabConfig:
        values: dict[str, object] = {}
        if path is not None:
            values.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
        env = os.environ if environ is None else environ
        if env.get(SEED_ENV):
            values["train.seed"] = _coerce("train.seed", env[SEED_ENV])
        values.update(overrides or {})
        return cls(values)

    def _validate(self) -> None:
        if self["pause.placement"] not in ("append", "prepend"):
            raise ConfigError("pause.placement must be append or prepend")
        if not 0 <= self["pause.fraction"] < 1:
            raise ConfigError("pause.fraction must lie in [0, 1)")
        if self["pause.m_ft"] < 0:
            raise ConfigError("pause.m_ft must be non-negative")
        if not self["train.seeds"]:
            raise ConfigError("train.seeds must list at least one seed")
        if not self["task.kinds"]:
            raise ConfigError("task.kinds must list at least one task")

    def __getitem__(self, key: str):
        return self.values[key]

    def with_values(self, values: Mapping[str, object]) -> LabConfig:
        vals = dict(self.values)
        vals.update(values)
        return LabConfig(vals)

    @property
    def m_inf(self) -> int:
        return self["pause.m_ft"] if self["pause.m_inf"] < 0 else self["pause.m_inf"]

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            n_layers=self["model.n_layers"],
            n_heads=self["model.n_heads"],
            d_model=self["model.d_model"],
            d_ff=self["model.d_ff"],
            max_positions=self["model.max_positions"],
            vocab_size=vocab_size,
            d_attn=self["model.d_attn"],
            activation=self["model.activation"],
            tie_embeddings=self["model.tie_embeddings"],
        )

    def _common(self) -> dict:
        clip = self["train.grad_clip"]
        return dict(
            beta1=self["train.beta1"],
            beta2=self["train.beta2"],
            eps=self["train.eps"],
            grad_clip_norm=clip if clip > 0 else None,
            schedule=self["train.schedule"],
            precision=self["train.precision"],
        )

    def pretrain_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self["pretrain.lr"],
            warmup_steps=min(self["pretrain.warmup_steps"], self["pretrain.steps"]),
            total_steps=self["pretrain.steps"],
            batch_size=self["pretrain.batch_size"],
            seed=self["train.seed"],
            **self._common(),
        )

    def finetune_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            learning_rate=self["train.lr"],
            warmup_steps=min(self["train.warmup_steps"], self["train.steps"]),
            total_steps=self["train.steps"],
            batch_size=self["train.batch_size"],
            seed=seed,
            **self._common(),
        )

    def task_size(self, kind: str) -> int:
        return {
            "lookup": self["task.lookup_keys"],
            "addition": self["task.addition_digits"],
            "chain": self["task.chain_length"],
        }[kind]

    def resolved_text(self) -> str:
        lines = []
        for key in sorted(self.values):
            line = f"{key} = {_format(self.values[key])}"
            if key in _COMMENTS:
                line += f"  # {_COMMENTS[key]}"
            lines.append(line)
        return "\n".join(lines) + "\n"
