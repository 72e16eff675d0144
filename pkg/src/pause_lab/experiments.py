"""Variant matrix, delay sweeps, placement ablation and the filler baseline."""

from __future__ import annotations

import csv
import io
import logging
import time
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .config import LabConfig
from .model import LengthError, Transformer
from .pause import FinetuneExample, generate_batch, teacher_forced_accuracy
from .tasks import PAUSE, TaskSpec, Vocab, build_vocab, exact_match_rate, gen_pretrain_corpus, gen_task_examples
from .trainer import (
    Checkpoint,
    TrainResult,
    file_digest,
    load_checkpoint,
    make_header,
    save_checkpoint,
    train_finetune,
    train_pretrain,
    write_curve,
)

log = logging.getLogger(__name__)

VARIANTS = ("StdPT_StdFT", "StdPT_PauseFT", "PausePT_StdFT", "PausePT_PauseFT")
METRICS_HEADER = "variant,task,M_ft,M_inf,placement,seed,EM,token_accuracy,steps,wall_seconds"


class MissingCheckpointError(FileNotFoundError):
    pass


class UsageError(ValueError):
    pass


class SweepSkipWarning(UserWarning):
    pass


@dataclass(frozen=True)
class VariantSpec:
    variant: str
    task: str
    m_ft: int = 0
    m_inf: int | None = None
    placement: str = "append"
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise UsageError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.m_ft < 0:
            raise UsageError("M_ft must be non-negative")
        if self.variant.endswith("StdFT") and self.m_ft != 0:
            raise UsageError(f"{self.variant} finetunes without pauses; M_ft must be 0, got {self.m_ft}")
        if self.m_inf is None:
            object.__setattr__(self, "m_inf", self.m_ft)
        if self.placement not in ("append", "prepend"):
            raise UsageError(f"placement must be append or prepend, got {self.placement!r}")

    @property
    def pretrain_mode(self) -> str:
        return "pause" if self.variant.startswith("PausePT") else "standard"

    @property
    def pause_finetune(self) -> bool:
        return self.variant.endswith("PauseFT")


@dataclass(frozen=True)
class MetricsRow:
    variant: str
    task: str
    M_ft: int
    M_inf: int
    placement: str
    seed: int
    EM: float
    token_accuracy: float
    steps: int
    wall_seconds: float | None = None

    def key(self) -> tuple:
        v = VARIANTS.index(self.variant) if self.variant in VARIANTS else len(VARIANTS)
        return (self.task, v, self.variant, self.M_ft, self.M_inf, self.placement, self.seed)

    def csv_fields(self) -> list[str]:
        wall = "" if self.wall_seconds is None else f"{self.wall_seconds:.3f}"
        return [
            self.variant,
            self.task,
            str(self.M_ft),
            str(self.M_inf),
            self.placement,
            str(self.seed),
            repr(float(self.EM)),
            repr(float(self.token_accuracy)),
            str(self.steps),
            wall,
        ]

    @classmethod
    def from_csv(cls, rec: dict) -> MetricsRow:
        return cls(
            rec["variant"],
            rec["task"],
            int(rec["M_ft"]),
            int(rec["M_inf"]),
            rec["placement"],
            int(rec["seed"]),
            float(rec["EM"]),
            float(rec["token_accuracy"]),
            int(rec["steps"]),
            float(rec["wall_seconds"]) if rec["wall_seconds"] else None,
        )


# ---------------------------------------------------------------------------
# reporting


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def format_mean_std(values: Sequence[float], digits: int = 2) -> str:
    m, s = mean_std(values)
    return f"{m:.{digits}f} ± {s:.{digits}f}"


def metrics_csv_text(rows: Sequence[MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER.split(","))
    for r in sorted(rows, key=MetricsRow.key):
        w.writerow(r.csv_fields())
    return buf.getvalue()


def read_metrics(path: str | Path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        return [MetricsRow.from_csv(rec) for rec in csv.DictReader(fh)]


def render_table(header: Sequence[str], body: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(str(x).ljust(w) for x, w in zip(row, widths)).rstrip() for row in [header, *body]]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def summary_text(rows: Sequence[MetricsRow], digits: int = 2) -> str:
    groups: dict[tuple, list[MetricsRow]] = {}
    for r in sorted(rows, key=MetricsRow.key):
        groups.setdefault(r.key()[:-1], []).append(r)
    body = []
    for members in groups.values():
        r = members[0]
        body.append(
            [
                r.variant,
                r.task,
                str(r.M_ft),
                str(r.M_inf),
                r.placement,
                str(len(members)),
                format_mean_std([m.EM for m in members], digits),
                format_mean_std([m.token_accuracy for m in members], digits),
            ]
        )
    header = ["variant", "task", "M_ft", "M_inf", "placement", "n", "EM", "token_acc"]
    return render_table(header, body)


def emit_report(rows: Sequence[MetricsRow], out_dir: str | Path, digits: int = 2, merge: bool = False) -> tuple[Path, Path]:
    """Write metrics.csv and summary.txt; with ``merge`` existing rows are kept unless replaced."""
    if not rows:
        raise UsageError("no metrics rows to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, summary_path = out / "metrics.csv", out / "summary.txt"
    all_rows = {r.key(): r for r in (read_metrics(csv_path) if merge and csv_path.exists() else [])}
    all_rows.update({r.key(): r for r in rows})
    merged = list(all_rows.values())
    csv_path.write_text(metrics_csv_text(merged), encoding="utf-8")
    summary_path.write_text(summary_text(merged, digits), encoding="utf-8")
    return csv_path, summary_path


# ---------------------------------------------------------------------------
# the lab: shared state for one run directory


@dataclass
class Lab:
    cfg: LabConfig
    run_dir: Path = None  # type: ignore[assignment]
    vocab: Vocab = field(init=False)

    def __post_init__(self) -> None:
        self.run_dir = Path(self.run_dir or self.cfg["run.dir"])
        self.vocab = build_vocab(self.cfg["task.kinds"])
        self._example_cache: dict = {}

    # paths
    @property
    def ckpt_dir(self) -> Path:
        d = self.run_dir / "checkpoints"
        d.mkdir(parents=True, exist_ok=True)
        return d

    @property
    def curve_dir(self) -> Path:
        d = self.run_dir / "curves"
        d.mkdir(parents=True, exist_ok=True)
        return d

    def pretrain_path(self, mode: str) -> Path:
        return self.run_dir / "checkpoints" / f"pretrain-{mode}.ckpt"

    def finetune_path(self, spec: VariantSpec, seed: int) -> Path:
        return self.ckpt_dir / f"finetune-{spec.variant}-{spec.task}-mft{spec.m_ft}-{spec.placement}-s{seed}.ckpt"

    @property
    def model_config(self):
        return self.cfg.model_config(len(self.vocab))

    def write_resolved(self) -> None:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / "config.resolved").write_text(self.cfg.resolved_text(), encoding="utf-8")

    def record_timing(self, label: str, seconds: float) -> None:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        with open(self.run_dir / "timing.csv", "a") as fh:
            fh.write(f"{label},{seconds:.3f}\n")

    # data
    def task_spec(self, kind: str, split: str) -> TaskSpec:
        return TaskSpec(kind, self.cfg.task_size(kind), split, self.cfg["task.seed"])

    def raw_examples(self, kind: str, split: str) -> list[tuple[str, str]]:
        key = (kind, split)
        if key not in self._example_cache:
            n = self.cfg["task.n_train"] if split == "train" else self.cfg["task.n_test"]
            self._example_cache[key] = gen_task_examples(self.task_spec(kind, split), n)
        return self._example_cache[key]

    def finetune_examples(self, kind: str, split: str, m: int, placement: str, delay: Sequence[int] = ()) -> list[FinetuneExample]:
        eos = self.vocab.eos_id
        return [
            FinetuneExample(self.vocab.encode(p) + list(delay), self.vocab.encode(t) + [eos], m, placement)
            for p, t in self.raw_examples(kind, split)
        ]

    def variant_spec(self, variant: str, task: str, m_ft: int | None = None, placement: str | None = None) -> VariantSpec:
        """Build a spec from config: StdFT variants always get M_ft = M_inf = 0."""
        if variant.endswith("StdFT"):
            return VariantSpec(variant, task, 0, 0, "append", tuple(self.cfg["train.seeds"]))
        m = self.cfg["pause.m_ft"] if m_ft is None else m_ft
        m_inf = m if m_ft is not None else self.cfg.m_inf
        return VariantSpec(variant, task, m, m_inf, placement or self.cfg["pause.placement"], tuple(self.cfg["train.seeds"]))

    # pretraining
    def pretrain(self, mode: str) -> tuple[Path, TrainResult]:
        cfg = self.cfg
        tc = cfg.pretrain_config()
        window = cfg["pretrain.window"]
        specs = [self.task_spec(k, "train") for k in cfg["task.kinds"]]
        corpus = gen_pretrain_corpus(specs, tc.total_steps * tc.batch_size * window, tc.seed, self.vocab)
        model = Transformer(self.model_config, seed=tc.seed)
        start = time.perf_counter()
        result = train_pretrain(
            model, corpus, tc, mode, window, self.vocab.pause_id, cfg["pause.fraction"], trim=cfg["pause.trim"]
        )
        self.record_timing(f"pretrain-{mode}", time.perf_counter() - start)
        path = self.pretrain_path(mode)
        self.ckpt_dir
        header = make_header(
            model.config, tc, self.vocab.hash32(), tc.total_steps,
            stage="pretrain", mode=mode, tokens_seen=result.tokens_seen, meaningful_tokens=result.meaningful_tokens,
        )
        save_checkpoint(path, model.params, header)
        write_curve(self.curve_dir / f"pretrain-{mode}.csv", result.curve)
        return path, result

    def load_model(self, path: str | Path) -> tuple[Transformer, Checkpoint]:
        ckpt = load_checkpoint(path, expected=self.model_config)
        if ckpt.header.get("vocab_hash") != self.vocab.hash32():
            raise UsageError(f"{path} was trained with a different vocabulary (check task.kinds)")
        return Transformer(ckpt.model_config, ckpt.params()), ckpt

    def load_pretrained(self, mode: str, train_missing: bool = False) -> tuple[Transformer, str]:
        path = self.pretrain_path(mode)
        if not path.exists():
            if not train_missing:
                raise MissingCheckpointError(
                    f"no {mode} pretraining checkpoint at {path}; run "
                    f"`pause-lab pretrain --config <file> --mode {mode} --run.dir {self.run_dir}` first"
                )
            self.pretrain(mode)
        model, _ = self.load_model(path)
        return model, file_digest(path)

    # finetune + evaluate
    def finetune(self, spec: VariantSpec, seed: int, model: Transformer) -> TrainResult:
        examples = self.finetune_examples(spec.task, "train", spec.m_ft, spec.placement)
        tc = self.cfg.finetune_config(seed)
        start = time.perf_counter()
        result = train_finetune(model, examples, tc, self.vocab.pause_id)
        self.record_timing(f"finetune-{spec.variant}-{spec.task}-mft{spec.m_ft}-s{seed}", time.perf_counter() - start)
        write_curve(self.curve_dir / f"finetune-{spec.variant}-{spec.task}-mft{spec.m_ft}-{spec.placement}-s{seed}.csv", result.curve)
        return result

    def evaluate(self, model: Transformer, task: str, m_inf: int, placement: str = "append", delay_id: int | None = None) -> tuple[float, float]:
        """Greedy exact match and teacher-forced token accuracy on the test split."""
        raw = self.raw_examples(task, "test")
        prefixes = [self.vocab.encode(p) for p, _ in raw]
        with ag.no_grad():
            preds = generate_batch(
                model, prefixes, m_inf, self.vocab.eos_id, self.vocab.pause_id, self.cfg["eval.max_new"],
                placement, self.cfg["pause.mask_logit"], delay_id=delay_id,
            )
        em = exact_match_rate([self.vocab.decode(p) for p in preds], [t for _, t in raw])
        if delay_id is None:
            examples = self.finetune_examples(task, "test", m_inf, placement)
        else:
            examples = self.finetune_examples(task, "test", 0, "append", delay=[delay_id] * m_inf)
        acc = teacher_forced_accuracy(model, examples, self.vocab.pause_id)
        return em, acc

    def run_cell(self, spec: VariantSpec, seed: int, train_missing: bool = False, save: bool = False, expected_digest: str | None = None) -> MetricsRow:
        start = time.perf_counter()
        model, digest = self.load_pretrained(spec.pretrain_mode, train_missing)
        if expected_digest is not None and digest != expected_digest:
            raise RuntimeError(f"{spec.pretrain_mode} pretraining checkpoint changed during the run")
        self.finetune(spec, seed, model)
        if save:
            header = make_header(
                model.config, self.cfg.finetune_config(seed), self.vocab.hash32(), self.cfg["train.steps"],
                stage="finetune", variant=spec.variant, task=spec.task, m_ft=spec.m_ft,
                placement=spec.placement, seed=seed, pretrain_digest=digest,
            )
            save_checkpoint(self.finetune_path(spec, seed), model.params, header)
        em, acc = self.evaluate(model, spec.task, spec.m_inf, spec.placement)
        wall = time.perf_counter() - start
        self.record_timing(f"cell-{spec.variant}-{spec.task}-mft{spec.m_ft}-{spec.placement}-s{seed}", wall)
        log.info("%s %s M_ft=%d seed=%d EM=%.3f", spec.variant, spec.task, spec.m_ft, seed, em)
        return MetricsRow(
            spec.variant, spec.task, spec.m_ft, spec.m_inf, spec.placement, seed, em, acc,
            self.cfg["train.steps"], wall if self.cfg["run.timing"] else None,
        )


# ---------------------------------------------------------------------------
# experiments


@dataclass
class MatrixResult:
    rows: list[MetricsRow]
    summary: str
    pretrain_digests: dict[str, str]
    cell_digests: dict[tuple[str, str, int], str]


def run_variant_matrix(lab: Lab, tasks: Sequence[str] | None = None, seeds: Sequence[int] | None = None, train_missing: bool = False) -> MatrixResult:
    """Finetune and evaluate all four variants on every task for every seed.

    Each pretraining checkpoint is produced once and shared by every cell
    that depends on it; only finetuning differs across seeds.
    """
    tasks = list(tasks or lab.cfg["task.kinds"])
    seeds = list(seeds if seeds is not None else lab.cfg["train.seeds"])
    digests = {}
    for mode in ("standard", "pause"):
        if not lab.pretrain_path(mode).exists():
            if not train_missing:
                raise MissingCheckpointError(
                    f"no {mode} pretraining checkpoint at {lab.pretrain_path(mode)}; run "
                    f"`pause-lab pretrain --config <file> --mode {mode} --run.dir {lab.run_dir}` "
                    "or pass --train-missing"
                )
            lab.pretrain(mode)
        digests[mode] = file_digest(lab.pretrain_path(mode))
    rows, cell_digests = [], {}
    for task in tasks:
        for variant in VARIANTS:
            spec = lab.variant_spec(variant, task)
            for seed in seeds:
                rows.append(lab.run_cell(spec, seed, expected_digest=digests[spec.pretrain_mode]))
                cell_digests[(variant, task, seed)] = digests[spec.pretrain_mode]
    for mode, d in digests.items():
        if file_digest(lab.pretrain_path(mode)) != d:
            raise RuntimeError(f"{mode} pretraining checkpoint was modified during the matrix")
    return MatrixResult(rows, summary_text(rows, lab.cfg["report.digits"]), digests, cell_digests)


@dataclass
class SweepPoint:
    m: int
    seed: int | None
    em: float | None  # None: skipped (sequence too long)


def _points_csv(name: str, points: Sequence[SweepPoint], with_seed: bool) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([name, "seed", "EM"] if with_seed else [name, "EM"])
    for p in points:
        em = "skipped" if p.em is None else repr(float(p.em))
        w.writerow([p.m, p.seed, em] if with_seed else [p.m, em])
    return buf.getvalue()


def _fits(lab: Lab, task: str, m: int, split: str = "train") -> bool:
    longest = max(len(lab.vocab.encode(p)) + len(lab.vocab.encode(t)) for p, t in lab.raw_examples(task, split))
    limit = lab.model_config.max_positions
    # finetuning feeds prefix + pauses + target (eos excluded); decoding may reach the eos position
    return longest + m + 1 <= limit


@dataclass
class SweepResult:
    rows: list[MetricsRow]
    points: list[SweepPoint]
    csv_text: str
    summary: str


def sweep_mft(lab: Lab, variant: str, task: str, grid: Sequence[int], seeds: Sequence[int] | None = None) -> SweepResult:
    """Finetune and evaluate at each M_ft (with M_inf = M_ft)."""
    grid = list(grid)
    if not grid:
        raise UsageError("M_ft grid is empty")
    if any(m < 0 for m in grid):
        raise UsageError("M_ft values must be non-negative")
    seeds = list(seeds if seeds is not None else lab.cfg["train.seeds"])
    rows, points = [], []
    for m in grid:
        spec = VariantSpec(variant, task, m, m, lab.cfg["pause.placement"], tuple(seeds))
        for seed in seeds:
            if not _fits(lab, task, m):
                warnings.warn(f"M_ft={m} overflows max_positions; skipped", SweepSkipWarning, stacklevel=2)
                points.append(SweepPoint(m, seed, None))
                continue
            row = lab.run_cell(spec, seed)
            rows.append(row)
            points.append(SweepPoint(m, seed, row.EM))
    digits = lab.cfg["report.digits"]
    body, best = [], None
    for m in grid:
        ems = [p.em for p in points if p.m == m and p.em is not None]
        if not ems:
            body.append([str(m), "0", "skipped"])
            continue
        body.append([str(m), str(len(ems)), format_mean_std(ems, digits)])
        if best is None or mean_std(ems)[0] > best[1]:
            best = (m, mean_std(ems)[0])
    text = render_table(["M_ft", "n", "EM"], body)
    if best is not None:
        text += f"best-of-grid: M_ft={best[0]} mean EM={best[1]:.{digits}f}\n"
    return SweepResult(rows, points, _points_csv("M_ft", points, True), text)


def default_minf_grid(m_ft: int) -> list[int]:
    return sorted({0, m_ft, *(int(round(m_ft * f)) for f in (0.2, 0.5, 1.0, 1.5, 2.0, 2.5))})


def sweep_minf(lab: Lab, checkpoint: str | Path, task: str, m_ft: int, grid: Sequence[int] | None = None, placement: str = "append") -> SweepResult:
    """Evaluate one finetuned checkpoint at several inference delays; no training."""
    grid = sorted(set(grid or default_minf_grid(m_ft)) | {0, m_ft})
    before = file_digest(checkpoint)
    model, ckpt = lab.load_model(checkpoint)
    variant = ckpt.header.get("variant", "unknown")
    seed = int(ckpt.header.get("seed", 0))
    rows, points = [], []
    for m in grid:
        if not _fits(lab, task, m, "test"):
            warnings.warn(f"M_inf={m} overflows max_positions; skipped", SweepSkipWarning, stacklevel=2)
            points.append(SweepPoint(m, None, None))
            continue
        em, acc = lab.evaluate(model, task, m, placement)
        points.append(SweepPoint(m, None, em))
        rows.append(MetricsRow(variant, task, m_ft, m, placement, seed, em, acc, 0, None))
    if file_digest(checkpoint) != before:
        raise RuntimeError("checkpoint changed during an evaluation-only sweep")
    body = [[str(p.m), "skipped" if p.em is None else f"{p.em:.{lab.cfg['report.digits']}f}"] for p in points]
    return SweepResult(rows, points, _points_csv("M_inf", points, False), render_table(["M_inf", "EM"], body))


@dataclass
class PlacementRow:
    seed: int
    append: float
    prepend: float

    @property
    def delta(self) -> float:
        return self.append - self.prepend


@dataclass
class PlacementReport:
    rows: list[PlacementRow]
    metrics: list[MetricsRow]

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["seed", "append", "prepend", "delta"])
        for r in self.rows:
            w.writerow([r.seed, repr(r.append), repr(r.prepend), repr(r.delta)])
        return buf.getvalue()

    def summary(self, digits: int = 2) -> str:
        body = [[str(r.seed), f"{r.append:.{digits}f}", f"{r.prepend:.{digits}f}", f"{r.delta:+.{digits}f}"] for r in self.rows]
        text = render_table(["seed", "append", "prepend", "delta"], body)
        return text + (
            f"mean: append {format_mean_std([r.append for r in self.rows], digits)}, "
            f"prepend {format_mean_std([r.prepend for r in self.rows], digits)}, "
            f"paired delta {format_mean_std([r.delta for r in self.rows], digits)}\n"
        )


def compare_placement(lab: Lab, variant: str, task: str, m: int, seeds: Sequence[int] | None = None) -> PlacementReport:
    """Same finetune + eval per seed with pauses appended vs prepended."""
    seeds = list(seeds if seeds is not None else lab.cfg["train.seeds"])
    out, metrics = [], []
    for seed in seeds:
        ems = {}
        for placement in ("append", "prepend"):
            spec = VariantSpec(variant, task, m, m, placement, tuple(seeds))
            row = lab.run_cell(spec, seed)
            metrics.append(row)
            ems[placement] = row.EM
        out.append(PlacementRow(seed, ems["append"], ems["prepend"]))
    return PlacementReport(out, metrics)


def filler_baseline(lab: Lab, checkpoint: str | Path, task: str, n_fillers: int, filler: str = ".") -> MetricsRow:
    """Delay a standard-trained model with in-vocabulary filler characters at inference only."""
    if filler == PAUSE:
        raise UsageError("the filler baseline needs an in-vocabulary character, not <pause>")
    filler_id = lab.vocab.id_of(filler)
    if filler_id == lab.vocab.pause_id:
        raise UsageError("filler resolves to the pause id")
    if n_fillers < 0:
        raise UsageError("n_fillers must be non-negative")
    before = file_digest(checkpoint)
    model, ckpt = lab.load_model(checkpoint)
    variant = ckpt.header.get("variant")
    if variant is not None and variant != "StdPT_StdFT":
        raise UsageError(f"filler baseline expects a StdPT_StdFT model, checkpoint is {variant}")
    em, acc = lab.evaluate(model, task, n_fillers, "append", delay_id=filler_id)
    if file_digest(checkpoint) != before:
        raise RuntimeError("checkpoint changed during the filler baseline")
    return MetricsRow("StdPT_StdFT", task, 0, n_fillers, f"filler{filler}", int(ckpt.header.get("seed", 0)), em, acc, 0, None)
