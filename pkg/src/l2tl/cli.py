"""Config-driven experiment runner.

Config files are INI-style (parsed with :mod:`configparser`)::

    [experiment]
    name = synthetic-ordering
    strategies = l2tl, finetune, scratch
    seeds = 0, 1, 2
    output_dir = runs

    [dataset]
    kind = synthetic            ; or "idx"
    num_source_classes = 10     ; any SyntheticSpec field

    [model]
    encoder = mlp
    hidden = 64, 32

    [train]                     ; TrainConfig fields shared by every strategy
    iterations = 3000

    [train.finetune]            ; per-strategy overrides
    finetune_source_steps = 1500

For ``kind = idx`` the dataset section takes ``source_images``,
``source_labels``, ``target_images``, ``target_labels`` (paths relative to
the config file), optional ``target_test_images``/``target_test_labels``,
``per_class`` (target training examples per class), ``val_per_class``,
``test_per_class`` and ``source_per_class``.

The output root may be overridden with the ``L2TL_OUTPUT_ROOT`` environment
variable. Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import math
import os
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .datasets import (IdxFormatError, SplitSet, SyntheticSpec, _read_idx,
                       load_idx, make_synthetic_transfer_pair, split, subsample_indices)
from .model import ModelConfig, save_model
from .policy import load_policy, rank_source_classes, save_policy, write_ranking_csv
from .trainer import (STRATEGIES, TrainConfig, TrainingError, TrainTrace, read_trace_csv,
                      train)

OUTPUT_ROOT_ENV = "L2TL_OUTPUT_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class ConfigError(ValueError):
    """Invalid experiment config; carries the offending section/key/line when known."""

    def __init__(self, message: str, path=None, section: str | None = None,
                 key: str | None = None, line: int | None = None):
        where = []
        if path is not None:
            where.append(f"{path}" + (f":{line}" if line else ""))
        if section:
            where.append(f"[{section}]" + (f" {key}" if key else ""))
        super().__init__(f"{' '.join(where)}: {message}" if where else message)
        self.path, self.section, self.key, self.line = path, section, key, line


@dataclass(frozen=True)
class IdxSpec:
    source_images: Path
    source_labels: Path
    target_images: Path
    target_labels: Path
    target_test_images: Path | None = None
    target_test_labels: Path | None = None
    per_class: int = 60
    val_per_class: int = 20
    test_per_class: int | None = None
    source_per_class: int | None = None
    source_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    strategies: tuple[str, ...]
    seeds: tuple[int, ...]
    output_dir: Path
    dataset: SyntheticSpec | IdxSpec
    dataset_seed: int | None
    model: dict
    train: dict[str, TrainConfig]
    workers: int = 1
    source_path: Path | None = None


@dataclass(frozen=True)
class RunResult:
    strategy: str
    seed: int
    final_test_metric: float
    best_val_metric: float
    trace_path: Path
    checkpoint_path: Path
    policy_path: Path | None = None
    ranking_path: Path | None = None


@dataclass
class RunReport:
    config: ExperimentConfig
    runs: list[RunResult] = field(default_factory=list)

    def aggregate(self) -> list[tuple[str, float, float, dict[int, float]]]:
        """``(strategy, mean, sample stddev, {seed: value})`` in config order."""
        rows = []
        for s in self.config.strategies:
            per_seed = {r.seed: r.final_test_metric for r in self.runs if r.strategy == s}
            if not per_seed:
                continue
            values = np.array(list(per_seed.values()))
            std = float(values.std(ddof=1)) if values.size > 1 else 0.0
            rows.append((s, float(values.mean()), std, per_seed))
        return rows


# config parsing -------------------------------------------------------------------

def _line_index(text: str) -> dict[tuple[str, str | None], int]:
    """Line numbers of section headers and keys, keyed by ``(section, key)``."""
    index: dict[tuple[str, str | None], int] = {}
    section = None
    for n, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        m = re.match(r"\[([^\]]+)\]", stripped)
        if m:
            section = m.group(1).strip()
            index[(section, None)] = n
            continue
        m = re.match(r"([^=:;#\s][^=:]*?)\s*[=:]", stripped)
        if m and section is not None:
            index[(section, m.group(1).strip().lower())] = n
    return index


class _Reader:
    def __init__(self, path: Path):
        self.path = path
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        self.lines = _line_index(text)
        self.parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"),
                                                interpolation=None)
        try:
            self.parser.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigError(str(exc).splitlines()[0], path,
                              line=getattr(exc, "lineno", None)) from exc

    def error(self, message, section, key=None) -> ConfigError:
        line = self.lines.get((section, key)) or self.lines.get((section, None))
        return ConfigError(message, self.path, section, key, line)

    def section(self, name: str, required: bool = True) -> dict[str, str]:
        if not self.parser.has_section(name):
            if required:
                raise ConfigError(f"missing section [{name}]", self.path)
            return {}
        return dict(self.parser.items(name))

    def convert(self, section: str, key: str, raw: str, kind):
        try:
            return _convert(raw, kind)
        except ValueError as exc:
            raise self.error(f"bad value {raw!r}: {exc}", section, key) from exc


def _convert(raw: str, kind):
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError("expected a boolean")
    if kind is int:
        return int(raw)
    if kind is float:
        value = float(raw)
        if not math.isfinite(value):
            raise ValueError("expected a finite number")
        return value
    if kind == "ints":
        return tuple(int(v) for v in raw.split(",") if v.strip())
    if kind == "floats":
        return tuple(float(v) for v in raw.split(",") if v.strip())
    if kind == "names":
        return tuple(v.strip() for v in raw.split(",") if v.strip())
    return raw


_FIELD_KINDS = {"int": int, "float": float, "bool": bool, "str": str,
                "tuple[int, ...]": "ints"}


def _typed_fields(cls, skip=()) -> dict[str, object]:
    return {f.name: _FIELD_KINDS.get(str(f.type), str) for f in fields(cls) if f.name not in skip}


def _build(reader: _Reader, section: str, values: dict[str, str], cls, skip=()):
    kinds = _typed_fields(cls, skip)
    out = {}
    for key, raw in values.items():
        if key not in kinds:
            raise reader.error(f"unknown key (allowed: {', '.join(sorted(kinds))})", section, key)
        out[key] = reader.convert(section, key, raw, kinds[key])
    return out


_IDX_REQUIRED = ("source_images", "source_labels", "target_images", "target_labels")
_IDX_PATHS = _IDX_REQUIRED + ("target_test_images", "target_test_labels")
_IDX_INTS = ("per_class", "val_per_class", "test_per_class", "source_per_class", "seed")


def _dataset(reader: _Reader, values: dict[str, str]):
    section = "dataset"
    kind = values.pop("kind", "synthetic").strip()
    seed = None
    if kind == "synthetic":
        built = _build(reader, section, values, SyntheticSpec)
        seed = built.pop("seed", None)
        try:
            return SyntheticSpec(**built), seed
        except ValueError as exc:
            raise reader.error(str(exc), section) from exc
    if kind != "idx":
        raise reader.error(f"kind must be 'synthetic' or 'idx', got {kind!r}", section, "kind")
    out: dict = {}
    base = reader.path.parent
    for key, raw in values.items():
        if key in _IDX_PATHS:
            path = Path(raw.strip())
            path = path if path.is_absolute() else base / path
            if not path.is_file():
                raise reader.error(f"file not found: {path}", section, key)
            out[key] = path
        elif key in _IDX_INTS:
            out[key] = reader.convert(section, key, raw, int)
            if out[key] < (0 if key == "seed" else 1):
                raise reader.error("must be positive", section, key)
        elif key == "source_fractions":
            out[key] = reader.convert(section, key, raw, "floats")
            if len(out[key]) != 3:
                raise reader.error("needs three comma-separated fractions", section, key)
        else:
            raise reader.error("unknown key for an idx dataset", section, key)
    missing = [k for k in _IDX_REQUIRED if k not in out]
    if missing:
        raise reader.error(f"idx dataset needs {', '.join(missing)}", section)
    if ("target_test_images" in out) != ("target_test_labels" in out):
        raise reader.error("target_test_images and target_test_labels go together", section)
    # header-level checks only: shapes must agree before any training starts
    shapes = {}
    for key in _IDX_PATHS:
        if key in out:
            try:
                shapes[key] = _read_idx(out[key]).shape
            except IdxFormatError as exc:
                raise reader.error(str(exc), section, key) from exc
    image_shapes = {shapes[k][1:] for k in ("source_images", "target_images", "target_test_images")
                    if k in shapes}
    if len(image_shapes) != 1:
        raise reader.error(f"source and target images differ in shape: {sorted(image_shapes)}",
                           section)
    seed = out.pop("seed", None)
    return IdxSpec(**out), seed


def load_config(path) -> ExperimentConfig:
    """Parse and validate ``path``; raises :class:`ConfigError`."""
    path = Path(path)
    reader = _Reader(path)
    known = {"experiment", "dataset", "model", "train"} | {f"train.{s}" for s in STRATEGIES}
    for name in reader.parser.sections():
        if name not in known:
            raise reader.error(f"unknown section (allowed: {', '.join(sorted(known))})", name)

    exp = reader.section("experiment")
    allowed = {"name", "strategies", "seeds", "output_dir", "workers"}
    for key in exp:
        if key not in allowed:
            raise reader.error(f"unknown key (allowed: {', '.join(sorted(allowed))})",
                               "experiment", key)
    strategies = reader.convert("experiment", "strategies", exp.get("strategies", ""), "names")
    if not strategies:
        raise reader.error("at least one strategy is required", "experiment", "strategies")
    for s in strategies:
        if s not in STRATEGIES:
            raise reader.error(f"unknown strategy {s!r} (allowed: {', '.join(STRATEGIES)})",
                               "experiment", "strategies")
    if len(set(strategies)) != len(strategies):
        raise reader.error("duplicate strategy", "experiment", "strategies")
    seeds = reader.convert("experiment", "seeds", exp.get("seeds", ""), "ints")
    if not seeds:
        raise reader.error("at least one seed is required", "experiment", "seeds")
    if len(set(seeds)) != len(seeds) or min(seeds) < 0:
        raise reader.error("seeds must be distinct non-negative integers", "experiment", "seeds")
    workers = reader.convert("experiment", "workers", exp.get("workers", "1"), int)
    if workers < 1:
        raise reader.error("workers must be positive", "experiment", "workers")
    name = exp.get("name", path.stem).strip()
    output_dir = Path(exp.get("output_dir", "runs").strip())

    dataset, dataset_seed = _dataset(reader, reader.section("dataset"))

    model_values = reader.section("model", required=False)
    model = _build(reader, "model", model_values, ModelConfig,
                   skip=("input_shape", "num_source_classes", "num_target_classes", "init_seed"))
    if model.get("encoder", "mlp") not in ("mlp", "lenet"):
        raise reader.error("encoder must be 'mlp' or 'lenet'", "model", "encoder")

    shared = _build(reader, "train", reader.section("train", required=False), TrainConfig,
                    skip=("strategy", "seed"))
    train_cfgs = {}
    for s in strategies:
        sec = f"train.{s}"
        over = _build(reader, sec, reader.section(sec, required=False), TrainConfig,
                      skip=("strategy", "seed"))
        try:
            train_cfgs[s] = TrainConfig(strategy=s, **{**shared, **over})
        except ValueError as exc:
            raise reader.error(str(exc), sec if over else "train") from exc
        if train_cfgs[s].reward_metric == "auc" and _num_target_classes(dataset) != 2:
            raise reader.error("auc reward needs a 2-class target", sec if over else "train",
                               "reward_metric")
    return ExperimentConfig(name, strategies, seeds, output_dir, dataset, dataset_seed, model,
                            train_cfgs, workers, path)


def _num_target_classes(dataset) -> int | None:
    if isinstance(dataset, SyntheticSpec):
        return dataset.num_target_classes
    return None


# running -------------------------------------------------------------------------------

def resolve_output_dir(config: ExperimentConfig) -> Path:
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root:
        return Path(root) / config.name
    return config.output_dir / config.name


def build_datasets(config: ExperimentConfig, seed: int):
    """Source and target splits for one run; the dataset seed defaults to the run seed."""
    data_seed = seed if config.dataset_seed is None else config.dataset_seed
    spec = config.dataset
    if isinstance(spec, SyntheticSpec):
        source, target, _ = make_synthetic_transfer_pair(replace(spec, seed=data_seed))
        return source, target
    source_all = load_idx(spec.source_images, spec.source_labels, name="source")
    if spec.source_per_class:
        source_all = source_all.subset(subsample_indices(source_all, spec.source_per_class, data_seed))
    source = split(source_all, spec.source_fractions, data_seed)
    target_all = load_idx(spec.target_images, spec.target_labels, name="target")
    train_idx = subsample_indices(target_all, spec.per_class, data_seed + 1)
    val_idx = subsample_indices(target_all, spec.val_per_class, data_seed + 2, exclude=train_idx)
    if spec.target_test_images is not None:
        test = load_idx(spec.target_test_images, spec.target_test_labels,
                        target_all.num_classes, "target/test")
    else:
        rest = np.setdiff1d(np.arange(len(target_all)), np.concatenate([train_idx, val_idx]))
        test = target_all.subset(rest, "target/test")
    if spec.test_per_class:
        test = test.subset(subsample_indices(test, spec.test_per_class, data_seed + 3))
    target = SplitSet(target_all.subset(train_idx, "target/train"),
                      target_all.subset(val_idx, "target/val"), test)
    return source, target


def _model_config(config: ExperimentConfig, source: SplitSet, target: SplitSet,
                  seed: int) -> ModelConfig:
    return ModelConfig(input_shape=target.train.feature_shape,
                       num_source_classes=source.num_classes,
                       num_target_classes=target.num_classes,
                       init_seed=seed, **config.model)


def best_val_metric(trace: TrainTrace, window: int) -> float:
    """Best mean reward over consecutive ``window``-iteration blocks."""
    rewards = trace.column("reward")
    if rewards.size == 0:
        return math.nan
    blocks = [rewards[i:i + window].mean() for i in range(0, rewards.size, window)]
    return float(max(blocks))


def run_single(config: ExperimentConfig, strategy: str, seed: int, out_dir: Path) -> RunResult:
    """Train one (strategy, seed) pair and write its files under ``out_dir``."""
    source, target = build_datasets(config, seed)
    tcfg = replace(config.train[strategy], seed=seed)
    result = train(tcfg, source, target, _model_config(config, source, target, seed))
    run_dir = out_dir / strategy / f"seed{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    trace_path = run_dir / "trace.csv"
    result.trace.write_csv(trace_path)
    ckpt = run_dir / "model.ckpt"
    save_model(ckpt, result.model)
    policy_path = ranking_path = None
    if result.policy is not None:
        policy_path = run_dir / "policy.ckpt"
        save_policy(policy_path, result.policy)
    if strategy == "l2tl":
        ranking_path = run_dir / "ranking.csv"
        write_ranking_csv(ranking_path, rank_source_classes(result.policy, 10000,
                                                            np.random.default_rng(seed)))
    if result.replay_trace is not None:
        result.replay_trace.write_csv(run_dir / "replay_trace.csv")
        final = result.replay_trace.evals()[-1][1]
    else:
        evals = result.trace.evals()
        final = evals[-1][1] if evals else math.nan
    return RunResult(strategy, seed, float(final),
                     best_val_metric(result.trace, tcfg.eval_every),
                     trace_path, ckpt, policy_path, ranking_path)


def _run_job(args):
    config, strategy, seed, out_dir = args
    return run_single(config, strategy, seed, out_dir)


def run_experiment(config_path, log=print) -> RunReport:
    """Validate, run every (strategy, seed) pair, and write all reports."""
    config = config_path if isinstance(config_path, ExperimentConfig) else load_config(config_path)
    for seed in config.seeds:
        try:
            build_datasets(config, seed)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"dataset for seed {seed}: {exc}", config.source_path, "dataset") from exc
    out_dir = resolve_output_dir(config)
    jobs = [(config, s, seed, out_dir) for s in config.strategies for seed in config.seeds]
    report = RunReport(config)
    out_dir.mkdir(parents=True, exist_ok=True)
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            report.runs = list(pool.map(_run_job, jobs))
    else:
        for job in jobs:
            log(f"running {job[1]} seed={job[2]}")
            report.runs.append(_run_job(job))
    emit_comparison_table(report, out_dir)
    traces = {f"{r.strategy}/seed{r.seed}": read_trace_csv(r.trace_path) for r in report.runs}
    emit_plots(traces, out_dir)
    _write_summary(report, out_dir)
    return report


# reports ------------------------------------------------------------------------------

def _fmt(v: float) -> str:
    return "" if v is None or math.isnan(v) else f"{v:.6f}"


def comparison_rows(report: RunReport) -> tuple[list[str], list[list[str]]]:
    seeds = list(report.config.seeds)
    header = ["strategy", "mean", "stddev"] + [f"seed_{s}" for s in seeds]
    rows = []
    for strategy, mean, std, per_seed in report.aggregate():
        rows.append([strategy, _fmt(mean), _fmt(std)] + [_fmt(per_seed.get(s, math.nan))
                                                          for s in seeds])
    return header, rows


def aligned_table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                       for i, (c, w) in enumerate(zip(r, widths))).rstrip()
             for r in [header, *rows]]
    return "\n".join(lines) + "\n"


def emit_comparison_table(report: RunReport, out_dir) -> tuple[Path, Path]:
    """Write ``comparison.csv`` and ``comparison.txt``: one row per strategy."""
    if not report.runs:
        raise ValueError("comparison table needs at least one run")
    out_dir = Path(out_dir)
    header, rows = comparison_rows(report)
    csv_path, txt_path = out_dir / "comparison.csv", out_dir / "comparison.txt"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    txt_path.write_text(aligned_table(header, rows))
    return csv_path, txt_path


def _write_summary(report: RunReport, out_dir: Path) -> Path:
    stamp = datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    header, rows = comparison_rows(report)
    lines = [f"# generated {stamp}", f"experiment: {report.config.name}", "",
             "final target test metric", aligned_table(header, rows).rstrip(), "", "runs"]
    for r in report.runs:
        lines.append(f"  {r.strategy} seed={r.seed} test={_fmt(r.final_test_metric)} "
                     f"best_val={_fmt(r.best_val_metric)} trace={r.trace_path.relative_to(out_dir)}")
        if r.ranking_path is not None:
            with open(r.ranking_path, newline="") as fh:
                top = [row["class_id"] for row in csv.DictReader(fh)][:5]
            lines.append(f"    top source classes: {', '.join(top)}")
    path = out_dir / "summary.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


# SVG plots -------------------------------------------------------------------------------

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
           "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def line_plot_svg(series: dict[str, tuple[np.ndarray, np.ndarray]], title: str,
                  xlabel: str, ylabel: str, width: int = 640, height: int = 400) -> str:
    """A self-contained SVG line chart with one polyline per series."""
    left, right, top, bottom = 60, 150, 30, 45
    pw, ph = width - left - right, height - top - bottom
    finite = [(x[np.isfinite(y)], y[np.isfinite(y)]) for x, y in series.values()]
    xs = np.concatenate([x for x, _ in finite] or [np.zeros(1)])
    ys = np.concatenate([y for _, y in finite] or [np.zeros(1)])
    if xs.size == 0:
        xs, ys = np.zeros(1), np.zeros(1)
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + (1.0 - (y - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<text x="{left + pw / 2:.1f}" y="18" text-anchor="middle" font-size="14">'
           f'{escape(title)}</text>',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for k in range(5):
        fx, fy = x0 + (x1 - x0) * k / 4, y0 + (y1 - y0) * k / 4
        out.append(f'<text x="{px(fx):.1f}" y="{top + ph + 15}" text-anchor="middle" '
                   f'font-size="10">{fx:.4g}</text>')
        out.append(f'<text x="{left - 5}" y="{py(fy) + 3:.1f}" text-anchor="end" '
                   f'font-size="10">{fy:.3g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle" '
               f'font-size="12">{escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 14 {top + ph / 2:.1f})">{escape(ylabel)}</text>')
    for n, (label, (x, y)) in enumerate(series.items()):
        color = _COLORS[n % len(_COLORS)]
        ok = np.isfinite(y)
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x[ok], y[ok]))
        out.append(f'<polyline class="series" data-label="{escape(label, {chr(34): "&quot;"})}" '
                   f'data-points="{int(ok.sum())}" fill="none" stroke="{color}" '
                   f'stroke-width="1.2" points="{pts}"/>')
        ly = top + 12 + 16 * n
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 30}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 35}" y="{ly + 4}" font-size="11">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_plots(traces: dict[str, TrainTrace], out_dir) -> tuple[Path, Path]:
    """Write ``reward.svg`` (reward vs iteration) and ``eval.svg`` (eval metric vs iteration)."""
    if not traces:
        raise ValueError("emit_plots needs at least one trace")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reward_series, eval_series = {}, {}
    for label, trace in traces.items():
        reward_series[label] = (trace.column("iteration"), trace.column("reward"))
        ev = trace.evals()
        eval_series[label] = (np.array([i for i, _ in ev], dtype=np.float64),
                              np.array([v for _, v in ev], dtype=np.float64))
    reward_path, eval_path = out_dir / "reward.svg", out_dir / "eval.svg"
    reward_path.write_text(line_plot_svg(reward_series, "validation reward", "iteration", "reward"))
    eval_path.write_text(line_plot_svg(eval_series, "target test metric", "iteration", "metric"))
    return reward_path, eval_path


# command line ----------------------------------------------------------------------------

def _cmd_run(args) -> int:
    try:
        report = run_experiment(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print((resolve_output_dir(report.config) / "comparison.txt").read_text(), end="")
    return EXIT_OK


def _cmd_validate(args) -> int:
    try:
        config = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"ok: {len(config.strategies)} strategies x {len(config.seeds)} seeds -> "
          f"{resolve_output_dir(config)}")
    return EXIT_OK


def _cmd_rank(args) -> int:
    try:
        policy = load_policy(args.policy)
    except (OSError, ValueError) as exc:
        print(f"cannot load policy: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    ranking = rank_source_classes(policy, args.samples, np.random.default_rng(args.seed))
    if args.output:
        write_ranking_csv(args.output, ranking)
    for rank, (cls, weight) in enumerate(ranking, start=1):
        print(f"{rank:3d}  class {cls:4d}  mean weight {weight:.4f}")
    return EXIT_OK


def _cmd_plot(args) -> int:
    traces = {}
    for p in args.traces:
        path = Path(p)
        label = f"{path.parent.parent.name}/{path.parent.name}" if path.parent.name else path.stem
        try:
            traces[label if label not in traces else str(path)] = read_trace_csv(path)
        except (OSError, ValueError, KeyError) as exc:
            print(f"cannot read trace {path}: {exc}", file=sys.stderr)
            return EXIT_CONFIG
    for written in emit_plots(traces, args.output_dir):
        print(written)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="l2tl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run every strategy and seed of an experiment config")
    p.add_argument("config")
    p.set_defaults(func=_cmd_run)
    p = sub.add_parser("validate", help="check a config without running it")
    p.add_argument("config")
    p.set_defaults(func=_cmd_validate)
    p = sub.add_parser("rank", help="rank source classes by a trained policy")
    p.add_argument("policy")
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", help="also write the ranking as CSV")
    p.set_defaults(func=_cmd_rank)
    p = sub.add_parser("plot", help="plot reward and eval curves from trace CSVs")
    p.add_argument("traces", nargs="+")
    p.add_argument("--output-dir", default=".")
    p.set_defaults(func=_cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
