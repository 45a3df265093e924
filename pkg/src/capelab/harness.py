"""Experiment harness: full pipeline, alpha sweeps, baselines, CSV/SVG reports.

The pipeline trains a base summarizer on the full training split, selects
clean and noisy subsets with each factual metric, fine-tunes experts and
anti-experts, and for every configured expert/anti-expert pairing sweeps the
mixing coefficient on the validation split, applies the 1%-drop selection
rule, and scores the chosen merge on validation and test. Every output byte
is a pure function of the config.
"""

from __future__ import annotations

import json
import logging
import os
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

from .checkpoint import Checkpoint, average_merge, cape_merge, save
from .corpus import CorpusConfig, Example, generate, split_examples, write_jsonl, write_split_corpus
from .metrics import SCORE_COLUMNS, ScoreReport, score_corpus, score_report_csv_row
from .model import ModelParams, TrainConfig, decode_corpus, finetune, train
from .plots import render_alpha_panels
from .rng import Stream, derive_seed
from .selection import SelectionResult, SelectionThresholds, select, write_selection_json

logger = logging.getLogger(__name__)

DEFAULT_ALPHA_GRID = (0.2, 0.4, 0.6, 0.8, 1.0)
PAIRINGS = ("dd", "pp", "dp", "pd")

# Pairing code: first letter picks the expert's selection metric, second the
# anti-expert's ("d" fact-arc entailment, "p" entity precision).
_METRIC_OF = {"d": "dae", "p": "ep"}


@dataclass(frozen=True)
class PipelineConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(seed=17))
    finetune_epochs: int = 1
    thresholds: SelectionThresholds = field(default_factory=SelectionThresholds)
    alpha_grid: tuple[float, ...] = DEFAULT_ALPHA_GRID
    constraint_drop: float = 0.01
    pairings: tuple[str, ...] = PAIRINGS
    max_len: int = 40
    decode_strategy: str = "greedy"
    compare_pairing: str = "pp"

    def __post_init__(self):
        object.__setattr__(self, "alpha_grid", tuple(float(a) for a in self.alpha_grid))
        object.__setattr__(self, "pairings", tuple(self.pairings))
        if not self.alpha_grid or any(a <= 0 for a in self.alpha_grid):
            raise ValueError("alpha_grid must be nonempty and strictly positive")
        if list(self.alpha_grid) != sorted(set(self.alpha_grid)):
            raise ValueError("alpha_grid must be strictly increasing")
        for p in self.pairings + (self.compare_pairing,):
            if len(p) != 2 or p[0] not in _METRIC_OF or p[1] not in _METRIC_OF:
                raise ValueError(f"unknown pairing {p!r} (expected two of 'd'/'p')")
        if not 0 <= self.constraint_drop <= 1:
            raise ValueError("constraint_drop must be in [0, 1]")
        if self.finetune_epochs < 0:
            raise ValueError("finetune_epochs must be nonnegative")

    def finetune_config(self, tag: str) -> TrainConfig:
        return replace(
            self.train,
            epochs=self.finetune_epochs,
            seed=derive_seed(self.train.seed, "finetune", tag),
        )

    def to_json_dict(self) -> dict:
        return {
            "corpus": self.corpus.to_json_dict(),
            "train": self.train.to_json_dict(),
            "finetune_epochs": self.finetune_epochs,
            "thresholds": self.thresholds.to_json_dict(),
            "alpha_grid": list(self.alpha_grid),
            "constraint_drop": self.constraint_drop,
            "pairings": list(self.pairings),
            "max_len": self.max_len,
            "decode_strategy": self.decode_strategy,
            "compare_pairing": self.compare_pairing,
        }

    @classmethod
    def from_json_dict(cls, obj: Mapping) -> "PipelineConfig":
        kwargs = dict(obj)
        if "corpus" in kwargs:
            kwargs["corpus"] = CorpusConfig.from_json_dict(kwargs["corpus"])
        if "train" in kwargs:
            kwargs["train"] = TrainConfig.from_json_dict(kwargs["train"])
        if "thresholds" in kwargs:
            kwargs["thresholds"] = SelectionThresholds.from_json_dict(kwargs["thresholds"])
        if "alpha_grid" in kwargs:
            kwargs["alpha_grid"] = tuple(kwargs["alpha_grid"])
        if "pairings" in kwargs:
            kwargs["pairings"] = tuple(kwargs["pairings"])
        return cls(**kwargs)

    @classmethod
    def from_json_file(cls, path) -> "PipelineConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


@contextmanager
def output_lock(out_dir):
    """Exclusive lock file guarding one output directory per invocation."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / "LOCK"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ValueError(
            f"output directory {out_dir} is in use (stale? remove {lock})"
        ) from None
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


@dataclass(frozen=True)
class SweepResult:
    """Scores per mixing coefficient for one merge strategy, base row at 0."""

    label: str
    rows: tuple[tuple[float, ScoreReport], ...]

    def __post_init__(self):
        alphas = [a for a, _ in self.rows]
        if alphas != sorted(set(alphas)):
            raise ValueError("sweep alphas must be strictly increasing")
        if not alphas or alphas[0] != 0.0:
            raise ValueError("sweep must include the base row at alpha 0")

    @property
    def alphas(self) -> tuple[float, ...]:
        return tuple(a for a, _ in self.rows)

    def report_at(self, alpha: float) -> ScoreReport:
        for a, rep in self.rows:
            if a == alpha:
                return rep
        raise KeyError(f"no sweep row at alpha {alpha}")

    def aggregate_table(self) -> list[tuple[float, dict[str, float | None]]]:
        return [(a, rep.aggregates()) for a, rep in self.rows]


def sweep_alpha(
    base: Checkpoint,
    expert: Checkpoint,
    anti: Checkpoint,
    alphas: Sequence[float],
    examples: Sequence[Example],
    max_len: int = 40,
    strategy: str = "greedy",
    label: str = "cape",
) -> SweepResult:
    """Merge at each alpha, decode the corpus, and score; alpha 0 is the base."""
    alphas = sorted(set(float(a) for a in alphas) - {0.0})
    rows = [(0.0, _decode_and_score(base, examples, max_len, strategy))]
    for alpha in alphas:
        merged = cape_merge(base, expert, anti, alpha)
        rows.append((alpha, _decode_and_score(merged, examples, max_len, strategy)))
    return SweepResult(label, tuple(rows))


def _decode_and_score(
    ckpt: Checkpoint, examples: Sequence[Example], max_len: int, strategy: str
) -> ScoreReport:
    params = ModelParams.from_checkpoint(ckpt)
    decoded = decode_corpus(params, examples, max_len, strategy)
    return score_corpus(list(zip(examples, decoded)))


@dataclass(frozen=True)
class AlphaSelection:
    """Largest grid alpha that keeps R1 and entity recall near the base."""

    alpha: float
    fallback: bool
    constraint_drop: float
    base_r1: float | None
    base_er: float | None
    chosen_r1: float | None
    chosen_er: float | None
    trajectory: tuple[tuple[float, dict[str, float | None]], ...]

    def to_json_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "fallback_to_base": self.fallback,
            "constraint_drop": self.constraint_drop,
            "base": {"R1": self.base_r1, "E-R_ref": self.base_er},
            "chosen": {"R1": self.chosen_r1, "E-R_ref": self.chosen_er},
            "trajectory": [
                {"alpha": a, **{k: v for k, v in agg.items()}} for a, agg in self.trajectory
            ],
        }


def select_alpha(sweep: SweepResult, constraint_drop: float = 0.01) -> AlphaSelection:
    """Pick the largest alpha whose R1 and E-R_ref stay within the drop budget.

    Falls back to alpha 0 (flagged) when no grid row qualifies; never
    interpolates between grid points.
    """
    table = sweep.aggregate_table()
    base = table[0][1]
    base_r1, base_er = base["R1"], base["E-R_ref"]

    def qualifies(agg: dict) -> bool:
        r1, er = agg["R1"], agg["E-R_ref"]
        if base_r1 is not None and (r1 is None or r1 < (1.0 - constraint_drop) * base_r1):
            return False
        if base_er is not None and (er is None or er < (1.0 - constraint_drop) * base_er):
            return False
        return True

    chosen = None
    for alpha, agg in table[1:]:
        if qualifies(agg):
            chosen = (alpha, agg)
    if chosen is None:
        alpha, agg = table[0]
        fallback = True
    else:
        (alpha, agg), fallback = chosen, False
    return AlphaSelection(
        alpha=alpha,
        fallback=fallback,
        constraint_drop=constraint_drop,
        base_r1=base_r1,
        base_er=base_er,
        chosen_r1=agg["R1"],
        chosen_er=agg["E-R_ref"],
        trajectory=tuple(table),
    )


def _fmt_alpha(alpha: float) -> str:
    return f"{alpha:g}"


def _fmt_value(value: float | None) -> str:
    return "" if value is None else f"{value:.6f}"


def write_sweep_csv(path, rows: Sequence[tuple[float, ScoreReport]]) -> None:
    """Sweep CSV with fixed column order; header-only when rows are empty."""
    lines = ["alpha," + ",".join(SCORE_COLUMNS)]
    for alpha, report in rows:
        agg = report.aggregates()
        lines.append(_fmt_alpha(alpha) + "," + ",".join(_fmt_value(agg[c]) for c in SCORE_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_modes_csv(path, mode_rows: Sequence[tuple[str, float | None, dict[str, float | None]]]) -> None:
    """Comparison CSV: mode label, alpha (empty for alpha-free baselines), metrics."""
    lines = ["mode,alpha," + ",".join(SCORE_COLUMNS)]
    for mode, alpha, agg in mode_rows:
        alpha_s = "" if alpha is None else _fmt_alpha(alpha)
        lines.append(f"{mode},{alpha_s}," + ",".join(_fmt_value(agg[c]) for c in SCORE_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _sweep_curve(sweep: SweepResult) -> tuple[list[float], dict[str, list[float | None]]]:
    table = sweep.aggregate_table()
    alphas = [a for a, _ in table]
    metrics = {}
    for col in SCORE_COLUMNS:
        metrics[col] = [agg[col] for _, agg in table]
    return alphas, metrics


def write_sweep_report(out_dir, sweeps: Mapping[str, SweepResult], stem: str = "sweep") -> dict[str, Path]:
    """CSV per sweep plus one SVG with a series per sweep label."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}
    for label, sweep in sweeps.items():
        csv_path = out_dir / f"{stem}_{label}.csv"
        write_sweep_csv(csv_path, sweep.rows)
        paths[f"csv:{label}"] = csv_path
    svg_path = out_dir / f"{stem}.svg"
    render_alpha_panels(svg_path, {label: _sweep_curve(sw) for label, sw in sweeps.items()})
    paths["svg"] = svg_path
    return paths


def _write_report(report: ScoreReport, json_path: Path) -> None:
    json_path.write_text(
        json.dumps(report.to_json_dict(), indent=2, sort_keys=False) + "\n", encoding="utf-8"
    )
    json_path.with_suffix(".csv").write_text(score_report_csv_row(report), encoding="utf-8")


@dataclass
class PipelineResult:
    config: PipelineConfig
    out_dir: Path
    train_split: list[Example]
    valid_split: list[Example]
    test_split: list[Example]
    ref_report: ScoreReport
    selections: dict[str, SelectionResult]
    checkpoints: dict[str, Checkpoint]
    model_valid_reports: dict[str, ScoreReport]
    sweeps: dict[str, SweepResult]
    alpha_selections: dict[str, AlphaSelection]
    test_reports: dict[str, ScoreReport]
    warnings: list[str]


def _model_names(pairings: Sequence[str]) -> list[str]:
    metrics = sorted({_METRIC_OF[ch] for p in pairings for ch in p})
    names = []
    for metric in metrics:
        names.extend([f"expert_{metric}", f"anti_{metric}"])
    return names


def run_pipeline(config: PipelineConfig, out_dir) -> PipelineResult:
    """Execute the full training, selection, fine-tuning, merge, sweep loop."""
    out_dir = Path(out_dir)
    with output_lock(out_dir):
        return _run_pipeline_locked(config, out_dir)


def _run_pipeline_locked(config: PipelineConfig, out_dir: Path) -> PipelineResult:
    warnings: list[str] = []
    vocab = config.corpus.vocabulary

    logger.info("generating corpus (%d examples)", config.corpus.n_examples)
    examples = generate(config.corpus)
    train_split, valid_split, test_split = split_examples(examples)
    corpus_dir = out_dir / "corpus"
    write_split_corpus(examples, corpus_dir)
    (corpus_dir / "config.json").write_text(
        json.dumps(config.corpus.to_json_dict(), indent=2) + "\n", encoding="utf-8"
    )

    logger.info("scoring training references for selection")
    ref_report = score_corpus([(ex, ex.summary_tokens) for ex in train_split])
    selection_dir = out_dir / "selection"
    selection_dir.mkdir(parents=True, exist_ok=True)
    _write_report(ref_report, selection_dir / "train_refs.scores.json")

    by_id = {ex.id: ex for ex in train_split}
    selections: dict[str, SelectionResult] = {}
    subsets: dict[tuple[str, str], list[Example]] = {}
    needed_metrics = sorted({_METRIC_OF[ch] for p in config.pairings for ch in p})
    for metric in needed_metrics:
        result = select(ref_report, metric, config.thresholds)
        selections[metric] = result
        for warn in result.warnings:
            warnings.append(f"selection[{metric}]: {warn}")
        metric_dir = selection_dir / metric
        metric_dir.mkdir(parents=True, exist_ok=True)
        write_selection_json(result, metric_dir / "selection.json")
        subsets[(metric, "clean")] = [by_id[i] for i in result.clean_ids]
        subsets[(metric, "noisy")] = [by_id[i] for i in result.noisy_ids]
        write_jsonl(subsets[(metric, "clean")], metric_dir / "clean.jsonl")
        write_jsonl(subsets[(metric, "noisy")], metric_dir / "noisy.jsonl")

    logger.info("training base model (%d examples)", len(train_split))
    base_params = train(train_split, config.train, vocab)
    checkpoints: dict[str, Checkpoint] = {"base": base_params.to_checkpoint("base")}
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    for metric in needed_metrics:
        for kind in ("clean", "noisy"):
            name = ("expert_" if kind == "clean" else "anti_") + metric
            subset = subsets[(metric, kind)]
            if subset:
                tuned = finetune(base_params, subset, config.finetune_config(name))
                checkpoints[name] = tuned.to_checkpoint(name)
            else:
                warnings.append(
                    f"{name}: empty {kind} selection, falling back to the base model "
                    "(contrastive merge degrades to plain interpolation)"
                )
                checkpoints[name] = base_params.to_checkpoint(name)
    for name, ck in checkpoints.items():
        save(ck, ckpt_dir / f"{name}.ckpt")

    reports_dir = out_dir / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    model_valid_reports: dict[str, ScoreReport] = {}
    for name in ["base"] + _model_names(config.pairings):
        report = _decode_and_score(checkpoints[name], valid_split, config.max_len, config.decode_strategy)
        model_valid_reports[name] = report
        _write_report(report, reports_dir / f"valid_{name}.json")
    _write_model_table_csv(reports_dir / "models_valid.csv", model_valid_reports)

    sweeps: dict[str, SweepResult] = {}
    alpha_selections: dict[str, AlphaSelection] = {}
    test_reports: dict[str, ScoreReport] = {}
    base_ckpt = checkpoints["base"]
    test_reports["base"] = _decode_and_score(base_ckpt, test_split, config.max_len, config.decode_strategy)
    _write_report(test_reports["base"], reports_dir / "test_base.json")

    for pairing in config.pairings:
        label = f"cape_{pairing}"
        expert = checkpoints[f"expert_{_METRIC_OF[pairing[0]]}"]
        anti = checkpoints[f"anti_{_METRIC_OF[pairing[1]]}"]
        logger.info("sweeping %s over %s", label, config.alpha_grid)
        sweep = _sweep_with_cache(
            base_ckpt, expert, anti, config, valid_split, label, model_valid_reports["base"]
        )
        sweeps[pairing] = sweep
        choice = select_alpha(sweep, config.constraint_drop)
        alpha_selections[pairing] = choice
        merged = cape_merge(base_ckpt, expert, anti, choice.alpha)
        save(merged, ckpt_dir / f"{label}_alpha{_fmt_alpha(choice.alpha)}.ckpt")
        test_reports[label] = _decode_and_score(merged, test_split, config.max_len, config.decode_strategy)
        _write_report(test_reports[label], reports_dir / f"test_{label}.json")

    sweep_dir = out_dir / "sweeps"
    write_sweep_report(sweep_dir, {f"cape_{p}": sweeps[p] for p in config.pairings}, stem="sweep")
    (out_dir / "alpha_selections.json").write_text(
        json.dumps({p: alpha_selections[p].to_json_dict() for p in config.pairings}, indent=2) + "\n",
        encoding="utf-8",
    )

    manifest = {
        "config": config.to_json_dict(),
        "warnings": warnings,
        "selected_alpha": {p: alpha_selections[p].alpha for p in config.pairings},
        "selection_sizes": {
            m: {"clean": len(selections[m].clean_ids), "noisy": len(selections[m].noisy_ids)}
            for m in needed_metrics
        },
    }
    (out_dir / "pipeline.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    for warn in warnings:
        logger.warning("%s", warn)

    return PipelineResult(
        config=config,
        out_dir=out_dir,
        train_split=train_split,
        valid_split=valid_split,
        test_split=test_split,
        ref_report=ref_report,
        selections=selections,
        checkpoints=checkpoints,
        model_valid_reports=model_valid_reports,
        sweeps=sweeps,
        alpha_selections=alpha_selections,
        test_reports=test_reports,
        warnings=warnings,
    )


def _sweep_with_cache(base_ckpt, expert, anti, config, valid_split, label, base_report) -> SweepResult:
    # The base row is identical for every pairing; reuse the scored report.
    rows = [(0.0, base_report)]
    for alpha in config.alpha_grid:
        merged = cape_merge(base_ckpt, expert, anti, alpha)
        rows.append((alpha, _decode_and_score(merged, valid_split, config.max_len, config.decode_strategy)))
    return SweepResult(label, tuple(rows))


def _write_model_table_csv(path, reports: Mapping[str, ScoreReport]) -> None:
    lines = ["model," + ",".join(SCORE_COLUMNS)]
    for name, report in reports.items():
        agg = report.aggregates()
        lines.append(f"{name}," + ",".join(_fmt_value(agg[c]) for c in SCORE_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class ComparisonResult:
    pipeline: PipelineResult
    mode_sweeps: dict[str, SweepResult]
    ensemble_report: ScoreReport
    csv_path: Path
    svg_path: Path


def compare_modes(config: PipelineConfig, out_dir) -> ComparisonResult:
    """Run the pipeline, then sweep the merge-strategy baselines side by side.

    Modes: the contrastive merge itself, expert-only (anti-expert replaced by
    the base, i.e. plain interpolation), anti-only (expert replaced by the
    base), the contrastive merge built from subset models trained from
    scratch, and the alpha-free uniform average of the base with two
    random-subset fine-tunes.
    """
    out_dir = Path(out_dir)
    pipeline = run_pipeline(config, out_dir / "pipeline")
    with output_lock(out_dir):
        return _compare_locked(config, out_dir, pipeline)


def _compare_locked(config: PipelineConfig, out_dir: Path, pipeline: PipelineResult) -> ComparisonResult:
    pairing = config.compare_pairing
    expert_metric, anti_metric = _METRIC_OF[pairing[0]], _METRIC_OF[pairing[1]]
    base_ckpt = pipeline.checkpoints["base"]
    expert = pipeline.checkpoints[f"expert_{expert_metric}"]
    anti = pipeline.checkpoints[f"anti_{anti_metric}"]
    valid = pipeline.valid_split
    base_report = pipeline.model_valid_reports["base"]

    def cape_sweep(e, a, label):
        return _sweep_with_cache(base_ckpt, e, a, config, valid, label, base_report)

    mode_sweeps: dict[str, SweepResult] = {}
    if pairing in pipeline.sweeps:
        mode_sweeps["cape"] = pipeline.sweeps[pairing]
    else:
        mode_sweeps["cape"] = cape_sweep(expert, anti, "cape")
    logger.info("comparing expert-only / anti-only merges")
    mode_sweeps["expert_only"] = cape_sweep(expert, base_ckpt, "expert_only")
    mode_sweeps["anti_only"] = cape_sweep(base_ckpt, anti, "anti_only")

    logger.info("training from-scratch subset models for the initialization comparison")
    by_id = {ex.id: ex for ex in pipeline.train_split}
    sel_e = pipeline.selections[expert_metric]
    sel_a = pipeline.selections[anti_metric]
    clean_subset = [by_id[i] for i in sel_e.clean_ids]
    noisy_subset = [by_id[i] for i in sel_a.noisy_ids]
    vocab = config.corpus.vocabulary
    if clean_subset and noisy_subset:
        fresh_cfg = lambda tag: replace(config.train, seed=derive_seed(config.train.seed, "fresh", tag))
        fresh_expert = train(clean_subset, fresh_cfg("clean"), vocab).to_checkpoint("fresh_expert")
        fresh_anti = train(noisy_subset, fresh_cfg("noisy"), vocab).to_checkpoint("fresh_anti")
        mode_sweeps["cape_fresh"] = cape_sweep(fresh_expert, fresh_anti, "cape_fresh")
    else:
        logger.warning("skipping from-scratch comparison: empty clean or noisy subset")

    logger.info("building the uniform parameter-ensemble baseline")
    ensemble_report = _ensemble_baseline_report(config, pipeline)

    csv_path = out_dir / "compare.csv"
    mode_rows: list[tuple[str, float | None, dict]] = []
    for mode, sweep in mode_sweeps.items():
        for alpha, report in sweep.rows:
            mode_rows.append((mode, alpha, report.aggregates()))
    mode_rows.append(("ensemble", None, ensemble_report.aggregates()))
    write_modes_csv(csv_path, mode_rows)

    svg_path = out_dir / "compare.svg"
    render_alpha_panels(
        svg_path,
        {mode: _sweep_curve(sweep) for mode, sweep in mode_sweeps.items()},
        hlines={"ensemble": ensemble_report.aggregates()},
    )
    return ComparisonResult(pipeline, mode_sweeps, ensemble_report, csv_path, svg_path)


def _ensemble_baseline_report(config: PipelineConfig, pipeline: PipelineResult) -> ScoreReport:
    # Uniform average of the base model with two fine-tunes on random
    # quarter-subsets of the training data, seed-derived.
    base_params = ModelParams.from_checkpoint(pipeline.checkpoints["base"])
    members = [pipeline.checkpoints["base"]]
    n = len(pipeline.train_split)
    k = max(1, n // 4)
    for i in range(2):
        rng = Stream(derive_seed(config.train.seed, "ensemble", i))
        subset = rng.sample(pipeline.train_split, k)
        tuned = finetune(base_params, subset, config.finetune_config(f"ensemble_{i}"))
        members.append(tuned.to_checkpoint(f"ensemble_{i}"))
    averaged = average_merge(members)
    return _decode_and_score(averaged, pipeline.valid_split, config.max_len, config.decode_strategy)
