"""Command-line interface for the contrastive parameter ensembling lab.

Exit codes: 0 on success, 1 on validation/config/content errors, 2 on I/O
errors. All config files are JSON.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click

from . import checkpoint as ck
from . import harness
from .checkpoint import CheckpointError, load, save
from .corpus import CorpusConfig, Vocabulary, generate, read_jsonl, write_split_corpus
from .metrics import align_summaries, score_corpus, score_report_csv_row
from .model import ModelParams, TrainConfig, decode_corpus, finetune, train
from .selection import SelectionThresholds, select, write_selection_json


def _cli_errors(func):
    """Map domain errors to exit 1 and I/O errors to exit 2."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except OSError as exc:
            click.echo(f"i/o error: {exc}", err=True)
            sys.exit(2)
        except (ValueError, KeyError, CheckpointError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)

    return wrapper


def _read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _read_summaries(path) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            out[str(obj["id"])] = obj["summary"].split() if obj["summary"] else []
    return out


def _write_summaries(path, ids, summaries) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex_id, tokens in zip(ids, summaries):
            fh.write(json.dumps({"id": ex_id, "summary": " ".join(tokens)}, ensure_ascii=False))
            fh.write("\n")


def _train_config_from_file(path, default_epochs: int | None = None) -> tuple[TrainConfig, Vocabulary | None]:
    obj = _read_json(path)
    vocab = None
    if "vocab" in obj:
        vocab = Vocabulary(**obj.pop("vocab"))
    if default_epochs is not None:
        obj.setdefault("epochs", default_epochs)
    return TrainConfig.from_json_dict(obj), vocab


def _parse_grid(spec: str) -> list[float]:
    """Parse "start:stop:step" into an inclusive float grid."""
    try:
        start, stop, step = (float(x) for x in spec.split(":"))
    except ValueError:
        raise ValueError(f"grid must look like start:stop:step, got {spec!r}") from None
    if step <= 0 or stop < start:
        raise ValueError(f"grid {spec!r} is empty or descending")
    count = int(round((stop - start) / step)) + 1
    return [round(start + i * step, 10) for i in range(count)]


@click.group()
def main():
    """Contrastive parameter ensembling lab: corpus, metrics, models, merges."""


@main.command("generate-corpus")
@click.option("--config", "config_path", required=True, type=click.Path(), help="CorpusConfig JSON")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Output directory")
@_cli_errors
def generate_corpus_cmd(config_path, out_dir):
    """Generate the synthetic corpus and write train/valid/test JSONL files."""
    config = CorpusConfig.from_json_dict(_read_json(config_path))
    examples = generate(config)
    paths = write_split_corpus(examples, out_dir)
    for name, path in paths.items():
        click.echo(f"{name}: {path}")


@main.command("score")
@click.option("--corpus", "corpus_path", required=True, type=click.Path())
@click.option("--summaries", "summaries_path", required=True, type=click.Path())
@click.option("--mode", type=click.Choice(["synthetic", "natural"]), default="synthetic", show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path(), help="Report JSON path (CSV written alongside)")
@_cli_errors
def score_cmd(corpus_path, summaries_path, mode, out_path):
    """Score generated summaries against a corpus; writes JSON and a CSV row."""
    examples = read_jsonl(corpus_path)
    summaries = _read_summaries(summaries_path)
    report = score_corpus(align_summaries(examples, summaries), mode)
    out_path = Path(out_path)
    out_path.write_text(json.dumps(report.to_json_dict(), indent=2) + "\n", encoding="utf-8")
    csv_path = out_path.with_suffix(".csv")
    csv_path.write_text(score_report_csv_row(report), encoding="utf-8")
    click.echo(f"report: {out_path}")
    click.echo(f"aggregates: {csv_path}")


@main.command("select")
@click.option("--scores", "scores_path", required=True, type=click.Path(), help="Score report JSON")
@click.option("--corpus", "corpus_path", required=True, type=click.Path())
@click.option("--metric", type=click.Choice(["ep", "dae"]), required=True)
@click.option("--thresholds", "thresholds_path", type=click.Path(), default=None)
@click.option("--out", "out_dir", required=True, type=click.Path())
@_cli_errors
def select_cmd(scores_path, corpus_path, metric, thresholds_path, out_dir):
    """Split a scored corpus into clean/noisy JSONL subsets."""
    from .metrics import ExampleScore, RougeScore, ScoreReport

    obj = _read_json(scores_path)
    examples = []
    for row in obj["examples"]:
        examples.append(
            ExampleScore(
                id=row["id"],
                ep_src=row["ep_src"],
                er_ref=row["er_ref"],
                dae_errors=row["dae_errors"],
                arc_total=row["arc_total"],
                rouge1=RougeScore(*row["rouge1"]),
                rouge2=RougeScore(*row["rouge2"]),
                rougeL=RougeScore(*row["rougeL"]),
                summary_length=row["summary_length"],
            )
        )
    report = ScoreReport(tuple(examples))
    thresholds = (
        SelectionThresholds.from_json_dict(_read_json(thresholds_path))
        if thresholds_path
        else SelectionThresholds()
    )
    result = select(report, metric, thresholds)
    corpus = {ex.id: ex for ex in read_jsonl(corpus_path)}
    unknown = [i for i in result.clean_ids + result.noisy_ids if i not in corpus]
    if unknown:
        raise ValueError(f"score report ids missing from corpus: {unknown[:5]}")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    from .corpus import write_jsonl

    write_jsonl([corpus[i] for i in result.clean_ids], out_dir / "clean.jsonl")
    write_jsonl([corpus[i] for i in result.noisy_ids], out_dir / "noisy.jsonl")
    write_selection_json(result, out_dir / "selection.json")
    for warning in result.warnings:
        click.echo(f"warning: {warning}", err=True)
    click.echo(f"clean: {len(result.clean_ids)}  noisy: {len(result.noisy_ids)}  of {result.n_corpus}")


@main.command("train")
@click.option("--corpus", "corpus_path", required=True, type=click.Path())
@click.option("--config", "config_path", required=True, type=click.Path(), help="TrainConfig JSON with a vocab section")
@click.option("--out", "out_path", required=True, type=click.Path())
@_cli_errors
def train_cmd(corpus_path, config_path, out_path):
    """Train a summarizer from scratch and write its checkpoint."""
    cfg, vocab = _train_config_from_file(config_path)
    if vocab is None:
        raise ValueError("train config must carry a 'vocab' section (n_entities/n_predicates/n_fillers)")
    examples = read_jsonl(corpus_path)
    params = train(examples, cfg, vocab)
    save(params.to_checkpoint(Path(out_path).stem), out_path)
    click.echo(f"checkpoint: {out_path}")


@main.command("finetune")
@click.option("--init", "init_path", required=True, type=click.Path(), help="Checkpoint to start from")
@click.option("--corpus", "corpus_path", required=True, type=click.Path())
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
@_cli_errors
def finetune_cmd(init_path, corpus_path, config_path, out_path):
    """Fine-tune an existing checkpoint on a (sub)corpus; defaults to 1 epoch."""
    cfg, _ = _train_config_from_file(config_path, default_epochs=1)
    params = ModelParams.from_checkpoint(load(init_path))
    examples = read_jsonl(corpus_path)
    tuned = finetune(params, examples, cfg)
    save(tuned.to_checkpoint(Path(out_path).stem), out_path)
    click.echo(f"checkpoint: {out_path}")


@main.command("merge")
@click.option("--strategy", type=click.Choice(["cape", "wiseft", "average"]), required=True)
@click.option("--base", "base_path", type=click.Path(), default=None)
@click.option("--expert", "expert_path", type=click.Path(), default=None)
@click.option("--anti", "anti_path", type=click.Path(), default=None)
@click.option("--alpha", type=float, default=None)
@click.option("--inputs", "input_paths", type=click.Path(), multiple=True, help="Checkpoints for --strategy average")
@click.option("--out", "out_path", required=True, type=click.Path())
@_cli_errors
def merge_cmd(strategy, base_path, expert_path, anti_path, alpha, input_paths, out_path):
    """Combine checkpoints in parameter space."""
    if strategy == "average":
        if not input_paths:
            raise ValueError("--strategy average needs --inputs F [--inputs F ...]")
        merged = ck.average_merge([load(p) for p in input_paths])
    else:
        if base_path is None or expert_path is None:
            raise ValueError(f"--strategy {strategy} needs --base and --expert")
        if alpha is None:
            raise ValueError(f"--strategy {strategy} needs --alpha")
        base, expert = load(base_path), load(expert_path)
        if strategy == "cape":
            if anti_path is None:
                raise ValueError("--strategy cape needs --anti")
            merged = ck.cape_merge(base, expert, load(anti_path), alpha)
        else:
            merged = ck.wise_ft_merge(base, expert, alpha)
    save(merged, out_path)
    click.echo(f"checkpoint: {out_path}")


@main.command("decode")
@click.option("--model", "model_path", required=True, type=click.Path())
@click.option("--corpus", "corpus_path", required=True, type=click.Path())
@click.option("--strategy", default="greedy", show_default=True, help="greedy or beam:K")
@click.option("--max-len", type=int, default=40, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@_cli_errors
def decode_cmd(model_path, corpus_path, strategy, max_len, out_path):
    """Decode summaries for every corpus example, written as {id, summary} JSONL."""
    params = ModelParams.from_checkpoint(load(model_path))
    examples = read_jsonl(corpus_path)
    decoded = decode_corpus(params, examples, max_len, strategy)
    _write_summaries(out_path, [ex.id for ex in examples], decoded)
    click.echo(f"summaries: {out_path}")


@main.command("sweep")
@click.option("--base", "base_path", required=True, type=click.Path())
@click.option("--expert", "expert_path", required=True, type=click.Path())
@click.option("--anti", "anti_path", required=True, type=click.Path())
@click.option("--grid", default="0.2:1.0:0.2", show_default=True, help="start:stop:step")
@click.option("--corpus", "corpus_path", required=True, type=click.Path())
@click.option("--max-len", type=int, default=40, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@_cli_errors
def sweep_cmd(base_path, expert_path, anti_path, grid, corpus_path, max_len, out_dir):
    """Sweep the mixing coefficient and report scores per step."""
    alphas = _parse_grid(grid)
    examples = read_jsonl(corpus_path)
    sweep = harness.sweep_alpha(
        load(base_path), load(expert_path), load(anti_path), alphas, examples, max_len
    )
    with harness.output_lock(out_dir):
        paths = harness.write_sweep_report(out_dir, {"cape": sweep})
        choice = harness.select_alpha(sweep)
        (Path(out_dir) / "alpha_selection.json").write_text(
            json.dumps(choice.to_json_dict(), indent=2) + "\n", encoding="utf-8"
        )
    click.echo(f"sweep: {paths['csv:cape']}")
    click.echo(f"figure: {paths['svg']}")
    click.echo(f"selected alpha: {choice.alpha}{' (fallback to base)' if choice.fallback else ''}")


@main.command("pipeline")
@click.option("--config", "config_path", required=True, type=click.Path(), help="PipelineConfig JSON")
@click.option("--out", "out_dir", required=True, type=click.Path())
@_cli_errors
def pipeline_cmd(config_path, out_dir):
    """Run the full train/select/fine-tune/merge/sweep pipeline."""
    config = harness.PipelineConfig.from_json_file(config_path)
    result = harness.run_pipeline(config, out_dir)
    for warning in result.warnings:
        click.echo(f"warning: {warning}", err=True)
    for pairing, choice in result.alpha_selections.items():
        click.echo(f"cape_{pairing}: alpha={choice.alpha}{' (fallback)' if choice.fallback else ''}")
    click.echo(f"artifacts: {result.out_dir}")


@main.command("compare")
@click.option("--config", "config_path", required=True, type=click.Path(), help="PipelineConfig JSON")
@click.option("--out", "out_dir", required=True, type=click.Path())
@_cli_errors
def compare_cmd(config_path, out_dir):
    """Run the pipeline plus merge-strategy baselines; write compare.csv/svg."""
    config = harness.PipelineConfig.from_json_file(config_path)
    result = harness.compare_modes(config, out_dir)
    for warning in result.pipeline.warnings:
        click.echo(f"warning: {warning}", err=True)
    click.echo(f"comparison: {result.csv_path}")
    click.echo(f"figure: {result.svg_path}")


if __name__ == "__main__":
    main()
