"""Evaluation and selection metrics: entity overlap, fact-arc entailment, ROUGE.

Fractional metrics with an empty denominator are reported as absent (None)
and excluded from aggregate means; the report records how many examples were
excluded per metric. Corpus-level aggregates are macro-averages (mean of
per-example values, the primary numbers); micro-averages over pooled counts
are emitted alongside as diagnostics.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Literal, NamedTuple, Sequence

from .corpus import Example, Fact, parse_facts

Mode = Literal["synthetic", "natural"]

_SYNTHETIC_ENTITY_RE = re.compile(r"^E(0|[1-9][0-9]*)$")

# Aggregate CSV column order for one-row score reports.
SCORE_COLUMNS = ("D_arc", "D_sum", "E-P_src", "E-R_ref", "R1", "R2", "RL", "len")


def extract_entities(
    tokens: Sequence[str],
    mode: Mode = "synthetic",
    stopwords: frozenset[str] = frozenset(),
) -> list[str]:
    """Entity tokens of a sequence, with multiplicity.

    Synthetic mode keeps exactly the tokens whose surface form is an entity
    class token. Natural mode is a heuristic for plain text: capitalized
    alphabetic words or tokens containing a digit, minus the stopword list.
    """
    if mode == "synthetic":
        return [t for t in tokens if _SYNTHETIC_ENTITY_RE.match(t)]
    if mode == "natural":
        return [
            t
            for t in tokens
            if t not in stopwords and (any(ch.isdigit() for ch in t) or (t.isalpha() and t[:1].isupper()))
        ]
    raise ValueError(f"unknown entity extraction mode {mode!r}")


def entity_precision_src(
    summary: Sequence[str], source: Sequence[str], mode: Mode = "synthetic"
) -> float | None:
    """Fraction of summary entity tokens present in the source entity set.

    Summary entities count with multiplicity; the source side is a set.
    Absent (None) when the summary has no entity tokens.
    """
    summary_entities = extract_entities(summary, mode)
    if not summary_entities:
        return None
    source_set = set(extract_entities(source, mode))
    return sum(1 for e in summary_entities if e in source_set) / len(summary_entities)


def entity_recall_ref(
    generated: Sequence[str], reference: Sequence[str], mode: Mode = "synthetic"
) -> float | None:
    """Fraction of reference entity tokens found in the generated summary."""
    reference_entities = extract_entities(reference, mode)
    if not reference_entities:
        return None
    generated_set = set(extract_entities(generated, mode))
    return sum(1 for e in reference_entities if e in generated_set) / len(reference_entities)


def fact_arc_entailment(summary: Sequence[str], source_facts: Iterable[Fact]) -> tuple[int, int]:
    """(errors, arcs) for a summary against the source fact set.

    Arcs are the summary's parsed facts plus its unparseable spans; an error
    is a parsed fact not present in the source facts, or an unparseable span
    (a malformed claim is not entailed).
    """
    parsed = parse_facts(summary)
    src = set(source_facts)
    errors = sum(1 for f in parsed.facts if f not in src) + parsed.unparseable_spans
    total = len(parsed.facts) + parsed.unparseable_spans
    return errors, total


class RougeScore(NamedTuple):
    precision: float
    recall: float
    f1: float


_ZERO_ROUGE = RougeScore(0.0, 0.0, 0.0)


def _prf(match: float, n_cand: int, n_ref: int) -> RougeScore:
    precision = match / n_cand if n_cand > 0 else 0.0
    recall = match / n_ref if n_ref > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return RougeScore(precision, recall, f1)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate: Sequence[str], reference: Sequence[str], n: int) -> RougeScore:
    """Clipped n-gram overlap precision/recall/F1."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    cand = _ngrams(candidate, n)
    ref = _ngrams(reference, n)
    match = sum(min(count, ref[gram]) for gram, count in cand.items())
    return _prf(match, sum(cand.values()), sum(ref.values()))


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[str], reference: Sequence[str]) -> RougeScore:
    """Longest-common-subsequence precision/recall/F1."""
    lcs = _lcs_length(candidate, reference)
    return _prf(lcs, len(candidate), len(reference))


@dataclass(frozen=True)
class ExampleScore:
    """All per-example metric values for one generated summary."""

    id: str
    ep_src: float | None
    er_ref: float | None
    dae_errors: int
    arc_total: int
    rouge1: RougeScore
    rouge2: RougeScore
    rougeL: RougeScore
    summary_length: int
    # Raw overlap counts, kept for micro-average diagnostics.
    ep_hits: int = 0
    ep_count: int = 0
    er_hits: int = 0
    er_count: int = 0

    @property
    def d_arc(self) -> float | None:
        if self.arc_total == 0:
            return None
        return (self.arc_total - self.dae_errors) / self.arc_total

    def to_json_dict(self) -> dict:
        return {
            "id": self.id,
            "ep_src": self.ep_src,
            "er_ref": self.er_ref,
            "dae_errors": self.dae_errors,
            "arc_total": self.arc_total,
            "d_arc": self.d_arc,
            "rouge1": list(self.rouge1),
            "rouge2": list(self.rouge2),
            "rougeL": list(self.rougeL),
            "summary_length": self.summary_length,
        }


def _mean(values: list[float]) -> float | None:
    return sum(values) / len(values) if values else None


@dataclass(frozen=True)
class ScoreReport:
    """Per-example scores plus corpus-level aggregates."""

    examples: tuple[ExampleScore, ...]

    @property
    def d_sum(self) -> float | None:
        """Fraction of summaries with zero fact-arc errors."""
        if not self.examples:
            return None
        return sum(1 for s in self.examples if s.dae_errors == 0) / len(self.examples)

    @property
    def mean_summary_length(self) -> float | None:
        return _mean([float(s.summary_length) for s in self.examples])

    def aggregates(self) -> dict[str, float | None]:
        """Macro-averaged aggregate row in canonical column order."""
        d_arc = [s.d_arc for s in self.examples if s.d_arc is not None]
        ep = [s.ep_src for s in self.examples if s.ep_src is not None]
        er = [s.er_ref for s in self.examples if s.er_ref is not None]
        return {
            "D_arc": _mean(d_arc),
            "D_sum": self.d_sum,
            "E-P_src": _mean(ep),
            "E-R_ref": _mean(er),
            "R1": _mean([s.rouge1.f1 for s in self.examples]),
            "R2": _mean([s.rouge2.f1 for s in self.examples]),
            "RL": _mean([s.rougeL.f1 for s in self.examples]),
            "len": self.mean_summary_length,
        }

    def micro_aggregates(self) -> dict[str, float | None]:
        """Pooled-count averages, emitted as diagnostics only."""
        arcs = sum(s.arc_total for s in self.examples)
        errors = sum(s.dae_errors for s in self.examples)
        ep_count = sum(s.ep_count for s in self.examples)
        ep_hits = sum(s.ep_hits for s in self.examples)
        er_count = sum(s.er_count for s in self.examples)
        er_hits = sum(s.er_hits for s in self.examples)
        return {
            "D_arc": (arcs - errors) / arcs if arcs > 0 else None,
            "E-P_src": ep_hits / ep_count if ep_count > 0 else None,
            "E-R_ref": er_hits / er_count if er_count > 0 else None,
        }

    def skipped_counts(self) -> dict[str, int]:
        """How many examples were excluded from each macro mean."""
        return {
            "D_arc": sum(1 for s in self.examples if s.d_arc is None),
            "E-P_src": sum(1 for s in self.examples if s.ep_src is None),
            "E-R_ref": sum(1 for s in self.examples if s.er_ref is None),
        }

    def to_json_dict(self) -> dict:
        return {
            "n_examples": len(self.examples),
            "aggregates": self.aggregates(),
            "aggregation": "macro",
            "micro_aggregates": self.micro_aggregates(),
            "skipped": self.skipped_counts(),
            "examples": [s.to_json_dict() for s in self.examples],
        }


def score_example(example: Example, generated: Sequence[str], mode: Mode = "synthetic") -> ExampleScore:
    """Score one generated summary against its example.

    Entity precision and fact-arc metrics run against the source; entity
    recall and ROUGE run against the reference summary. Fact metrics are
    skipped (absent) for examples without fact annotations.
    """
    generated = list(generated)
    gen_entities = extract_entities(generated, mode)
    src_set = set(extract_entities(example.source_tokens, mode))
    ref_entities = extract_entities(example.summary_tokens, mode)
    gen_set = set(gen_entities)

    ep_hits = sum(1 for e in gen_entities if e in src_set)
    er_hits = sum(1 for e in ref_entities if e in gen_set)

    if example.source_facts:
        dae_errors, arc_total = fact_arc_entailment(generated, example.source_facts)
    else:
        dae_errors, arc_total = 0, 0

    return ExampleScore(
        id=example.id,
        ep_src=ep_hits / len(gen_entities) if gen_entities else None,
        er_ref=er_hits / len(ref_entities) if ref_entities else None,
        dae_errors=dae_errors,
        arc_total=arc_total,
        rouge1=rouge_n(generated, example.summary_tokens, 1),
        rouge2=rouge_n(generated, example.summary_tokens, 2),
        rougeL=rouge_l(generated, example.summary_tokens),
        summary_length=len(generated),
        ep_hits=ep_hits,
        ep_count=len(gen_entities),
        er_hits=er_hits,
        er_count=len(ref_entities),
    )


def score_corpus(
    pairs: Sequence[tuple[Example, Sequence[str]]], mode: Mode = "synthetic"
) -> ScoreReport:
    """Score aligned (example, generated summary) pairs; empty input is fine."""
    return ScoreReport(tuple(score_example(ex, gen, mode) for ex, gen in pairs))


def align_summaries(
    examples: Sequence[Example], summaries: dict[str, Sequence[str]]
) -> list[tuple[Example, Sequence[str]]]:
    """Pair examples with generated summaries by id, raising on any mismatch."""
    missing = [ex.id for ex in examples if ex.id not in summaries]
    if missing:
        raise ValueError(f"missing generated summaries for ids: {missing[:5]}")
    extra = set(summaries) - {ex.id for ex in examples}
    if extra:
        raise ValueError(f"generated summaries for unknown ids: {sorted(extra)[:5]}")
    return [(ex, summaries[ex.id]) for ex in examples]


def score_report_csv_row(report: ScoreReport) -> str:
    """One-row CSV of aggregates in the canonical column order."""
    agg = report.aggregates()
    header = ",".join(SCORE_COLUMNS)
    row = ",".join(_fmt(agg[c]) for c in SCORE_COLUMNS)
    return f"{header}\n{row}\n"


def _fmt(value: float | None) -> str:
    return "" if value is None else f"{value:.6f}"
