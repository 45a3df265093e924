"""Clean/noisy training-subset selection over a scored corpus.

Reference summaries are scored against their sources; examples pass into the
clean subset when the chosen metric says they are error-free, and into the
noisy subset when it says they are heavily corrupted. Examples whose metric
is absent (no entities, no arcs) join neither subset.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Literal

from .metrics import ScoreReport

Metric = Literal["ep", "dae"]

_METRIC_ALIASES = {"ep": "ep", "entity_precision": "ep", "dae": "dae"}


def _normalize_metric(metric: str) -> str:
    try:
        return _METRIC_ALIASES[metric]
    except KeyError:
        raise ValueError(f"unknown selection metric {metric!r} (use 'ep' or 'dae')") from None


@dataclass(frozen=True)
class SelectionThresholds:
    """Cutoffs for the clean and noisy subsets.

    ep_clean and ep_noisy are entity-precision fractions; dae_errors_clean is
    an absolute error count; dae_noisy is the minimum fraction of arcs in
    error. The noisy entity cutoff defaults to 0.75 because extrinsic noise
    replaces one entity per fact, which floors the synthetic corpus's entity
    precision at 0.5: a percentage-style cutoff like 0.10 can never fire here,
    so the default selects the most-corrupted reachable tail instead.
    """

    ep_clean: float = 1.0
    dae_errors_clean: int = 0
    dae_noisy: float = 0.75
    ep_noisy: float = 0.75

    def __post_init__(self):
        if not 0.0 <= self.ep_noisy < self.ep_clean <= 1.0:
            raise ValueError("need 0 <= ep_noisy < ep_clean <= 1")
        if self.dae_errors_clean < 0:
            raise ValueError("dae_errors_clean must be nonnegative")
        if not 0.0 < self.dae_noisy <= 1.0:
            raise ValueError("dae_noisy must be a fraction in (0, 1]")

    def to_json_dict(self) -> dict:
        return {
            "ep_clean": self.ep_clean,
            "dae_errors_clean": self.dae_errors_clean,
            "dae_noisy": self.dae_noisy,
            "ep_noisy": self.ep_noisy,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "SelectionThresholds":
        return cls(**obj)


def select_clean(scores: ScoreReport, metric: str, thresholds: SelectionThresholds | None = None) -> list[str]:
    """Ids whose reference summary passes the clean cutoff, in id order."""
    t = thresholds or SelectionThresholds()
    metric = _normalize_metric(metric)
    if metric == "ep":
        ids = [s.id for s in scores.examples if s.ep_src is not None and s.ep_src >= t.ep_clean]
    else:
        ids = [s.id for s in scores.examples if s.arc_total > 0 and s.dae_errors <= t.dae_errors_clean]
    return sorted(ids)


def select_noisy(scores: ScoreReport, metric: str, thresholds: SelectionThresholds | None = None) -> list[str]:
    """Ids whose reference summary falls at or past the noisy cutoff."""
    t = thresholds or SelectionThresholds()
    metric = _normalize_metric(metric)
    if metric == "ep":
        ids = [s.id for s in scores.examples if s.ep_src is not None and s.ep_src <= t.ep_noisy]
    else:
        ids = [
            s.id
            for s in scores.examples
            if s.arc_total > 0 and s.dae_errors / s.arc_total >= t.dae_noisy
        ]
    return sorted(ids)


@dataclass(frozen=True)
class SelectionResult:
    """Clean and noisy id sets with the thresholds that produced them."""

    metric: str
    thresholds: SelectionThresholds
    clean_ids: tuple[str, ...]
    noisy_ids: tuple[str, ...]
    n_corpus: int

    def __post_init__(self):
        overlap = set(self.clean_ids) & set(self.noisy_ids)
        if overlap:
            raise ValueError(
                f"thresholds place {len(overlap)} example(s) in both subsets, e.g. {sorted(overlap)[0]!r}"
            )

    @property
    def clean_fraction(self) -> float:
        return len(self.clean_ids) / self.n_corpus if self.n_corpus else 0.0

    @property
    def noisy_fraction(self) -> float:
        return len(self.noisy_ids) / self.n_corpus if self.n_corpus else 0.0

    @property
    def warnings(self) -> list[str]:
        out = []
        if not self.clean_ids:
            out.append("clean selection is empty")
        if not self.noisy_ids:
            out.append("noisy selection is empty")
        return out

    def to_json_dict(self) -> dict:
        return {
            "metric": self.metric,
            "thresholds": self.thresholds.to_json_dict(),
            "n_corpus": self.n_corpus,
            "clean": {"count": len(self.clean_ids), "fraction": self.clean_fraction},
            "noisy": {"count": len(self.noisy_ids), "fraction": self.noisy_fraction},
            "warnings": self.warnings,
            "clean_ids": list(self.clean_ids),
            "noisy_ids": list(self.noisy_ids),
        }


def select(scores: ScoreReport, metric: str, thresholds: SelectionThresholds | None = None) -> SelectionResult:
    """Run both cutoffs and package the result (disjointness enforced)."""
    t = thresholds or SelectionThresholds()
    metric = _normalize_metric(metric)
    return SelectionResult(
        metric=metric,
        thresholds=t,
        clean_ids=tuple(select_clean(scores, metric, t)),
        noisy_ids=tuple(select_noisy(scores, metric, t)),
        n_corpus=len(scores.examples),
    )


def write_selection_json(result: SelectionResult, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(result.to_json_dict(), fh, indent=2, sort_keys=False)
        fh.write("\n")
