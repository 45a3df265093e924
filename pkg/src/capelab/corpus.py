"""Deterministic synthetic noisy-summarization corpus.

Documents are rendered fact triples over a synthetic vocabulary; reference
summaries copy a subset of the document facts and are corrupted with
controlled extrinsic (out-of-source entity) and intrinsic (argument swap or
wrong predicate) hallucinations, each fact carrying a noise label.

Fact sampling is structured so that a bigram model can learn it: entities are
split into a subject pool (first half) and an object pool (second half), each
subject has a preferred predicate and each predicate a preferred object, with
the remaining probability spread uniformly. The structure-versus-copy tension
this creates is what makes hallucination observable in greedy decodes.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

from .rng import Stream, derive_seed

BOS = "BOS"
EOS = "EOS"
SEP = "SEP"

LABEL_CLEAN = "clean"
LABEL_EXTRINSIC = "extrinsic_entity"
LABEL_INTRINSIC = "intrinsic_swap"
NOISE_LABELS = (LABEL_CLEAN, LABEL_EXTRINSIC, LABEL_INTRINSIC)

# Canonical surface forms: no leading zeros, so parsing is a strict inverse
# of rendering.
_ENTITY_RE = re.compile(r"^E(0|[1-9][0-9]*)$")
_PREDICATE_RE = re.compile(r"^P(0|[1-9][0-9]*)$")

# Fact-distribution concentration: probability that a subject uses its
# preferred predicate / a predicate its preferred object. Mid-range values
# keep the trained models off the metric ceiling so expert/anti-expert shifts
# are visible.
PRIMARY_PREDICATE_WEIGHT = 0.80
PRIMARY_OBJECT_WEIGHT = 0.80

# Intrinsic noise retries before falling back to extrinsic substitution.
_MAX_INTRINSIC_RETRIES = 10


def entity_token(index: int) -> str:
    return f"E{index}"


def predicate_token(index: int) -> str:
    return f"P{index}"


def parse_entity_token(token: str) -> int | None:
    m = _ENTITY_RE.match(token)
    return int(m.group(1)) if m else None


def parse_predicate_token(token: str) -> int | None:
    m = _PREDICATE_RE.match(token)
    return int(m.group(1)) if m else None


@dataclass(frozen=True)
class Vocabulary:
    """Token universe: reserved BOS/EOS/SEP, then entities, predicates, fillers.

    Token ids are dense: 0..2 reserved, then entities, predicates, fillers.
    Surface forms ("E3", "P0", "F7") parse back to (class, index) uniquely.
    """

    n_entities: int = 60
    n_predicates: int = 12
    n_fillers: int = 20

    def __post_init__(self):
        if self.n_entities < 2 or self.n_predicates < 1 or self.n_fillers < 0:
            raise ValueError("vocabulary needs >= 2 entities and >= 1 predicate")

    @property
    def size(self) -> int:
        return 3 + self.n_entities + self.n_predicates + self.n_fillers

    @property
    def bos_id(self) -> int:
        return 0

    @property
    def eos_id(self) -> int:
        return 1

    @property
    def sep_id(self) -> int:
        return 2

    def entity_id(self, index: int) -> int:
        return 3 + index

    def predicate_id(self, index: int) -> int:
        return 3 + self.n_entities + index

    def filler_id(self, index: int) -> int:
        return 3 + self.n_entities + self.n_predicates + index

    def token(self, token_id: int) -> str:
        if token_id == 0:
            return BOS
        if token_id == 1:
            return EOS
        if token_id == 2:
            return SEP
        i = token_id - 3
        if i < self.n_entities:
            return entity_token(i)
        i -= self.n_entities
        if i < self.n_predicates:
            return predicate_token(i)
        i -= self.n_predicates
        if i < self.n_fillers:
            return f"F{i}"
        raise ValueError(f"token id {token_id} out of range for vocabulary of size {self.size}")

    def id(self, token: str) -> int:
        if token == BOS:
            return 0
        if token == EOS:
            return 1
        if token == SEP:
            return 2
        e = parse_entity_token(token)
        if e is not None and e < self.n_entities:
            return self.entity_id(e)
        p = parse_predicate_token(token)
        if p is not None and p < self.n_predicates:
            return self.predicate_id(p)
        m = re.match(r"^F(0|[1-9][0-9]*)$", token)
        if m and int(m.group(1)) < self.n_fillers:
            return self.filler_id(int(m.group(1)))
        raise ValueError(f"unknown token {token!r}")

    def encode(self, tokens) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.token(i) for i in ids]

    @property
    def subject_pool(self) -> range:
        """Entity indices usable as subjects (first half of the entities)."""
        return range(self.n_entities // 2)

    @property
    def object_pool(self) -> range:
        """Entity indices usable as objects (second half of the entities)."""
        return range(self.n_entities // 2, self.n_entities)


@dataclass(frozen=True, order=True)
class Fact:
    """One (subject, predicate, object) claim over entity/predicate indices."""

    subject: int
    predicate: int
    object: int

    def __post_init__(self):
        if self.subject == self.object:
            raise ValueError(f"fact subject and object must differ, got {self.subject}")
        if min(self.subject, self.predicate, self.object) < 0:
            raise ValueError("fact indices must be nonnegative")

    def triple(self) -> list[str]:
        return [entity_token(self.subject), predicate_token(self.predicate), entity_token(self.object)]

    @classmethod
    def from_triple(cls, triple) -> "Fact":
        if len(triple) != 3:
            raise ValueError(f"fact triple must have 3 tokens, got {triple!r}")
        s = parse_entity_token(triple[0])
        p = parse_predicate_token(triple[1])
        o = parse_entity_token(triple[2])
        if s is None or p is None or o is None:
            raise ValueError(f"not a valid fact triple: {triple!r}")
        return cls(s, p, o)

    @property
    def entities(self) -> frozenset[int]:
        return frozenset((self.subject, self.object))


def render_fact(fact: Fact) -> list[str]:
    """Fixed grammar: subject, predicate, object, separator."""
    return fact.triple() + [SEP]


def render_facts(facts) -> tuple[str, ...]:
    out: list[str] = []
    for f in facts:
        out.extend(render_fact(f))
    return tuple(out)


@dataclass(frozen=True)
class ParsedFacts:
    """Result of fact extraction: facts in order plus malformed span count."""

    facts: tuple[Fact, ...]
    unparseable_spans: int

    @property
    def fact_set(self) -> frozenset[Fact]:
        return frozenset(self.facts)


def parse_facts(tokens) -> ParsedFacts:
    """Extract (entity, predicate, entity) windows terminated by SEP or end.

    Total on any token sequence: BOS tokens are ignored, everything from the
    first EOS on is treated as past the end of the sequence, and any
    SEP-delimited fragment that is not exactly a well-formed triple counts as
    one unparseable span. The empty fragment after a trailing SEP is not a
    span.
    """
    stream: list[str] = []
    for tok in tokens:
        if tok == EOS:
            break
        if tok == BOS:
            continue
        stream.append(tok)

    segments: list[list[str]] = [[]]
    for tok in stream:
        if tok == SEP:
            segments.append([])
        else:
            segments[-1].append(tok)
    if segments and not segments[-1]:
        segments.pop()

    facts: list[Fact] = []
    bad = 0
    for seg in segments:
        fact = _parse_segment(seg)
        if fact is None:
            bad += 1
        else:
            facts.append(fact)
    return ParsedFacts(tuple(facts), bad)


def _parse_segment(seg: list[str]) -> Fact | None:
    if len(seg) != 3:
        return None
    s = parse_entity_token(seg[0])
    p = parse_predicate_token(seg[1])
    o = parse_entity_token(seg[2])
    if s is None or p is None or o is None or s == o:
        return None
    return Fact(s, p, o)


@dataclass(frozen=True)
class Example:
    """One corpus record: rendered source, noised reference summary, labels."""

    id: str
    source_tokens: tuple[str, ...]
    summary_tokens: tuple[str, ...]
    source_facts: tuple[Fact, ...]
    summary_facts: tuple[Fact, ...]
    noise_labels: tuple[str, ...]

    def __post_init__(self):
        if self.source_tokens != render_facts(self.source_facts):
            raise ValueError(f"example {self.id}: source tokens are not the rendering of its facts")
        if self.summary_tokens != render_facts(self.summary_facts):
            raise ValueError(f"example {self.id}: summary tokens are not the rendering of its facts")
        if len(self.noise_labels) != len(self.summary_facts):
            raise ValueError(f"example {self.id}: one noise label per summary fact required")
        for label, fact in zip(self.noise_labels, self.summary_facts):
            self._check_label(label, fact)

    def _check_label(self, label: str, fact: Fact) -> None:
        src = set(self.source_facts)
        src_entities = self.source_entities
        if label == LABEL_CLEAN:
            ok = fact in src
        elif label == LABEL_EXTRINSIC:
            ok = bool(fact.entities - src_entities)
        elif label == LABEL_INTRINSIC:
            ok = fact.entities <= src_entities and fact not in src
        else:
            raise ValueError(f"example {self.id}: unknown noise label {label!r}")
        if not ok:
            raise ValueError(f"example {self.id}: fact {fact} violates its {label!r} label")

    @property
    def source_fact_set(self) -> frozenset[Fact]:
        return frozenset(self.source_facts)

    @property
    def source_entities(self) -> frozenset[int]:
        return frozenset(e for f in self.source_facts for e in f.entities)

    def to_json_dict(self) -> dict:
        return {
            "id": self.id,
            "source": " ".join(self.source_tokens),
            "summary": " ".join(self.summary_tokens),
            "source_facts": [f.triple() for f in self.source_facts],
            "summary_facts": [f.triple() for f in self.summary_facts],
            "noise_labels": list(self.noise_labels),
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "Example":
        return cls(
            id=str(obj["id"]),
            source_tokens=tuple(obj["source"].split()) if obj["source"] else (),
            summary_tokens=tuple(obj["summary"].split()) if obj["summary"] else (),
            source_facts=tuple(Fact.from_triple(t) for t in obj["source_facts"]),
            summary_facts=tuple(Fact.from_triple(t) for t in obj["summary_facts"]),
            noise_labels=tuple(obj["noise_labels"]),
        )


@dataclass(frozen=True)
class CorpusConfig:
    """Generator configuration; together with the seed it fixes every byte."""

    n_examples: int = 5000
    facts_per_doc: tuple[int, int] = (4, 6)
    facts_per_summary: tuple[int, int] = (2, 3)
    p_extrinsic: float = 0.25
    p_intrinsic: float = 0.10
    n_entities: int = 60
    n_predicates: int = 12
    n_fillers: int = 20
    seed: int = 17

    def __post_init__(self):
        object.__setattr__(self, "facts_per_doc", tuple(self.facts_per_doc))
        object.__setattr__(self, "facts_per_summary", tuple(self.facts_per_summary))
        if self.n_examples < 1:
            raise ValueError("n_examples must be positive")
        lo_d, hi_d = self.facts_per_doc
        lo_s, hi_s = self.facts_per_summary
        if not (1 <= lo_d <= hi_d) or not (1 <= lo_s <= hi_s):
            raise ValueError("fact count ranges must be nonempty and positive")
        if hi_s > lo_d:
            raise ValueError("facts_per_summary max must not exceed facts_per_doc min")
        if self.p_extrinsic < 0 or self.p_intrinsic < 0 or self.p_extrinsic + self.p_intrinsic > 1:
            raise ValueError("noise probabilities must be nonnegative and sum to at most 1")
        if self.n_entities // 2 <= hi_d:
            raise ValueError("need more entities: each half-pool must exceed facts_per_doc max")
        if self.n_predicates < 2:
            raise ValueError("need at least 2 predicates")

    @property
    def vocabulary(self) -> Vocabulary:
        return Vocabulary(self.n_entities, self.n_predicates, self.n_fillers)

    def to_json_dict(self) -> dict:
        return {
            "n_examples": self.n_examples,
            "facts_per_doc": list(self.facts_per_doc),
            "facts_per_summary": list(self.facts_per_summary),
            "p_extrinsic": self.p_extrinsic,
            "p_intrinsic": self.p_intrinsic,
            "n_entities": self.n_entities,
            "n_predicates": self.n_predicates,
            "n_fillers": self.n_fillers,
            "seed": self.seed,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "CorpusConfig":
        kwargs = dict(obj)
        for key in ("facts_per_doc", "facts_per_summary"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


def _primary_predicate(subject: int, vocab: Vocabulary) -> int:
    return subject % vocab.n_predicates


def _primary_object(predicate: int, vocab: Vocabulary) -> int:
    pool = vocab.object_pool
    return pool[predicate % len(pool)]


def _sample_fact(subject: int, vocab: Vocabulary, rng: Stream) -> Fact:
    primary_p = _primary_predicate(subject, vocab)
    if rng.random() < PRIMARY_PREDICATE_WEIGHT:
        predicate = primary_p
    else:
        predicate = rng.choice([p for p in range(vocab.n_predicates) if p != primary_p])
    primary_o = _primary_object(predicate, vocab)
    if rng.random() < PRIMARY_OBJECT_WEIGHT:
        obj = primary_o
    else:
        obj = rng.choice([o for o in vocab.object_pool if o != primary_o])
    return Fact(subject, predicate, obj)


def _biased_out_of_source(candidates: list[int], rng: Stream) -> int:
    # Hallucinated entities are not uniform: mass concentrates on a few
    # low-index "attractor" entities (geometric over the sorted candidates),
    # the way real models hallucinate frequent names. The concentration is
    # what lets a bigram model pick the habit up from noisy data.
    j = 0
    while j < len(candidates) - 1 and rng.random() >= 0.5:
        j += 1
    return candidates[j]


def _extrinsic_fact(fact: Fact, vocab: Vocabulary, src_entities: set[int], rng: Stream) -> Fact:
    # Replace one entity, keeping its role, with an entity absent from the source.
    if rng.random() < 0.5:
        candidates = [e for e in vocab.subject_pool if e not in src_entities]
        return Fact(_biased_out_of_source(candidates, rng), fact.predicate, fact.object)
    candidates = [e for e in vocab.object_pool if e not in src_entities]
    return Fact(fact.subject, fact.predicate, _biased_out_of_source(candidates, rng))


def _intrinsic_fact(
    fact: Fact,
    vocab: Vocabulary,
    src_facts: set[Fact],
    src_predicates: list[int],
    src_entities: set[int],
    rng: Stream,
) -> tuple[Fact, str]:
    other_predicates = [p for p in src_predicates if p != fact.predicate]
    for _ in range(_MAX_INTRINSIC_RETRIES):
        ops = ["swap"] + (["predicate"] if other_predicates else [])
        op = rng.choice(ops)
        if op == "swap":
            candidate = Fact(fact.object, fact.predicate, fact.subject)
        else:
            candidate = Fact(fact.subject, rng.choice(other_predicates), fact.object)
        if candidate not in src_facts:
            return candidate, LABEL_INTRINSIC
    return _extrinsic_fact(fact, vocab, src_entities, rng), LABEL_EXTRINSIC


def _generate_example(index: int, config: CorpusConfig) -> Example:
    vocab = config.vocabulary
    rng = Stream(derive_seed(config.seed, "example", index))

    n_doc = rng.randint(*config.facts_per_doc)
    subjects = rng.sample(vocab.subject_pool, n_doc)
    source_facts = tuple(_sample_fact(s, vocab, rng) for s in subjects)
    src_fact_set = set(source_facts)
    src_entities = {e for f in source_facts for e in f.entities}
    src_predicates = sorted({f.predicate for f in source_facts})

    n_sum = rng.randint(*config.facts_per_summary)
    chosen = rng.sample(source_facts, n_sum)

    summary_facts: list[Fact] = []
    labels: list[str] = []
    for fact in chosen:
        u = rng.random()
        if u < config.p_extrinsic:
            summary_facts.append(_extrinsic_fact(fact, vocab, src_entities, rng))
            labels.append(LABEL_EXTRINSIC)
        elif u < config.p_extrinsic + config.p_intrinsic:
            noised, label = _intrinsic_fact(fact, vocab, src_fact_set, src_predicates, src_entities, rng)
            summary_facts.append(noised)
            labels.append(label)
        else:
            summary_facts.append(fact)
            labels.append(LABEL_CLEAN)

    return Example(
        id=f"ex{index:06d}",
        source_tokens=render_facts(source_facts),
        summary_tokens=render_facts(summary_facts),
        source_facts=source_facts,
        summary_facts=tuple(summary_facts),
        noise_labels=tuple(labels),
    )


def generate(config: CorpusConfig) -> list[Example]:
    """Generate the corpus; a pure function of the config (seed included)."""
    return [_generate_example(i, config) for i in range(config.n_examples)]


def split_examples(examples: list[Example]) -> tuple[list[Example], list[Example], list[Example]]:
    """80/10/10 train/validation/test split by index."""
    n = len(examples)
    n_eval = n // 10
    n_train = n - 2 * n_eval
    return examples[:n_train], examples[n_train : n_train + n_eval], examples[n_train + n_eval :]


def write_jsonl(examples, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_json_dict(), separators=(",", ":"), ensure_ascii=False))
            fh.write("\n")


def read_jsonl(path) -> list[Example]:
    out: list[Example] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(Example.from_json_dict(json.loads(line)))
    return out


def write_split_corpus(examples: list[Example], out_dir, stem: str = "corpus") -> dict[str, Path]:
    """Write the three split files <stem>.train/.valid/.test as JSONL."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, valid, test = split_examples(examples)
    paths = {}
    for name, part in (("train", train), ("valid", valid), ("test", test)):
        path = out_dir / f"{stem}.{name}.jsonl"
        write_jsonl(part, path)
        paths[name] = path
    return paths
