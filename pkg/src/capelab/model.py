"""Log-linear copy-or-hallucinate autoregressive summarizer.

The next-token distribution is softmax(W[prev, u] + c[u] * [u in source set]):
a bigram table plus a per-token source-membership bonus. That is the smallest
model whose failure mode is literally "emitting tokens that are not in the
source", so factual-quality differences in training data show up directly in
its decodes. Parameters live in the checkpoint container under the tensor
names "bigram.logits" and "copy.weights", so all parameter-space merges apply
to trained models unchanged.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint
from .corpus import Example, Vocabulary
from .rng import Stream, derive_seed

logger = logging.getLogger(__name__)

BIGRAM_NAME = "bigram.logits"
COPY_NAME = "copy.weights"


class TrainingError(RuntimeError):
    """Training aborted (empty corpus or non-finite loss)."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    learning_rate: float = 0.5
    batch_size: int = 32
    l2: float = 1e-4
    seed: int = 0
    init: str = "gaussian"
    init_sigma: float = 0.01

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.l2 < 0:
            raise ValueError("l2 must be nonnegative")
        if self.init not in ("zeros", "gaussian"):
            raise ValueError(f"unknown init {self.init!r}")

    def to_json_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "l2": self.l2,
            "seed": self.seed,
            "init": self.init,
            "init_sigma": self.init_sigma,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "TrainConfig":
        return cls(**obj)


@dataclass
class ModelParams:
    """Trained weights plus the vocabulary they are indexed by."""

    vocab: Vocabulary
    bigram_logits: np.ndarray
    copy_weights: np.ndarray
    metadata: dict[str, str] | None = None

    def __post_init__(self):
        V = self.vocab.size
        self.bigram_logits = np.ascontiguousarray(self.bigram_logits, dtype=np.float32)
        self.copy_weights = np.ascontiguousarray(self.copy_weights, dtype=np.float32)
        if self.bigram_logits.shape != (V, V):
            raise ValueError(f"bigram logits must be ({V}, {V}), got {self.bigram_logits.shape}")
        if self.copy_weights.shape != (V,):
            raise ValueError(f"copy weights must be ({V},), got {self.copy_weights.shape}")
        if self.metadata is None:
            self.metadata = {}

    def to_checkpoint(self, name: str = "") -> Checkpoint:
        meta = dict(self.metadata)
        meta.setdefault("vocab_entities", str(self.vocab.n_entities))
        meta.setdefault("vocab_predicates", str(self.vocab.n_predicates))
        meta.setdefault("vocab_fillers", str(self.vocab.n_fillers))
        meta.setdefault("seed", "")
        meta.setdefault("parent", "")
        if name:
            meta["name"] = name
        return Checkpoint({BIGRAM_NAME: self.bigram_logits, COPY_NAME: self.copy_weights}, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "ModelParams":
        try:
            vocab = Vocabulary(
                n_entities=int(ckpt.metadata["vocab_entities"]),
                n_predicates=int(ckpt.metadata["vocab_predicates"]),
                n_fillers=int(ckpt.metadata["vocab_fillers"]),
            )
        except KeyError as exc:
            raise ValueError(f"checkpoint metadata lacks vocabulary descriptor {exc}") from exc
        if BIGRAM_NAME not in ckpt or COPY_NAME not in ckpt:
            raise ValueError(f"checkpoint lacks {BIGRAM_NAME!r}/{COPY_NAME!r} tensors")
        return cls(vocab, ckpt[BIGRAM_NAME], ckpt[COPY_NAME], dict(ckpt.metadata))


def _source_id_set(params: ModelParams, source_tokens: Sequence[str]) -> frozenset[int]:
    return frozenset(params.vocab.encode(source_tokens))


def _source_mask(vocab_size: int, source_ids) -> np.ndarray:
    mask = np.zeros(vocab_size, dtype=np.float64)
    mask[list(source_ids)] = 1.0
    return mask


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def prob_next(params: ModelParams, prev: int, source_ids) -> np.ndarray:
    """Next-token distribution after token id `prev` given the source id set."""
    V = params.vocab.size
    if not 0 <= prev < V:
        raise ValueError(f"prev token id {prev} out of range for vocabulary of size {V}")
    logits = params.bigram_logits[prev].astype(np.float64) + params.copy_weights.astype(
        np.float64
    ) * _source_mask(V, source_ids)
    return np.exp(_log_softmax(logits))


def sequence_nll(params: ModelParams, source_tokens: Sequence[str], summary_tokens: Sequence[str]) -> float:
    """Negative log-likelihood of the summary (terminal EOS included)."""
    nll, _, _ = _nll_and_grad_ids(
        params.bigram_logits.astype(np.float64),
        params.copy_weights.astype(np.float64),
        params.vocab,
        params.vocab.encode(source_tokens),
        params.vocab.encode(summary_tokens),
        want_grad=False,
    )
    return nll


def nll_gradient(
    params: ModelParams, source_tokens: Sequence[str], summary_tokens: Sequence[str]
) -> tuple[float, np.ndarray, np.ndarray]:
    """(nll, d nll / d bigram_logits, d nll / d copy_weights), all analytic."""
    return _nll_and_grad_ids(
        params.bigram_logits.astype(np.float64),
        params.copy_weights.astype(np.float64),
        params.vocab,
        params.vocab.encode(source_tokens),
        params.vocab.encode(summary_tokens),
        want_grad=True,
    )


def _nll_and_grad_ids(W, c, vocab, source_ids, summary_ids, want_grad=True):
    V = vocab.size
    mask = _source_mask(V, set(source_ids))
    prevs = [vocab.bos_id] + list(summary_ids)
    targets = list(summary_ids) + [vocab.eos_id]
    logits = W[np.array(prevs)] + c * mask
    logp = _log_softmax(logits)
    nll = -float(logp[np.arange(len(targets)), targets].sum())
    if not want_grad:
        return nll, None, None
    g = np.exp(logp)
    g[np.arange(len(targets)), targets] -= 1.0
    dW = np.zeros_like(W)
    np.add.at(dW, np.array(prevs), g)
    dc = (g * mask).sum(axis=0)
    return nll, dW, dc


@dataclass
class _PreparedData:
    prevs: np.ndarray  # (N, T) int32, BOS-prefixed summaries, padded
    targets: np.ndarray  # (N, T) int32, EOS-suffixed summaries, padded
    valid: np.ndarray  # (N, T) bool
    source_masks: np.ndarray  # (N, V) float64


def _prepare(examples: Sequence[Example], vocab: Vocabulary) -> _PreparedData:
    n = len(examples)
    seqs = []
    for ex in examples:
        summary_ids = vocab.encode(ex.summary_tokens)
        seqs.append(([vocab.bos_id] + summary_ids, summary_ids + [vocab.eos_id]))
    t_max = max(len(p) for p, _ in seqs)
    prevs = np.zeros((n, t_max), dtype=np.int32)
    targets = np.zeros((n, t_max), dtype=np.int32)
    valid = np.zeros((n, t_max), dtype=bool)
    source_masks = np.zeros((n, vocab.size), dtype=np.float64)
    for i, (ex, (p, t)) in enumerate(zip(examples, seqs)):
        prevs[i, : len(p)] = p
        targets[i, : len(t)] = t
        valid[i, : len(t)] = True
        source_masks[i, list(set(vocab.encode(ex.source_tokens)))] = 1.0
    return _PreparedData(prevs, targets, valid, source_masks)


def _batch_loss_and_grad(W, c, data: _PreparedData, idx: np.ndarray):
    prevs = data.prevs[idx]
    targets = data.targets[idx]
    valid = data.valid[idx]
    masks = data.source_masks[idx]
    B, T = prevs.shape

    logits = W[prevs] + (c[None, :] * masks)[:, None, :]
    logp = _log_softmax(logits)
    tok_nll = -np.take_along_axis(logp, targets[..., None], axis=2)[..., 0]
    loss = float((tok_nll * valid).sum() / B)

    g = np.exp(logp)
    np.put_along_axis(g, targets[..., None], np.take_along_axis(g, targets[..., None], axis=2) - 1.0, axis=2)
    g *= valid[..., None]
    g /= B
    dW = np.zeros_like(W)
    np.add.at(dW, prevs.reshape(-1), g.reshape(B * T, -1))
    dc = np.einsum("btv,bv->v", g, masks)
    return loss, dW, dc


def _init_params(vocab: Vocabulary, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    V = vocab.size
    if cfg.init == "zeros":
        return np.zeros((V, V)), np.zeros(V)
    rng = Stream(derive_seed(cfg.seed, "init"))
    W = np.array([rng.gauss() for _ in range(V * V)], dtype=np.float64).reshape(V, V) * cfg.init_sigma
    c = np.array([rng.gauss() for _ in range(V)], dtype=np.float64) * cfg.init_sigma
    return W, c


def _sgd(
    W: np.ndarray,
    c: np.ndarray,
    examples: Sequence[Example],
    cfg: TrainConfig,
    vocab: Vocabulary,
) -> tuple[np.ndarray, np.ndarray]:
    data = _prepare(examples, vocab)
    n = len(examples)
    order = list(range(n))
    prev_epoch_loss = None
    for epoch in range(cfg.epochs):
        Stream(derive_seed(cfg.seed, "shuffle", epoch)).shuffle(order)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = np.array(order[start : start + cfg.batch_size])
            loss, dW, dc = _batch_loss_and_grad(W, c, data, idx)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_size}: {loss}"
                )
            W -= cfg.learning_rate * (dW + cfg.l2 * W)
            c -= cfg.learning_rate * (dc + cfg.l2 * c)
            total += loss * len(idx)
        epoch_loss = total / n
        if prev_epoch_loss is not None and epoch_loss > prev_epoch_loss:
            logger.warning(
                "training loss increased at epoch %d: %.6f -> %.6f", epoch, prev_epoch_loss, epoch_loss
            )
        prev_epoch_loss = epoch_loss
    return W, c


def train(examples: Sequence[Example], cfg: TrainConfig, vocab: Vocabulary) -> ModelParams:
    """Mini-batch SGD maximum-likelihood training from a fresh initialization."""
    if not examples:
        raise TrainingError("cannot train on an empty corpus")
    W, c = _init_params(vocab, cfg)
    W, c = _sgd(W, c, examples, cfg, vocab)
    meta = {
        "vocab_entities": str(vocab.n_entities),
        "vocab_predicates": str(vocab.n_predicates),
        "vocab_fillers": str(vocab.n_fillers),
        "seed": str(cfg.seed),
        "parent": "",
    }
    return ModelParams(vocab, W.astype(np.float32), c.astype(np.float32), meta)


def finetune(params: ModelParams, subset: Sequence[Example], cfg: TrainConfig) -> ModelParams:
    """Same loop as train, initialized from existing parameters."""
    if not subset:
        raise TrainingError("cannot fine-tune on an empty subset")
    W = params.bigram_logits.astype(np.float64)
    c = params.copy_weights.astype(np.float64)
    W, c = _sgd(W, c, subset, cfg, params.vocab)
    meta = dict(params.metadata or {})
    meta["parent"] = meta.get("name", "")
    meta.pop("name", None)
    meta["seed"] = str(cfg.seed)
    return ModelParams(params.vocab, W.astype(np.float32), c.astype(np.float32), meta)


def parse_strategy(strategy: str) -> tuple[str, int]:
    """Parse "greedy" or "beam:K" into (kind, beam size)."""
    if strategy == "greedy":
        return "greedy", 1
    if strategy.startswith("beam:"):
        k = int(strategy.split(":", 1)[1])
        if k < 1:
            raise ValueError(f"beam size must be >= 1, got {k}")
        return "beam", k
    raise ValueError(f"unknown decode strategy {strategy!r} (use 'greedy' or 'beam:K')")


def decode(
    params: ModelParams,
    source_tokens: Sequence[str],
    max_len: int = 40,
    strategy: str = "greedy",
) -> list[str]:
    """Generate a summary from BOS until EOS or max_len tokens.

    BOS is masked from outputs; a generated terminal EOS is kept. Beam search
    ranks hypotheses by length-normalized log-probability with ties broken
    toward lower token ids.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    kind, beam = parse_strategy(strategy)
    vocab = params.vocab
    source_ids = _source_id_set(params, source_tokens)
    if kind == "greedy":
        ids = _decode_greedy(params, source_ids, max_len)
    else:
        ids = _decode_beam(params, source_ids, max_len, beam)
    return vocab.decode(ids)


def _scores_row(params: ModelParams, prev: int, mask: np.ndarray) -> np.ndarray:
    row = params.bigram_logits[prev].astype(np.float64) + params.copy_weights.astype(np.float64) * mask
    row[params.vocab.bos_id] = -np.inf
    return row


def _decode_greedy(params: ModelParams, source_ids, max_len: int) -> list[int]:
    vocab = params.vocab
    mask = _source_mask(vocab.size, source_ids)
    out: list[int] = []
    prev = vocab.bos_id
    for _ in range(max_len):
        nxt = int(np.argmax(_scores_row(params, prev, mask)))
        out.append(nxt)
        if nxt == vocab.eos_id:
            break
        prev = nxt
    return out


def _decode_beam(params: ModelParams, source_ids, max_len: int, beam: int) -> list[int]:
    vocab = params.vocab
    mask = _source_mask(vocab.size, source_ids)
    # Hypothesis: (token ids, total logprob, finished)
    live: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    finished: list[tuple[tuple[int, ...], float]] = []
    for _ in range(max_len):
        candidates: list[tuple[tuple[int, ...], float]] = []
        for ids, score in live:
            prev = ids[-1] if ids else vocab.bos_id
            logits = params.bigram_logits[prev].astype(np.float64) + params.copy_weights.astype(np.float64) * mask
            logits[vocab.bos_id] = -np.inf
            logp = _log_softmax(logits)
            for tok in range(vocab.size):
                if tok == vocab.bos_id:
                    continue
                candidates.append((ids + (tok,), score + float(logp[tok])))
        candidates.sort(key=lambda h: (-h[1] / len(h[0]), h[0]))
        kept = candidates[:beam]
        live = []
        for ids, score in kept:
            if ids[-1] == vocab.eos_id:
                finished.append((ids, score))
            else:
                live.append((ids, score))
        if not live:
            break
    pool = finished + live
    pool.sort(key=lambda h: (-h[1] / len(h[0]), h[0]))
    return list(pool[0][0])


def decode_corpus(
    params: ModelParams,
    examples: Sequence[Example],
    max_len: int = 40,
    strategy: str = "greedy",
) -> list[list[str]]:
    """Decode every example; the greedy path runs all examples in lockstep."""
    kind, _ = parse_strategy(strategy)
    if kind != "greedy" or not examples:
        return [decode(params, ex.source_tokens, max_len, strategy) for ex in examples]

    vocab = params.vocab
    n = len(examples)
    masks = np.zeros((n, vocab.size), dtype=np.float64)
    for i, ex in enumerate(examples):
        masks[i, list(set(vocab.encode(ex.source_tokens)))] = 1.0
    W = params.bigram_logits.astype(np.float64)
    c = params.copy_weights.astype(np.float64)
    prevs = np.full(n, vocab.bos_id, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    outputs: list[list[int]] = [[] for _ in range(n)]
    for _ in range(max_len):
        scores = W[prevs] + c[None, :] * masks
        scores[:, vocab.bos_id] = -np.inf
        nxt = scores.argmax(axis=1)
        for i in range(n):
            if not done[i]:
                outputs[i].append(int(nxt[i]))
                if nxt[i] == vocab.eos_id:
                    done[i] = True
        prevs = nxt
        if done.all():
            break
    return [vocab.decode(ids) for ids in outputs]
