"""Desk-scale lab for contrastive parameter ensembling of a small summarizer.

The package covers the full loop: a deterministic synthetic noisy-summarization
corpus, factual-consistency and ROUGE metrics, clean/noisy training-data
selection, a trainable log-linear summarizer whose weights live in a binary
checkpoint container, parameter-space merging (contrastive, interpolation,
averaging), and an experiment harness with CSV/SVG reporting.
"""

__version__ = "0.1.0"
