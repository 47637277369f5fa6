"""Consensus captioning metric over TF-IDF weighted n-grams.

Implements the clipped, length-penalized variant: per n in 1..n_max the
candidate and each reference become TF-IDF vectors; the candidate counts are
clipped by the reference counts in the dot product; cosine similarity is
damped by a Gaussian penalty on the token-length difference; similarities are
averaged over n and references and scaled by 10; the corpus score is the mean
over items. A candidate identical to its sole reference scores 10.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from evalign.errors import ArityError

_NON_ALNUM = re.compile(r"[^a-z0-9]+")


@dataclass(frozen=True)
class CiderSpec:
    n_max: int = 4
    sigma: float = 6.0
    # "reference-set": document frequencies from the evaluation reference
    # sets themselves; "corpus": from an external corpus passed to cider().
    idf_source: str = "reference-set"

    def __post_init__(self):
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")
        if self.idf_source not in ("reference-set", "corpus"):
            raise ValueError(f"unknown idf_source: {self.idf_source!r}")


@dataclass(frozen=True)
class CiderResult:
    score: float
    per_item: tuple[float, ...]


def tokenize(text: str) -> list[str]:
    return [t for t in _NON_ALNUM.split(text.lower()) if t]


def _ngram_counts(tokens: list[str], n_max: int) -> list[Counter]:
    counts = []
    for n in range(1, n_max + 1):
        counts.append(Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)))
    return counts


def build_document_frequencies(
    reference_sets: Sequence[Sequence[str]], n_max: int
) -> tuple[dict, int]:
    """df[ngram] = number of reference sets mentioning it in any reference."""
    df: dict[tuple, int] = {}
    for refs in reference_sets:
        seen: set[tuple] = set()
        for ref in refs:
            tokens = tokenize(ref)
            for counts in _ngram_counts(tokens, n_max):
                seen.update(counts)
        for gram in seen:
            df[gram] = df.get(gram, 0) + 1
    return df, len(reference_sets)


def _tfidf(counts: Counter, df: dict, log_n_docs: float) -> tuple[dict, float]:
    vec = {}
    norm_sq = 0.0
    for gram, tf in counts.items():
        idf = log_n_docs - math.log(max(1.0, df.get(gram, 0)))
        w = tf * idf
        vec[gram] = w
        norm_sq += w * w
    return vec, math.sqrt(norm_sq)


def _similarity(
    cand_vec: dict,
    cand_norm: float,
    ref_vec: dict,
    ref_norm: float,
    length_delta: int,
    sigma: float,
) -> float:
    if cand_norm == 0.0 or ref_norm == 0.0:
        return 0.0
    dot = 0.0
    for gram, w in cand_vec.items():
        rw = ref_vec.get(gram)
        if rw is not None:
            dot += min(w, rw) * rw
    penalty = math.exp(-(length_delta**2) / (2.0 * sigma**2))
    return dot / (cand_norm * ref_norm) * penalty


def cider(
    candidates: Sequence[str],
    references: Sequence[Sequence[str]],
    spec: CiderSpec = CiderSpec(),
    idf_corpus: Sequence[Sequence[str]] | None = None,
) -> CiderResult:
    """Corpus-level score for candidates against per-item reference sets."""
    if len(candidates) != len(references):
        raise ArityError(
            f"{len(candidates)} candidates vs {len(references)} reference sets"
        )
    if not candidates:
        raise ArityError("cider needs at least one candidate")
    for i, refs in enumerate(references):
        if not refs:
            raise ArityError(f"empty reference set at index {i}")

    if spec.idf_source == "corpus":
        if idf_corpus is None:
            raise ArityError("idf_source='corpus' requires idf_corpus")
        df, n_docs = build_document_frequencies(idf_corpus, spec.n_max)
    else:
        df, n_docs = build_document_frequencies(references, spec.n_max)
    log_n_docs = math.log(max(1, n_docs))

    per_item = []
    for cand, refs in zip(candidates, references):
        cand_tokens = tokenize(cand)
        cand_grams = _ngram_counts(cand_tokens, spec.n_max)
        sims_by_n = [0.0] * spec.n_max
        for ref in refs:
            ref_tokens = tokenize(ref)
            ref_grams = _ngram_counts(ref_tokens, spec.n_max)
            delta = len(cand_tokens) - len(ref_tokens)
            for n_idx in range(spec.n_max):
                cand_vec, cand_norm = _tfidf(cand_grams[n_idx], df, log_n_docs)
                ref_vec, ref_norm = _tfidf(ref_grams[n_idx], df, log_n_docs)
                sims_by_n[n_idx] += _similarity(
                    cand_vec, cand_norm, ref_vec, ref_norm, delta, spec.sigma
                )
        item = 10.0 * sum(sims_by_n) / (spec.n_max * len(refs))
        per_item.append(item)
    return CiderResult(score=sum(per_item) / len(per_item), per_item=tuple(per_item))
