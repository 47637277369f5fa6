"""Object hallucination rates for generated captions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

from evalign.errors import ArityError
from evalign.metrics.vocabulary import ObjectVocabulary, extract_objects


@dataclass(frozen=True)
class ChairResult:
    """Sentence- and instance-level hallucination rates, both in [0, 1].

    chair_s: fraction of captions mentioning at least one object absent from
      the image's ground truth.
    chair_i: hallucinated mentions over all object mentions (0/0 counts as 0).
    per_caption: (mentioned, hallucinated) canonical-label sets per caption.
    """

    chair_s: float
    chair_i: float
    per_caption: tuple[tuple[frozenset[str], frozenset[str]], ...]


def chair(
    captions: Sequence[tuple[str, Iterable[str]]],
    vocab: ObjectVocabulary,
) -> ChairResult:
    """Score (generated caption, ground-truth object set) pairs."""
    if not captions:
        raise ArityError("chair needs at least one caption")
    per_caption = []
    hallucinated_captions = 0
    mentioned_total = 0
    hallucinated_total = 0
    for text, gt_objects in captions:
        mentioned = frozenset(extract_objects(text, vocab))
        hallucinated = mentioned - frozenset(gt_objects)
        per_caption.append((mentioned, hallucinated))
        mentioned_total += len(mentioned)
        hallucinated_total += len(hallucinated)
        if hallucinated:
            hallucinated_captions += 1
    chair_s = hallucinated_captions / len(captions)
    chair_i = hallucinated_total / mentioned_total if mentioned_total else 0.0
    return ChairResult(chair_s=chair_s, chair_i=chair_i, per_caption=tuple(per_caption))
