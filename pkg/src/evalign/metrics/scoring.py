"""Answer normalization, abstention metrics, matching accuracy, aggregation."""

from __future__ import annotations

import re
import statistics
from dataclasses import dataclass
from typing import Mapping, Sequence

from evalign.errors import ArityError

_PUNCT = re.compile(r"[^\w\s]")
_ARTICLES = ("a", "an", "the")


def normalize_answer(raw: str) -> str:
    """Lowercase, strip punctuation, collapse whitespace, drop leading articles."""
    tokens = _PUNCT.sub(" ", raw.lower()).split()
    while tokens and tokens[0] in _ARTICLES:
        tokens.pop(0)
    return " ".join(tokens)


@dataclass(frozen=True)
class AbstentionResult:
    """Exact-match accuracy plus binary abstain-vs-absurd classification scores.

    degenerate is set when the abstain class is empty on either side, in which
    case the affected precision/recall (and thus f1) are defined as 0.
    """

    overall_acc: float
    abst_acc: float
    abst_precision: float
    abst_recall: float
    abst_f1: float
    degenerate: bool


def abstention_metrics(
    preds: Sequence[str],
    records: Sequence,
    keyword: str = "doesnotapply",
) -> AbstentionResult:
    """Score predictions against VQA records carrying `answer` and `absurd`."""
    if len(preds) != len(records):
        raise ArityError(f"{len(preds)} preds vs {len(records)} records")
    if not records:
        raise ArityError("abstention_metrics needs at least one record")
    key = normalize_answer(keyword)
    hits = 0
    tp = fp = fn = tn = 0
    for pred, rec in zip(preds, records):
        norm = normalize_answer(pred)
        if norm == normalize_answer(rec.answer):
            hits += 1
        abstained = norm == key
        if abstained and rec.absurd:
            tp += 1
        elif abstained:
            fp += 1
        elif rec.absurd:
            fn += 1
        else:
            tn += 1
    n = len(records)
    degenerate = (tp + fp) == 0 or (tp + fn) == 0
    precision = tp / (tp + fp) if (tp + fp) else 0.0
    recall = tp / (tp + fn) if (tp + fn) else 0.0
    f1 = 2 * precision * recall / (precision + recall) if (precision + recall) else 0.0
    return AbstentionResult(
        overall_acc=hits / n,
        abst_acc=(tp + tn) / n,
        abst_precision=precision,
        abst_recall=recall,
        abst_f1=f1,
        degenerate=degenerate,
    )


@dataclass(frozen=True)
class ItmResult:
    accuracy: float
    by_kind: Mapping[str, float]


def itm_accuracy(
    verdicts: Sequence[str],
    labels: Sequence[str],
    kinds: Sequence[str | None] | None = None,
) -> ItmResult:
    """Match yes/no verdicts against positive/negative labels.

    "unknown" verdicts count as incorrect. When negative kinds are supplied,
    per-kind accuracies are reported alongside the overall value.
    """
    if len(verdicts) != len(labels):
        raise ArityError(f"{len(verdicts)} verdicts vs {len(labels)} labels")
    if kinds is not None and len(kinds) != len(labels):
        raise ArityError("kinds length mismatch")
    if not labels:
        raise ArityError("itm_accuracy needs at least one item")
    correct = []
    for verdict, label in zip(verdicts, labels):
        correct.append(
            (verdict == "yes" and label == "positive")
            or (verdict == "no" and label == "negative")
        )
    by_kind: dict[str, float] = {}
    if kinds is not None:
        totals: dict[str, list[int]] = {}
        for ok, kind in zip(correct, kinds):
            if kind is None:
                continue
            hit_total = totals.setdefault(kind, [0, 0])
            hit_total[0] += int(ok)
            hit_total[1] += 1
        by_kind = {k: hit / total for k, (hit, total) in sorted(totals.items())}
    return ItmResult(accuracy=sum(correct) / len(correct), by_kind=by_kind)


@dataclass(frozen=True)
class Aggregate:
    mean: float
    std: float
    n: int
    flagged: bool  # single-sample aggregate, std fixed at 0

    def as_tuple(self) -> tuple[float, float]:
        return (self.mean, self.std)


def aggregate(per_seed_scores: Sequence[float]) -> Aggregate:
    """Mean and sample standard deviation (n-1 denominator) over repeats."""
    if not per_seed_scores:
        raise ArityError("aggregate needs at least one score")
    mean = statistics.fmean(per_seed_scores)
    if len(per_seed_scores) == 1:
        return Aggregate(mean=mean, std=0.0, n=1, flagged=True)
    return Aggregate(
        mean=mean,
        std=statistics.stdev(per_seed_scores),
        n=len(per_seed_scores),
        flagged=False,
    )
