"""Experiment orchestration across (axis, variant, shots, seed) cells.

For every cell the runner samples a query/demonstration split, assembles one
prompt per query for the requested variant, fans exchanges out to the
endpoint under the concurrency limit, parses the raw generations, scores the
axis metrics, and aggregates per-seed values into (mean, std) cell entries.
With a deterministic endpoint the whole pipeline is a pure function of the
configuration and datasets.

The per-repetition context is the prefix of the sampled demonstration pool
(optionally class-rebalanced), so repeats with different seeds see different
contexts while a fixed seed reproduces its context exactly. A shot count of
zero uses the zero-shot convention: two text-only demonstration chunks plus
the query image.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

from evalign import corpus, promptkit
from evalign.corpus import SampledSplit, TaskRecord
from evalign.errors import (
    BalanceError,
    CapacityError,
    ConfigError,
    EndpointError,
    EvalignError,
    JudgeProtocolError,
    ProtocolError,
)
from evalign.metrics import (
    abstention_metrics,
    aggregate,
    chair,
    cider,
    extract_objects,
    itm_accuracy,
    load_vocabulary,
    normalize_answer,
)
from evalign.modelio import (
    MAX_NEW_TOKENS_DEFAULTS,
    EndpointClient,
    GenerationParams,
    JudgeClient,
)
from evalign.promptkit import (
    CohDemonstration,
    Demonstration,
    InterleavedPrompt,
    MultitaskDemonstration,
    PromptTemplate,
    RelevanceProbe,
    TemplateConfig,
    parse_answer,
    parse_yes_no,
    split_multitask_answer,
)
from evalign.report import CellValue, MetricReport, ReportCell

AXES = ("hallucination", "abstention", "compositionality", "explainability", "instruction")
VARIANTS = ("zero_shot", "icl", "coh_icl", "sc_icl", "mt_icl")
MT_AXES = ("abstention", "hallucination", "explainability")

_BALANCE_FIELDS = {"abstention": "absurd", "compositionality": "label"}


@dataclass(frozen=True)
class NegativeSource:
    """Where chain-of-hindsight negative responses come from.

    kind "field": an extra column of the dataset file; "generations": a
    record-per-line file of {"index", "text"}; "runlog": parsed answers of a
    previous run's log (the usual two-stage pipeline).
    """

    kind: str
    path: str | None = None
    field: str | None = None

    def __post_init__(self):
        if self.kind not in ("field", "generations", "runlog"):
            raise ConfigError(f"unknown negative source kind {self.kind!r}")
        if self.kind == "field" and not self.field:
            raise ConfigError("negative source kind 'field' needs a field name")
        if self.kind in ("generations", "runlog") and not self.path:
            raise ConfigError(f"negative source kind {self.kind!r} needs a path")


@dataclass(frozen=True)
class ExperimentConfig:
    axis: str
    dataset_path: str
    endpoint: str | None = None
    variant: str = "icl"
    shots: tuple[int, ...] = (0, 4, 8, 16, 32)
    seeds: tuple[int, ...] = (13, 17, 19)
    n_queries: int = 500
    dataset_id: str | None = None
    sc_correction_shots: int = 32
    sc_probe_balance: str = "equal"  # probe context absurd/relevant mix
    demo_balance: str = "default"  # "default" | "natural" | "equal"
    pool_size: int | None = None
    use_task_instruction: bool = False
    abstention_keyword: str = "doesnotapply"
    judge_endpoint: str | None = None
    template_path: str | None = None
    vocab_path: str | None = None
    max_inflight: int = 4
    retry_budget: int = 2
    timeout_s: float = 30.0
    params: Mapping[str, Any] = field(default_factory=dict)
    negative_source: NegativeSource | None = None
    chair_gt_mode: str = "instances"  # | "instances+references"
    explain_scoring: str = "all"  # | "filtered"
    failure_threshold: float = 0.10
    record_timestamps: bool = False

    def validate(self) -> None:
        if self.axis not in AXES:
            raise ConfigError(f"unknown axis {self.axis!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if not self.shots:
            raise ConfigError("shots grid is empty")
        if not self.seeds:
            raise ConfigError("seeds list is empty")
        if self.variant == "zero_shot" and tuple(self.shots) != (0,):
            raise ConfigError("zero_shot runs use shots=[0] only")
        if self.variant == "sc_icl" and self.axis != "abstention":
            raise ConfigError("self-correction is defined for the abstention axis")
        if self.variant == "coh_icl":
            if self.axis != "explainability":
                raise ConfigError("chain-of-hindsight is defined for the explainability axis")
            if self.negative_source is None:
                raise ConfigError("chain-of-hindsight needs a negative_source")
        if self.variant == "mt_icl" and self.axis not in MT_AXES:
            raise ConfigError(f"no auxiliary task defined for axis {self.axis!r}")
        if self.variant in ("coh_icl", "mt_icl") and 0 in self.shots:
            raise ConfigError(f"{self.variant} is defined only with context (shots > 0)")
        if self.demo_balance not in ("default", "natural", "equal"):
            raise ConfigError(f"unknown demo_balance {self.demo_balance!r}")
        if self.demo_balance == "equal" and self.axis not in _BALANCE_FIELDS:
            raise ConfigError(f"axis {self.axis!r} has no class field to balance on")
        if self.sc_probe_balance not in ("equal", "natural"):
            raise ConfigError(f"unknown sc_probe_balance {self.sc_probe_balance!r}")
        if self.chair_gt_mode not in ("instances", "instances+references"):
            raise ConfigError(f"unknown chair_gt_mode {self.chair_gt_mode!r}")
        if self.explain_scoring not in ("all", "filtered"):
            raise ConfigError(f"unknown explain_scoring {self.explain_scoring!r}")
        if not self.endpoint:
            raise ConfigError("no endpoint configured")

    def to_dict(self) -> dict:
        doc: dict[str, Any] = {
            "axis": self.axis,
            "dataset_path": self.dataset_path,
            "endpoint": self.endpoint,
            "variant": self.variant,
            "shots": list(self.shots),
            "seeds": list(self.seeds),
            "n_queries": self.n_queries,
            "dataset_id": self.dataset_id,
            "sc_correction_shots": self.sc_correction_shots,
            "sc_probe_balance": self.sc_probe_balance,
            "demo_balance": self.demo_balance,
            "pool_size": self.pool_size,
            "use_task_instruction": self.use_task_instruction,
            "abstention_keyword": self.abstention_keyword,
            "judge_endpoint": self.judge_endpoint,
            "template_path": self.template_path,
            "vocab_path": self.vocab_path,
            "max_inflight": self.max_inflight,
            "retry_budget": self.retry_budget,
            "timeout_s": self.timeout_s,
            "params": dict(self.params),
            "negative_source": (
                None
                if self.negative_source is None
                else {
                    "kind": self.negative_source.kind,
                    "path": self.negative_source.path,
                    "field": self.negative_source.field,
                }
            ),
            "chair_gt_mode": self.chair_gt_mode,
            "explain_scoring": self.explain_scoring,
            "failure_threshold": self.failure_threshold,
            "record_timestamps": self.record_timestamps,
        }
        return doc

    @staticmethod
    def from_dict(doc: Mapping[str, Any]) -> "ExperimentConfig":
        doc = dict(doc)
        known = set(ExperimentConfig.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        if "shots" in doc:
            doc["shots"] = tuple(doc["shots"])
        if "seeds" in doc:
            doc["seeds"] = tuple(doc["seeds"])
        if doc.get("negative_source") is not None:
            doc["negative_source"] = NegativeSource(**doc["negative_source"])
        try:
            return ExperimentConfig(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class RunLog:
    """Record-per-line audit log of the run (exchanges, cells, final report)."""

    def __init__(self, path: str | Path | None):
        self._fh = open(path, "w", encoding="utf-8") if path else None

    def write(self, row: Mapping[str, Any]) -> None:
        if self._fh is not None:
            self._fh.write(json.dumps(row, sort_keys=True) + "\n")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self) -> "RunLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


# ---------------------------------------------------------------------------
# context assembly helpers


def _fill(cue: str, **values: str) -> str:
    for key, value in values.items():
        cue = cue.replace("{" + key + "}", value)
    return cue


def _main_demo(axis: str, rec: TaskRecord, tc: TemplateConfig) -> Demonstration:
    if axis == "hallucination":
        return Demonstration(image=rec.image, t=tc.cue("caption", "t"), r=rec.references[0])
    if axis == "abstention":
        return Demonstration(
            image=rec.image,
            t=_fill(tc.cue("vqa", "t"), question=rec.question),
            r=rec.answer,
        )
    if axis == "compositionality":
        word = tc.cue("itm", "yes") if rec.label == "positive" else tc.cue("itm", "no")
        return Demonstration(
            image=rec.image, t=_fill(tc.cue("itm", "t"), caption=rec.caption), r=word
        )
    if axis == "explainability":
        return Demonstration(
            image=rec.image,
            t=_fill(tc.cue("explain", "t"), question=rec.question, answer=rec.answer),
            r=rec.explanations[0],
        )
    if axis == "instruction":
        return Demonstration(
            image=rec.image,
            t=_fill(tc.cue("instruction", "t"), instruction=rec.instruction),
            r=rec.gt_response,
        )
    raise ConfigError(f"unknown axis {axis!r}")


def _main_query_t(axis: str, rec: TaskRecord, tc: TemplateConfig) -> str:
    return _main_demo(axis, rec, tc).t


def _mt_demo(axis: str, rec: TaskRecord, tc: TemplateConfig) -> MultitaskDemonstration:
    if axis == "abstention":
        cue = tc.cues["abstention_mt"]
        word = cue["no"] if rec.absurd else cue["yes"]
        return MultitaskDemonstration(
            image=rec.image,
            t1=_fill(cue["t1"], question=rec.question),
            r1=rec.answer,
            t2=cue["t2"],
            r2=word,
        )
    if axis == "hallucination":
        cue = tc.cues["hallucination_mt"]
        return MultitaskDemonstration(
            image=rec.image,
            t1=cue["t1"],
            r1=rec.references[0],
            t2=cue["t2"],
            r2=", ".join(sorted(rec.gt_objects)),
        )
    if axis == "explainability":
        cue = tc.cues["explain_mt"]
        return MultitaskDemonstration(
            image=rec.image,
            t1=_fill(cue["t1"], question=rec.question),
            r1=rec.answer,
            t2=cue["t2"],
            r2=rec.explanations[0],
        )
    raise ConfigError(f"no auxiliary task for axis {axis!r}")


def _mt_query_t1(axis: str, rec: TaskRecord, tc: TemplateConfig) -> str:
    return _mt_demo(axis, rec, tc).t1


def take_context(
    pool: Sequence[TaskRecord],
    shots: int,
    balance_field: str | None = None,
) -> list[TaskRecord]:
    """First `shots` pool records, optionally class-balanced.

    Balancing takes equal per-class quotas in pool order, preserving the
    pool's sampled order in the result.
    """
    if shots == 0:
        return []
    if shots > len(pool):
        raise ConfigError(f"demonstration pool has {len(pool)} records, need {shots}")
    if balance_field is None:
        return list(pool[:shots])
    groups: dict[Any, list] = {}
    for rec in pool:
        groups.setdefault(getattr(rec, balance_field), []).append(rec)
    classes = sorted(groups, key=repr)
    quotas = {cls: shots // len(classes) for cls in classes}
    for cls in classes[: shots % len(classes)]:
        quotas[cls] += 1
    for cls in classes:
        if quotas[cls] > len(groups[cls]):
            raise BalanceError(
                f"class {cls!r} exhausted in pool: need {quotas[cls]}, have {len(groups[cls])}"
            )
    taken = {cls: 0 for cls in classes}
    context = []
    for rec in pool:
        cls = getattr(rec, balance_field)
        if taken[cls] < quotas[cls]:
            context.append(rec)
            taken[cls] += 1
        if len(context) == shots:
            break
    return context


# ---------------------------------------------------------------------------
# run context


@dataclass
class RunContext:
    config: ExperimentConfig
    records: list[TaskRecord]
    templates: TemplateConfig
    tmpl: PromptTemplate
    client: EndpointClient
    params: GenerationParams
    judge: JudgeClient | None = None
    vocab: Any = None

    @staticmethod
    def build(config: ExperimentConfig) -> "RunContext":
        templates = promptkit.load_template_config(config.template_path)
        tmpl = templates.prompt_template(config.axis, config.use_task_instruction)
        vocab = None
        if config.axis == "hallucination":
            vocab = load_vocabulary(config.vocab_path)
        records = _load_dataset(config, vocab)
        bearer = os.environ.get("EVALIGN_BEARER_TOKEN")
        client = EndpointClient(
            config.endpoint,
            max_inflight=config.max_inflight,
            retry_budget=config.retry_budget,
            timeout=config.timeout_s,
            bearer_token=bearer,
        )
        params = _build_params(config, tmpl)
        judge = None
        if config.judge_endpoint:
            judge = JudgeClient(
                EndpointClient(
                    config.judge_endpoint,
                    max_inflight=config.max_inflight,
                    retry_budget=config.retry_budget,
                    timeout=config.timeout_s,
                    bearer_token=bearer,
                )
            )
        return RunContext(
            config=config,
            records=records,
            templates=templates,
            tmpl=tmpl,
            client=client,
            params=params,
            judge=judge,
            vocab=vocab,
        )

    def balance_field(self) -> str | None:
        cfg = self.config
        if cfg.demo_balance == "equal":
            return _BALANCE_FIELDS[cfg.axis]
        if cfg.demo_balance == "default" and cfg.axis == "compositionality":
            # Matching contexts are sampled balanced between positive and
            # negative captions; other axes keep the natural corpus mix.
            return "label"
        return None

    def split(self, seed: int) -> SampledSplit:
        return corpus.sample_split(
            self.records,
            self.config.n_queries,
            seed,
            balance=None,
            pool_size=self.config.pool_size,
        )


def _load_dataset(config: ExperimentConfig, vocab) -> list[TaskRecord]:
    path, ds = config.dataset_path, config.dataset_id
    if config.axis == "hallucination":
        return corpus.load_caption_records(path, vocab=vocab, dataset_id=ds)
    if config.axis == "abstention":
        return corpus.load_vqa(path, config.abstention_keyword, dataset_id=ds)
    if config.axis == "compositionality":
        return corpus.load_itm(path, dataset_id=ds)
    if config.axis == "explainability":
        return corpus.load_explanations(path, dataset_id=ds)
    return corpus.load_instructions(path, dataset_id=ds)


def _build_params(config: ExperimentConfig, tmpl: PromptTemplate) -> GenerationParams:
    overrides = dict(config.params)
    max_new = overrides.pop("max_new_tokens", None) or MAX_NEW_TOKENS_DEFAULTS[config.axis]
    stop = overrides.pop("stop", None)
    return GenerationParams(
        max_new_tokens=max_new,
        decoding=overrides.pop("decoding", "greedy"),
        temperature=overrides.pop("temperature", None),
        top_p=overrides.pop("top_p", None),
        stop_sequences=tuple(stop) if stop else tmpl.stop_markers(),
        seed=overrides.pop("seed", None),
    )


# ---------------------------------------------------------------------------
# exchange fan-out


@dataclass
class ExchangeResult:
    raw: str
    failed: bool
    latency: float
    error: str | None = None


def _fan_out(
    client: EndpointClient,
    prompts: Sequence[InterleavedPrompt],
    params: GenerationParams,
) -> list[ExchangeResult]:
    results: list[ExchangeResult | None] = [None] * len(prompts)

    def call(index: int) -> None:
        try:
            exchange = client.generate(prompts[index], params)
            results[index] = ExchangeResult(
                raw=exchange.output, failed=False, latency=exchange.latency
            )
        except (EndpointError, ProtocolError, CapacityError) as exc:
            results[index] = ExchangeResult(raw="", failed=True, latency=0.0, error=str(exc))

    with ThreadPoolExecutor(max_workers=client.max_inflight) as pool:
        list(pool.map(call, range(len(prompts))))
    return [r for r in results if r is not None]


# ---------------------------------------------------------------------------
# axis scoring


@dataclass
class SeedSample:
    metrics: dict[str, float]
    breakdowns: dict[str, dict[str, float]] = field(default_factory=dict)
    flags: set[str] = field(default_factory=set)
    failed: int = 0
    total: int = 0
    extra_diagnostics: dict[str, float] = field(default_factory=dict)


def _chair_gt(rec, ctx: RunContext) -> frozenset[str]:
    gt = set(rec.gt_objects)
    if ctx.config.chair_gt_mode == "instances+references":
        for ref in rec.references:
            gt |= extract_objects(ref, ctx.vocab)
    return frozenset(gt)


def _score_hallucination(captions: list[str], queries, ctx: RunContext) -> SeedSample:
    pairs = [(cap, _chair_gt(rec, ctx)) for cap, rec in zip(captions, queries)]
    ch = chair(pairs, ctx.vocab)
    cid = cider(captions, [list(rec.references) for rec in queries])
    return SeedSample(
        metrics={"cider": cid.score, "chair_s": ch.chair_s, "chair_i": ch.chair_i}
    )


def _score_abstention(preds: list[str], queries, keyword: str) -> SeedSample:
    res = abstention_metrics(preds, queries, keyword)
    sample = SeedSample(
        metrics={
            "overall_acc": res.overall_acc,
            "abst_acc": res.abst_acc,
            "abst_precision": res.abst_precision,
            "abst_recall": res.abst_recall,
            "abst_f1": res.abst_f1,
        }
    )
    if res.degenerate:
        sample.flags.add("degenerate_abstain_class")
    by_type: dict[str, list[int]] = {}
    for pred, rec in zip(preds, queries):
        if rec.qtype is None:
            continue
        hit_total = by_type.setdefault(rec.qtype, [0, 0])
        hit_total[0] += int(normalize_answer(pred) == normalize_answer(rec.answer))
        hit_total[1] += 1
    sample.breakdowns = {
        qtype: {"accuracy": hit / total} for qtype, (hit, total) in sorted(by_type.items())
    }
    return sample


def _score_itm(outputs: list[str], queries, ctx: RunContext) -> SeedSample:
    verdicts = [
        parse_yes_no(parse_answer(raw, ctx.tmpl.stop_markers())) for raw in outputs
    ]
    res = itm_accuracy(
        verdicts,
        [rec.label for rec in queries],
        [rec.negative_kind for rec in queries],
    )
    return SeedSample(
        metrics={"accuracy": res.accuracy},
        breakdowns={kind: {"accuracy": acc} for kind, acc in res.by_kind.items()},
    )


def _score_explanations(explanations: list[str], queries) -> SeedSample:
    cid = cider(explanations, [list(rec.explanations) for rec in queries])
    return SeedSample(metrics={"cider": cid.score})


# ---------------------------------------------------------------------------
# cell execution


def _log_exchanges(
    runlog: RunLog | None,
    ctx: RunContext,
    shots: int,
    seed: int,
    queries,
    prompts,
    results: list[ExchangeResult],
    parsed: list[str],
    extra: list[dict] | None = None,
) -> None:
    if runlog is None:
        return
    for i, (rec, prompt, result) in enumerate(zip(queries, prompts, results)):
        row = {
            "kind": "exchange",
            "axis": ctx.config.axis,
            "variant": ctx.config.variant,
            "shots": shots,
            "seed": seed,
            "dataset": rec.uid[0],
            "record_index": rec.uid[1],
            "prompt_digest": promptkit.prompt_digest(prompt, ctx.tmpl),
            "wire": promptkit.serialize(prompt, ctx.tmpl),
            "raw": result.raw,
            "parsed": parsed[i],
            "failed": result.failed,
            "latency_ms": round(result.latency * 1000.0, 3),
        }
        if result.error:
            row["error"] = result.error
        if extra is not None:
            row.update(extra[i])
        runlog.write(row)


def _build_prompts(ctx: RunContext, shots: int, split: SampledSplit) -> list[InterleavedPrompt]:
    cfg = ctx.config
    axis, tc, tmpl = cfg.axis, ctx.templates, ctx.tmpl
    balance_field = ctx.balance_field()
    prompts = []
    if shots == 0:
        context = [
            _main_demo(axis, rec, tc) for rec in take_context(split.demo_pool, 2, balance_field)
        ]
        for rec in split.queries:
            prompts.append(
                promptkit.assemble_zero_shot(context, rec.image, _main_query_t(axis, rec, tc), tmpl)
            )
        return prompts
    if cfg.variant == "mt_icl":
        context = [
            _mt_demo(axis, rec, tc) for rec in take_context(split.demo_pool, shots, balance_field)
        ]
        for rec in split.queries:
            prompts.append(
                promptkit.assemble_mt(context, rec.image, _mt_query_t1(axis, rec, tc), tmpl)
            )
        return prompts
    context = [
        _main_demo(axis, rec, tc) for rec in take_context(split.demo_pool, shots, balance_field)
    ]
    for rec in split.queries:
        prompts.append(
            promptkit.assemble_icl(context, rec.image, _main_query_t(axis, rec, tc), tmpl)
        )
    return prompts


def _score_outputs(ctx: RunContext, queries, results: list[ExchangeResult]) -> tuple[SeedSample, list[str]]:
    cfg = ctx.config
    stops = ctx.tmpl.stop_markers()
    raws = [r.raw for r in results]
    if cfg.axis == "hallucination":
        if cfg.variant == "mt_icl":
            t2 = ctx.templates.cues["hallucination_mt"]["t2"]
            parts = [split_multitask_answer(raw, t2, stops) for raw in raws]
            parsed = [p[0] for p in parts]
            sample = _score_hallucination(parsed, queries, ctx)
            missing = sum(1 for p in parts if not p[2])
            if missing:
                sample.flags.add("aux_cue_missing")
                sample.extra_diagnostics["aux_cue_missing"] = missing
        else:
            parsed = [parse_answer(raw, stops) for raw in raws]
            sample = _score_hallucination(parsed, queries, ctx)
    elif cfg.axis == "abstention":
        if cfg.variant == "mt_icl":
            t2 = ctx.templates.cues["abstention_mt"]["t2"]
            parts = [split_multitask_answer(raw, t2, stops) for raw in raws]
            parsed = [p[0] for p in parts]
            sample = _score_abstention(parsed, queries, cfg.abstention_keyword)
            missing = sum(1 for p in parts if not p[2])
            if missing:
                sample.flags.add("aux_cue_missing")
                sample.extra_diagnostics["aux_cue_missing"] = missing
        else:
            parsed = [parse_answer(raw, stops, lowercase=True) for raw in raws]
            sample = _score_abstention(parsed, queries, cfg.abstention_keyword)
    elif cfg.axis == "compositionality":
        parsed = [parse_answer(raw, stops, lowercase=True) for raw in raws]
        sample = _score_itm(raws, queries, ctx)
    elif cfg.axis == "explainability":
        if cfg.variant == "mt_icl":
            t2 = ctx.templates.cues["explain_mt"]["t2"]
            parts = [split_multitask_answer(raw, t2, stops) for raw in raws]
            answers = [p[0] for p in parts]
            explanations = [p[1] for p in parts]
            correct = [
                normalize_answer(ans) == normalize_answer(rec.answer)
                for ans, rec in zip(answers, queries)
            ]
            accuracy = sum(correct) / len(correct)
            if cfg.explain_scoring == "filtered":
                kept = [(e, rec) for e, rec, ok in zip(explanations, queries, correct) if ok]
                if kept:
                    sample = _score_explanations([e for e, _ in kept], [r for _, r in kept])
                else:
                    sample = SeedSample(metrics={"cider": 0.0}, flags={"no_correct_answers"})
            else:
                sample = _score_explanations(explanations, queries)
            sample.metrics["accuracy"] = accuracy
            missing = sum(1 for p in parts if not p[2])
            if missing:
                sample.flags.add("aux_cue_missing")
                sample.extra_diagnostics["aux_cue_missing"] = missing
            parsed = [raw if not found else f"{a} | {e}" for (a, e, found), raw in zip(parts, raws)]
        else:
            parsed = [parse_answer(raw, stops) for raw in raws]
            sample = _score_explanations(parsed, queries)
    else:
        raise ConfigError(f"axis {cfg.axis!r} is not scored here")
    sample.failed = sum(1 for r in results if r.failed)
    sample.total = len(results)
    return sample, parsed


def _run_cell_seed(
    ctx: RunContext, shots: int, seed: int, runlog: RunLog | None
) -> SeedSample:
    split = ctx.split(seed)
    prompts = _build_prompts(ctx, shots, split)
    results = _fan_out(ctx.client, prompts, ctx.params)
    sample, parsed = _score_outputs(ctx, split.queries, results)
    _log_exchanges(runlog, ctx, shots, seed, split.queries, prompts, results, parsed)
    return sample


def _aggregate_cell(samples: list[SeedSample], threshold: float) -> ReportCell:
    metric_names = sorted({name for s in samples for name in s.metrics})
    metrics = {}
    for name in metric_names:
        values = [s.metrics[name] for s in samples if name in s.metrics]
        agg = aggregate(values)
        metrics[name] = CellValue(
            mean=agg.mean,
            std=agg.std,
            n=agg.n,
            flags=("single_sample",) if agg.flagged else (),
        )
    group_names = sorted({g for s in samples for g in s.breakdowns})
    breakdowns = {}
    for group in group_names:
        names = sorted({n for s in samples for n in s.breakdowns.get(group, {})})
        breakdowns[group] = {}
        for name in names:
            values = [
                s.breakdowns[group][name]
                for s in samples
                if name in s.breakdowns.get(group, {})
            ]
            agg = aggregate(values)
            breakdowns[group][name] = CellValue(
                mean=agg.mean,
                std=agg.std,
                n=agg.n,
                flags=("single_sample",) if agg.flagged else (),
            )
    flags = set()
    for s in samples:
        flags.update(s.flags)
    failed = sum(s.failed for s in samples)
    total = sum(s.total for s in samples)
    if total and failed / total > threshold:
        flags.add("invalid")
    diagnostics: dict[str, float] = {"failed_exchanges": failed, "total_exchanges": total}
    for s in samples:
        for key, value in s.extra_diagnostics.items():
            diagnostics[key] = diagnostics.get(key, 0) + value
    return ReportCell(
        metrics=metrics,
        breakdowns=breakdowns,
        flags=tuple(sorted(flags)),
        diagnostics=diagnostics,
    )


def _error_cell() -> ReportCell:
    return ReportCell(metrics={}, breakdowns={}, flags=("cell_error",), diagnostics={})


def _new_report(config: ExperimentConfig) -> MetricReport:
    metadata = {
        "config_digest": config.digest(),
        "endpoint_id": config.endpoint,
        "axis": config.axis,
    }
    if config.record_timestamps:
        import datetime

        metadata["created_at"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
    return MetricReport(metadata=metadata)


def _log_meta(runlog: RunLog | None, config: ExperimentConfig) -> None:
    if runlog is not None:
        runlog.write(
            {"kind": "meta", "config": config.to_dict(), "config_digest": config.digest()}
        )


def _log_cell(runlog: RunLog | None, key, cell: ReportCell) -> None:
    if runlog is not None:
        runlog.write(
            {
                "kind": "cell",
                "axis": key[0],
                "variant": key[1],
                "shots": key[2],
                "cell": cell.to_dict(),
            }
        )


def _log_report(runlog: RunLog | None, report: MetricReport) -> None:
    if runlog is not None:
        runlog.write({"kind": "report", "report": report.to_dict()})


# ---------------------------------------------------------------------------
# public entry points


def run_axis(config: ExperimentConfig, runlog: RunLog | None = None) -> MetricReport:
    """Run the configured axis/variant over the shot grid and seeds.

    Module errors inside one cell mark that cell and the run continues with
    the remaining cells.
    """
    config.validate()
    if config.axis == "instruction":
        return run_instruction_axis(config, runlog)
    if config.variant == "sc_icl":
        return run_sc_icl(config, runlog)
    if config.variant == "coh_icl":
        return run_coh_icl(config, runlog=runlog)
    ctx = RunContext.build(config)
    report = _new_report(config)
    _log_meta(runlog, config)
    for shots in config.shots:
        key = (config.axis, config.variant, shots)
        try:
            samples = [_run_cell_seed(ctx, shots, seed, runlog) for seed in config.seeds]
            cell = _aggregate_cell(samples, config.failure_threshold)
        except EvalignError as exc:
            cell = _error_cell()
            report.notices.append(f"cell {key}: {exc}")
        report.cells[key] = cell
        _log_cell(runlog, key, cell)
    _log_report(runlog, report)
    return report


def run_sc_icl(config: ExperimentConfig, runlog: RunLog | None = None) -> MetricReport:
    """Two-step self-correction: answer with plain context, then probe each
    question's relevance with a dedicated context and abstain on "no".

    The reported cell carries the corrected metrics under their usual names
    and the step-1 values with an `_uncorrected` suffix so deltas are visible.
    """
    config.validate()
    ctx = RunContext.build(config)
    tc = ctx.templates
    probe = RelevanceProbe(
        t2_template=tc.cue("sc_probe", "t2"),
        r2_yes=tc.cue("sc_probe", "yes"),
        r2_no=tc.cue("sc_probe", "no"),
        abstention_keyword=config.abstention_keyword,
    )
    probe_tmpl = tc.prompt_template(config.axis, use_instruction=False)
    report = _new_report(config)
    _log_meta(runlog, config)
    for shots in config.shots:
        key = (config.axis, config.variant, shots)
        try:
            samples = []
            for seed in config.seeds:
                samples.append(_run_sc_seed(ctx, probe, probe_tmpl, shots, seed, runlog))
            cell = _aggregate_cell(samples, config.failure_threshold)
        except EvalignError as exc:
            cell = _error_cell()
            report.notices.append(f"cell {key}: {exc}")
        report.cells[key] = cell
        _log_cell(runlog, key, cell)
    _log_report(runlog, report)
    return report


def _probe_context(
    ctx: RunContext, pool: Sequence, probe: RelevanceProbe
) -> list[Demonstration]:
    cfg = ctx.config
    shots = cfg.sc_correction_shots
    balance_field = "absurd" if cfg.sc_probe_balance == "equal" else None
    records = take_context(pool, shots, balance_field)
    return [
        Demonstration(
            image=rec.image,
            t=rec.question,
            r=probe.r2_no if rec.absurd else probe.r2_yes,
        )
        for rec in records
    ]


def _run_sc_seed(
    ctx: RunContext,
    probe: RelevanceProbe,
    probe_tmpl: PromptTemplate,
    shots: int,
    seed: int,
    runlog: RunLog | None,
) -> SeedSample:
    cfg = ctx.config
    stops = ctx.tmpl.stop_markers()
    split = ctx.split(seed)
    prompts = _build_prompts(ctx, shots, split)
    results = _fan_out(ctx.client, prompts, ctx.params)
    answers = [parse_answer(r.raw, stops, lowercase=True) for r in results]
    pre = _score_abstention(answers, split.queries, cfg.abstention_keyword)

    probe_demos = _probe_context(ctx, split.demo_pool, probe)
    probe_prompts = [
        promptkit.assemble_sc_step2(probe_demos, probe, rec.image, rec.question, probe_tmpl)
        for rec in split.queries
    ]
    probe_results = _fan_out(ctx.client, probe_prompts, ctx.params)
    corrected = []
    unparseable = 0
    corrections = 0
    verdicts = []
    for answer, probe_result in zip(answers, probe_results):
        reply = parse_answer(probe_result.raw, probe_tmpl.stop_markers())
        verdict = parse_yes_no(reply)
        verdicts.append(verdict)
        if verdict == "unknown":
            unparseable += 1
        fixed = promptkit.correct_answer(answer, reply, probe)
        if fixed != answer:
            corrections += 1
        corrected.append(fixed)

    post = _score_abstention(corrected, split.queries, cfg.abstention_keyword)
    sample = SeedSample(
        metrics={
            **post.metrics,
            **{f"{k}_uncorrected": v for k, v in pre.metrics.items()},
        },
        breakdowns=post.breakdowns,
        flags=post.flags | {f"{f}_uncorrected" for f in pre.flags},
    )
    sample.failed = sum(1 for r in [*results, *probe_results] if r.failed)
    sample.total = len(results) + len(probe_results)
    sample.extra_diagnostics = {
        "corrections_applied": corrections,
        "unparseable_probe_replies": unparseable,
    }
    extra = [
        {
            "raw_probe": probe_results[i].raw,
            "probe_verdict": verdicts[i],
            "corrected": corrected[i],
        }
        for i in range(len(split.queries))
    ]
    _log_exchanges(runlog, ctx, shots, seed, split.queries, prompts, results, answers, extra)
    return sample


def _load_negatives(source: NegativeSource, config: ExperimentConfig) -> dict[int, str]:
    negatives: dict[int, str] = {}
    if source.kind == "field":
        for index, row in corpus.iter_jsonl(config.dataset_path):
            text = row.get(source.field)
            if text:
                negatives[index] = str(text)
        return negatives
    path = Path(source.path)
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            if source.kind == "runlog":
                if row.get("kind") != "exchange":
                    continue
                if row.get("parsed"):
                    negatives[int(row["record_index"])] = str(row["parsed"])
            else:
                negatives[int(row["index"])] = str(row["text"])
    return negatives


def run_coh_icl(
    config: ExperimentConfig,
    negative_source: NegativeSource | None = None,
    runlog: RunLog | None = None,
) -> MetricReport:
    """Chain-of-hindsight over explanations: each demonstration pairs the
    human annotation (positive) with a negative response from the configured
    source; the query ends with the positive cue."""
    if negative_source is not None:
        config = replace(config, negative_source=negative_source)
    config.validate()
    ctx = RunContext.build(config)
    tc = ctx.templates
    cue = tc.cues["explain_coh"]
    negatives = _load_negatives(config.negative_source, config)
    report = _new_report(config)
    _log_meta(runlog, config)
    for shots in config.shots:
        key = (config.axis, config.variant, shots)
        try:
            samples = []
            for seed in config.seeds:
                samples.append(_run_coh_seed(ctx, cue, negatives, shots, seed, runlog))
            cell = _aggregate_cell(samples, config.failure_threshold)
        except EvalignError as exc:
            cell = _error_cell()
            report.notices.append(f"cell {key}: {exc}")
        report.cells[key] = cell
        _log_cell(runlog, key, cell)
    _log_report(runlog, report)
    return report


def _run_coh_seed(
    ctx: RunContext,
    cue: Mapping[str, str],
    negatives: Mapping[int, str],
    shots: int,
    seed: int,
    runlog: RunLog | None,
) -> SeedSample:
    split = ctx.split(seed)
    usable = []
    skipped = 0
    for rec in split.demo_pool:
        if negatives.get(rec.uid[1]):
            usable.append(rec)
        else:
            skipped += 1
        if len(usable) == shots:
            break
    if len(usable) < shots:
        raise ConfigError(
            f"negative responses exhausted: {len(usable)} usable demonstrations, need {shots}"
        )
    demos = [
        CohDemonstration(
            image=rec.image,
            t=_fill(cue["t"], question=rec.question, answer=rec.answer),
            t_pos=cue["t_pos"],
            r_pos=rec.explanations[0],
            t_neg=cue["t_neg"],
            r_neg=negatives[rec.uid[1]],
        )
        for rec in usable
    ]
    prompts = [
        promptkit.assemble_coh(
            demos,
            rec.image,
            _fill(cue["t"], question=rec.question, answer=rec.answer),
            cue["t_pos"],
            ctx.tmpl,
        )
        for rec in split.queries
    ]
    results = _fan_out(ctx.client, prompts, ctx.params)
    stops = ctx.tmpl.stop_markers()
    parsed = [parse_answer(r.raw, stops) for r in results]
    sample = _score_explanations(parsed, split.queries)
    sample.failed = sum(1 for r in results if r.failed)
    sample.total = len(results)
    if skipped:
        sample.flags.add("negatives_resampled")
        sample.extra_diagnostics["demos_skipped_missing_negative"] = skipped
    _log_exchanges(runlog, ctx, shots, seed, split.queries, prompts, results, parsed)
    return sample


def run_instruction_axis(config: ExperimentConfig, runlog: RunLog | None = None) -> MetricReport:
    """Instruction following with judge scoring.

    Demonstrations are type-matched to each query's instruction type; the
    0-shot cell is the two-text-demonstrations-without-images control. Without
    a judge endpoint the axis is skipped with an explicit report notice.
    """
    config.validate()
    report = _new_report(config)
    if not config.judge_endpoint:
        report.notices.append("instruction axis skipped: no judge endpoint configured")
        _log_report(runlog, report)
        return report
    ctx = RunContext.build(config)
    _log_meta(runlog, config)
    for shots in config.shots:
        key = (config.axis, config.variant, shots)
        try:
            samples = []
            for seed in config.seeds:
                samples.append(_run_instruction_seed(ctx, shots, seed, runlog))
            cell = _aggregate_cell(samples, config.failure_threshold)
        except EvalignError as exc:
            cell = _error_cell()
            report.notices.append(f"cell {key}: {exc}")
        report.cells[key] = cell
        _log_cell(runlog, key, cell)
    _log_report(runlog, report)
    return report


def _run_instruction_seed(
    ctx: RunContext, shots: int, seed: int, runlog: RunLog | None
) -> SeedSample:
    cfg = ctx.config
    tc, tmpl = ctx.templates, ctx.tmpl
    split = ctx.split(seed)
    pool_by_type: dict[str, list] = {}
    for rec in split.demo_pool:
        pool_by_type.setdefault(rec.itype, []).append(rec)
    prompts = []
    for rec in split.queries:
        matching = pool_by_type.get(rec.itype, [])
        if shots == 0:
            demos = [_main_demo(cfg.axis, d, tc) for d in take_context(matching, 2)]
            prompts.append(
                promptkit.assemble_zero_shot(
                    demos, rec.image, _main_query_t(cfg.axis, rec, tc), tmpl
                )
            )
        else:
            demos = [_main_demo(cfg.axis, d, tc) for d in take_context(matching, shots)]
            prompts.append(
                promptkit.assemble_icl(demos, rec.image, _main_query_t(cfg.axis, rec, tc), tmpl)
            )
    results = _fan_out(ctx.client, prompts, ctx.params)
    stops = tmpl.stop_markers()
    parsed = [parse_answer(r.raw, stops) for r in results]
    scores = []
    judge_failures = 0
    for response, rec in zip(parsed, split.queries):
        try:
            verdict = ctx.judge.judge(response, rec.gt_response, rec.instruction)
            scores.append(verdict.score)
        except (JudgeProtocolError, EndpointError, ProtocolError):
            # Unscorable responses count as zero rather than being dropped.
            scores.append(0.0)
            judge_failures += 1
    sample = SeedSample(metrics={"judge_score": sum(scores) / len(scores)})
    by_type: dict[str, list[float]] = {}
    for score, rec in zip(scores, split.queries):
        by_type.setdefault(rec.itype, []).append(score)
    type_means = {itype: sum(vals) / len(vals) for itype, vals in sorted(by_type.items())}
    # both the per-query mean and the average over instruction types
    sample.metrics["judge_score_macro"] = sum(type_means.values()) / len(type_means)
    sample.breakdowns = {
        itype: {"judge_score": mean} for itype, mean in type_means.items()
    }
    sample.failed = sum(1 for r in results if r.failed)
    sample.total = len(results)
    if judge_failures:
        sample.flags.add("judge_failures")
        sample.extra_diagnostics["judge_failures"] = judge_failures
    _log_exchanges(runlog, ctx, shots, seed, split.queries, prompts, results, parsed)
    return sample


def run_experiment(config: ExperimentConfig, runlog_path: str | Path | None = None) -> MetricReport:
    """Validate, dispatch to the right variant runner, and write the run log."""
    with RunLog(runlog_path) as runlog:
        return run_axis(config, runlog)
