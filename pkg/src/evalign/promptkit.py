"""Interleaved prompt assembly for the in-context-learning variants.

Prompts are ordered image/text segments. Rendered to a wire string, every
prompt matches the chunk grammar

    (instruction?) (IMAGE? text CHUNK_END)* IMAGE text

where demonstration chunks carry an image except in the zero-shot convention
(text-only chunks), and the trailing IMAGE+text is the query. The query never
carries a response slot: generation continues it.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

from evalign.corpus import ImageRef
from evalign.errors import ArityError, ContaminationError, TemplateError

QUESTION_PLACEHOLDER = "{question}"


@dataclass(frozen=True)
class Segment:
    kind: str  # "image" | "text"
    payload: ImageRef | str

    def __post_init__(self):
        if self.kind not in ("image", "text"):
            raise TemplateError(f"bad segment kind {self.kind!r}")


def image_segment(ref: ImageRef) -> Segment:
    return Segment(kind="image", payload=ref)


def text_segment(text: str) -> Segment:
    return Segment(kind="text", payload=text)


@dataclass(frozen=True)
class InterleavedPrompt:
    segments: tuple[Segment, ...]

    def image_count(self) -> int:
        return sum(1 for s in self.segments if s.kind == "image")

    def text_count(self) -> int:
        return sum(1 for s in self.segments if s.kind == "text")

    def last_text(self) -> str:
        for seg in reversed(self.segments):
            if seg.kind == "text":
                return seg.payload
        return ""


@dataclass(frozen=True)
class Demonstration:
    image: ImageRef
    t: str
    r: str

    def __post_init__(self):
        if not self.t:
            raise TemplateError("demonstration cue t must be nonempty")


@dataclass(frozen=True)
class CohDemonstration:
    image: ImageRef
    t: str
    t_pos: str
    r_pos: str
    t_neg: str
    r_neg: str

    def __post_init__(self):
        if self.t_pos == self.t_neg:
            raise TemplateError("positive and negative cues must differ")


@dataclass(frozen=True)
class MultitaskDemonstration:
    image: ImageRef
    t1: str
    r1: str
    t2: str
    r2: str

    def __post_init__(self):
        if not self.t1 or not self.t2:
            raise TemplateError("both task cues must be nonempty")


@dataclass(frozen=True)
class RelevanceProbe:
    """Fixed relevance question wrapped around an embedded, quoted question."""

    t2_template: str
    r2_yes: str = "yes"
    r2_no: str = "no"
    abstention_keyword: str = "doesnotapply"

    def __post_init__(self):
        count = self.t2_template.count(QUESTION_PLACEHOLDER)
        if count != 1:
            raise TemplateError(
                f"probe template must contain {QUESTION_PLACEHOLDER} exactly once, found {count}"
            )

    def render(self, question: str) -> str:
        return self.t2_template.replace(QUESTION_PLACEHOLDER, f'"{question}"')


@dataclass(frozen=True)
class PromptTemplate:
    image_marker: str = "<image>"
    chunk_end: str = "<|endofchunk|>"
    separator: str = " "  # between fields within a chunk
    instruction_separator: str = "\n"  # after the task instruction
    task_instruction: str | None = None

    def __post_init__(self):
        if not self.image_marker or not self.chunk_end:
            raise TemplateError("markers must be nonempty")
        if (
            self.image_marker == self.chunk_end
            or self.image_marker in self.chunk_end
            or self.chunk_end in self.image_marker
        ):
            raise TemplateError("image marker and chunk terminator must be distinct")

    def stop_markers(self) -> tuple[str, ...]:
        return (self.chunk_end, "\n", self.image_marker)


def _check_clean(text: str, tmpl: PromptTemplate, what: str) -> None:
    for marker in (tmpl.image_marker, tmpl.chunk_end):
        if marker in text:
            raise ContaminationError(f"reserved marker {marker!r} inside {what}: {text!r}")


def _instruction_segments(tmpl: PromptTemplate) -> list[Segment]:
    if tmpl.task_instruction is None:
        return []
    _check_clean(tmpl.task_instruction, tmpl, "task instruction")
    return [text_segment(tmpl.task_instruction + tmpl.instruction_separator)]


def _chunk(fields_text: Sequence[str], tmpl: PromptTemplate) -> str:
    return tmpl.separator.join(fields_text) + tmpl.chunk_end


def assemble_icl(
    demos: Sequence[Demonstration],
    query_image: ImageRef,
    query_t: str,
    tmpl: PromptTemplate,
) -> InterleavedPrompt:
    """Standard few-shot prompt: N image+text demonstration chunks, then the query."""
    segments = _instruction_segments(tmpl)
    for demo in demos:
        _check_clean(demo.t, tmpl, "demonstration cue")
        _check_clean(demo.r, tmpl, "demonstration response")
        segments.append(image_segment(demo.image))
        segments.append(text_segment(_chunk([demo.t, demo.r], tmpl)))
    _check_clean(query_t, tmpl, "query text")
    segments.append(image_segment(query_image))
    segments.append(text_segment(query_t))
    return InterleavedPrompt(segments=tuple(segments))


def assemble_zero_shot(
    text_demos: Sequence[Demonstration],
    query_image: ImageRef,
    query_t: str,
    tmpl: PromptTemplate,
) -> InterleavedPrompt:
    """Zero-shot convention: exactly two text-only demonstration chunks."""
    if len(text_demos) != 2:
        raise ArityError(f"zero-shot takes exactly 2 text demonstrations, got {len(text_demos)}")
    segments = _instruction_segments(tmpl)
    for demo in text_demos:
        _check_clean(demo.t, tmpl, "demonstration cue")
        _check_clean(demo.r, tmpl, "demonstration response")
        segments.append(text_segment(_chunk([demo.t, demo.r], tmpl)))
    _check_clean(query_t, tmpl, "query text")
    segments.append(image_segment(query_image))
    segments.append(text_segment(query_t))
    return InterleavedPrompt(segments=tuple(segments))


def assemble_coh(
    demos: Sequence[CohDemonstration],
    query_image: ImageRef,
    query_t: str,
    query_t_pos: str,
    tmpl: PromptTemplate,
) -> InterleavedPrompt:
    """Hindsight chunks carry cue, positive cue+response, negative cue+response;
    the query ends with the positive cue so generation continues that slot."""
    if not demos:
        raise ArityError("chain-of-hindsight needs at least one demonstration")
    segments = _instruction_segments(tmpl)
    for demo in demos:
        parts = [demo.t, demo.t_pos, demo.r_pos, demo.t_neg, demo.r_neg]
        for part in parts:
            _check_clean(part, tmpl, "hindsight demonstration field")
        segments.append(image_segment(demo.image))
        segments.append(text_segment(_chunk(parts, tmpl)))
    _check_clean(query_t, tmpl, "query text")
    _check_clean(query_t_pos, tmpl, "query positive cue")
    segments.append(image_segment(query_image))
    segments.append(text_segment(query_t + tmpl.separator + query_t_pos))
    return InterleavedPrompt(segments=tuple(segments))


def assemble_mt(
    demos: Sequence[MultitaskDemonstration],
    query_image: ImageRef,
    query_t1: str,
    tmpl: PromptTemplate,
) -> InterleavedPrompt:
    """Multitask chunks interleave main and auxiliary task; the query prompts
    only the main task and the model generates the rest of the chunk."""
    if not demos:
        raise ArityError("multitask prompting needs at least one demonstration")
    segments = _instruction_segments(tmpl)
    for demo in demos:
        parts = [demo.t1, demo.r1, demo.t2, demo.r2]
        for part in parts:
            _check_clean(part, tmpl, "multitask demonstration field")
        segments.append(image_segment(demo.image))
        segments.append(text_segment(_chunk(parts, tmpl)))
    _check_clean(query_t1, tmpl, "query text")
    segments.append(image_segment(query_image))
    segments.append(text_segment(query_t1))
    return InterleavedPrompt(segments=tuple(segments))


def assemble_sc_step2(
    demos: Sequence[Demonstration],
    probe: RelevanceProbe,
    query_image: ImageRef,
    original_question: str,
    tmpl: PromptTemplate,
) -> InterleavedPrompt:
    """Relevance-probe prompt: each chunk embeds a demo question, quoted, in the
    probe template followed by its yes/no response; the query embeds the
    original question the same way."""
    segments = _instruction_segments(tmpl)
    for demo in demos:
        _check_clean(demo.t, tmpl, "probe demonstration question")
        _check_clean(demo.r, tmpl, "probe demonstration response")
        segments.append(image_segment(demo.image))
        segments.append(text_segment(_chunk([probe.render(demo.t), demo.r], tmpl)))
    _check_clean(original_question, tmpl, "probed question")
    segments.append(image_segment(query_image))
    segments.append(text_segment(probe.render(original_question)))
    return InterleavedPrompt(segments=tuple(segments))


# ---------------------------------------------------------------------------
# output parsing


def parse_answer(raw: str, stop_markers: Sequence[str], lowercase: bool = False) -> str:
    """Truncate raw generation at the first stop marker and trim."""
    cut = len(raw)
    for marker in stop_markers:
        if not marker:
            continue
        pos = raw.find(marker)
        if pos != -1:
            cut = min(cut, pos)
    answer = raw[:cut].strip()
    return answer.lower() if lowercase else answer


def parse_yes_no(raw: str) -> str:
    """Classify a reply as yes/no/unknown by prefix of its first token."""
    tokens = raw.strip().split()
    if not tokens:
        return "unknown"
    first = tokens[0].lower()
    if first.startswith("yes"):
        return "yes"
    if first.startswith("no"):
        return "no"
    return "unknown"


def correct_answer(o1: str, o2: str, probe: RelevanceProbe) -> str:
    """Replace the first answer with the abstention keyword when the probe
    reply says the question is irrelevant. One-directional: a "yes" (or an
    unparseable reply) never un-abstains o1."""
    if parse_yes_no(o2) == "no":
        return probe.abstention_keyword
    return o1


def split_multitask_answer(
    raw: str, t2_cue: str, stop_markers: Sequence[str]
) -> tuple[str, str, bool]:
    """Split a multitask continuation into (r1, r2, cue_found).

    The auxiliary cue delimits the two responses; records where it never
    appears are flagged and the whole (truncated) output is taken as r1.
    """
    head = parse_answer(raw, stop_markers)
    pos = head.find(t2_cue)
    if pos == -1:
        return head.strip(), "", False
    return head[:pos].strip(), head[pos + len(t2_cue) :].strip(), True


# ---------------------------------------------------------------------------
# wire rendering and validation


def serialize(prompt: InterleavedPrompt, tmpl: PromptTemplate) -> str:
    """Render the prompt as the wire string the endpoint's tokenizer consumes.

    Image segments render as the image marker; locators travel separately in
    the transport request.
    """
    parts = []
    for seg in prompt.segments:
        parts.append(tmpl.image_marker if seg.kind == "image" else seg.payload)
    return "".join(parts)


def prompt_digest(prompt: InterleavedPrompt, tmpl: PromptTemplate) -> str:
    return hashlib.sha256(serialize(prompt, tmpl).encode("utf-8")).hexdigest()


def _tokenize_wire(wire: str, tmpl: PromptTemplate) -> list[str]:
    """Reduce a wire string to I/C/T atoms; text atoms are marker-free runs."""
    markers = sorted(
        [(tmpl.image_marker, "I"), (tmpl.chunk_end, "C")], key=lambda m: -len(m[0])
    )
    atoms = []
    i = 0
    text_start = i
    while i < len(wire):
        for marker, atom in markers:
            if wire.startswith(marker, i):
                if text_start < i:
                    atoms.append("T")
                atoms.append(atom)
                i += len(marker)
                text_start = i
                break
        else:
            i += 1
    if text_start < len(wire):
        atoms.append("T")
    return atoms


_CHUNK_GRAMMAR = re.compile(r"T?(?:I?TC)*IT?\Z")


def validate_wire(wire: str, tmpl: PromptTemplate) -> bool:
    """Check a wire string against the chunk grammar."""
    return _CHUNK_GRAMMAR.match("".join(_tokenize_wire(wire, tmpl))) is not None


# ---------------------------------------------------------------------------
# template configuration files


@dataclass(frozen=True)
class TemplateConfig:
    """Markers, separators, per-task cue strings and task-instruction texts."""

    image_marker: str = "<image>"
    chunk_end: str = "<|endofchunk|>"
    separator: str = " "
    instruction_separator: str = "\n"
    task_instructions: Mapping[str, str] = field(default_factory=dict)
    cues: Mapping[str, Mapping[str, str]] = field(default_factory=dict)

    def prompt_template(self, axis: str | None = None, use_instruction: bool = False) -> PromptTemplate:
        instruction = None
        if use_instruction and axis is not None:
            instruction = self.task_instructions.get(axis)
        return PromptTemplate(
            image_marker=self.image_marker,
            chunk_end=self.chunk_end,
            separator=self.separator,
            instruction_separator=self.instruction_separator,
            task_instruction=instruction,
        )

    def cue(self, group: str, name: str) -> str:
        try:
            return self.cues[group][name]
        except KeyError as exc:
            raise TemplateError(f"template config lacks cue {group}.{name}") from exc


def load_template_config(path: str | Path | None = None) -> TemplateConfig:
    """Load a template file; None loads the bundled defaults."""
    if path is None:
        raw = resources.files("evalign.data").joinpath("templates/default.json").read_text(
            encoding="utf-8"
        )
    else:
        raw = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise TemplateError(f"template file is not valid JSON: {exc}") from exc
    return TemplateConfig(
        image_marker=doc.get("image_marker", "<image>"),
        chunk_end=doc.get("chunk_end", "<|endofchunk|>"),
        separator=doc.get("separator", " "),
        instruction_separator=doc.get("instruction_separator", "\n"),
        task_instructions=doc.get("task_instructions", {}),
        cues=doc.get("cues", {}),
    )
