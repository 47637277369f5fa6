"""Benchmark ingestion: uniform task records and seeded query/demo splits.

The canonical interchange format is one JSON object per line (UTF-8). Field
schemas per axis are documented in the README; a converter ingests native
COCO-style caption+instance annotation documents.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from evalign.errors import (
    BalanceError,
    CategoryError,
    ConsistencyError,
    DatasetParseError,
    SplitSizeError,
)
from evalign.metrics.scoring import normalize_answer
from evalign.metrics.vocabulary import ObjectVocabulary

ITM_NEGATIVE_KINDS = (
    "HN-Atom",
    "HN-Comp",
    "HN-Atom+Comp",
    "replace-obj",
    "replace-att",
    "replace-rel",
    "swap-obj",
    "swap-att",
    "add-obj",
    "add-att",
)

INSTRUCTION_TYPES = ("detailed_description", "complex_question", "conversation")


@dataclass(frozen=True)
class ImageRef:
    """Opaque image handle; pixels never enter the harness.

    Identity is the id alone: two refs with equal id compare equal even if
    their locators differ.
    """

    id: str
    uri: str = field(compare=False)

    def __post_init__(self):
        if not self.id:
            raise ConsistencyError("ImageRef.id must be nonempty")


@dataclass(frozen=True)
class CaptionRecord:
    uid: tuple[str, int]
    image: ImageRef
    references: tuple[str, ...]
    gt_objects: frozenset[str]

    def __post_init__(self):
        if not self.references:
            raise ConsistencyError(f"{self.uid}: captions require >=1 reference")


@dataclass(frozen=True)
class VqaRecord:
    uid: tuple[str, int]
    image: ImageRef
    question: str
    answer: str
    absurd: bool
    qtype: str | None = None


@dataclass(frozen=True)
class ItmRecord:
    uid: tuple[str, int]
    image: ImageRef
    caption: str
    label: str  # "positive" | "negative"
    negative_kind: str | None = None

    def __post_init__(self):
        if self.label not in ("positive", "negative"):
            raise CategoryError(f"{self.uid}: bad label {self.label!r}")
        if (self.negative_kind is not None) != (self.label == "negative"):
            raise ConsistencyError(
                f"{self.uid}: negative_kind must be present iff label is negative"
            )
        if self.negative_kind is not None and self.negative_kind not in ITM_NEGATIVE_KINDS:
            raise CategoryError(f"{self.uid}: unknown negative_kind {self.negative_kind!r}")


@dataclass(frozen=True)
class ExplainRecord:
    uid: tuple[str, int]
    image: ImageRef
    question: str
    answer: str
    explanations: tuple[str, ...]

    def __post_init__(self):
        if not self.explanations:
            raise ConsistencyError(f"{self.uid}: explanations must be nonempty")


@dataclass(frozen=True)
class InstructionRecord:
    uid: tuple[str, int]
    image: ImageRef
    instruction: str
    gt_response: str
    itype: str

    def __post_init__(self):
        if self.itype not in INSTRUCTION_TYPES:
            raise CategoryError(f"{self.uid}: unknown itype {self.itype!r}")


TaskRecord = CaptionRecord | VqaRecord | ItmRecord | ExplainRecord | InstructionRecord


@dataclass(frozen=True)
class SampledSplit:
    queries: tuple
    demo_pool: tuple
    seed: int


@dataclass(frozen=True)
class BalancePolicy:
    """Rebalance the demonstration pool by a record attribute.

    proportions maps class value -> target fraction; None means equal shares
    over the observed classes.
    """

    by: str
    proportions: Mapping[Any, float] | None = None


# ---------------------------------------------------------------------------
# record-per-line IO


def iter_jsonl(path: str | Path) -> Iterable[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        index = 0
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetParseError(f"{path}:{lineno}: not valid JSON ({exc})") from exc
            if not isinstance(row, dict):
                raise DatasetParseError(f"{path}:{lineno}: expected an object")
            yield index, row
            index += 1


def _require(row: dict, key: str, where: str):
    if key not in row:
        raise DatasetParseError(f"{where}: missing field {key!r}")
    return row[key]


def _dataset_id(path: str | Path, dataset_id: str | None) -> str:
    return dataset_id if dataset_id is not None else Path(path).stem


def _image_ref(row: dict, where: str) -> ImageRef:
    image_id = str(_require(row, "image_id", where))
    uri = str(row.get("image_uri", image_id))
    return ImageRef(id=image_id, uri=uri)


def load_caption_records(
    path: str | Path,
    vocab: ObjectVocabulary | None = None,
    dataset_id: str | None = None,
) -> list[CaptionRecord]:
    """Read interchange caption records; validates gt_objects when vocab given."""
    ds = _dataset_id(path, dataset_id)
    records = []
    for index, row in iter_jsonl(path):
        where = f"{path}: record {index}"
        refs = tuple(str(r) for r in _require(row, "references", where))
        objs = frozenset(str(o) for o in _require(row, "gt_objects", where))
        if vocab is not None:
            for obj in objs:
                if obj not in vocab.canonical:
                    raise CategoryError(f"{where}: gt object {obj!r} not in vocabulary")
        records.append(
            CaptionRecord(
                uid=(ds, index),
                image=_image_ref(row, where),
                references=refs,
                gt_objects=objs,
            )
        )
    return records


def load_vqa(
    path: str | Path,
    abstention_keyword: str = "doesnotapply",
    dataset_id: str | None = None,
) -> list[VqaRecord]:
    """Read VQA records; the absurd flag is derived from the answer if absent."""
    ds = _dataset_id(path, dataset_id)
    key = normalize_answer(abstention_keyword)
    records = []
    for index, row in iter_jsonl(path):
        where = f"{path}: record {index}"
        answer = str(_require(row, "answer", where))
        matches_keyword = normalize_answer(answer) == key
        absurd = row.get("absurd")
        if absurd is None:
            absurd = matches_keyword
        elif absurd and not matches_keyword:
            raise ConsistencyError(
                f"{where}: absurd=true but answer {answer!r} is not the keyword"
            )
        records.append(
            VqaRecord(
                uid=(ds, index),
                image=_image_ref(row, where),
                question=str(_require(row, "question", where)),
                answer=answer,
                absurd=bool(absurd),
                qtype=row.get("qtype"),
            )
        )
    return records


def load_itm(path: str | Path, dataset_id: str | None = None) -> list[ItmRecord]:
    ds = _dataset_id(path, dataset_id)
    records = []
    for index, row in iter_jsonl(path):
        where = f"{path}: record {index}"
        records.append(
            ItmRecord(
                uid=(ds, index),
                image=_image_ref(row, where),
                caption=str(_require(row, "caption", where)),
                label=str(_require(row, "label", where)),
                negative_kind=row.get("negative_kind"),
            )
        )
    return records


def load_explanations(path: str | Path, dataset_id: str | None = None) -> list[ExplainRecord]:
    ds = _dataset_id(path, dataset_id)
    records = []
    for index, row in iter_jsonl(path):
        where = f"{path}: record {index}"
        records.append(
            ExplainRecord(
                uid=(ds, index),
                image=_image_ref(row, where),
                question=str(_require(row, "question", where)),
                answer=str(_require(row, "answer", where)),
                explanations=tuple(str(e) for e in _require(row, "explanations", where)),
            )
        )
    return records


def load_instructions(path: str | Path, dataset_id: str | None = None) -> list[InstructionRecord]:
    ds = _dataset_id(path, dataset_id)
    records = []
    for index, row in iter_jsonl(path):
        where = f"{path}: record {index}"
        records.append(
            InstructionRecord(
                uid=(ds, index),
                image=_image_ref(row, where),
                instruction=str(_require(row, "instruction", where)),
                gt_response=str(_require(row, "gt_response", where)),
                itype=str(_require(row, "itype", where)),
            )
        )
    return records


def record_to_row(record: TaskRecord) -> dict:
    row: dict[str, Any] = {"image_id": record.image.id, "image_uri": record.image.uri}
    for f in fields(record):
        if f.name in ("uid", "image"):
            continue
        value = getattr(record, f.name)
        if isinstance(value, frozenset):
            value = sorted(value)
        elif isinstance(value, tuple):
            value = list(value)
        if value is None:
            continue
        row[f.name] = value
    return row


def dump_records(records: Sequence[TaskRecord], path: str | Path) -> None:
    """Write records in the interchange format; inverse of the loaders."""
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record_to_row(record), sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# native COCO-style ingestion


def load_captions(
    annotations: Mapping[str, Any] | str | Path,
    vocab: ObjectVocabulary,
    dataset_id: str = "coco",
) -> list[CaptionRecord]:
    """Convert a COCO-style caption+instance annotation document.

    The document carries "images" (id, file_name), "annotations" (caption
    entries with image_id), "categories" (id, name) and "instances"
    (instance entries with image_id, category_id). One record per image, in
    the order of the images array; gt_objects is the union of the image's
    canonicalized instance categories.
    """
    if not isinstance(annotations, Mapping):
        with open(annotations, encoding="utf-8") as fh:
            annotations = json.load(fh)
    for section in ("images", "annotations", "categories", "instances"):
        if section not in annotations:
            raise DatasetParseError(f"annotation document missing section {section!r}")

    category_names = {}
    for cat in annotations["categories"]:
        category_names[cat["id"]] = vocab.canonicalize(str(cat["name"]))

    captions_by_image: dict[Any, list[str]] = {}
    for ann in annotations["annotations"]:
        if "image_id" not in ann or "caption" not in ann:
            raise DatasetParseError(f"malformed caption annotation: {ann!r}")
        captions_by_image.setdefault(ann["image_id"], []).append(str(ann["caption"]))

    objects_by_image: dict[Any, set[str]] = {}
    for inst in annotations["instances"]:
        if "image_id" not in inst or "category_id" not in inst:
            raise DatasetParseError(f"malformed instance annotation: {inst!r}")
        if inst["category_id"] not in category_names:
            raise DatasetParseError(f"instance references unknown category: {inst!r}")
        objects_by_image.setdefault(inst["image_id"], set()).add(
            category_names[inst["category_id"]]
        )

    records = []
    for index, img in enumerate(annotations["images"]):
        if "id" not in img:
            raise DatasetParseError(f"malformed image entry: {img!r}")
        refs = captions_by_image.get(img["id"], [])
        if not refs:
            raise DatasetParseError(f"image {img['id']} has zero captions")
        records.append(
            CaptionRecord(
                uid=(dataset_id, index),
                image=ImageRef(id=str(img["id"]), uri=str(img.get("file_name", img["id"]))),
                references=tuple(refs),
                gt_objects=frozenset(objects_by_image.get(img["id"], set())),
            )
        )
    return records


def merge_coco_documents(
    captions_doc: Mapping[str, Any], instances_doc: Mapping[str, Any]
) -> dict:
    """Fuse separate caption and instance annotation files into one document."""
    return {
        "images": captions_doc.get("images", instances_doc.get("images", [])),
        "annotations": captions_doc.get("annotations", []),
        "categories": instances_doc.get("categories", []),
        "instances": instances_doc.get("annotations", []),
    }


# ---------------------------------------------------------------------------
# sampling


def sample_split(
    records: Sequence[TaskRecord],
    n_queries: int,
    seed: int,
    balance: BalancePolicy | None = None,
    pool_size: int | None = None,
) -> SampledSplit:
    """Split records into disjoint query and demonstration sets.

    Deterministic in (records, n_queries, seed, balance, pool_size). With a
    balance policy the pool's class composition matches the policy targets;
    a class with too few members raises BalanceError.
    """
    if n_queries < 1:
        raise SplitSizeError("n_queries must be >= 1")
    if n_queries >= len(records):
        raise SplitSizeError(
            f"n_queries={n_queries} leaves no demonstration pool "
            f"(only {len(records)} records)"
        )
    rng = random.Random(seed)
    order = list(range(len(records)))
    rng.shuffle(order)
    queries = tuple(records[i] for i in order[:n_queries])
    rest = [records[i] for i in order[n_queries:]]

    if balance is None:
        pool = rest if pool_size is None else rest[:pool_size]
        return SampledSplit(queries=queries, demo_pool=tuple(pool), seed=seed)

    groups: dict[Any, list] = {}
    for rec in rest:
        groups.setdefault(getattr(rec, balance.by), []).append(rec)
    if balance.proportions is not None:
        proportions = dict(balance.proportions)
        missing = [cls for cls in proportions if cls not in groups]
        if missing:
            raise BalanceError(f"no records left for class(es) {missing!r}")
    else:
        proportions = {cls: 1.0 / len(groups) for cls in groups}
    classes = sorted(proportions, key=repr)

    if pool_size is None:
        # Largest total size for which every class can meet its share.
        pool_size = min(
            int(len(groups.get(cls, ())) / share) for cls, share in proportions.items() if share > 0
        )
    quotas = {cls: int(pool_size * proportions[cls]) for cls in classes}
    shortfall = pool_size - sum(quotas.values())
    for cls in classes:
        if shortfall <= 0:
            break
        quotas[cls] += 1
        shortfall -= 1
    for cls in classes:
        if quotas[cls] > len(groups.get(cls, ())):
            raise BalanceError(
                f"class {cls!r} exhausted: need {quotas[cls]}, have {len(groups.get(cls, ()))}"
            )

    taken = {cls: 0 for cls in classes}
    pool = []
    for rec in rest:
        cls = getattr(rec, balance.by)
        if cls in quotas and taken[cls] < quotas[cls]:
            pool.append(rec)
            taken[cls] += 1
    return SampledSplit(queries=queries, demo_pool=tuple(pool), seed=seed)
