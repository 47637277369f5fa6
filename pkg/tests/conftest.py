import json

import pytest

ACCEPTANCE_RESULTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)


def write_jsonl(path, rows):
    path.write_text("\n".join(json.dumps(row) for row in rows) + "\n", encoding="utf-8")
    return path


def make_vqa_rows(n, absurd_every=5, extra_absurd=()):
    """Absurd questions carry the 'dragon' sentinel so mocks can key on it."""
    rows = []
    for i in range(n):
        absurd = i % absurd_every == 0 or i in extra_absurd
        rows.append(
            {
                "image_id": f"img{i}",
                "image_uri": f"images/{i}.jpg",
                "question": (
                    f"what is the dragon number {i} reading"
                    if absurd
                    else f"what color is object number {i}"
                ),
                "answer": "doesnotapply" if absurd else f"color{i}",
                "absurd": absurd,
                "qtype": "absurd" if absurd else "color",
            }
        )
    return rows


def make_caption_rows(n, gt=("dog", "cat")):
    # Reference wording varies across images so shared n-grams keep a
    # nonzero document frequency spread (a flat corpus zeroes all IDFs).
    rows = []
    for i in range(n):
        first = (
            f"a dog and a cat resting on item {i}"
            if i % 2 == 0
            else f"two furry animals resting on item {i}"
        )
        second = (
            f"photo number {i} shows a dog beside a cat"
            if i % 3 != 0
            else f"snapshot {i} of the quiet living room"
        )
        rows.append(
            {
                "image_id": f"img{i}",
                "image_uri": f"images/{i}.jpg",
                "references": [first, second],
                "gt_objects": list(gt),
            }
        )
    return rows


ITM_KINDS = ("HN-Atom", "HN-Comp", "HN-Atom+Comp")


def make_itm_rows(n_images):
    """One positive and one negative caption per image; negatives say 'frog'."""
    rows = []
    for i in range(n_images):
        kind = ITM_KINDS[i % len(ITM_KINDS)]
        rows.append(
            {
                "image_id": f"img{i}",
                "image_uri": f"images/{i}.jpg",
                "caption": f"a plain photo of scene number {i}",
                "label": "positive",
            }
        )
        rows.append(
            {
                "image_id": f"img{i}",
                "image_uri": f"images/{i}.jpg",
                "caption": f"a frog invading scene number {i}",
                "label": "negative",
                "negative_kind": kind,
            }
        )
    return rows


def make_explain_rows(n):
    rows = []
    for i in range(n):
        first = (
            f"because the rain fell on item {i} all day"
            if i % 2 == 0
            else f"because item {i} slipped into the deep pond"
        )
        second = (
            f"item {i} stood outside during the storm"
            if i % 3 != 0
            else f"someone sprayed item {i} with a garden hose"
        )
        rows.append(
            {
                "image_id": f"img{i}",
                "image_uri": f"images/{i}.jpg",
                "question": f"why is item {i} wet",
                "answer": f"answer{i}",
                "explanations": [first, second],
            }
        )
    return rows


INSTRUCTION_TYPES = ("detailed_description", "complex_question", "conversation")


def make_instruction_rows(n):
    rows = []
    for i in range(n):
        itype = INSTRUCTION_TYPES[i % len(INSTRUCTION_TYPES)]
        rows.append(
            {
                "image_id": f"img{i}",
                "image_uri": f"images/{i}.jpg",
                "instruction": f"({itype}) please handle request number {i}",
                "gt_response": f"reference response {i}",
                "itype": itype,
            }
        )
    return rows


@pytest.fixture
def vqa_file(tmp_path):
    # 22 of 100 rows absurd, the natural corpus ratio.
    return write_jsonl(
        tmp_path / "vqa.jsonl", make_vqa_rows(100, absurd_every=5, extra_absurd=(3, 98))
    )


@pytest.fixture
def caption_file(tmp_path):
    return write_jsonl(tmp_path / "captions.jsonl", make_caption_rows(30))


@pytest.fixture
def itm_file(tmp_path):
    return write_jsonl(tmp_path / "itm.jsonl", make_itm_rows(30))


@pytest.fixture
def explain_file(tmp_path):
    return write_jsonl(tmp_path / "explain.jsonl", make_explain_rows(40))


@pytest.fixture
def instruction_file(tmp_path):
    return write_jsonl(tmp_path / "instructions.jsonl", make_instruction_rows(45))
