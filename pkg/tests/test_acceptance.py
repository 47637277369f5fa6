"""Acceptance criteria, one test per criterion, at their stated tolerances.

Each test records a `criterion N PASS/FAIL` line that pytest prints in the
terminal summary (see conftest.pytest_terminal_summary).
"""

import json
import os
import random
import time
from contextlib import contextmanager

import pytest

from evalign.corpus import ImageRef, VqaRecord
from evalign.metrics import (
    abstention_metrics,
    aggregate,
    build_vocabulary,
    chair,
    cider,
    normalize_answer,
)
from evalign.mock_server import serve_mock
from evalign.modelio import EndpointClient, GenerationParams
from evalign.promptkit import (
    Demonstration,
    RelevanceProbe,
    assemble_coh,
    assemble_icl,
    assemble_mt,
    assemble_sc_step2,
    assemble_zero_shot,
    serialize,
    text_segment,
    validate_wire,
)
from evalign.runner import ExperimentConfig, RunLog, run_axis, run_sc_icl

from conftest import (
    ACCEPTANCE_RESULTS,
    make_caption_rows,
    make_explain_rows,
    make_instruction_rows,
    make_itm_rows,
    make_vqa_rows,
    write_jsonl,
)
from oracles import cider_oracle, confusion_oracle, two_pass_stats
from test_promptkit import TMPL, coh_demo, demo, mt_demo, mutate_wire


@contextmanager
def criterion(number, description):
    try:
        yield
    except BaseException:
        ACCEPTANCE_RESULTS.append(f"criterion {number} FAIL: {description}")
        raise
    else:
        ACCEPTANCE_RESULTS.append(f"criterion {number} PASS: {description}")


# --------------------------------------------------------------------------
# 1. CIDEr vs independent brute-force oracle


FIXTURE_25 = [
    ("a man rides a brown horse on the beach",
     ["a man is riding a horse along the sandy beach", "a person rides a brown horse"]),
    ("two dogs play with a red ball", ["two dogs are playing with a red ball in the park"]),
    ("the kitchen has a white refrigerator",
     ["a white refrigerator stands in the kitchen", "the kitchen contains a large fridge"]),
    ("a group of people standing around a table",
     ["several people gather around a wooden table", "people stand near a table"]),
    ("a cat sleeps on a warm windowsill", ["a cat naps on the sunny windowsill"]),
    ("an airplane flies over snowy mountains",
     ["a plane flying above snow covered mountains", "an airplane above the mountains"]),
    ("children play soccer on a green field", ["kids playing soccer on the grass field"]),
    ("a woman holds a colorful umbrella", ["a woman holding an umbrella in the rain"]),
    ("fresh vegetables sit in a wooden bowl", ["a wooden bowl filled with fresh vegetables"]),
    ("a train crosses an old stone bridge", ["a long train crossing a stone bridge"]),
    ("the boy eats a slice of pizza", ["a young boy eating pizza at the table"]),
    ("surfers wait for waves at dawn", ["surfers waiting for the morning waves"]),
    ("a vase of tulips on the counter", ["a glass vase holding red tulips"]),
    ("traffic moves slowly in heavy rain", ["cars in slow traffic during the rain"]),
    ("a bird perches on a wire fence", ["a small bird sitting on the fence"]),
    ("students read books in the library", ["several students reading inside a library"]),
    ("a chef cooks pasta in a busy kitchen", ["a chef preparing pasta in the kitchen"]),
    ("the lighthouse shines over the harbor", ["a lighthouse glowing above the harbor"]),
    ("a couple walks their dog at sunset", ["two people walking a dog during sunset"]),
    ("skiers descend a steep powder slope", ["skiers going down a snowy slope"]),
    ("a street musician plays the violin", ["a musician playing violin on the street"]),
    ("boats anchor in the calm bay", ["several boats anchored in a quiet bay"]),
    ("a farmer harvests golden wheat", ["a farmer working in a wheat field"]),
    ("the museum hall displays old paintings", ["old paintings hang in the museum hall"]),
    ("a laptop sits open on the desk", ["an open laptop on a wooden desk"]),
]


def test_criterion_1_cider_oracle():
    with criterion(1, "cider matches brute-force oracle to 1e-6 on 25-sentence corpus"):
        candidates = [cand for cand, _ in FIXTURE_25]
        references = [refs for _, refs in FIXTURE_25]
        start = time.monotonic()
        result = cider(candidates, references)
        oracle_score, oracle_items = cider_oracle(candidates, references)
        elapsed = time.monotonic() - start
        assert abs(result.score - oracle_score) <= 1e-6
        for got, want in zip(result.per_item, oracle_items):
            assert abs(got - want) <= 1e-6
        # identical candidate in a two-document corpus with distinct vocabularies
        ident = cider(
            ["a red car drives down the road", "two small birds sing in a tree"],
            [["a red car drives down the road"], ["two small birds sing in a tree"]],
        )
        assert abs(ident.per_item[0] - 10.0) <= 1e-6
        # empty candidate
        empty = cider(["", "a red car"], [["a red car drives"], ["a red car drives"]])
        assert empty.per_item[0] == 0.0
        assert elapsed < 1.0


# --------------------------------------------------------------------------
# 2. CHAIR hand counts and properties


CHAIR_VOCAB = build_vocabulary(
    [("dog", []), ("cat", []), ("couch", ["sofa"]), ("car", []), ("bird", []), ("chair", [])]
)

# ten captions with hand-counted mentions/hallucinations:
#   totals: mentioned=16, hallucinated=4, captions with a hallucination=4
#   -> chair_s = 0.4, chair_i = 4/16
CHAIR_FIXTURE = [
    ("a dog and a cat on the couch", {"dog", "couch"}),          # 3 mentions, 1 bad
    ("a dog sits alone", {"dog"}),                                # 1 mention, 0 bad
    ("two cars parked near a bird", {"car"}),                     # 2 mentions, 1 bad
    ("a couch and a chair", {"couch", "chair"}),                  # 2 mentions, 0 bad
    ("the bird watches a cat", {"bird", "cat"}),                  # 2 mentions, 0 bad
    ("an empty street", {"car"}),                                 # 0 mentions, 0 bad
    ("a sofa with a sleeping dog", {"couch"}),                    # 2 mentions, 1 bad
    ("a car", {"car"}),                                           # 1 mention, 0 bad
    ("a chair beside a couch", {"chair", "couch"}),               # 2 mentions, 0 bad
    ("a cat", {"dog"}),                                           # 1 mention, 1 bad
]


def test_criterion_2_chair_hand_counts_and_properties():
    with criterion(2, "chair equals hand counts; 1000 invariance/monotonicity trials"):
        result = chair(CHAIR_FIXTURE, CHAIR_VOCAB)
        assert result.chair_s == 0.4
        assert result.chair_i == 4 / 16
        # the single-caption hand cases
        one = chair([("a dog and a cat on the couch", {"dog", "couch"})], CHAIR_VOCAB)
        assert one.chair_s == 1.0 and one.chair_i == pytest.approx(1 / 3)
        pair = chair(
            [("a dog and a cat", {"dog", "cat"}), ("a car near a bird", {"car"})],
            CHAIR_VOCAB,
        )
        assert pair.chair_s == 0.5 and pair.chair_i == pytest.approx(1 / 4)

        words = ["dog", "cat", "sofa", "car", "bird", "chair", "tree", "sky", "a", "the"]
        gt_pool = ["dog", "cat", "couch", "car", "bird", "chair"]
        rng = random.Random(8675309)
        for _ in range(1000):
            captions = []
            for _ in range(rng.randint(1, 5)):
                text = " ".join(rng.choice(words) for _ in range(rng.randint(0, 8)))
                gt = set(rng.sample(gt_pool, rng.randint(0, len(gt_pool))))
                captions.append((text, gt))
            base = chair(captions, CHAIR_VOCAB)
            shuffled = captions[:]
            rng.shuffle(shuffled)
            redone = chair(shuffled, CHAIR_VOCAB)
            assert redone.chair_s == base.chair_s and redone.chair_i == base.chair_i
            idx = rng.randrange(len(captions))
            text, gt = captions[idx]
            foils = [w for w in gt_pool if w not in gt]
            if not foils:
                continue
            mutated = captions[:]
            mutated[idx] = (text + " " + rng.choice(foils), gt)
            worse = chair(mutated, CHAIR_VOCAB)
            assert worse.chair_s >= base.chair_s
            assert worse.chair_i >= base.chair_i


# --------------------------------------------------------------------------
# 3. abstention metrics vs confusion-matrix oracle, exact


def test_criterion_3_abstention_oracle_exact():
    with criterion(3, "abstention P/R/F1 equal brute-force oracle on 1000 random vectors"):
        rng = random.Random(424242)
        for _ in range(1000):
            n = rng.randint(1, 60)
            records, preds = [], []
            for _ in range(n):
                absurd = rng.random() < rng.choice([0.1, 0.3, 0.7])
                records.append(
                    VqaRecord(
                        uid=("synthetic", len(records)),
                        image=ImageRef("i", "x"),
                        question="q",
                        answer="doesnotapply" if absurd else "red",
                        absurd=absurd,
                    )
                )
                preds.append(rng.choice(["doesnotapply", "red", "blue", ""]))
            res = abstention_metrics(preds, records)
            precision, recall, f1, acc = confusion_oracle(
                [normalize_answer(p) == "doesnotapply" for p in preds],
                [r.absurd for r in records],
            )
            assert res.abst_precision == precision
            assert res.abst_recall == recall
            assert res.abst_f1 == f1
            assert res.abst_acc == acc


# --------------------------------------------------------------------------
# 4. golden wire strings + grammar validation


IMGQ = ImageRef("q", "q.jpg")


def test_criterion_4_golden_strings_and_grammar():
    with criterion(4, "assembler goldens for N in {0,1,2,4}; validator rejects 1000 mutants"):
        wires = []
        for n in (0, 1, 2, 4):
            prompt = assemble_icl(
                [demo(i) for i in range(n)], IMGQ, "Question: final? Answer:", TMPL
            )
            expected = "".join(
                f"<image>Question: item {i}? Answer: reply{i}<|endofchunk|>" for i in range(n)
            ) + "<image>Question: final? Answer:"
            assert serialize(prompt, TMPL) == expected
            wires.append(expected)

        zs = assemble_zero_shot([demo(0), demo(1)], IMGQ, "Question: final? Answer:", TMPL)
        zs_expected = (
            "Question: item 0? Answer: reply0<|endofchunk|>"
            "Question: item 1? Answer: reply1<|endofchunk|>"
            "<image>Question: final? Answer:"
        )
        assert serialize(zs, TMPL) == zs_expected
        wires.append(zs_expected)

        for n in (1, 2, 4):
            prompt = assemble_coh(
                [coh_demo(i) for i in range(n)],
                IMGQ, "Question: final? Answer: af", "Good explanation:", TMPL,
            )
            expected = "".join(
                f"<image>Question: item {i}? Answer: a{i} Good explanation: good{i} "
                f"Bad explanation: bad{i}<|endofchunk|>" for i in range(n)
            ) + "<image>Question: final? Answer: af Good explanation:"
            assert serialize(prompt, TMPL) == expected
            wires.append(expected)

            mt = assemble_mt([mt_demo(i) for i in range(n)], IMGQ, "Question: final? Answer:", TMPL)
            mt_expected = "".join(
                f"<image>Question: item {i}? Answer: reply{i} "
                f"Is the question relevant to the image? Answer: "
                f"{'yes' if i % 2 else 'no'}<|endofchunk|>" for i in range(n)
            ) + "<image>Question: final? Answer:"
            assert serialize(mt, TMPL) == mt_expected
            wires.append(mt_expected)

        probe = RelevanceProbe(
            t2_template="Is the following question relevant to the image: {question}? Answer:"
        )
        for n in (0, 1, 2, 4):
            demos = [
                Demonstration(image=ImageRef(f"d{i}", "x"), t=f"probe question {i}", r="no")
                for i in range(n)
            ]
            prompt = assemble_sc_step2(demos, probe, IMGQ, "what is the cat reading", TMPL)
            expected = "".join(
                f'<image>Is the following question relevant to the image: "probe question {i}"? '
                f"Answer: no<|endofchunk|>" for i in range(n)
            ) + (
                '<image>Is the following question relevant to the image: '
                '"what is the cat reading"? Answer:'
            )
            assert serialize(prompt, TMPL) == expected
            wires.append(expected)

        for wire in wires:
            assert validate_wire(wire, TMPL)
        rng = random.Random(5150)
        for i in range(1000):
            wire = wires[i % len(wires)]
            mutant = mutate_wire(wire, TMPL, rng)
            assert not validate_wire(mutant, TMPL), mutant


# --------------------------------------------------------------------------
# 5. SC-ICL end-to-end direction and identity


def test_criterion_5_sc_direction_and_identity(tmp_path):
    with criterion(5, "self-correction raises F1 under a truthful probe; all-yes probe is a no-op"):
        path = write_jsonl(tmp_path / "vqa.jsonl", make_vqa_rows(70))
        truthful = {
            "default": {"kind": "fixed", "text": "purple"},
            "rules": [
                {"kind": "fixed", "pattern": "relevant to the image: \"[^\"]*dragon", "text": "no"},
                {"kind": "fixed", "match": "relevant to the image:", "text": "yes"},
            ],
        }
        with serve_mock(truthful) as handle:
            config = ExperimentConfig(
                axis="abstention", dataset_path=str(path), endpoint=handle.url,
                variant="sc_icl", shots=(4,), seeds=(13, 17), n_queries=20,
                sc_correction_shots=8,
            )
            cell = run_sc_icl(config).cells[("abstention", "sc_icl", 4)]
            assert cell.metrics["abst_f1"].mean > cell.metrics["abst_f1_uncorrected"].mean

        all_yes = {
            "default": {"kind": "fixed", "text": "purple"},
            "rules": [{"kind": "fixed", "match": "relevant to the image:", "text": "yes"}],
        }
        with serve_mock(all_yes) as handle:
            base = ExperimentConfig(
                axis="abstention", dataset_path=str(path), endpoint=handle.url,
                shots=(4,), seeds=(13, 17), n_queries=20, sc_correction_shots=8,
            )
            sc_config = ExperimentConfig.from_dict({**base.to_dict(), "variant": "sc_icl"})
            sc_cell = run_sc_icl(sc_config).cells[("abstention", "sc_icl", 4)]
            icl_cell = run_axis(base).cells[("abstention", "icl", 4)]
            corrected_bytes = json.dumps(
                {
                    name: value.to_dict()
                    for name, value in sc_cell.metrics.items()
                    if not name.endswith("_uncorrected")
                },
                sort_keys=True,
            ).encode()
            plain_bytes = json.dumps(
                {name: value.to_dict() for name, value in icl_cell.metrics.items()},
                sort_keys=True,
            ).encode()
            assert corrected_bytes == plain_bytes
            breakdown_sc = json.dumps(
                {g: {k: v.to_dict() for k, v in d.items()} for g, d in sc_cell.breakdowns.items()},
                sort_keys=True,
            )
            breakdown_icl = json.dumps(
                {g: {k: v.to_dict() for k, v in d.items()} for g, d in icl_cell.breakdowns.items()},
                sort_keys=True,
            )
            assert breakdown_sc == breakdown_icl


# --------------------------------------------------------------------------
# 6. determinism of full runs on every axis


def _axis_setups(tmp_path):
    vqa = write_jsonl(tmp_path / "vqa.jsonl", make_vqa_rows(50))
    caps = write_jsonl(tmp_path / "caps.jsonl", make_caption_rows(50))
    itm = write_jsonl(tmp_path / "itm.jsonl", make_itm_rows(30))
    expl = write_jsonl(tmp_path / "expl.jsonl", make_explain_rows(50))
    instr = write_jsonl(tmp_path / "instr.jsonl", make_instruction_rows(45))
    script = {
        "default": {"kind": "fixed", "text": "a dog and a cat"},
        "rules": [
            {"kind": "fixed", "match": "Rate how well", "text": "6"},
            {"kind": "fixed", "match": "dragon", "text": "doesnotapply"},
            {"kind": "fixed", "match": "frog", "text": "no"},
            {"kind": "fixed", "match": "Does the caption describe the image?", "text": "yes"},
            {"kind": "fixed", "match": "Explanation:", "text": "because the rain fell"},
            {"kind": "fixed", "match": "Question:", "text": "purple"},
        ],
    }
    return {
        "hallucination": str(caps),
        "abstention": str(vqa),
        "compositionality": str(itm),
        "explainability": str(expl),
        "instruction": str(instr),
    }, script


def test_criterion_6_determinism_every_axis(tmp_path):
    with criterion(6, "byte-identical reports on repeat runs of every axis; suite < 2 min"):
        datasets, script = _axis_setups(tmp_path)
        start = time.monotonic()
        with serve_mock(script) as handle:
            for axis, dataset in datasets.items():
                config = ExperimentConfig(
                    axis=axis, dataset_path=dataset, endpoint=handle.url,
                    judge_endpoint=handle.url if axis == "instruction" else None,
                    shots=(0, 4), seeds=(13, 17), n_queries=10,
                )
                first = run_axis(config).canonical_json()
                second = run_axis(config).canonical_json()
                assert first.encode() == second.encode(), f"{axis} reports differ"
        assert time.monotonic() - start < 120.0


# --------------------------------------------------------------------------
# 7. zero-shot convention across a 500-record run


def test_criterion_7_zero_shot_convention(tmp_path):
    with criterion(7, "500-record zero-shot run: 1 image + 2 text-only chunks per prompt"):
        path = write_jsonl(tmp_path / "vqa.jsonl", make_vqa_rows(520))
        with serve_mock({"default": {"kind": "fixed", "text": "purple"}}) as handle:
            config = ExperimentConfig(
                axis="abstention", dataset_path=str(path), endpoint=handle.url,
                variant="zero_shot", shots=(0,), seeds=(13,), n_queries=500,
            )
            runlog_path = tmp_path / "run.jsonl"
            with RunLog(runlog_path) as log:
                run_axis(config, log)
        checked = 0
        for line in runlog_path.read_text().splitlines():
            row = json.loads(line)
            if row.get("kind") != "exchange":
                continue
            wire = row["wire"]
            assert wire.count("<image>") == 1
            assert wire.count("<|endofchunk|>") == 2
            # both demonstration chunks precede the only image
            assert wire.rfind("<|endofchunk|>") < wire.find("<image>")
            assert validate_wire(wire, TMPL)
            checked += 1
        assert checked == 500


# --------------------------------------------------------------------------
# 8. aggregation and report schema


def test_criterion_8_aggregation_and_schema(tmp_path):
    with criterion(8, "mean/std match two-pass reference to 1e-12; cells carry (AVG, STD, n)"):
        rng = random.Random(11)
        for _ in range(500):
            values = [rng.uniform(-100, 100) for _ in range(rng.randint(2, 12))]
            agg = aggregate(values)
            mean, std = two_pass_stats(values)
            assert abs(agg.mean - mean) <= 1e-12
            assert abs(agg.std - std) <= 1e-12
        single = aggregate([56.17])
        assert single.as_tuple() == (56.17, 0.0) and single.flagged

        # a real single-seed run: the report schema carries (mean, std, n, flags)
        path = write_jsonl(tmp_path / "vqa.jsonl", make_vqa_rows(30))
        with serve_mock({"default": {"kind": "fixed", "text": "purple"}}) as handle:
            config = ExperimentConfig(
                axis="abstention", dataset_path=str(path), endpoint=handle.url,
                shots=(4,), seeds=(13,), n_queries=8,
            )
            report = run_axis(config)
        doc = report.to_dict()
        cell = doc["cells"]["abstention/icl/4"]
        for value in cell["metrics"].values():
            assert set(value) == {"mean", "std", "n", "flags"}
            assert value["n"] == 1
            assert value["std"] == 0.0
            assert "single_sample" in value["flags"]


# --------------------------------------------------------------------------
# 9. live-endpoint smoke (wire-protocol viability; optional external target)


def test_criterion_9_endpoint_smoke(tmp_path):
    with criterion(9, "50-query abstention run completes against a wire-protocol endpoint"):
        external = os.environ.get("EVALIGN_SMOKE_ENDPOINT")
        path = write_jsonl(tmp_path / "vqa.jsonl", make_vqa_rows(70))

        def smoke(url):
            config = ExperimentConfig(
                axis="abstention", dataset_path=str(path), endpoint=url,
                shots=(0, 4), seeds=(13,), n_queries=50,
            )
            report = run_axis(config)
            assert set(report.cells) == {("abstention", "icl", 0), ("abstention", "icl", 4)}
            for cell in report.cells.values():
                assert cell.diagnostics["total_exchanges"] == 50

        if external:
            smoke(external)
        else:
            with serve_mock({"default": {"kind": "fixed", "text": "purple"}}) as handle:
                # exercise the real transport path end to end
                client = EndpointClient(handle.url)
                from evalign.promptkit import InterleavedPrompt

                probe = client.generate(
                    InterleavedPrompt(segments=(text_segment("ping"),)), GenerationParams()
                )
                assert probe.output == "purple"
                smoke(handle.url)
