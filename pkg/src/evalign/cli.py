"""Command-line interface: run experiments, emit reports, serve the mock."""

from __future__ import annotations

import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import click

from evalign import corpus, mock_server, report as report_mod, runner
from evalign.errors import EvalignError
from evalign.metrics import load_vocabulary


@click.group()
def main():
    """Flaw-axis evaluation harness for multimodal generation endpoints."""


def _parse_int_list(text: str | None) -> tuple[int, ...] | None:
    if text is None:
        return None
    return tuple(int(part) for part in text.split(",") if part.strip())


@main.command("run")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--axis", default=None, help="Override the configured axis.")
@click.option("--variant", "variants", multiple=True, help="Variant(s) to run; repeatable.")
@click.option("--shots", default=None, help="Comma-separated shot grid override.")
@click.option("--seeds", default=None, help="Comma-separated seed list override.")
@click.option("--endpoint", default=None, help="Generation endpoint URL.")
@click.option("--judge-endpoint", default=None, help="Judge endpoint URL.")
@click.option("--max-inflight", default=None, type=int)
@click.option("--retry-budget", default=None, type=int)
@click.option("--mock-script", default=None, type=click.Path(exists=True),
              help="Serve this mock script locally and run against it.")
@click.option("--out", "out_dir", default="evalign-out", type=click.Path())
@click.option("--runlog", "runlog_path", default=None, type=click.Path())
@click.option("--formats", default="structured", help="Comma-separated emit formats.")
def run_command(
    config_path,
    axis,
    variants,
    shots,
    seeds,
    endpoint,
    judge_endpoint,
    max_inflight,
    retry_budget,
    mock_script,
    out_dir,
    runlog_path,
    formats,
):
    """Run one axis over its shot grid and seeds; write the run log and report."""
    doc = json.loads(Path(config_path).read_text(encoding="utf-8"))
    config = runner.ExperimentConfig.from_dict(doc)

    overrides = {}
    if axis:
        overrides["axis"] = axis
    if shots:
        overrides["shots"] = _parse_int_list(shots)
    if seeds:
        overrides["seeds"] = _parse_int_list(seeds)
    if endpoint or os.environ.get("EVALIGN_ENDPOINT"):
        overrides["endpoint"] = endpoint or os.environ["EVALIGN_ENDPOINT"]
    if judge_endpoint or os.environ.get("EVALIGN_JUDGE_ENDPOINT"):
        overrides["judge_endpoint"] = judge_endpoint or os.environ["EVALIGN_JUDGE_ENDPOINT"]
    if max_inflight is not None:
        overrides["max_inflight"] = max_inflight
    if retry_budget is not None:
        overrides["retry_budget"] = retry_budget
    if overrides:
        config = replace(config, **overrides)

    handle = None
    try:
        if mock_script:
            handle = mock_server.serve_mock(mock_script)
            config = replace(config, endpoint=handle.url)
            if config.judge_endpoint is None and config.axis == "instruction":
                config = replace(config, judge_endpoint=handle.url)

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        runlog = Path(runlog_path) if runlog_path else out / "run.jsonl"

        variant_list = list(variants) or [config.variant]
        merged = None
        with runner.RunLog(runlog) as log:
            for variant in variant_list:
                cfg = replace(config, variant=variant)
                rep = runner.run_axis(cfg, log)
                merged = rep if merged is None else merged.merge(rep)
            if len(variant_list) > 1:
                # Last report line in the log is the merged, emit-ready one.
                log.write({"kind": "report", "report": merged.to_dict()})
        for notice in merged.notices:
            click.echo(f"notice: {notice}", err=True)
        fmt_list = [f.strip() for f in formats.split(",") if f.strip()]
        if merged.cells:
            paths = report_mod.emit(merged, fmt_list, out)
            for path in paths:
                click.echo(str(path))
        click.echo(f"run log: {runlog}")
    except EvalignError as exc:
        raise click.ClickException(str(exc)) from exc
    finally:
        if handle is not None:
            handle.stop()


@main.command("report")
@click.option("--from", "source", required=True, type=click.Path(exists=True),
              help="A run log (.jsonl) or a structured report (.json).")
@click.option("--formats", default="structured,tabular,plot")
@click.option("--out", "out_dir", default="evalign-out", type=click.Path())
def report_command(source, formats, out_dir):
    """Re-emit a stored report in the requested formats."""
    try:
        rep = report_mod.load_report(source)
        fmt_list = [f.strip() for f in formats.split(",") if f.strip()]
        for path in report_mod.emit(rep, fmt_list, out_dir):
            click.echo(str(path))
    except EvalignError as exc:
        raise click.ClickException(str(exc)) from exc


@main.command("mock-serve")
@click.option("--script", required=True, type=click.Path(exists=True))
@click.option("--port", default=8099, type=int)
def mock_serve_command(script, port):
    """Serve a scripted mock endpoint until interrupted."""
    try:
        handle = mock_server.serve_mock(script, port=port)
    except EvalignError as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(f"serving mock endpoint at {handle.url} (Ctrl-C to stop)")
    try:
        handle.thread.join()
    except KeyboardInterrupt:
        handle.stop()


@main.command("convert-coco")
@click.option("--captions", "captions_path", default=None, type=click.Path(exists=True),
              help="Caption annotation file (images + caption annotations).")
@click.option("--instances", "instances_path", default=None, type=click.Path(exists=True),
              help="Instance annotation file (categories + instance annotations).")
@click.option("--combined", "combined_path", default=None, type=click.Path(exists=True),
              help="Single document already carrying both annotation kinds.")
@click.option("--vocab", "vocab_path", default=None, type=click.Path(exists=True))
@click.option("--dataset-id", default="coco")
@click.option("--out", "out_path", required=True, type=click.Path())
def convert_coco_command(captions_path, instances_path, combined_path, vocab_path, dataset_id, out_path):
    """Convert native COCO-style annotations into the record-per-line format."""
    try:
        if combined_path:
            doc = json.loads(Path(combined_path).read_text(encoding="utf-8"))
        elif captions_path and instances_path:
            doc = corpus.merge_coco_documents(
                json.loads(Path(captions_path).read_text(encoding="utf-8")),
                json.loads(Path(instances_path).read_text(encoding="utf-8")),
            )
        else:
            raise click.ClickException("pass --combined or both --captions and --instances")
        vocab = load_vocabulary(vocab_path)
        records = corpus.load_captions(doc, vocab, dataset_id=dataset_id)
        corpus.dump_records(records, out_path)
        click.echo(f"{len(records)} records -> {out_path}")
    except EvalignError as exc:
        raise click.ClickException(str(exc)) from exc


if __name__ == "__main__":
    sys.exit(main())
