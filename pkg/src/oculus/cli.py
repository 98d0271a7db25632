"""Command-line surface.

Every command that performs work writes exactly one RunRecord under the
config's ``runs_dir`` (or ``--runs-dir``) and prints its run id on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Sequence

from . import __version__
from .config import Config, build_runtime, config_from_dict, load_config
from .errors import IntegrityError, OculusError, ValidationError
from .gateway import ImageRef
from .harness import file_sha256, format_results_table, load_questions, rescore_record, run_benchmark, write_questions
from .orchestrator import Orchestrator, OrchestratorConfig
from .retrieval import HashingEmbedder, Index, chunk_and_embed, ingest_sources, read_source_list, retrieve
from .robustness import load_lexicon, run_robustness
from .tools import StubAdapter, ToolRegistry, ToolRunner, classify_modality
from .trace import RunRecord, RunRecorder, load_run, new_run_id, run_path

log = logging.getLogger("oculus")


def _recorder(command: str, runs_dir: str | Path, snapshot: dict | None, inputs: dict) -> RunRecorder:
    run_id = new_run_id()
    return RunRecorder(command, snapshot or {}, inputs, run_path(runs_dir, run_id), run_id)


@contextmanager
def _recording(rec: RunRecorder):
    """Finalize the record even when the command fails, with an error event."""
    try:
        yield rec
    except OculusError as exc:
        if not rec.finalized:
            rec.append_event("error", None, message=f"{type(exc).__name__}: {exc}", exit_code=exc.exit_code)
            rec.finalize()
        raise


def _runs_dir(args, cfg: Config | None) -> Path:
    if getattr(args, "runs_dir", None):
        return Path(args.runs_dir)
    if cfg is not None:
        return Path(cfg.runs_dir)
    return Path("runs")


def _done(rec: RunRecorder) -> RunRecord:
    record = rec.finalize()
    print(f"run: {record.run_id} ({rec.path})", file=sys.stderr)
    return record


def _image_inputs(paths: Sequence[str]) -> list[dict]:
    out = []
    for p in paths:
        ref = ImageRef.from_path(p)
        out.append({"path": str(Path(p).resolve()), "sha256": ref.sha256})
    return out


def _check_image_inputs(images: Sequence[dict]) -> list[ImageRef]:
    refs = []
    for d in images:
        try:
            ref = ImageRef.from_path(d["path"])
        except OSError as exc:
            raise IntegrityError(f"input image missing: {d['path']}") from exc
        if ref.sha256 != d["sha256"]:
            raise IntegrityError(f"input image changed since the run: {d['path']}")
        refs.append(ref)
    return refs


# --- work functions, shared by the commands and by replay ---------------------

def do_query(cfg: Config, question: str, images: Sequence[ImageRef], rec: RunRecorder) -> str:
    cfg.check_roles("query")
    rt = build_runtime(cfg)
    stages = cfg.ablation
    if "tools" in stages:
        orch = Orchestrator(
            rt.gateway, rt.agents, rt.registry, rt.runner, rt.index, rt.embedder,
            OrchestratorConfig(retry_limit=cfg.retry_limit, use_rag="rag" in stages,
                               use_decision="decision" in stages, use_evaluation="evaluation" in stages,
                               static_plan=cfg.static_plan, rag_k=cfg.rag.k,
                               generator_system=rt.template.system),
            trace=rec,
        )
        result = orch.run_session(question, images, trace_ref=rec.run_id)
        text = result.final.text
    else:
        text = rt.pipeline().answer_free(question, images, rec)
        rec.append_event("response", "answer", text=text, fallback=False)
    return text


def do_bench(cfg: Config, questions: str, rec: RunRecorder):
    items = load_questions(questions)
    rt = build_runtime(cfg)
    record, result = run_benchmark(items, rt.pipeline(), rec)
    return record, result


def do_robust(cfg: Config, questions: str, seed: int, rec: RunRecorder):
    cfg.check_roles("robust")
    items = load_questions(questions)
    rt = build_runtime(cfg)
    lexicon = load_lexicon(cfg.robustness.lexicon)
    result = run_robustness(items, rt.pipeline(), rt.agents[cfg.robustness.generator_role],
                            rt.agents[cfg.robustness.evaluator_role], seed, lexicon, rec,
                            cfg.robustness.max_turns)
    return rec.finalize(), result


# --- command handlers ----------------------------------------------------------

def cmd_query(args) -> int:
    cfg = load_config(args.config)
    images = [ImageRef.from_path(p) for p in args.image]
    rec = _recorder("query", _runs_dir(args, cfg), cfg.snapshot(),
                    {"question": args.question, "images": _image_inputs(args.image)})
    with _recording(rec):
        text = do_query(cfg, args.question, images, rec)
    _done(rec)
    print(text)
    return 0


def _write_bench_outputs(out: Path, record: RunRecord, result) -> None:
    out.mkdir(parents=True, exist_ok=True)
    report = {"run_id": record.run_id, **result.to_dict()}
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")
    (out / "report.txt").write_text(format_results_table([(record.run_id, result.by_subtype)]), encoding="utf-8")
    with (out / "predictions.jsonl").open("w", encoding="utf-8") as fh:
        for p in result.predictions:
            fh.write(json.dumps(p.__dict__, sort_keys=True) + "\n")


def cmd_bench_run(args) -> int:
    cfg = load_config(args.config)
    rec = _recorder("bench run", _runs_dir(args, cfg), cfg.snapshot(),
                    {"questions": str(Path(args.questions).resolve()), "questions_sha256": file_sha256(args.questions)})
    with _recording(rec):
        record, result = do_bench(cfg, args.questions, rec)
    print(f"run: {record.run_id} ({rec.path})", file=sys.stderr)
    _write_bench_outputs(Path(args.out), record, result)
    print(format_results_table([("overall" if not args.label else args.label, result.by_subtype)]), end="")
    o = result.overall
    print(f"n={o.n} accuracy={o.accuracy:.3f} macro_f1={o.macro_f1:.3f} abstain={o.n_abstain} errors={result.n_errors}")
    return 0


def cmd_robust_run(args) -> int:
    cfg = load_config(args.config)
    rec = _recorder("robust run", _runs_dir(args, cfg), cfg.snapshot(),
                    {"questions": str(Path(args.questions).resolve()), "questions_sha256": file_sha256(args.questions),
                     "seed": args.seed})
    with _recording(rec):
        record, result = do_robust(cfg, args.questions, args.seed, rec)
    print(f"run: {record.run_id} ({rec.path})", file=sys.stderr)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = {"run_id": record.run_id, **result.report.to_dict()}
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")
    with (out / "adjudication.jsonl").open("w", encoding="utf-8") as fh:
        for entry in result.adjudication:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    write_questions(out / "perturbed.jsonl", [p.item for p in result.perturbed])
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_rag_ingest(args) -> int:
    src = Path(args.sources)
    rec = _recorder("rag ingest", _runs_dir(args, None), {"chunk_size": args.chunk_size, "overlap": args.overlap,
                                                         "embedder": "hashing-256"},
                    {"sources": str(src.resolve()), "sources_sha256": file_sha256(src)})
    with _recording(rec):
        result = ingest_sources(read_source_list(src), base_dir=src.parent)
        for w in result.warnings:
            print(f"warning: {w}", file=sys.stderr)
            rec.append_event("note", "rag", message=w)
        index = chunk_and_embed(result.documents, args.chunk_size, args.overlap, HashingEmbedder())
        index.save(args.out)
    rec.append_event("note", "rag", message="index written", path=str(Path(args.out).resolve()),
                     documents=len(result.documents), chunks=len(index))
    _done(rec)
    print(f"{len(result.documents)} documents, {len(index)} chunks -> {args.out}")
    return 0


def cmd_rag_query(args) -> int:
    index = Index.load(args.index)
    rec = _recorder("rag query", _runs_dir(args, None), {"k": args.k},
                    {"index": str(Path(args.index).resolve()), "index_sha256": file_sha256(args.index),
                     "query": args.query})
    with _recording(rec):
        bundle = retrieve(index, args.query, args.k, HashingEmbedder(index.dim))
    rec.append_event("retrieval", "rag", **bundle.to_dict())
    _done(rec)
    for h in bundle.hits:
        print(f"{h.score:.4f}\t{h.chunk.doc_ref}#{h.chunk.ordinal}\t{h.chunk.text[:100]!r}")
    if bundle.truncated:
        print(f"(index holds only {len(index)} chunks)", file=sys.stderr)
    return 0


def cmd_tools_list(args) -> int:
    for d in ToolRegistry():
        mods = ",".join(m.value for m in d.accepted_modalities)
        print(f"{d.tool_id.value:16s} [{mods}] {d.description}")
    return 0


def cmd_tools_invoke(args) -> int:
    registry = ToolRegistry()
    desc = registry.get(args.tool)
    image = ImageRef.from_path(args.image)
    stub = StubAdapter.from_dir(args.stub_dir) if args.stub_dir else StubAdapter()
    rec = _recorder("tools invoke", _runs_dir(args, None), {"stub_dir": args.stub_dir},
                    {"tool": args.tool, "images": _image_inputs([args.image])})
    with _recording(rec):
        label = classify_modality(image)
        rec.append_event("observation", "observe", image=image.sha256, modality=label.label.value,
                         confidence=label.confidence)
        inv = ToolRunner(stub=stub).invoke_tool(desc, image, {"modality": label.label})
    rec.append_event("tool_invocation", "tools", **inv.to_dict())
    _done(rec)
    print(json.dumps(inv.output.to_payload() if inv.output else None, indent=2, sort_keys=True))
    return 0


def _find_run(args) -> Path:
    p = Path(args.run)
    if p.suffix == ".jsonl" and p.exists():
        return p
    return run_path(_runs_dir(args, None), args.run)


def _config_from_record(record: RunRecord) -> Config:
    snap = record.config_snapshot
    cfg = config_from_dict(snap["config"])
    for role, digest in snap.get("script_digests", {}).items():
        script = cfg.backends[role].script
        if digest and (not script or file_sha256(script) != digest):
            raise IntegrityError(f"script for role {role} changed since the run: {script}")
    return cfg


def replay_record(record: RunRecord, runs_dir: str | Path) -> tuple[bool, str, RunRecord]:
    """Re-execute a stored run in a fresh replay record; return (match, detail, new record)."""
    inputs = record.inputs
    if record.command == "query":
        cfg = _config_from_record(record)
        images = _check_image_inputs(inputs.get("images", []))
        rec = _recorder("replay", runs_dir, record.config_snapshot, {"of": record.run_id, **inputs})
        with _recording(rec):
            text = do_query(cfg, inputs["question"], images, rec)
        want = record.final("response")
        ok = want is not None and want["text"] == text
        rec.append_event("note", None, replay_of=record.run_id, match=ok)
        return ok, "final response " + ("identical" if ok else "differs"), rec.finalize()
    if record.command in ("bench run", "robust run"):
        cfg = _config_from_record(record)
        if file_sha256(inputs["questions"]) != inputs["questions_sha256"]:
            raise IntegrityError(f"question file changed since the run: {inputs['questions']}")
        rec = _recorder("replay", runs_dir, record.config_snapshot, {"of": record.run_id, **inputs})
        if record.command == "bench run":
            with _recording(rec):
                new, _ = do_bench(cfg, inputs["questions"], rec)
            want = record.final("metric")["report"]
            got = new.final("metric")["report"]
            ok = got == want and rescore_record(record) == want
        else:
            with _recording(rec):
                new, _ = do_robust(cfg, inputs["questions"], inputs["seed"], rec)
            want = record.final("metric")["report"]
            got = new.final("metric")["report"]
            ok = got == want
        return ok, "metric report " + ("identical" if ok else "differs"), new
    raise ValidationError(f"replay not supported for command {record.command!r}")


def cmd_replay(args) -> int:
    path = _find_run(args)
    record = load_run(path)
    runs_dir = Path(args.runs_dir) if args.runs_dir else path.parent
    ok, detail, new = replay_record(record, runs_dir)
    print(f"replay {record.run_id} -> {new.run_id}: {detail}")
    if not ok:
        raise IntegrityError(f"replay of {record.run_id} does not reproduce the recorded result")
    return 0


def cmd_report(args) -> int:
    record = load_run(_find_run(args))
    if record.command not in ("bench run", "robust run"):
        raise ValidationError(f"run {record.run_id} ({record.command}) has no metric report")
    if record.command == "robust run":
        print(json.dumps(record.final("metric")["report"], indent=2, sort_keys=True))
        return 0
    report = rescore_record(record)
    if report != record.final("metric")["report"]:
        raise IntegrityError(f"stored metric block of {record.run_id} disagrees with its predictions")
    if args.format == "table":
        print(format_results_table([(record.run_id, report["by_subtype"])]), end="")
    else:
        print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="oculus", description="Ophthalmic multi-agent QA control plane")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def runs(p):
        p.add_argument("--runs-dir", help="where RunRecords go (default: config runs_dir or ./runs)")
        return p

    p = runs(sub.add_parser("query", help="answer one question through the agent loop"))
    p.add_argument("--question", required=True)
    p.add_argument("--image", nargs="*", default=[])
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_query)

    bench = sub.add_parser("bench", help="benchmark harness").add_subparsers(dest="sub", required=True)
    p = runs(bench.add_parser("run"))
    p.add_argument("--questions", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--label", help="row label in the text table")
    p.set_defaults(func=cmd_bench_run)

    robust = sub.add_parser("robust", help="perturbation robustness suite").add_subparsers(dest="sub", required=True)
    p = runs(robust.add_parser("run"))
    p.add_argument("--questions", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_robust_run)

    rag = sub.add_parser("rag", help="knowledge retrieval").add_subparsers(dest="sub", required=True)
    p = runs(rag.add_parser("ingest"))
    p.add_argument("--sources", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--chunk-size", type=int, default=1000)
    p.add_argument("--overlap", type=int, default=200)
    p.set_defaults(func=cmd_rag_ingest)
    p = runs(rag.add_parser("query"))
    p.add_argument("--index", required=True)
    p.add_argument("-k", type=int, default=5)
    p.add_argument("query")
    p.set_defaults(func=cmd_rag_query)

    tools = sub.add_parser("tools", help="vision tool plane").add_subparsers(dest="sub", required=True)
    tools.add_parser("list").set_defaults(func=cmd_tools_list)
    p = runs(tools.add_parser("invoke"))
    p.add_argument("--tool", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--stub-dir")
    p.set_defaults(func=cmd_tools_invoke)

    p = runs(sub.add_parser("replay", help="re-run a stored RunRecord and compare"))
    p.add_argument("--run", required=True, help="run id or path to a run file")
    p.set_defaults(func=cmd_replay)

    p = runs(sub.add_parser("report", help="print the metric report of a stored run"))
    p.add_argument("--run", required=True)
    p.add_argument("--format", choices=("table", "file"), default="table")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except OculusError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
