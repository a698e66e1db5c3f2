"""Batch command line: discover, filter, generate, verify, package, score, eval, stats.

Exit codes: 0 success, 1 some items failed, 2 invalid invocation or config.
All stages share one run directory (``--out``)::

    annotations/<video>.json   canonical copies written by discover
    graphs/<video>.json        causal graph (+ metrics after filter)
    transcripts/<video>.json   agent transcripts per evaluated pair
    filter_report.json
    candidates/<video>.json    generated questions
    verified/<video>.json      questions after paired verification
    dataset.json               the packaged benchmark
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

from cfbench import _io
from cfbench.annotations import (
    AnnotationError,
    VideoAnnotation,
    dataset_stats,
    parse_annotation,
    serialize_annotation,
)
from cfbench.config import ConfigError, PipelineConfig, load_config
from cfbench.discovery import discover_many
from cfbench.evalkit import (
    EvalValidationError,
    GraphEvalReport,
    categorize_errors,
    format_table,
    graph_eval,
    load_predictions,
    score_predictions,
)
from cfbench.graph import GraphComplexityFilter, graph_from_dict, graph_to_dict
from cfbench.llm import HttpBackend, LlmError, LlmGateway, MockBackend
from cfbench.qgen import (
    Answer,
    CounterfactualQuestion,
    GenerationError,
    Status,
    apply_verification,
    generate_candidates,
    normalize_answer,
    package_dataset,
    verify_questions,
)
from cfbench.reward import ExtractionError, ModelOutput, extract_claims, reward_report, score_group

logger = logging.getLogger("cfbench")

EXIT_OK, EXIT_PARTIAL, EXIT_INVALID = 0, 1, 2


class UsageError(Exception):
    pass


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--out", help="run directory (overrides paths.output)")
    parser.add_argument("--seed", type=int, help="seed passed to every backend call")
    parser.add_argument("--workers", type=int, help="worker pool size")
    parser.add_argument("--mock", action="store_true", help="use the mock backend (lenient)")
    parser.add_argument("--strict-mock", action="store_true", help="mock backend; unknown requests fail")
    parser.add_argument("--fixtures", help="mock fixture file (overrides paths.fixtures)")
    parser.add_argument("--difficulty-mode", action="store_true", help="also drop questions answerable without annotations")
    parser.add_argument("--quiet", action="store_true", help="only log warnings and errors")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfbench", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("discover", help="build causal graphs from annotation files")
    p.add_argument("inputs", nargs="*", help="annotation files or directories (default: paths.annotations)")
    _common(p)

    p = sub.add_parser("filter", help="compute graph metrics and apply thresholds")
    p.add_argument("graphs", nargs="*", help="graph files (default: <out>/graphs/*.json)")
    _common(p)

    for name, help_ in (("generate", "generate candidate questions for passing videos"),
                        ("verify", "paired verification of candidates"),
                        ("package", "assemble dataset.json from verified questions")):
        p = sub.add_parser(name, help=help_)
        _common(p)

    p = sub.add_parser("score", help="reward K sampled outputs per question")
    p.add_argument("samples", help='JSON list of {"question_id", "samples": [{"sample_id", "cot_text", "answer"}]}')
    p.add_argument("--dataset", help="dataset bundle (default: <out>/dataset.json)")
    _common(p)

    p = sub.add_parser("eval", help="accuracy tables from a predictions file")
    p.add_argument("predictions", help='JSON list of {"question_id", "predicted_answer", "raw_output"?}')
    p.add_argument("--dataset", help="gold dataset bundle (default: <out>/dataset.json)")
    p.add_argument("--name", default="model", help="row label in the table")
    p.add_argument("--graph-labels", help='human labels: {"<video_id>": [{"from", "to", "label"}]}')
    p.add_argument("--categorize", action="store_true", help="classify wrong answers with the judge")
    _common(p)

    p = sub.add_parser("stats", help="dataset statistics")
    p.add_argument("inputs", nargs="*", help="annotation files or directories (default: <out>/annotations)")
    p.add_argument("--dataset", help="dataset bundle for per-level counts")
    _common(p)
    return parser


def resolve_config(args) -> PipelineConfig:
    cfg = load_config(args.config)
    if args.out:
        cfg.paths.output = args.out
    if args.seed is not None:
        cfg.seed = args.seed
    if args.workers is not None:
        cfg.workers = args.workers
    if args.fixtures:
        cfg.paths.fixtures = args.fixtures
    cfg.flags.strict_mock = cfg.flags.strict_mock or args.strict_mock
    cfg.flags.mock = cfg.flags.mock or args.mock or cfg.flags.strict_mock
    cfg.flags.difficulty_mode = cfg.flags.difficulty_mode or args.difficulty_mode
    return cfg.validate()


def make_gateway(cfg: PipelineConfig) -> LlmGateway:
    b = cfg.backend
    if cfg.flags.mock:
        fixtures = {}
        if cfg.paths.fixtures:
            try:
                fixtures = _io.read_json(cfg.paths.fixtures)
            except (OSError, ValueError) as exc:
                raise UsageError(f"cannot read fixtures {cfg.paths.fixtures}: {exc}") from exc
        elif cfg.flags.strict_mock:
            raise UsageError("--strict-mock needs a fixture file (paths.fixtures or --fixtures)")
        backend = MockBackend(fixtures, fallback_seed=cfg.seed, strict=cfg.flags.strict_mock)
    else:
        try:
            backend = HttpBackend(b.base_url, b.models, timeout=b.timeout_s)
        except LlmError as exc:
            raise UsageError(str(exc)) from exc
    return LlmGateway(backend, json_retries=b.json_retries, transport_retries=b.transport_retries,
                      max_in_flight=b.max_in_flight)


def _expand(inputs: Sequence[str]) -> list[Path]:
    files: list[Path] = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            files.extend(sorted(p.glob("*.json")))
        elif p.is_file():
            files.append(p)
        else:
            raise UsageError(f"no such file or directory: {item}")
    return files


def _load_annotations(paths: Sequence[Path]) -> list[VideoAnnotation]:
    out = []
    for path in paths:
        try:
            out.append(parse_annotation(path.read_bytes()))
        except (OSError, AnnotationError) as exc:
            raise UsageError(f"{path}: {exc}") from exc
    ids = [v.video_id for v in out]
    if len(set(ids)) != len(ids):
        raise UsageError("duplicate video_id across annotation files")
    return out


def _run_annotations(out: Path) -> dict[str, VideoAnnotation]:
    files = sorted((out / "annotations").glob("*.json"))
    if not files:
        raise UsageError(f"no annotations in {out / 'annotations'}; run discover first")
    return {v.video_id: v for v in _load_annotations(files)}


def _load_graph(path: Path):
    try:
        return graph_from_dict(_io.read_json(path))
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"{path}: {exc}") from exc


def _write_failures(out: Path, stage: str, failures: list[dict]) -> None:
    path = out / "failures" / f"{stage}.json"
    if failures:
        _io.write_json(path, sorted(failures, key=lambda f: (f.get("video_id") or "", f.get("question_id") or "")))
    elif path.exists():
        path.unlink()


def _map(cfg: PipelineConfig, fn, items):
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def cmd_discover(cfg: PipelineConfig, args) -> int:
    inputs = args.inputs or ([cfg.paths.annotations] if cfg.paths.annotations else [])
    files = _expand(inputs)
    if not files:
        raise UsageError("no annotation files given")
    videos = _load_annotations(files)
    gateway = make_gateway(cfg)
    out = Path(cfg.paths.output)
    results = discover_many(
        videos, gateway, n_jobs=cfg.workers, top_fraction=cfg.observer_fraction, window=cfg.observer_window,
        force_adjacent=cfg.flags.adjacent_force_include, batched_observer=cfg.flags.batched_observer,
        seed=cfg.seed, temperature=cfg.backend.temperature,
    )
    by_id = {v.video_id: v for v in videos}
    failures = []
    for r in results:
        _io.write_text(out / "annotations" / f"{r.video_id}.json", serialize_annotation(by_id[r.video_id]).decode())
        if r.failure:
            failures.append(r.failure)
            continue
        _io.write_json(out / "graphs" / f"{r.video_id}.json", graph_to_dict(r.graph))
        _io.write_json(out / "transcripts" / f"{r.video_id}.json", r.transcript)
    _write_failures(out, "discover", failures)
    logger.info("discover: %d graph(s), %d failure(s)", len(results) - len(failures), len(failures))
    return EXIT_PARTIAL if failures else EXIT_OK


def _embedder(cfg: PipelineConfig):
    if not cfg.flags.mock and "embedding" not in cfg.backend.models:
        raise UsageError("no embeddings provider: set backend.models.embedding or use --mock")
    return make_gateway(cfg).embed_array


def cmd_filter(cfg: PipelineConfig, args) -> int:
    out = Path(cfg.paths.output)
    files = _expand(args.graphs) if args.graphs else sorted((out / "graphs").glob("*.json"))
    if not files:
        raise UsageError("no graph files to filter")
    annotations = _run_annotations(out)
    t = cfg.thresholds
    flt = GraphComplexityFilter(_embedder(cfg), t.ancd, t.depth, t.cnda)
    graphs = [_load_graph(f)[0] for f in files]
    missing = [g.video_id for g in graphs if g.video_id not in annotations]
    if missing:
        raise UsageError(f"no annotation for graph(s): {', '.join(missing)}")
    metrics = _map(cfg, lambda g: flt.score_video(g, annotations[g.video_id]), graphs)
    rows = []
    for g, m in sorted(zip(graphs, metrics), key=lambda gm: gm[0].video_id):
        _io.write_json(out / "graphs" / f"{g.video_id}.json", graph_to_dict(g, m))
        rows.append({"video_id": g.video_id, **m.to_dict()})
    report = {
        "thresholds": dataclasses.asdict(t),
        "videos": rows,
        "passed": [r["video_id"] for r in rows if r["pass_filter"]],
    }
    _io.write_json(out / "filter_report.json", report)
    logger.info("filter: %d of %d video(s) pass", len(report["passed"]), len(rows))
    return EXIT_OK


def cmd_generate(cfg: PipelineConfig, args) -> int:
    out = Path(cfg.paths.output)
    report_path = out / "filter_report.json"
    if not report_path.exists():
        raise UsageError("no filter_report.json; run filter first")
    passed = _io.read_json(report_path)["passed"]
    if not passed:
        raise UsageError("no video passed the filter")
    annotations = _run_annotations(out)
    gateway = make_gateway(cfg)

    def one(video_id: str):
        g, _ = _load_graph(out / "graphs" / f"{video_id}.json")
        try:
            qs = generate_candidates(annotations[video_id], g, gateway, cfg.candidates_per_level,
                                     cfg.seed, cfg.backend.temperature)
        except GenerationError as exc:
            return video_id, None, {"video_id": video_id, "stage": "generate", "error": str(exc)}
        return video_id, qs, None

    failures = []
    for video_id, qs, failure in _map(cfg, one, sorted(passed)):
        if failure:
            failures.append(failure)
            continue
        _io.write_json(out / "candidates" / f"{video_id}.json",
                       {"video_id": video_id, "questions": [q.to_dict() for q in sorted(qs, key=lambda q: q.question_id)]})
    _write_failures(out, "generate", failures)
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_verify(cfg: PipelineConfig, args) -> int:
    out = Path(cfg.paths.output)
    files = sorted((out / "candidates").glob("*.json"))
    if not files:
        raise UsageError("no candidate files; run generate first")
    annotations = _run_annotations(out)
    gateway = make_gateway(cfg)
    generated = kept = 0
    failures = []
    for path in files:
        doc = _io.read_json(path)
        video_id = doc["video_id"]
        questions = [CounterfactualQuestion.from_dict(d) for d in doc["questions"]]
        records = verify_questions(questions, annotations[video_id], gateway, cfg.flags.difficulty_mode,
                                   n_jobs=cfg.workers, seed=cfg.seed, temperature=cfg.backend.temperature)
        final = apply_verification(questions, records)
        generated += len(final)
        kept += sum(q.status is Status.KEPT for q in final)
        failures += [{"video_id": video_id, "question_id": r.question_id, "stage": "verify", "error": r.drop_reason}
                     for r in records if r.drop_reason == "verifier_error"]
        _io.write_json(out / "verified" / f"{video_id}.json", {
            "video_id": video_id,
            "questions": [q.to_dict() for q in final],
            "records": [r.to_dict() for r in records],
        })
    summary = {"generated": generated, "kept": kept, "kept_rate": kept / generated if generated else 0.0,
               "difficulty_mode": cfg.flags.difficulty_mode}
    _io.write_json(out / "verify_summary.json", summary)
    _write_failures(out, "verify", failures)
    logger.info("verify: kept %d of %d", kept, generated)
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_package(cfg: PipelineConfig, args) -> int:
    out = Path(cfg.paths.output)
    files = sorted((out / "verified").glob("*.json"))
    if not files:
        raise UsageError("no verified files; run verify first")
    annotations = _run_annotations(out)
    kept, graphs = [], {}
    for path in files:
        doc = _io.read_json(path)
        graphs[doc["video_id"]], _ = _load_graph(out / "graphs" / f"{doc['video_id']}.json")
        kept += [q for q in map(CounterfactualQuestion.from_dict, doc["questions"]) if q.status is Status.KEPT]
    embed = make_gateway(cfg).embed_array if cfg.flags.mock or "embedding" in cfg.backend.models else None
    try:
        bundle = package_dataset(kept, annotations, graphs, embed)
    except GenerationError as exc:
        logger.error("package: %s", exc)
        return EXIT_PARTIAL
    _io.write_json(out / "dataset.json", bundle)
    logger.info("package: %d question(s) from %d video(s)", len(bundle["questions"]), len(bundle["videos"]))
    return EXIT_OK


def _dataset(cfg: PipelineConfig, path: str | None) -> dict:
    p = Path(path) if path else Path(cfg.paths.output) / "dataset.json"
    try:
        return _io.read_json(p)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read dataset {p}: {exc}") from exc


def cmd_score(cfg: PipelineConfig, args) -> int:
    out = Path(cfg.paths.output)
    bundle = _dataset(cfg, args.dataset)
    questions = {q["question_id"]: q for q in bundle["questions"]}
    annotations = _run_annotations(out)
    try:
        groups = _io.read_json(args.samples)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read samples {args.samples}: {exc}") from exc
    gateway = make_gateway(cfg)
    reports, failures = [], []
    for group in sorted(groups, key=lambda g: g["question_id"]):
        qd = questions.get(group["question_id"])
        if qd is None:
            raise UsageError(f"unknown question_id {group['question_id']}")
        samples = group["samples"]
        if len(samples) < 2:
            raise UsageError(f"question {qd['question_id']} has fewer than 2 samples")
        if len(samples) != cfg.k_samples:
            logger.warning("question %s has %d samples; configured K is %d", qd["question_id"], len(samples), cfg.k_samples)
        q = CounterfactualQuestion.from_dict({**qd, "status": "kept"})
        v = annotations[q.video_id]
        g, _ = _load_graph(out / "graphs" / f"{q.video_id}.json")
        try:
            outputs = []
            for s in samples:
                claims, events = extract_claims(s.get("cot_text", ""), v, gateway, cfg.seed)
                outputs.append(ModelOutput(q.question_id, s.get("cot_text", ""), s.get("answer", ""), tuple(claims), tuple(events)))
        except ExtractionError as exc:
            failures.append({"question_id": q.question_id, "stage": "score", "error": str(exc)})
            continue
        scores, result = score_group(outputs, v, q, g, cfg.alpha, cfg.beta, cfg.std_ddof)
        reports.append(reward_report(q.question_id, [s["sample_id"] for s in samples], scores, result, cfg.alpha, cfg.beta))
    _io.write_json(out / "rewards.json", reports)
    _write_failures(out, "score", failures)
    return EXIT_PARTIAL if failures else EXIT_OK


def _load_labels(path: str) -> dict[str, dict[tuple[int, int], bool]]:
    doc = _io.read_json(path)
    return {vid: {(int(e["from"]), int(e["to"])): bool(e["label"]) for e in items} for vid, items in doc.items()}


def cmd_eval(cfg: PipelineConfig, args) -> int:
    out = Path(cfg.paths.output)
    bundle = _dataset(cfg, args.dataset)
    try:
        preds = load_predictions(_io.read_json(args.predictions))
        table = score_predictions(preds, bundle)
    except (OSError, ValueError) as exc:
        logger.error("eval: %s", exc)
        return EXIT_INVALID
    csv_text, plain = format_table(table, args.name)
    _io.write_text(out / "eval" / "accuracy.csv", csv_text)
    _io.write_text(out / "eval" / "accuracy.txt", plain)
    _io.write_json(out / "eval" / "accuracy.json", table.to_dict())
    sys.stdout.write(plain)

    if args.graph_labels:
        labels = _load_labels(args.graph_labels)
        total = GraphEvalReport(0, 0, 0, 0)
        for video_id in sorted(labels):
            g, _ = _load_graph(out / "graphs" / f"{video_id}.json")
            try:
                r = graph_eval(g, labels[video_id])
            except EvalValidationError as exc:
                logger.error("eval: %s: %s", video_id, exc)
                return EXIT_INVALID
            total = GraphEvalReport(total.tp + r.tp, total.fp + r.fp, total.fn + r.fn, total.tn + r.tn)
        _io.write_text(out / "eval" / "graph_quality.txt", total.format())
        _io.write_json(out / "eval" / "graph_quality.json", total.to_dict())

    if args.categorize:
        gold = {q["question_id"]: q for q in bundle["questions"]}
        annotations = {p.stem: p for p in (out / "annotations").glob("*.json")}
        wrong = []
        by_id = {p.question_id: p for p in preds}
        for qid in sorted(by_id):
            p, q = by_id[qid], gold[qid]
            if normalize_answer(p.predicted_answer) == Answer(q["gold_answer"]):
                continue
            steps = []
            if q["video_id"] in annotations:
                steps = [s["text"] for s in _io.read_json(annotations[q["video_id"]])["steps"]]
            wrong.append({"question_id": qid, "question_text": q["question_text"], "gold_answer": q["gold_answer"],
                          "predicted_answer": p.predicted_answer, "raw_output": p.raw_output or p.predicted_answer,
                          "steps": steps})
        if wrong:
            breakdown = categorize_errors(wrong, make_gateway(cfg), cfg.seed)
            _io.write_json(out / "eval" / "errors.json", breakdown.to_dict())
    return EXIT_OK


def cmd_stats(cfg: PipelineConfig, args) -> int:
    out = Path(cfg.paths.output)
    files = _expand(args.inputs) if args.inputs else sorted((out / "annotations").glob("*.json"))
    if not files:
        raise UsageError("no annotations for stats")
    videos = _load_annotations(files)
    questions = _dataset(cfg, args.dataset)["questions"] if args.dataset else None
    stats = dataset_stats(videos, questions)
    _io.write_json(out / "stats.json", stats.to_dict())
    sys.stdout.write(_io.dumps(stats.to_dict()))
    return EXIT_OK


COMMANDS = {
    "discover": cmd_discover,
    "filter": cmd_filter,
    "generate": cmd_generate,
    "verify": cmd_verify,
    "package": cmd_package,
    "score": cmd_score,
    "eval": cmd_eval,
    "stats": cmd_stats,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        logger.info("resolved config: %s", json.dumps(cfg.to_dict(), sort_keys=True))
        return COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError) as exc:
        logger.error("%s", exc)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
