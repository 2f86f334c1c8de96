"""Command-line entry point: ``psypipe <synth|pipeline|validate|content|report> ...``."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import __version__, content, report, validation
from . import psychometrics as pm
from .data_model import LsiNarrative, canonical_json, load_participants, write_participants
from .errors import CoverageError, DegenerateInputError, PsypipeError, SchemaError
from .gateway import RetryPolicy, build_gateway
from .pipeline import (
    PersonaPrompt,
    Pipeline,
    PipelineConfig,
    RecoveredScores,
    load_stage,
    outcomes,
    stage_manifest,
    unconditioned_summary,
)
from .study import StudyConfig, run_synthetic_study
from .synthetic import synth_participants, truth_profile

log = logging.getLogger("psypipe")

EXIT_CODES = {
    "error": 1,
    "schema": 3,
    "range": 4,
    "incomplete": 5,
    "key-mismatch": 6,
    "provenance-conflict": 7,
    "degenerate": 8,
    "shape": 9,
    "boundary": 10,
    "alignment": 11,
    "capacity": 12,
    "coverage": 13,
    "protocol": 14,
    "validation": 15,
    "transport": 16,
    "transient": 16,
    "credential": 17,
    "refusal": 18,
    "parse": 19,
    "narrative-rejected": 20,
    "verification": 21,
    "decode": 22,
}


# Shared plumbing ---------------------------------------------------------------

def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", default=default(None), help="YAML run configuration")
    parser.add_argument("--out", default=default("psypipe-out"), help="output directory")
    parser.add_argument("--seed", type=int, default=default(None), help="master seed (overrides the config)")
    parser.add_argument("--log-level", default=default("WARNING"), choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def _config(args) -> PipelineConfig:
    config = PipelineConfig.load(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "concurrency", None):
        changes["concurrency"] = args.concurrency
    for name in ("generator", "scorer"):
        value = getattr(args, name, None)
        if value:
            changes[f"{name}_id"] = value
    if getattr(args, "mode", None):
        changes["mode"] = args.mode
    return dataclasses.replace(config, **changes) if changes else config


def _gateway(config: PipelineConfig, out: Path):
    return build_gateway(
        config.providers,
        config.synthetic_config(),
        RetryPolicy(**config.retry),
        log_path=out / "requests.jsonl",
        config_hash=stage_manifest(config, "score", True).config_hash,
    )


def _runs(out: Path) -> Path:
    return out / "runs"


def _report_outcomes(label: str, results) -> None:
    bad = outcomes(results)
    print(f"{label}: {len(results) - len(bad)} completed, {len(bad)} not completed")
    for pid, o in sorted(bad.items()):
        print(f"  {pid}: {o.status} {o.reason[:80]}")


def _write_csv(path: Path, header: Sequence[str], rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _truth(path: str) -> dict[str, dict[str, float]]:
    return {r.participant_id: truth_profile(r) for r in load_participants(path)}


def _scores_from(directory: str) -> dict[str, RecoveredScores]:
    from .data_model import load_run

    return {pid: v for pid, v in load_run(directory).items() if isinstance(v, RecoveredScores)}


# Commands ---------------------------------------------------------------------

def cmd_synth_participants(args) -> int:
    records = synth_participants(args.n, _config(args).seed, args.spread, with_bio=not args.no_bio)
    path = Path(args.file) if args.file else Path(args.out) / "participants.jsonl"
    path.parent.mkdir(parents=True, exist_ok=True)
    write_participants(records, path)
    print(f"wrote {len(records)} participants to {path}")
    return 0


def cmd_pipeline(args) -> int:
    config = _config(args)
    out = Path(args.out)
    pipe = Pipeline(config, _gateway(config, out), _runs(out))
    stage = args.stage
    if stage == "unconditioned":
        runs = pipe.unconditioned(args.n_runs, args.self_report)
        summary = unconditioned_summary(runs)
        path = _write_csv(out / "unconditioned.csv", ("domain", "mean", "sd", "n"),
                          [(d, repr(s["mean"]), repr(s["sd"]), s["n"]) for d, s in summary.items()])
        for d, s in summary.items():
            print(f"{d:>3} mean {report.fmt(s['mean'])} sd {report.fmt(s['sd'])}")
        print(f"wrote {path}")
        return 0
    if stage in ("prompts", "run"):
        if not args.participants:
            raise SchemaError("--participants is required for this stage")
        records = load_participants(args.participants)
        if stage == "run":
            results = pipe.round_trip(records)
            for k, v in results.items():
                _report_outcomes(k, v)
            return 0
        _report_outcomes("prompts", pipe.prompts(records))
        return 0
    prompt_manifest = stage_manifest(config, "prompt")
    if stage in ("narratives", "ceiling"):
        persona = load_stage(_runs(out), prompt_manifest, PersonaPrompt)
        if not persona:
            raise CoverageError(f"no persona prompts under {_runs(out) / prompt_manifest.run_id}; run 'pipeline prompts' first")
        results = pipe.narratives(persona) if stage == "narratives" else pipe.ceiling(persona)
        _report_outcomes(stage, results)
        return 0
    if stage == "score":
        narr_manifest = stage_manifest(config, "narrative", protocol=config.protocol().protocol_id)
        narratives = load_stage(_runs(out), narr_manifest, LsiNarrative)
        if not narratives:
            raise CoverageError(f"no narratives under {_runs(out) / narr_manifest.run_id}; run 'pipeline narratives' first")
        _report_outcomes("score", pipe.score(narratives))
        return 0
    raise SchemaError(f"unknown stage {stage}")


def _stage_payloads(config, out, stage, kind, **params):
    manifest = stage_manifest(config, stage, stage not in ("prompt", "narrative"), **params)
    found = load_stage(_runs(out), manifest, kind)
    if not found:
        raise CoverageError(f"no {stage} artifacts under {_runs(out) / manifest.run_id}")
    return manifest, found


def cmd_validate(args) -> int:
    config = _config(args)
    out = Path(args.out)
    if args.check == "leakage":
        _, narratives = _stage_payloads(config, out, "narrative", LsiNarrative, protocol=config.protocol().protocol_id)
        key = pm.ScoringKey.load(args.stems) if args.stems else pm.hexaco_key()
        ordered = sorted(key.items, key=lambda it: it.index)
        scan = validation.scan_leakage(narratives.values(), [it.stem for it in ordered], args.threshold,
                                       [it.index for it in ordered])
        path = _write_csv(out / "leakage.csv", ("narrative", "prompt_id", "item", "jaccard", "sentence"),
                          [(f.narrative_ref, f.prompt_id, f.item_index, repr(f.jaccard), f.sentence) for f in scan.flags])
        print(f"scanned {scan.sentences} sentences ({scan.skipped} skipped); {len(scan.flags)} above {args.threshold}")
        print(f"wrote {path}")
        return 0
    if args.check == "bias":
        truth = _truth(args.truth)
        prompt_scored = {k: v.domain_means for k, v in _scores_from(args.prompt_scores).items()}
        narrative_scored = {k: v.domain_means for k, v in _scores_from(args.narrative_scores).items()}
        runs = list(_scores_from(args.unconditioned).values())
        if not runs:
            raise CoverageError(f"no unconditioned scores in {args.unconditioned}")
        baseline = {d: s["mean"] for d, s in unconditioned_summary(runs).items()}
        ids = sorted(set(prompt_scored) & set(narrative_scored))
        bias = validation.decompose_bias({i: truth[i] for i in ids}, {i: prompt_scored[i] for i in ids},
                                         {i: narrative_scored[i] for i in ids}, baseline)
        path = _write_csv(out / "bias.csv", ("domain", "stage1", "stage2", "stage2a", "stage2b", "total"),
                          [(r["domain"], *(repr(r[c]) for c in ("stage1", "stage2", "stage2a", "stage2b", "total")))
                           for r in bias.rows()])
        for r in bias.rows():
            print(f"{r['domain']:>3} " + "  ".join(f"{c} {report.fmt(r[c]):>7}" for c in ("stage1", "stage2", "stage2a", "stage2b", "total")))
        print(f"wrote {path}")
        return 0
    # match
    gateway = _gateway(config, out)
    _, persona = _stage_payloads(config, out, "prompt", PersonaPrompt)
    _, narratives = _stage_payloads(config, out, "narrative", LsiNarrative, protocol=config.protocol().protocol_id)
    masks = {}
    for pid, p in sorted(persona.items()):
        masks[pid] = validation.strip_biography(p, args.stripper, args.verifier, gateway, seed=config.seed)
    failed = {pid: m.reason for pid, m in masks.items() if not m.passed}
    for pid, reason in failed.items():
        print(f"  excluded {pid}: {reason}")
    masked = {pid: m.text for pid, m in masks.items() if m.passed}
    eligible = sorted(set(masked) & set(narratives))
    lineups = validation.build_lineups(eligible, args.lineups_per, args.options, config.seed)
    result = validation.evaluate_matcher(lineups, {p: narratives[p].text for p in eligible}, masked, args.matcher,
                                         gateway, config.concurrency)
    _write_csv(out / "lineups.csv", ("narrative", "options", "correct", "pick"),
               [(l.narrative_ref, " ".join(l.option_ids), l.correct_index, "" if p is None else p)
                for l, p in zip(lineups, result.picks)])
    print(f"{args.matcher}: {result.correct}/{result.trials} correct ({report.fmt(result.accuracy)}), "
          f"{result.unparseable} unparseable, chance {report.fmt(result.chance)}, p = {result.p_value:.3g}")
    return 0


def _codings_path(out: Path, context: str) -> Path:
    return out / f"codings-{context}.jsonl"


def cmd_content(args) -> int:
    config = _config(args)
    out = Path(args.out)
    rubric = content.FeatureRubric.load(args.rubric)
    if args.action == "code":
        gateway = _gateway(config, out)
        annotators = [a.strip() for a in args.annotators.split(",") if a.strip()]
        _, narratives = _stage_payloads(config, out, "narrative", LsiNarrative, protocol=config.protocol().protocol_id)
        units = content.narrative_units(narratives[p] for p in sorted(narratives))
        if args.transcripts:
            from .data_model import load_transcript

            units += content.conversation_units(load_transcript(p) for p in sorted(Path(args.transcripts).glob("*.json")))
        run = content.code_units(units, rubric, annotators, gateway, config.concurrency, seed=config.seed)
        for ctx in (content.NARRATIVE, content.CONVERSATION):
            ctx_units = {u.unit_ref: u for u in units if u.context == ctx}
            rows = [c for c in run.codings if c.unit_ref in ctx_units]
            if not rows:
                continue
            with open(_codings_path(out, ctx), "w", encoding="utf-8") as fh:
                for c in rows:
                    u = ctx_units[c.unit_ref]
                    fh.write(canonical_json({"unit_ref": c.unit_ref, "participant_id": u.participant_id,
                                             "annotator_id": c.annotator_id, "ratings": dict(c.ratings)}) + "\n")
        print(f"coded {len(units)} units x {len(annotators)} annotators; {len(run.uncoded)} left uncoded")
        return 0
    # tables
    truth = _truth(args.truth)
    loaded = {}
    for ctx in (content.NARRATIVE, content.CONVERSATION):
        path = _codings_path(out, ctx)
        if not path.exists():
            continue
        units, codings, seen = [], [], set()
        for line in path.read_text(encoding="utf-8").splitlines():
            doc = json.loads(line)
            if doc["unit_ref"] not in seen:
                seen.add(doc["unit_ref"])
                units.append(content.Unit(doc["unit_ref"], doc["participant_id"], ctx, ""))
            codings.append(content.FeatureCoding(doc["unit_ref"], doc["annotator_id"], doc["ratings"]))
        loaded[ctx] = (units, codings)
    if content.NARRATIVE not in loaded:
        raise CoverageError(f"no narrative codings at {_codings_path(out, content.NARRATIVE)}; run 'content code' first")
    h = stage_manifest(config, "code", False, rubric=rubric.rubric_id).config_hash
    n_units, n_codings = loaded[content.NARRATIVE]
    n_sum = content.summarize(n_units, n_codings, content.NARRATIVE)
    tables = [
        report.reliability_table(content.annotator_reliability(n_codings, rubric.names), h, "reliability_narrative"),
        report.convergent_to_table(content.convergent_table(n_sum, {p: truth[p] for p in n_sum.by_participant},
                                                            rubric.names), h),
    ]
    try:
        reactivity = content.reactivity_analysis(content.section_series(n_units, n_codings), truth)
        tables.append(report.reactivity_table(reactivity, h))
    except DegenerateInputError as exc:
        print(f"reactivity: degenerate ({exc})")
    if content.CONVERSATION in loaded:
        c_units, c_codings = loaded[content.CONVERSATION]
        c_sum = content.summarize(c_units, c_codings, content.CONVERSATION)
        tables.append(report.cross_context_to_table(content.cross_context_table(n_sum, c_sum, rubric.names), h))
    bundle = report.ReportBundle(tuple(tables))
    paths = report.emit(bundle, out, stem="content")
    print(report.render_text(bundle))
    print("wrote " + ", ".join(map(str, paths)))
    return 0


def cmd_report(args) -> int:
    config = _config(args)
    out = Path(args.out)
    if args.kind == "synthetic":
        doc = dict(config.study)
        if args.n:
            doc["n_participants"] = args.n
        bundle = run_synthetic_study(config, _runs(out), StudyConfig.from_mapping(doc), _gateway(config, out))
    else:
        truth = _truth(args.truth)
        score_m, scores = _stage_payloads(config, out, "score", RecoveredScores)
        rows = [report.recovery_report(truth, scores, config.generator_id, config.scorer_id, score_m.config_hash,
                                       seed=config.seed)]
        tables = []
        try:
            ceil_m, ceiling = _stage_payloads(config, out, "ceiling", RecoveredScores)
            rows.append(report.recovery_report(truth, ceiling, config.generator_id + " [prompt]", config.scorer_id,
                                               ceil_m.config_hash, seed=config.seed))
        except CoverageError:
            log.info("no ceiling run found; reporting narrative recovery only")
        tables.append(report.recovery_to_table(report.RecoveryTable(tuple(rows))))
        if all(s.subscale_means for s in scores.values()):
            tables.append(report.beyond_hexaco_report(truth, scores, score_m.config_hash))
        bundle = report.ReportBundle(tuple(tables), json.loads(canonical_json(dataclasses.asdict(config))))
    paths = report.emit(bundle, out, args.format)
    if "text" in args.format and not args.quiet:
        print(report.render_text(bundle))
    print("wrote " + ", ".join(map(str, paths)))
    return 0


# Parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="psypipe", description="Personality round-trip pipeline and analyses.")
    parser.add_argument("--version", action="version", version=f"psypipe {__version__}")
    _global_flags(parser, suppress=False)
    shared = argparse.ArgumentParser(add_help=False)
    _global_flags(shared, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="synthetic data").add_subparsers(dest="what", required=True)
    p = synth.add_parser("participants", parents=[shared], help="write random synthetic participants")
    p.add_argument("--n", type=int, default=300)
    p.add_argument("--spread", type=float, default=0.5, help="SD of trait means around 3.0")
    p.add_argument("--no-bio", action="store_true")
    p.add_argument("--file", help="output JSONL path (default OUT/participants.jsonl)")
    p.set_defaults(func=cmd_synth_participants)

    pipe = sub.add_parser("pipeline", help="run pipeline stages").add_subparsers(dest="stage", required=True)
    for stage in ("prompts", "narratives", "score", "ceiling", "unconditioned", "run"):
        p = pipe.add_parser(stage, parents=[shared])
        p.add_argument("--participants", help="participant JSONL file")
        p.add_argument("--concurrency", type=int)
        p.add_argument("--generator")
        p.add_argument("--scorer")
        p.add_argument("--mode", choices=["B60", "B10"])
        if stage == "unconditioned":
            p.add_argument("--n-runs", type=int, default=5)
            p.add_argument("--self-report", action="store_true", help="questionnaire self-report instead of narratives")
        p.set_defaults(func=cmd_pipeline, stage=stage)

    val = sub.add_parser("validate", help="signal-validation controls").add_subparsers(dest="check", required=True)
    p = val.add_parser("match", parents=[shared])
    p.add_argument("--lineups-per", type=int, default=3)
    p.add_argument("--options", type=int, default=5)
    p.add_argument("--matcher", default="synthetic/persona#match")
    p.add_argument("--stripper", default="synthetic/persona#strip")
    p.add_argument("--verifier", default="synthetic/persona#verify")
    p.add_argument("--concurrency", type=int)
    p = val.add_parser("leakage", parents=[shared])
    p.add_argument("--stems", help="scoring key JSON whose item stems are scanned for")
    p.add_argument("--threshold", type=float, default=0.7)
    p = val.add_parser("bias", parents=[shared])
    p.add_argument("--truth", required=True)
    p.add_argument("--prompt-scores", required=True, help="run directory of profile-ceiling scores")
    p.add_argument("--narrative-scores", required=True, help="run directory of narrative scores")
    p.add_argument("--unconditioned", required=True, help="run directory of unconditioned scores")
    val.required = True
    for name in ("match", "leakage", "bias"):
        val.choices[name].set_defaults(func=cmd_validate)

    con = sub.add_parser("content", help="content coding and tables").add_subparsers(dest="action", required=True)
    p = con.add_parser("code", parents=[shared])
    p.add_argument("--rubric")
    p.add_argument("--annotators", default="synthetic/persona#a,synthetic/persona#b,synthetic/persona#c")
    p.add_argument("--transcripts", help="directory of conversation transcript JSON files")
    p.add_argument("--concurrency", type=int)
    p.set_defaults(func=cmd_content)
    p = con.add_parser("tables", parents=[shared])
    p.add_argument("--rubric")
    p.add_argument("--truth", required=True)
    p.set_defaults(func=cmd_content)

    rep = sub.add_parser("report", help="assemble and emit reports").add_subparsers(dest="kind", required=True)
    for kind in ("synthetic", "recovery"):
        p = rep.add_parser(kind, parents=[shared])
        p.add_argument("--format", nargs="+", default=["csv", "text"], choices=["csv", "text"])
        p.add_argument("--quiet", action="store_true")
        if kind == "synthetic":
            p.add_argument("--n", type=int, help="number of synthetic participants")
            p.add_argument("--concurrency", type=int)
        else:
            p.add_argument("--truth", required=True)
        p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PsypipeError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except FileNotFoundError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
