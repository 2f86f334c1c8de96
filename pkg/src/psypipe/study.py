"""End-to-end synthetic study: every stage, control, and table under one master seed."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

from . import content, report, validation
from . import psychometrics as pm
from .data_model import LsiNarrative, UnitOutcome, canonical_json
from .gateway import Gateway, RetryPolicy, build_gateway
from .pipeline import (
    PersonaPrompt,
    Pipeline,
    PipelineConfig,
    RecoveredScores,
    outcomes,
    stage_manifest,
    successes,
    unconditioned_summary,
)
from .synthetic import synth_conversations, synth_participants, truth_profile

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StudyConfig:
    n_participants: int = 60
    spread: float = 0.5
    n_unconditioned: int = 5
    stripper: str = "synthetic/persona#strip"
    verifier: str = "synthetic/persona#verify"
    matchers: tuple[str, ...] = ("synthetic/persona#match", "synthetic/random#match")
    lineups_per_participant: int = 3
    options: int = 5
    annotators: tuple[str, ...] = ("synthetic/persona#a", "synthetic/persona#b", "synthetic/persona#c")
    conversations_per_participant: int = 3
    n_resamples: int = 2000
    leakage_threshold: float = 0.7
    alpha: float = 0.05

    @classmethod
    def from_mapping(cls, doc: Mapping[str, Any]) -> "StudyConfig":
        doc = dict(doc)
        for key in ("matchers", "annotators"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(**doc)


def _hash(config: PipelineConfig, stage: str, scorer: bool = False, **params) -> str:
    return stage_manifest(config, stage, scorer, **params).config_hash


def run_synthetic_study(
    config: PipelineConfig,
    root: str | Path,
    study: StudyConfig | None = None,
    gateway: Gateway | None = None,
) -> report.ReportBundle:
    study = study or StudyConfig.from_mapping(config.study)
    gateway = gateway or build_gateway(
        config.providers, config.synthetic_config(), RetryPolicy(**config.retry), config_hash=_hash(config, "score", True)
    )
    records = synth_participants(study.n_participants, config.seed, study.spread)
    truth = {r.participant_id: truth_profile(r) for r in records}
    pipe = Pipeline(config, gateway, root)
    stages = pipe.round_trip(records)
    prompts_ = successes(stages["prompt"], PersonaPrompt)
    narratives = successes(stages["narrative"], LsiNarrative)
    scores = successes(stages["score"], RecoveredScores)
    ceiling = successes(stages["ceiling"], RecoveredScores)
    refused = {k: sum(1 for o in outcomes(v).values() if o.status == "refused") for k, v in stages.items()}
    failed = {k: sum(1 for o in outcomes(v).values() if o.status != "refused") for k, v in stages.items()}
    h_score = _hash(config, "score", True)
    h_ceiling = _hash(config, "ceiling", True)

    # recovery
    narrative_row = report.recovery_report(
        truth, scores, config.generator_id, config.scorer_id, h_score,
        refusals=refused["prompt"] + refused["narrative"] + refused["score"],
        exclusions=failed["narrative"] + failed["score"],
        n_resamples=study.n_resamples, seed=config.seed,
    )
    ceiling_row = report.recovery_report(
        truth, ceiling, config.generator_id + " [prompt]", config.scorer_id, h_ceiling,
        refusals=refused["prompt"] + refused["ceiling"], exclusions=failed["ceiling"],
        n_resamples=study.n_resamples, seed=config.seed,
    )
    tables = [
        report.recovery_to_table(report.RecoveryTable((narrative_row, ceiling_row))),
        report.beyond_hexaco_report(truth, scores, h_score, study.alpha),
    ]

    # unconditioned baseline and bias decomposition
    unconditioned = pipe.unconditioned(study.n_unconditioned)
    baseline = unconditioned_summary(unconditioned)
    h_unc = _hash(config, "unconditioned", True, n_runs=study.n_unconditioned, self_report=False)
    tables.append(report.summary_table("unconditioned", baseline, study.n_unconditioned, h_unc,
                                       "Scores of narratives told under a personality-free entity prompt."))
    ids = sorted(set(scores) & set(ceiling))
    bias = validation.decompose_bias(
        {i: truth[i] for i in ids},
        {i: ceiling[i].domain_means for i in ids},
        {i: scores[i].domain_means for i in ids},
        {d: baseline[d]["mean"] for d in pm.DOMAINS},
        generator_id=config.generator_id, scorer_id=config.scorer_id,
    )
    tables.append(report.bias_table(bias, h_score))

    # masked matching
    masks = {
        pid: validation.strip_biography(p, study.stripper, study.verifier, gateway, seed=pipe.seed_for(pid))
        for pid, p in sorted(prompts_.items())
    }
    masked = {pid: m.text for pid, m in masks.items() if m.passed}
    eligible = sorted(set(masked) & set(narratives))
    lineups = validation.build_lineups(eligible, study.lineups_per_participant, study.options, config.seed)
    narrative_text = {pid: narratives[pid].text for pid in eligible}
    results = [
        validation.evaluate_matcher(lineups, narrative_text, masked, m, gateway, config.concurrency)
        for m in study.matchers
    ]
    h_match = _hash(config, "match", False, matchers=list(study.matchers), stripper=study.stripper, verifier=study.verifier)
    tables.append(report.matching_table(results, h_match))

    # leakage
    scan = validation.scan_leakage([narratives[p] for p in sorted(narratives)], threshold=study.leakage_threshold)
    tables.append(report.leakage_table(scan, _hash(config, "narrative", False)))

    # content coding
    rubric = content.FeatureRubric.load()
    h_code = _hash(config, "code", False, annotators=list(study.annotators), rubric=rubric.rubric_id)
    n_units = content.narrative_units(narratives[p] for p in sorted(narratives))
    convos = synth_conversations(records, config.synthetic_config(), study.conversations_per_participant,
                                 seed=config.seed)
    c_units = content.conversation_units(convos)
    coded_n = content.code_units(n_units, rubric, study.annotators, gateway, config.concurrency, seed=config.seed)
    coded_c = content.code_units(c_units, rubric, study.annotators, gateway, config.concurrency, seed=config.seed)
    tables.append(report.reliability_table(content.annotator_reliability(coded_n.codings, rubric.names), h_code,
                                           "reliability_narrative"))
    tables.append(report.reliability_table(content.annotator_reliability(coded_c.codings, rubric.names), h_code,
                                           "reliability_conversation"))
    n_sum = content.summarize(n_units, coded_n.codings, content.NARRATIVE)
    c_sum = content.summarize(c_units, coded_c.codings, content.CONVERSATION)
    domain_truth = {pid: truth[pid] for pid in n_sum.by_participant}
    tables.append(report.convergent_to_table(content.convergent_table(n_sum, domain_truth, rubric.names, alpha=study.alpha), h_code))
    tables.append(report.cross_context_to_table(content.cross_context_table(n_sum, c_sum, rubric.names, study.alpha), h_code))
    series = content.section_series(n_units, coded_n.codings)
    tables.append(report.reactivity_table(content.reactivity_analysis(series, truth), h_code))
    structure = {pid: content.structural_features(narratives[pid]) for pid in sorted(narratives)}
    rows = {
        "mean": {
            "word_count": sum(s.word_count for s in structure.values()) / len(structure),
            "type_token_ratio": sum(s.type_token_ratio for s in structure.values()) / len(structure),
            "sentence_length_cv": sum(s.sentence_length_cv for s in structure.values()) / len(structure),
        }
    }
    tables.append(report.summary_table("structure", rows, len(structure), _hash(config, "narrative", False)))

    footnotes = (
        f"Master seed {config.seed}; per-participant seeds derived by hashing the master seed with the participant id.",
        f"Bootstrap intervals: {study.n_resamples} participant resamples.",
        f"Masking: {len(masked)} of {len(masks)} profiles passed verification.",
        f"Content coding: {len(coded_n.uncoded) + len(coded_c.uncoded)} (unit, annotator) pairs left uncoded.",
    )
    echo = {
        "pipeline": {k: v for k, v in dataclasses.asdict(config).items() if k != "study"},
        "study": dataclasses.asdict(study),
    }
    return report.ReportBundle(tuple(tables), _jsonable(echo), footnotes)


def _jsonable(obj):
    import json

    return json.loads(canonical_json(obj))
