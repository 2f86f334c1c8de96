"""Multi-annotator content coding of narratives and conversations, and the tables built on it."""
from __future__ import annotations

import itertools
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from . import prompts
from . import psychometrics as pm
from .data_model import ConversationTranscript, LsiNarrative, derive_seed
from .errors import (
    AlignmentError,
    CoverageError,
    DegenerateInputError,
    RangeError,
    RefusalError,
    SchemaError,
    ShapeError,
)
from .gateway import ChatRequest, Gateway, Message
from .stats import CorrelationResult, ReliabilityResult, SignificanceConfig, dispersion, icc_2_1, pearson
from .textutil import split_sentences, tokenize

log = logging.getLogger(__name__)

NARRATIVE = "narrative"
CONVERSATION = "conversation"


@dataclass(frozen=True)
class FeatureRubric:
    features: tuple[tuple[str, tuple[str, ...]], ...]
    rubric_id: str = "custom"

    def __post_init__(self):
        feats = tuple((str(n), tuple(str(a) for a in anchors)) for n, anchors in self.features)
        names = [n for n, _ in feats]
        if not feats:
            raise SchemaError("rubric has no features")
        if len(set(names)) != len(names):
            raise SchemaError("rubric feature names must be unique")
        short = [n for n, anchors in feats if len(anchors) != 5]
        if short:
            raise SchemaError(f"features without exactly 5 anchors: {short}")
        object.__setattr__(self, "features", feats)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.features)

    def as_mapping(self) -> dict[str, tuple[str, ...]]:
        return dict(self.features)

    def extend(self, name: str, anchors: Sequence[str]) -> "FeatureRubric":
        return FeatureRubric(self.features + ((name, tuple(anchors)),), self.rubric_id)

    @classmethod
    def from_dict(cls, doc: Mapping) -> "FeatureRubric":
        try:
            return cls(tuple((f["name"], tuple(f["anchors"])) for f in doc["features"]), doc.get("rubric_id", "custom"))
        except KeyError as exc:
            raise SchemaError(f"rubric missing field {exc.args[0]!r}") from None

    @classmethod
    def load(cls, path: str | Path | None = None) -> "FeatureRubric":
        if path is None:
            return cls.from_dict(pm._load_packaged("rubric.json"))
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class Unit:
    """One codable text: a narrative section or one speaker's side of a conversation."""

    unit_ref: str
    participant_id: str
    context: str
    text: str


def narrative_units(narratives: Iterable[LsiNarrative]) -> list[Unit]:
    return [
        Unit(f"{n.participant_id}/{pid}", n.participant_id, NARRATIVE, text)
        for n in narratives
        for pid, text in n.sections
    ]


def conversation_units(transcripts: Iterable[ConversationTranscript]) -> list[Unit]:
    return [
        Unit(f"{t.conversation_id}/{speaker}", speaker, CONVERSATION, t.side(speaker))
        for t in transcripts
        for speaker in t.participants
    ]


@dataclass(frozen=True)
class FeatureCoding:
    unit_ref: str
    annotator_id: str
    ratings: Mapping[str, int]


@dataclass(frozen=True)
class CodingRun:
    codings: tuple[FeatureCoding, ...]
    uncoded: tuple[tuple[str, str, str], ...] = ()  # (unit_ref, annotator, reason)


def code_units(
    units: Sequence[Unit],
    rubric: FeatureRubric,
    annotators: Sequence[str],
    gateway: Gateway,
    concurrency: int = 4,
    temperature: float = 0.0,
    seed: int = 0,
) -> CodingRun:
    """One coding per (unit, annotator); a malformed reply gets one stricter re-prompt."""
    if not units:
        raise ShapeError("no units to code")
    if len(annotators) < 2:
        raise RangeError("content coding needs at least 2 annotators")
    if len(annotators) == 2:
        log.warning("only two annotators; reliability estimates will be coarse")
    features = rubric.as_mapping()
    names = rubric.names

    def job(pair):
        unit, annotator = pair
        messages = prompts.code_messages(unit.text, features)
        request_seed = derive_seed(seed, unit.unit_ref, annotator)
        try:
            reply = gateway.complete(ChatRequest(annotator, tuple(messages), temperature, seed=request_seed))
            if reply.refused:
                raise RefusalError("refused", reply.text)
            ratings, missing, bad = prompts.parse_feature_ratings(reply.text, names)
            if missing or bad:
                retry = messages + [
                    Message("assistant", reply.text),
                    Message("user", "Reply again with exactly one line per feature, feature: rating, integers 1 to 5. "
                                    "Missing or invalid: " + ", ".join(missing + bad)),
                ]
                reply = gateway.complete(ChatRequest(annotator, tuple(retry), temperature, seed=request_seed))
                ratings, missing, bad = prompts.parse_feature_ratings(reply.text, names)
                if missing or bad:
                    return None, (unit.unit_ref, annotator, "unparseable: " + ", ".join(missing + bad))
        except RefusalError as exc:
            return None, (unit.unit_ref, annotator, "refused")
        return FeatureCoding(unit.unit_ref, annotator, {n: ratings[n] for n in names}), None

    pairs = [(u, a) for u in units for a in annotators]
    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        results = list(pool.map(job, pairs))
    codings = tuple(c for c, _ in results if c is not None)
    uncoded = tuple(u for _, u in results if u is not None)
    return CodingRun(codings, uncoded)


def annotator_average(codings: Iterable[FeatureCoding]) -> dict[str, dict[str, float]]:
    """Mean rating per unit and feature over the annotators who coded it."""
    by_unit: dict[str, list[FeatureCoding]] = {}
    for c in codings:
        by_unit.setdefault(c.unit_ref, []).append(c)
    out = {}
    for ref, group in by_unit.items():
        feats = group[0].ratings.keys()
        out[ref] = {f: math.fsum(c.ratings[f] for c in group) / len(group) for f in feats}
    return out


# Reliability -------------------------------------------------------------------

@dataclass(frozen=True)
class ReliabilityReport:
    per_feature: Mapping[str, ReliabilityResult | None]  # None marks a degenerate feature
    pairwise: Mapping[tuple[str, str], float]
    mean_icc: float
    n_units: int
    annotators: tuple[str, ...]

    @property
    def degenerate(self) -> tuple[str, ...]:
        return tuple(f for f, r in self.per_feature.items() if r is None)


def _rating_matrix(codings, annotators, feature, units) -> np.ndarray:
    table = {(c.unit_ref, c.annotator_id): c.ratings[feature] for c in codings}
    return np.array([[table[(u, a)] for a in annotators] for u in units], dtype=float)


def _mean_icc(codings, annotators, features, units) -> tuple[dict, float]:
    per = {}
    for f in features:
        try:
            per[f] = icc_2_1(_rating_matrix(codings, annotators, f, units))
        except DegenerateInputError:
            per[f] = None
    values = [r.icc for r in per.values() if r is not None]
    return per, (float(np.mean(values)) if values else float("nan"))


def annotator_reliability(codings: Sequence[FeatureCoding], features: Sequence[str] | None = None) -> ReliabilityReport:
    """ICC(2,1) per feature across all annotators, plus the mean ICC of every annotator pair.

    Only units coded by every annotator enter the matrices.
    """
    annotators = tuple(sorted({c.annotator_id for c in codings}))
    if len(annotators) < 2:
        raise RangeError("reliability needs at least 2 annotators")
    features = list(features or codings[0].ratings.keys())
    coverage: dict[str, set[str]] = {}
    for c in codings:
        coverage.setdefault(c.unit_ref, set()).add(c.annotator_id)
    units = sorted(u for u, who in coverage.items() if len(who) == len(annotators))
    if len(units) < 2:
        raise CoverageError(f"only {len(units)} units were coded by all {len(annotators)} annotators")
    per, mean = _mean_icc(codings, annotators, features, units)
    pairwise = {}
    for a, b in itertools.combinations(annotators, 2):
        _, pairwise[(a, b)] = _mean_icc(codings, (a, b), features, units)
    return ReliabilityReport(per, pairwise, mean, len(units), annotators)


# Participant summaries -------------------------------------------------------------

@dataclass(frozen=True)
class ParticipantFeatureSummary:
    participant_id: str
    context: str
    means: Mapping[str, float]
    sds: Mapping[str, float]
    n_units: int


@dataclass(frozen=True)
class Summaries:
    by_participant: Mapping[str, ParticipantFeatureSummary]
    excluded: Mapping[str, str] = field(default_factory=dict)


def summarize(
    units: Sequence[Unit],
    codings: Sequence[FeatureCoding],
    context: str = NARRATIVE,
    min_conversations: int = 3,
    sections: int = 24,
) -> Summaries:
    """Annotator-averaged per-participant feature means and within-participant SDs.

    Narrative participants need all ``sections`` coded; conversation
    participants need at least ``min_conversations`` coded sides.
    """
    averaged = annotator_average(codings)
    grouped: dict[str, list[dict[str, float]]] = {}
    for u in units:
        if u.context != context:
            continue
        grouped.setdefault(u.participant_id, [])
        if u.unit_ref in averaged:
            grouped[u.participant_id].append(averaged[u.unit_ref])
    out, excluded = {}, {}
    for pid, rows in sorted(grouped.items()):
        floor = sections if context == NARRATIVE else min_conversations
        if (context == NARRATIVE and len(rows) != sections) or len(rows) < floor:
            excluded[pid] = f"{len(rows)} coded units, need {floor}"
            continue
        feats = rows[0].keys()
        means = {f: math.fsum(r[f] for r in rows) / len(rows) for f in feats}
        sds = {f: float(np.std([r[f] for r in rows], ddof=1)) if len(rows) > 1 else float("nan") for f in feats}
        out[pid] = ParticipantFeatureSummary(pid, context, means, sds, len(rows))
    return Summaries(out, excluded)


def _summary_map(summaries) -> Mapping[str, ParticipantFeatureSummary]:
    if isinstance(summaries, Summaries):
        return summaries.by_participant
    if isinstance(summaries, Mapping):
        return summaries
    return {s.participant_id: s for s in summaries}


# Tables ----------------------------------------------------------------------

@dataclass(frozen=True)
class ConvergentTable:
    cells: Mapping[tuple[str, str], CorrelationResult | None]
    features: tuple[str, ...]
    domains: tuple[str, ...]
    threshold: float
    n: int

    @property
    def m_tests(self) -> int:
        return len(self.features) * len(self.domains)

    def significant(self) -> list[tuple[str, str]]:
        return [k for k, c in self.cells.items() if c is not None and c.significant(self.threshold)]

    def best_predictor(self, feature: str) -> tuple[str, CorrelationResult] | None:
        row = [(d, self.cells[(feature, d)]) for d in self.domains if self.cells[(feature, d)] is not None]
        if not row:
            return None
        return max(row, key=lambda dc: abs(dc[1].r))


def _aligned(summaries, truth: Mapping[str, Mapping[str, float]], min_n: int = 10) -> list[str]:
    s = _summary_map(summaries)
    if set(s) != set(truth):
        diff = sorted(set(s) ^ set(truth))
        raise AlignmentError(f"summaries and truth cover different participants: {diff[:10]}")
    if len(s) < min_n:
        raise CoverageError(f"need at least {min_n} participants, got {len(s)}")
    return sorted(s)


def _safe_pearson(x, y) -> CorrelationResult | None:
    try:
        return pearson(x, y)
    except DegenerateInputError:
        return None


def convergent_table(
    summaries,
    truth: Mapping[str, Mapping[str, float]],
    features: Sequence[str] | None = None,
    domains: Sequence[str] = pm.DOMAINS,
    alpha: float = 0.05,
) -> ConvergentTable:
    """Pearson r of every feature mean with every trait, Bonferroni-marked over all cells."""
    smap = _summary_map(summaries)
    ids = _aligned(smap, truth)
    features = tuple(features or next(iter(smap.values())).means.keys())
    cells = {}
    for f in features:
        x = [smap[i].means[f] for i in ids]
        for d in domains:
            cells[(f, d)] = _safe_pearson(x, [truth[i][d] for i in ids])
    threshold = SignificanceConfig(alpha, len(features) * len(domains)).threshold
    return ConvergentTable(cells, features, tuple(domains), threshold, len(ids))


@dataclass(frozen=True)
class CrossContextTable:
    cells: Mapping[str, CorrelationResult | None]
    threshold: float
    n: int

    @property
    def mean_abs_r(self) -> float:
        values = [abs(c.r) for c in self.cells.values() if c is not None]
        return float(np.mean(values)) if values else float("nan")

    def significant(self) -> list[str]:
        return [f for f, c in self.cells.items() if c is not None and c.significant(self.threshold)]


def cross_context_table(
    narrative_summaries,
    conversation_summaries,
    features: Sequence[str] | None = None,
    alpha: float = 0.05,
    min_overlap: int = 10,
) -> CrossContextTable:
    """Per-feature correlation between a participant's narrative and conversation behaviour."""
    nmap = _summary_map(narrative_summaries)
    cmap = _summary_map(conversation_summaries)
    ids = sorted(set(nmap) & set(cmap))
    if len(ids) < min_overlap:
        raise CoverageError(
            f"only {len(ids)} participants in both contexts ({len(nmap)} narrative, {len(cmap)} conversation); "
            f"need {min_overlap}"
        )
    features = tuple(features or next(iter(nmap.values())).means.keys())
    cells = {f: _safe_pearson([nmap[i].means[f] for i in ids], [cmap[i].means[f] for i in ids]) for f in features}
    return CrossContextTable(cells, SignificanceConfig(alpha, len(features)).threshold, len(ids))


# Reactivity ------------------------------------------------------------------

class ReactivityResult(NamedTuple):
    r_sd_emotionality: CorrelationResult
    r_mean_emotionality: CorrelationResult
    n: int


def section_series(
    units: Sequence[Unit], codings: Sequence[FeatureCoding], feature: str = "emotional_valence"
) -> dict[str, list[float]]:
    """Annotator-averaged per-section ratings of ``feature`` for each narrative participant, in unit order."""
    averaged = annotator_average(codings)
    out: dict[str, list[float]] = {}
    for u in units:
        if u.context == NARRATIVE and u.unit_ref in averaged:
            out.setdefault(u.participant_id, []).append(averaged[u.unit_ref][feature])
    return out


def reactivity_analysis(
    series: Mapping[str, Sequence[float]],
    truth: Mapping[str, Mapping[str, float]],
    domain: str = "E",
    sections: int = 24,
) -> ReactivityResult:
    """Correlate within-narrative valence SD, and valence mean, with a trait."""
    short = {pid: len(v) for pid, v in series.items() if len(v) < sections}
    if short:
        raise CoverageError(f"participants with fewer than {sections} coded sections: {dict(sorted(short.items())[:10])}")
    missing = sorted(set(series) - set(truth))
    if missing:
        raise AlignmentError(f"no truth for {missing[:10]}")
    ids = sorted(series)
    sds, means = [], []
    for pid in ids:
        mean, sd, _ = dispersion(series[pid], with_cv=False)
        sds.append(sd)
        means.append(mean)
    trait = [truth[pid][domain] for pid in ids]
    return ReactivityResult(pearson(sds, trait), pearson(means, trait), len(ids))


# Structural features ----------------------------------------------------------

class StructuralFeatures(NamedTuple):
    word_count: int
    type_token_ratio: float
    sentence_length_cv: float


def structural_features(narrative: LsiNarrative | Sequence[str] | str) -> StructuralFeatures:
    """Word count, type-token ratio, and the CV of sentence lengths (in tokens)."""
    if isinstance(narrative, LsiNarrative):
        texts = [t for _, t in narrative.sections]
    elif isinstance(narrative, str):
        texts = [narrative]
    else:
        texts = list(narrative)
    skipped = sum(1 for t in texts if not t.strip())
    if skipped:
        log.info("structural features: skipped %d empty sections", skipped)
    texts = [t for t in texts if t.strip()]
    tokens = [tok for t in texts for tok in tokenize(t)]
    if not tokens:
        raise ShapeError("no tokens in narrative")
    lengths = [len(tokenize(s)) for t in texts for s in split_sentences(t)]
    lengths = [n for n in lengths if n]
    cv = dispersion(lengths)[2] if len(lengths) >= 2 else float("nan")
    return StructuralFeatures(len(tokens), len(set(tokens)) / len(tokens), cv)
