"""Three-stage round trip (persona prompt, life-story narrative, blind scoring) and its baselines."""
from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import yaml

from . import prompts
from . import psychometrics as pm
from .data_model import (
    LsiNarrative,
    LsiProtocol,
    ParticipantRecord,
    RunManifest,
    UnitOutcome,
    check_seed,
    completed_ids,
    derive_seed,
    payload_type,
    read_artifact,
    run_dir,
    store_artifact,
)
from .errors import (
    NarrativeRejectedError,
    ProtocolError,
    RangeError,
    RefusalError,
    SchemaError,
    ScoreParseError,
)
from .gateway import ChatRequest, Gateway, Message
from .stats import dispersion

log = logging.getLogger(__name__)

MODES = ("B60", "B10")


@payload_type("persona")
@dataclass(frozen=True)
class PersonaPrompt:
    participant_id: str
    text: str
    generator_id: str
    masked_variant: str | None = None

    def __post_init__(self):
        if not self.text.strip():
            raise SchemaError(f"{self.participant_id}: persona prompt is empty")

    @property
    def word_count(self) -> int:
        return len(self.text.split())

    def to_dict(self) -> dict:
        return {
            "participant_id": self.participant_id,
            "generator_id": self.generator_id,
            "word_count": self.word_count,
            "text": self.text,
            "masked_variant": self.masked_variant,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "PersonaPrompt":
        return cls(doc["participant_id"], doc["text"], doc["generator_id"], doc.get("masked_variant"))


def _int_keys(mapping: Mapping | None) -> dict[int, int] | None:
    if mapping is None:
        return None
    return {int(k): int(v) for k, v in sorted(mapping.items(), key=lambda kv: int(kv[0]))}


@payload_type("scores")
@dataclass(frozen=True)
class RecoveredScores:
    """Item ratings from one scorer and the scale means they aggregate to.

    The means are always recomputed from the ratings; passing means that
    disagree raises SchemaError.
    """

    participant_id: str
    scorer_id: str
    item_ratings: Mapping[int, int]
    subscale_ratings: Mapping[int, int] | None = None
    domain_means: Mapping[str, float] | None = None
    subscale_means: Mapping[str, float] | None = None
    parse_warnings: tuple[str, ...] = ()
    source: str = "narrative"

    def __post_init__(self):
        items = _int_keys(self.item_ratings)
        domains = pm.aggregate(items, pm.hexaco_key())
        self._check("domain", self.domain_means, domains)
        sub_items = _int_keys(self.subscale_ratings)
        subs = pm.aggregate(sub_items, pm.beyond_key()) if sub_items is not None else None
        if subs is not None:
            self._check("subscale", self.subscale_means, subs)
        elif self.subscale_means:
            raise SchemaError(f"{self.participant_id}: subscale means given without subscale ratings")
        object.__setattr__(self, "item_ratings", items)
        object.__setattr__(self, "subscale_ratings", sub_items)
        object.__setattr__(self, "domain_means", domains)
        object.__setattr__(self, "subscale_means", subs)
        object.__setattr__(self, "parse_warnings", tuple(self.parse_warnings))

    def _check(self, label: str, given: Mapping[str, float] | None, computed: Mapping[str, float]) -> None:
        if given is None:
            return
        off = {k: v for k, v in given.items() if abs(v - computed.get(k, float("nan"))) > 1e-9 or k not in computed}
        if off or set(given) != set(computed):
            raise SchemaError(f"{self.participant_id}: stored {label} means disagree with item ratings: {sorted(off)}")

    @classmethod
    def from_ratings(cls, participant_id, scorer_id, items, subscale_items=None, warnings=(), source="narrative"):
        return cls(participant_id, scorer_id, items, subscale_items, None, None, tuple(warnings), source)

    def profile(self) -> dict[str, float]:
        return {**self.domain_means, **(self.subscale_means or {})}

    def to_dict(self) -> dict:
        return {
            "participant_id": self.participant_id,
            "scorer_id": self.scorer_id,
            "source": self.source,
            "item_ratings": {str(k): v for k, v in self.item_ratings.items()},
            "subscale_ratings": None if self.subscale_ratings is None else {str(k): v for k, v in self.subscale_ratings.items()},
            "domain_means": dict(self.domain_means),
            "subscale_means": None if self.subscale_means is None else dict(self.subscale_means),
            "parse_warnings": list(self.parse_warnings),
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "RecoveredScores":
        return cls(
            doc["participant_id"],
            doc["scorer_id"],
            doc["item_ratings"],
            doc.get("subscale_ratings"),
            doc.get("domain_means"),
            doc.get("subscale_means"),
            tuple(doc.get("parse_warnings", ())),
            doc.get("source", "narrative"),
        )


def _complete(gateway: Gateway, model_id: str, messages: Sequence[Message], temperature: float, seed, what: str) -> str:
    response = gateway.complete(ChatRequest(model_id, tuple(messages), temperature, seed=seed))
    if response.refused:
        raise RefusalError(f"{model_id} refused {what}", response.text)
    return response.text


# Stage 1 -------------------------------------------------------------------

def run_stage1_prompt(
    record: ParticipantRecord,
    generator: str,
    gateway: Gateway,
    temperature: float = 1.0,
    seed: int | None = None,
) -> PersonaPrompt:
    text = _complete(gateway, generator, prompts.stage1_messages(record), temperature, seed, "the persona prompt")
    return PersonaPrompt(record.participant_id, text, generator)


# Stage 2 -------------------------------------------------------------------

def run_stage2_narrative(
    prompt: PersonaPrompt,
    protocol: LsiProtocol,
    generator: str,
    gateway: Gateway,
    temperature: float = 1.0,
    seed: int | None = None,
    max_failures: int = 3,
    participant_id: str | None = None,
) -> LsiNarrative:
    """Interview the persona through all 24 protocol prompts in one conversation.

    An empty answer counts as a section failure and the question is asked
    again; more than ``max_failures`` failures rejects the narrative.
    """
    if not isinstance(protocol, LsiProtocol) or len(protocol.entries) != 24:
        raise ProtocolError("stage 2 needs a valid 24-entry protocol")
    history: list[Message] = [Message("system", prompts.stage2_system(prompt.text))]
    sections = []
    failures = 0
    for prompt_id, question in protocol.entries:
        while True:
            asked = history + [Message("user", question)]
            answer = _complete(gateway, generator, asked, temperature, seed, f"interview prompt {prompt_id}")
            if answer.strip():
                break
            failures += 1
            log.warning("%s: empty answer to %s (failure %d)", prompt.participant_id, prompt_id, failures)
            if failures > max_failures:
                raise NarrativeRejectedError(
                    f"{prompt.participant_id}: {failures} section failures exceed the limit of {max_failures}"
                )
        history = asked + [Message("assistant", answer)]
        sections.append((prompt_id, answer.strip()))
    return LsiNarrative(
        participant_id or prompt.participant_id,
        generator,
        tuple(sections),
        temperature,
        created_at="",
        section_failures=failures,
    )


# Stage 3 -------------------------------------------------------------------

def _rate(
    gateway: Gateway,
    scorer: str,
    key: pm.ScoringKey,
    indices: Sequence[int],
    text: str | None,
    temperature: float,
    seed,
    persona: str | None = None,
) -> tuple[dict[int, int], list[str]]:
    """One scoring call with a single stricter re-prompt on parse failure."""
    bounds = next(iter(key.scale_bounds.values()))
    messages = prompts.rating_messages(key, indices, text, persona)
    reply = _complete(gateway, scorer, messages, temperature, seed, "item scoring")
    ratings, missing, bad, warnings = prompts.parse_ratings(reply, indices, bounds)
    if missing or bad:
        retry = messages + [Message("assistant", reply), prompts.strict_rating_message(missing, bad, len(indices), bounds)]
        reply = _complete(gateway, scorer, retry, temperature, seed, "item scoring")
        ratings, missing, bad, more = prompts.parse_ratings(reply, indices, bounds)
        warnings = warnings + ["re-prompted after a malformed reply"] + more
        if missing or bad:
            detail = []
            if missing:
                detail.append(f"missing items {missing}")
            if bad:
                detail.append(f"out-of-range or non-integer ratings for items {bad}")
            raise ScoreParseError(f"{scorer}: " + "; ".join(detail), missing, bad)
    return ratings, warnings


def _batches(key: pm.ScoringKey, mode: str) -> list[list[int]]:
    if mode == "B60":
        return [list(key.indices)]
    if mode == "B10":
        return [sorted(it.index for it in key.items_for(scale)) for scale in key.scales]
    raise RangeError(f"mode must be one of {MODES}, got {mode!r}")


def score_text(
    text: str | None,
    participant_id: str,
    scorer: str,
    gateway: Gateway,
    mode: str = "B60",
    temperature: float = 0.3,
    seed: int | None = None,
    include_beyond: bool = True,
    source: str = "narrative",
    persona: str | None = None,
) -> RecoveredScores:
    """Score ``text`` blind: only the text and the item stems are sent.

    B60 rates all 60 HEXACO items in one call, B10 issues one call per domain.
    The 51 additional items always go in one call.
    """
    key = pm.hexaco_key()
    items: dict[int, int] = {}
    warnings: list[str] = []
    for batch in _batches(key, mode):
        got, warn = _rate(gateway, scorer, key, batch, text, temperature, seed, persona)
        items.update(got)
        warnings += warn
    sub_items = None
    if include_beyond:
        beyond = pm.beyond_key()
        sub_items, warn = _rate(gateway, scorer, beyond, list(beyond.indices), text, temperature, seed, persona)
        warnings += warn
    return RecoveredScores.from_ratings(participant_id, scorer, items, sub_items, warnings, source)


def run_stage3_score(narrative: LsiNarrative, scorer: str, gateway: Gateway, mode: str = "B60", **kwargs) -> RecoveredScores:
    return score_text(narrative.text, narrative.participant_id, scorer, gateway, mode, source="narrative", **kwargs)


def run_profile_ceiling(prompt: PersonaPrompt, scorer: str, gateway: Gateway, mode: str = "B60", **kwargs) -> RecoveredScores:
    return score_text(prompt.text, prompt.participant_id, scorer, gateway, mode, source="prompt", **kwargs)


def run_unconditioned(
    generator: str,
    scorer: str,
    gateway: Gateway,
    n_runs: int,
    protocol: LsiProtocol | None = None,
    mode: str = "B60",
    self_report: bool = False,
    seed: int = 0,
    generation_temperature: float = 1.0,
    scoring_temperature: float = 0.3,
) -> list[RecoveredScores]:
    """Score narratives told under a personality-free entity prompt.

    With ``self_report`` the generator answers the questionnaire about itself
    directly, no narrative involved.
    """
    if n_runs < 1:
        raise RangeError("n_runs must be >= 1")
    protocol = protocol or LsiProtocol.load()
    out = []
    for k in range(n_runs):
        pid = f"unconditioned-{k + 1}"
        run_seed = derive_seed(seed, "unconditioned", k)
        if self_report:
            out.append(score_text(None, pid, generator, gateway, mode, generation_temperature, run_seed,
                                  source="self-report", persona=prompts.ENTITY_PROMPT))
            continue
        entity = PersonaPrompt(pid, prompts.ENTITY_PROMPT, "entity")
        narrative = run_stage2_narrative(entity, protocol, generator, gateway, generation_temperature, run_seed)
        out.append(run_stage3_score(narrative, scorer, gateway, mode, temperature=scoring_temperature, seed=run_seed))
    return out


def unconditioned_summary(runs: Sequence[RecoveredScores]) -> dict[str, dict[str, float]]:
    """Per-domain mean and SD across unconditioned runs (SD is NaN for a single run)."""
    out = {}
    for d in pm.DOMAINS:
        values = [r.domain_means[d] for r in runs]
        if len(values) < 2:
            out[d] = {"mean": values[0], "sd": float("nan"), "n": 1}
            continue
        mean, sd, _ = dispersion(values, with_cv=False)
        out[d] = {"mean": mean, "sd": sd, "n": len(values)}
    return out


# Configuration and batch running ---------------------------------------------------

@dataclass(frozen=True)
class PipelineConfig:
    generator_id: str = "synthetic/persona"
    scorer_id: str = "synthetic/persona"
    mode: str = "B60"
    prompt_temperature: float = 1.0
    generation_temperature: float = 1.0
    scoring_temperature: float = 0.3
    concurrency: int = 4
    seed: int = 0
    max_section_failures: int = 3
    include_beyond: bool = True
    protocol_path: str | None = None
    synthetic: Mapping[str, Any] = field(default_factory=dict)
    providers: Mapping[str, Mapping[str, Any]] = field(default_factory=dict)
    retry: Mapping[str, Any] = field(default_factory=dict)
    study: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise RangeError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.concurrency < 1:
            raise RangeError("concurrency must be >= 1")
        check_seed(self.seed)

    @classmethod
    def from_mapping(cls, doc: Mapping[str, Any]) -> "PipelineConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise SchemaError(f"unknown configuration keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path: str | Path | None) -> "PipelineConfig":
        if path is None:
            return cls()
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh) or {}
        if not isinstance(doc, Mapping):
            raise SchemaError(f"{path}: configuration must be a mapping")
        return cls.from_mapping(doc)

    def protocol(self) -> LsiProtocol:
        return LsiProtocol.load(self.protocol_path)

    def synthetic_config(self):
        from .synthetic import SyntheticPersonaConfig

        return SyntheticPersonaConfig.default(**dict(self.synthetic))


def _slug(model_id: str) -> str:
    return re.sub(r"[^\w.#-]+", "_", model_id)


def run_id(stage: str, generator: str, scorer: str | None = None) -> str:
    parts = [stage, _slug(generator)] + ([_slug(scorer)] if scorer else [])
    return "-".join(parts)


def stage_manifest(config: PipelineConfig, stage: str, scorer: bool = False, **params) -> RunManifest:
    base = {
        "mode": config.mode,
        "include_beyond": config.include_beyond,
        "synthetic": dict(config.synthetic),
    }
    if stage == "prompt":
        base = {"temperature": config.prompt_temperature, "synthetic": dict(config.synthetic)}
    elif stage == "narrative":
        base = {"temperature": config.generation_temperature, "max_section_failures": config.max_section_failures,
                "synthetic": dict(config.synthetic)}
    else:
        base["temperature"] = config.scoring_temperature
    base.update(params)
    scorer_id = config.scorer_id if scorer else None
    return RunManifest(run_id(stage, config.generator_id, scorer_id), stage, config.generator_id, config.seed, scorer_id, base)


def run_batch(
    units: Iterable[tuple[str, Any]],
    work: Callable[[str, Any], Any],
    manifest: RunManifest,
    root: str | Path,
    concurrency: int = 4,
    resume: bool = True,
) -> dict[str, Any]:
    """Apply ``work(pid, unit)`` over units in a thread pool, funnelling writes through this thread.

    Refusals, rejected narratives and parse failures become stored
    :class:`UnitOutcome` payloads; other errors propagate. Units already
    completed under the same manifest are loaded instead of recomputed.
    """
    units = list(units)
    done = completed_ids(root, manifest) if resume else set()
    results: dict[str, Any] = {}
    for pid, _ in units:
        if pid in done:
            results[pid] = read_artifact(run_dir(root, manifest.run_id) / f"{pid}.json")[1]
    pending = [(pid, unit) for pid, unit in units if pid not in done]
    if done:
        log.info("%s: resuming, %d of %d already complete", manifest.run_id, len(done), len(units))

    def guarded(pid, unit):
        try:
            return work(pid, unit)
        except RefusalError as exc:
            return UnitOutcome(pid, "refused", exc.text[:500])
        except (NarrativeRejectedError, ScoreParseError) as exc:
            return UnitOutcome(pid, exc.category, str(exc))

    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        futures = {pool.submit(guarded, pid, unit): pid for pid, unit in pending}
        for future in as_completed(futures):
            pid = futures[future]
            payload = future.result()
            store_artifact(manifest, payload, root)
            results[pid] = payload
    return {pid: results[pid] for pid, _ in units}


def successes(results: Mapping[str, Any], kind: type) -> dict[str, Any]:
    return {pid: v for pid, v in results.items() if isinstance(v, kind)}


def outcomes(results: Mapping[str, Any]) -> dict[str, UnitOutcome]:
    return successes(results, UnitOutcome)


class Pipeline:
    """Batch driver for every stage under one configuration and gateway."""

    def __init__(self, config: PipelineConfig, gateway: Gateway, root: str | Path):
        self.config = config
        self.gateway = gateway
        self.root = Path(root)

    def seed_for(self, pid: str) -> int:
        return derive_seed(self.config.seed, pid)

    def prompts(self, records: Sequence[ParticipantRecord]) -> dict[str, Any]:
        cfg = self.config
        manifest = stage_manifest(cfg, "prompt")

        def work(pid, record):
            return run_stage1_prompt(record, cfg.generator_id, self.gateway, cfg.prompt_temperature, self.seed_for(pid))

        return run_batch(((r.participant_id, r) for r in records), work, manifest, self.root, cfg.concurrency)

    def narratives(self, persona_prompts: Mapping[str, PersonaPrompt]) -> dict[str, Any]:
        cfg = self.config
        protocol = cfg.protocol()
        manifest = stage_manifest(cfg, "narrative", protocol=protocol.protocol_id)

        def work(pid, prompt):
            return run_stage2_narrative(prompt, protocol, cfg.generator_id, self.gateway, cfg.generation_temperature,
                                        self.seed_for(pid), cfg.max_section_failures)

        return run_batch(sorted(persona_prompts.items()), work, manifest, self.root, cfg.concurrency)

    def score(self, narratives: Mapping[str, LsiNarrative]) -> dict[str, Any]:
        cfg = self.config
        manifest = stage_manifest(cfg, "score", scorer=True)

        def work(pid, narrative):
            return run_stage3_score(narrative, cfg.scorer_id, self.gateway, cfg.mode, temperature=cfg.scoring_temperature,
                                    seed=self.seed_for(pid), include_beyond=cfg.include_beyond)

        return run_batch(sorted(narratives.items()), work, manifest, self.root, cfg.concurrency)

    def ceiling(self, persona_prompts: Mapping[str, PersonaPrompt]) -> dict[str, Any]:
        cfg = self.config
        manifest = stage_manifest(cfg, "ceiling", scorer=True)

        def work(pid, prompt):
            return run_profile_ceiling(prompt, cfg.scorer_id, self.gateway, cfg.mode, temperature=cfg.scoring_temperature,
                                       seed=self.seed_for(pid), include_beyond=cfg.include_beyond)

        return run_batch(sorted(persona_prompts.items()), work, manifest, self.root, cfg.concurrency)

    def unconditioned(self, n_runs: int, self_report: bool = False) -> list[RecoveredScores]:
        cfg = self.config
        manifest = stage_manifest(cfg, "unconditioned", scorer=True, n_runs=n_runs, self_report=self_report)
        runs = run_unconditioned(cfg.generator_id, cfg.scorer_id, self.gateway, n_runs, cfg.protocol(), cfg.mode,
                                 self_report, cfg.seed, cfg.generation_temperature, cfg.scoring_temperature)
        for scores in runs:
            store_artifact(manifest, scores, self.root)
        return runs

    def round_trip(self, records: Sequence[ParticipantRecord]) -> dict[str, dict[str, Any]]:
        """Stages 1-3 plus the profile ceiling for every record."""
        prompts_ = self.prompts(records)
        good_prompts = successes(prompts_, PersonaPrompt)
        narratives = self.narratives(good_prompts)
        scores = self.score(successes(narratives, LsiNarrative))
        ceiling = self.ceiling(good_prompts)
        return {"prompt": prompts_, "narrative": narratives, "score": scores, "ceiling": ceiling}


def load_stage(root: str | Path, manifest: RunManifest, kind: type) -> dict[str, Any]:
    """Successful payloads of ``kind`` stored for ``manifest``."""
    directory = run_dir(root, manifest.run_id)
    out = {}
    for path in sorted(directory.glob("*.json")):
        if path.name.startswith("_"):
            continue
        stored, payload = read_artifact(path)
        if stored.config_hash == manifest.config_hash and isinstance(payload, kind):
            out[path.stem] = payload
    return out
