"""Deterministic synthetic backend: trait levels travel through text as marker tokens.

Each scale owns a high-pole and a low-pole token list. A unit of text encodes a
level ``v`` as a net marker count ``c = round((v - 3) / c_scale)`` (high-pole
tokens minus low-pole tokens) and decodes as ``clamp(3 + c_scale * c, 1, 5)``.
Narratives average the count over their sections. Because the encoding is
exact, every pipeline stage has a known answer, which makes the synthetic
backend a test oracle for the real plumbing.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np

from . import prompts
from . import psychometrics as pm
from .data_model import (
    ConversationTranscript,
    LsiNarrative,
    LsiProtocol,
    ParticipantRecord,
    derive_seed,
)
from .errors import RangeError, SchemaError, SyntheticDecodeError
from .gateway import ChatRequest, ChatResponse

SCALES = pm.DOMAINS + pm.beyond_key().scales
VALENCE = "valence"

NARRATIVE_SIGNATURE = "speaking about this part of my life"
PERSONA_SIGNATURE = "you are someone whose personality"

# Which decoded level a synthetic annotator reads for each rubric feature.
FEATURE_SOURCES = {
    "agency": "EX",
    "communion": "A",
    "emotional_intensity": "E",
    "vulnerability": "E",
    "disclosure_depth": "E",
    "humor": "EX",
    "warmth": "A",
    "dominance": "EX",
    "emotional_valence": VALENCE,
    "emotional_complexity": "E",
    "meaning_making": "HH",
    "creativity_art": "OP",
}

REFUSAL_TEXT = "I'm sorry, but I can't help with writing this character."

_CAPITAL_WORD = re.compile(r"[A-Z][\w'-]*")
_SENTENCE_BREAK = re.compile(r"(?<=[.!?:])\s+")


Poles = tuple[tuple[str, ...], tuple[str, ...]]


def _poles(doc: Mapping) -> Poles:
    return tuple(doc["high"]), tuple(doc["low"])


@dataclass(frozen=True)
class SyntheticPersonaConfig:
    """Marker lexicon plus the noise knobs of the synthetic generator.

    ``noise_sd`` perturbs each scale once per narrative (on the 1-5 scale).
    ``valence_jitter`` sets the per-section SD of the valence net count per
    unit of (Emotionality - 1). ``annotator_noise_sd`` is the rating noise of
    synthetic content annotators.
    """

    lexicon: Mapping[str, Poles]
    subscale_lexicon: Mapping[str, Poles] = field(default_factory=dict)
    valence_lexicon: Poles = (("bright",), ("grim",))
    noise_sd: float = 0.0
    seed: int = 0
    c_scale: float = 0.1
    valence_jitter: float = 0.0
    annotator_noise_sd: float = 0.0

    def __post_init__(self):
        if set(self.lexicon) != set(pm.DOMAINS):
            raise SchemaError(f"lexicon must cover exactly the domains {pm.DOMAINS}")
        for name, value in (("noise_sd", self.noise_sd), ("valence_jitter", self.valence_jitter),
                            ("annotator_noise_sd", self.annotator_noise_sd)):
            if not value >= 0:
                raise RangeError(f"{name} must be >= 0, got {value}")
        if not self.c_scale > 0:
            raise RangeError("c_scale must be positive")
        seen: dict[str, str] = {}
        for label, tokens in self._lists():
            if not tokens:
                raise SchemaError(f"marker list {label} is empty")
            for tok in tokens:
                if tok != tok.lower() or not tok.isalpha():
                    raise SchemaError(f"marker {tok!r} must be a lowercase alphabetic word")
                if tok in seen and seen[tok] != label:
                    raise SchemaError(f"marker {tok!r} appears in both {seen[tok]} and {label}")
                seen[tok] = label

    def _lists(self):
        for scale, (high, low) in {**self.lexicon, **self.subscale_lexicon, VALENCE: self.valence_lexicon}.items():
            yield f"{scale}.high", tuple(high)
            yield f"{scale}.low", tuple(low)

    @classmethod
    def default(cls, **overrides) -> "SyntheticPersonaConfig":
        doc = pm._load_packaged("synthetic_lexicon.json")
        return cls(
            lexicon={d: _poles(v) for d, v in doc["domains"].items()},
            subscale_lexicon={s: _poles(v) for s, v in doc["subscales"].items()},
            valence_lexicon=_poles(doc["valence"]),
            **overrides,
        )

    @property
    def scales(self) -> tuple[str, ...]:
        return tuple(s for s in SCALES if s in self.lexicon or s in self.subscale_lexicon)

    @cached_property
    def token_map(self) -> dict[str, tuple[str, int]]:
        out = {}
        for scale, (high, low) in {**self.lexicon, **self.subscale_lexicon, VALENCE: self.valence_lexicon}.items():
            out.update({t: (scale, 1) for t in high})
            out.update({t: (scale, -1) for t in low})
        return out

    @cached_property
    def markers(self) -> frozenset[str]:
        return frozenset(self.token_map)

    def poles(self, scale: str) -> Poles:
        if scale == VALENCE:
            return self.valence_lexicon
        return self.lexicon.get(scale) or self.subscale_lexicon[scale]

    def count_limit(self) -> int:
        return int(round(2.0 / self.c_scale))


def encode_count(value: float, c_scale: float = 0.1) -> int:
    limit = int(round(2.0 / c_scale))
    return max(-limit, min(limit, int(round((value - 3.0) / c_scale))))


def decode_value(count: float, c_scale: float = 0.1) -> float:
    return min(5.0, max(1.0, 3.0 + c_scale * count))


def marker_tokens(config: SyntheticPersonaConfig, scale: str, count: int) -> list[str]:
    high, low = config.poles(scale)
    pole = high if count > 0 else low
    return [pole[i % len(pole)] for i in range(abs(count))]


@dataclass(frozen=True)
class Decoded:
    """Net marker counts per scale summed over a text, and the number of units they span."""

    counts: Mapping[str, int]
    units: int

    def level(self, scale: str, c_scale: float = 0.1) -> float:
        return decode_value(self.counts.get(scale, 0) / self.units, c_scale)

    def profile(self, scales: Sequence[str], c_scale: float = 0.1) -> dict[str, float]:
        return {s: self.level(s, c_scale) for s in scales}

    def valence(self) -> float:
        return self.counts.get(VALENCE, 0) / self.units


def decode_text(text: str, config: SyntheticPersonaConfig, strict: bool = True) -> Decoded:
    """Count markers in ``text``.

    Narrative text is averaged over its section signatures. Persona text counts
    as one unit. With ``strict`` any other text raises SyntheticDecodeError;
    otherwise it is read as one unit (an entity prompt decodes to all 3.0).
    """
    lowered = text.lower()
    units = lowered.count(NARRATIVE_SIGNATURE)
    if units == 0:
        if PERSONA_SIGNATURE in lowered or not strict:
            units = 1
        else:
            raise SyntheticDecodeError("text does not come from the synthetic template family")
    counts: dict[str, int] = {}
    lookup = config.token_map
    for token in re.findall(r"[a-z]+", lowered):
        hit = lookup.get(token)
        if hit is not None:
            counts[hit[0]] = counts.get(hit[0], 0) + hit[1]
    return Decoded(counts, units)


# Text builders -----------------------------------------------------------------

def section_text(config: SyntheticPersonaConfig, counts: Mapping[str, int], valence: int = 0) -> str:
    parts = [f"Speaking about this part of my life, this is how I remember it."]
    for scale in config.scales:
        c = counts.get(scale, 0)
        if not c:
            continue
        words = " ".join(marker_tokens(config, scale, c))
        if scale in pm.DOMAINS:
            parts.append(f"People who know me would call me {words}.")
        else:
            parts.append(f"With other people I come across as {words}.")
    if valence:
        parts.append(f"The memory feels {' '.join(marker_tokens(config, VALENCE, valence))}.")
    return " ".join(parts)


def persona_text(config: SyntheticPersonaConfig, profile: Mapping[str, float], bio: Sequence[str] = ()) -> str:
    beyond = pm.beyond_key()
    lines = ["You are someone whose personality shows in everything you do."]
    for d in pm.DOMAINS:
        v = profile.get(d, 3.0)
        low, high = prompts.POLES[d]
        lean = high if v >= 3.0 else low
        line = f"{pm.DOMAIN_NAMES[d]}: your level is {prompts.band(v)}, so you are a person who {lean}."
        words = marker_tokens(config, d, encode_count(v, config.c_scale))
        if words:
            line += f" People who know you would call you {' '.join(words)}."
        lines.append(line)
    for s in beyond.scales:
        if s not in profile:
            continue
        v = profile[s]
        line = f"{beyond.scale_names[s]}: your level is {prompts.band(v)}."
        words = marker_tokens(config, s, encode_count(v, config.c_scale))
        if words:
            line += f" With other people you come across as {' '.join(words)}."
        lines.append(line)
    if bio:
        lines += ["BIOGRAPHY"] + [f"- {fact}" for fact in bio] + ["END BIOGRAPHY"]
    return "\n".join(lines)


def _noise_draws(seed: int, n_sections: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    return rng.standard_normal(len(SCALES)), rng.standard_normal(n_sections)


def noisy_counts(profile: Mapping[str, float], config: SyntheticPersonaConfig, z: np.ndarray) -> dict[str, int]:
    return {
        s: encode_count(profile[s] + config.noise_sd * z[i], config.c_scale)
        for i, s in enumerate(SCALES)
        if s in profile
    }


def valence_count(config: SyntheticPersonaConfig, emotionality: float, z: float) -> int:
    return int(round(config.valence_jitter * (emotionality - 1.0) * z))


def synth_generate_narrative(
    profile: Mapping[str, float],
    config: SyntheticPersonaConfig,
    participant_id: str = "synthetic",
    protocol: LsiProtocol | None = None,
    generator_id: str = "synthetic/persona",
) -> LsiNarrative:
    """Narrative whose sections encode ``profile`` plus one noise draw per scale.

    The noise is seeded from ``config.seed`` and ``participant_id`` so distinct
    participants get independent draws.
    """
    missing = [d for d in pm.DOMAINS if d not in profile]
    if missing:
        raise SchemaError(f"profile lacks domains {missing}")
    protocol = protocol or LsiProtocol.load()
    z, zv = _noise_draws(derive_seed(config.seed, "narrative", participant_id), len(protocol.entries))
    counts = noisy_counts(profile, config, z)
    sections = tuple(
        (pid, section_text(config, counts, valence_count(config, profile["E"], zv[k])))
        for k, (pid, _) in enumerate(protocol.entries)
    )
    return LsiNarrative(participant_id, generator_id, sections, 1.0, created_at="synthetic")


def synth_score_narrative(narrative: LsiNarrative, config: SyntheticPersonaConfig, scorer_id: str = "synthetic/persona"):
    """Decode a synthetic narrative into full item vectors and RecoveredScores."""
    from .pipeline import RecoveredScores

    decoded = decode_text(narrative.text, config)
    items = pm.items_for_means(decoded.profile(pm.DOMAINS, config.c_scale), pm.hexaco_key())
    beyond = pm.beyond_key()
    sub_items = pm.items_for_means(decoded.profile(beyond.scales, config.c_scale), beyond)
    return RecoveredScores.from_ratings(narrative.participant_id, scorer_id, items, sub_items, source="narrative")


# Chat backend ---------------------------------------------------------------

def _digest(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _clamp_rating(value: float) -> int:
    return int(min(5, max(1, round(value))))


class SyntheticBackend:
    """Chat backend answering the pipeline's templates from marker counts.

    Model names select behaviour: ``persona`` (faithful), ``random`` (uniform
    answers), ``constant`` (midpoint answers), ``refuser`` (always refuses).
    A ``#tag`` suffix makes an independent instance, e.g. separate annotators.
    """

    VARIANTS = ("persona", "random", "constant", "refuser")

    def __init__(self, config: SyntheticPersonaConfig | None = None):
        self.config = config or SyntheticPersonaConfig.default()
        self._handlers = {
            "persona-prompt": self._persona_prompt,
            "life-story-interview": self._interview_turn,
            "rate-items": self._rate_items,
            "strip-biography": self._strip,
            "verify-masking": self._verify,
            "match-profile": self._match,
            "code-features": self._code,
        }

    def send(self, request: ChatRequest) -> ChatResponse:
        variant, _, tag = request.model.partition("#")
        if variant not in self.VARIANTS:
            raise SyntheticDecodeError(f"unknown synthetic model {request.model!r}")
        task = prompts.task_of(request.messages)
        if task not in self._handlers:
            raise SyntheticDecodeError(f"synthetic backend cannot answer task {task!r}")
        if variant == "refuser":
            text = REFUSAL_TEXT
        else:
            text = self._handlers[task](request, variant, tag)
        usage = {"input_words": len(request.payload_text().split()), "output_words": len(text.split())}
        return ChatResponse(text, request.model_id, usage)

    def _rng(self, request: ChatRequest, variant: str, tag: str, *parts) -> np.random.Generator:
        return np.random.default_rng(
            derive_seed(self.config.seed, variant, tag, request.seed or 0, _digest(request.payload_text()), *parts)
        )

    def _persona_prompt(self, request, variant, tag):
        user = request.messages[-1].content
        profile = prompts.parse_profile_lines(user)
        if variant == "random":
            rng = self._rng(request, variant, tag)
            profile = {s: float(rng.uniform(1, 5)) for s in profile}
        elif variant == "constant":
            profile = {s: 3.0 for s in profile}
        _, _, tail = user.partition("\nBIO FACTS\n")
        bio = [line[2:] for line in tail.splitlines() if line.startswith("- ")]
        return persona_text(self.config, profile, bio)

    def _interview_turn(self, request, variant, tag):
        system = "\n".join(m.content for m in request.messages if m.role == "system")
        turn = sum(1 for m in request.messages if m.role == "assistant")
        decoded = decode_text(system, self.config, strict=False)
        profile = decoded.profile(SCALES, self.config.c_scale)
        if variant == "random":
            rng = np.random.default_rng(derive_seed(self.config.seed, variant, tag, request.seed or 0))
            profile = {s: float(rng.uniform(1, 5)) for s in SCALES}
        elif variant == "constant":
            profile = {s: 3.0 for s in SCALES}
        seed = derive_seed(self.config.seed, "interview", request.seed or 0)
        z, zv = _noise_draws(seed, max(24, turn + 1))
        counts = noisy_counts(profile, self.config, z)
        return section_text(self.config, counts, valence_count(self.config, profile["E"], zv[turn]))

    def _rate_items(self, request, variant, tag):
        system = "\n".join(m.content for m in request.messages if m.role == "system")
        user = next(m.content for m in request.messages if m.role == "user")
        instrument = prompts.INSTRUMENT_RE.search(system)
        key = pm.beyond_key() if instrument and instrument.group(1) == pm.beyond_key().instrument_id else pm.hexaco_key()
        _, _, listing = user.partition("STATEMENTS\n")
        indices = [int(i) for i in prompts.ITEM_LINE_RE.findall(listing)]
        if variant == "random":
            rng = self._rng(request, variant, tag)
            ratings = {i: int(rng.integers(1, 6)) for i in indices}
        elif variant == "constant":
            ratings = {i: 3 for i in indices}
        else:
            text = prompts.unfence(user, "TEXT")
            decoded = decode_text(system, self.config, strict=False) if text is None else decode_text(text, self.config)
            ratings = pm.items_for_means(decoded.profile(key.scales, self.config.c_scale), key)
        return "\n".join(f"{i}: {ratings[i]}" for i in indices)

    def _strip(self, request, variant, tag):
        user = request.messages[-1].content
        text = prompts.unfence(user, "PROFILE") or ""
        text = re.sub(r"^BIOGRAPHY$.*?^END BIOGRAPHY$\n?", "", text, flags=re.MULTILINE | re.DOTALL).strip()
        remove = re.search(r"^REMOVE:\s*(.*)$", user, re.MULTILINE)
        if remove:
            for word in [w.strip() for w in remove.group(1).split(",") if w.strip()]:
                text = re.sub(rf"\s*\b{re.escape(word)}\b", "", text)
        return text

    def _verify(self, request, variant, tag):
        text = prompts.unfence(request.messages[-1].content, "PROFILE") or ""
        if variant == "constant":
            return "PASS"
        flagged = flag_capitalized(text)
        return "PASS" if not flagged else "FAIL: " + ", ".join(flagged)

    def _match(self, request, variant, tag):
        user = request.messages[-1].content
        options = sorted(prompts.unfence_all(user, "OPTION "), key=lambda o: int(o[0].split()[1]))
        if variant == "random":
            return f"Answer: {int(self._rng(request, variant, tag).integers(1, len(options) + 1))}"
        if variant == "constant":
            return "Answer: 1"
        scales = self.config.scales
        target = decode_text(prompts.unfence(user, "NARRATIVE") or "", self.config).profile(scales, self.config.c_scale)
        best, best_dist = 1, float("inf")
        for k, (_, body) in enumerate(options, start=1):
            prof = decode_text(body, self.config).profile(scales, self.config.c_scale)
            dist = sum(abs(prof[s] - target[s]) for s in scales)
            if dist < best_dist:
                best, best_dist = k, dist
        return f"Answer: {best}"

    def _code(self, request, variant, tag):
        system = request.messages[0].content
        features = re.findall(r"^FEATURE (\w+)$", system, re.MULTILINE)
        unit = prompts.unfence(request.messages[-1].content, "TEXT") or ""
        if variant == "constant":
            return "\n".join(f"{f}: 3" for f in features)
        rng = np.random.default_rng(derive_seed(self.config.seed, "annotate", variant, tag, _digest(unit)))
        if variant == "random":
            return "\n".join(f"{f}: {int(rng.integers(1, 6))}" for f in features)
        decoded = decode_text(unit, self.config)
        noise = rng.normal(0.0, self.config.annotator_noise_sd, len(features)) if self.config.annotator_noise_sd else np.zeros(len(features))
        lines = []
        for f, eps in zip(features, noise):
            source = FEATURE_SOURCES.get(f)
            if source == VALENCE:
                value = 3.0 + decoded.valence()
            elif source is not None:
                value = decoded.level(source, self.config.c_scale)
            else:
                value = 3.0
            lines.append(f"{f}: {_clamp_rating(value + eps)}")
        return "\n".join(lines)


def _allowed_capitals() -> frozenset[str]:
    names = list(pm.DOMAIN_NAMES.values()) + list(pm.beyond_key().scale_names.values())
    words = {"I"}
    for name in names:
        words.update(re.findall(r"[\w'-]+", name))
    return frozenset(words)


ALLOWED_CAPITALS = _allowed_capitals()


def flag_capitalized(text: str) -> list[str]:
    """Capitalized words that do not open a sentence or line and are not construct names."""
    flagged: list[str] = []
    for line in text.splitlines():
        stripped = line.strip().lstrip("-* ").strip()
        if stripped in ("BIOGRAPHY", "END BIOGRAPHY"):
            flagged.append(stripped)
            continue
        for sentence in _SENTENCE_BREAK.split(stripped):
            words = _CAPITAL_WORD.finditer(sentence)
            for match in words:
                if match.start() == 0 or match.group(0) in ALLOWED_CAPITALS:
                    continue
                if match.group(0) not in flagged:
                    flagged.append(match.group(0))
    return flagged


# Synthetic corpora -----------------------------------------------------------

_PLACES = ("Halden", "Tromsdal", "Varnek", "Oskby", "Lindqvist Bay", "Marrow Falls")
_NAMES = ("Ingrid", "Tomas", "Selma", "Arvid", "Klara", "Nils")
_JOBS = ("ferry engineer", "school librarian", "bakery owner", "land surveyor", "night nurse", "translator")


def synth_participants(
    n: int,
    seed: int = 0,
    spread: float = 0.5,
    center: float = 3.0,
    with_bio: bool = True,
    prefix: str = "P",
) -> list[ParticipantRecord]:
    """Random participants whose domain and subscale means are Normal(center, spread) on the item grid."""
    if n < 1:
        raise RangeError("n must be positive")
    key, beyond = pm.hexaco_key(), pm.beyond_key()
    width = len(str(n))
    out = []
    for i in range(n):
        pid = f"{prefix}{i + 1:0{width}d}"
        rng = np.random.default_rng(derive_seed(seed, "participant", pid))
        means = {d: float(np.clip(center + spread * rng.standard_normal(), 1, 5)) for d in pm.DOMAINS}
        items = pm.items_for_means(means, key, rng)
        sub = {s: float(np.clip(center + spread * rng.standard_normal(), 1, 5)) for s in beyond.scales}
        sub_means = pm.aggregate(pm.items_for_means(sub, beyond, rng), beyond)
        bio: tuple[str, ...] = ()
        note = None
        if with_bio:
            k = int(rng.integers(len(_NAMES)))
            bio = (
                f"Grew up in {_PLACES[k]} with an older sibling called {_NAMES[k]}.",
                f"Works as a {_JOBS[(k + i) % len(_JOBS)]}.",
            )
            note = "Tall, with a scar above the left eyebrow."
        out.append(ParticipantRecord(pid, tuple(items[j] for j in sorted(items)), sub_means, None, bio, note))
    return out


def truth_profile(record: ParticipantRecord) -> dict[str, float]:
    return {**record.domain_means, **record.subscale_means}


def synth_conversations(
    records: Sequence[ParticipantRecord],
    config: SyntheticPersonaConfig,
    per_participant: int = 3,
    turns_per_side: int = 3,
    seed: int = 0,
    profiles: Mapping[str, Mapping[str, float]] | None = None,
) -> list[ConversationTranscript]:
    """Two-party transcripts in which each participant appears in at least ``per_participant`` conversations.

    Every turn is a synthetic section drawn from the speaker's profile (or the
    override in ``profiles``) with fresh noise and valence jitter.
    """
    n = len(records)
    if n < 2:
        raise RangeError("need at least two participants for conversations")
    offsets = range(1, max(1, -(-per_participant // 2)) + 1)
    profiles = profiles or {r.participant_id: truth_profile(r) for r in records}
    out = []
    for off in offsets:
        for i in range(n):
            a, b = records[i].participant_id, records[(i + off) % n].participant_id
            if a == b:
                continue
            cid = f"C{off}-{a}-{b}"
            turns = []
            for speaker in (a, b):
                z, zv = _noise_draws(derive_seed(seed, config.seed, cid, speaker), turns_per_side)
                counts = noisy_counts(profiles[speaker], config, z)
                for t in range(turns_per_side):
                    turns.append((speaker, section_text(config, counts, valence_count(config, profiles[speaker]["E"], zv[t]))))
            # interleave the two sides
            half = turns_per_side
            ordered = [turn for pair in zip(turns[:half], turns[half:]) for turn in pair]
            out.append(ConversationTranscript(cid, (a, b), tuple(ordered)))
    return out
