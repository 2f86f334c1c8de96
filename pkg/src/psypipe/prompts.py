"""Request templates and reply parsers shared by the pipeline and the synthetic backend.

Every template starts its system message with a ``TASK:`` line so that logs
(and the synthetic backend) can tell requests apart. Free text handed to a
model is fenced as ``<<<TAG`` ... ``TAG>>>``.
"""
from __future__ import annotations

import re
from typing import Iterable, Mapping, Sequence

from . import psychometrics as pm
from .gateway import Message

TASK_RE = re.compile(r"^TASK:\s*([\w-]+)\s*$", re.MULTILINE)
INSTRUMENT_RE = re.compile(r"^INSTRUMENT:\s*(\S+)\s*$", re.MULTILINE)
ITEM_LINE_RE = re.compile(r"^(\d+)\.\s", re.MULTILINE)
PROFILE_LINE_RE = re.compile(r"\[(\w+)\]:\s*(-?\d+(?:\.\d+)?)")
RATING_LINE_RE = re.compile(r"^\s*(\d+)\s*:\s*(\S+)\s*$")
FEATURE_LINE_RE = re.compile(r"^\s*([a-z_]+)\s*:\s*(\S+)\s*$")

BANDS = ((1.8, "very low"), (2.6, "low"), (3.4, "moderate"), (4.2, "high"), (float("inf"), "very high"))

# Plain-language poles for the band descriptions (low side, high side).
POLES = {
    "HH": ("puts their own advantage first and enjoys status", "is sincere, fair and modest"),
    "E": ("stays calm under threat and rarely needs support", "feels fear and worry readily and seeks comfort"),
    "EX": ("prefers solitude and keeps a low profile", "seeks company and speaks up with confidence"),
    "A": ("holds grudges and reacts sharply to slights", "lets offences go and keeps their temper"),
    "C": ("acts on impulse and leaves tasks unfinished", "plans ahead and works with care"),
    "OP": ("sticks to the familiar and the practical", "is drawn to ideas, art and the unusual"),
}


def band(value: float) -> str:
    for upper, label in BANDS:
        if value < upper:
            return label
    return BANDS[-1][1]


def task_of(messages: Sequence[Message]) -> str | None:
    for m in messages:
        match = TASK_RE.search(m.content)
        if match:
            return match.group(1)
    return None


def fence(tag: str, body: str) -> str:
    return f"<<<{tag}\n{body.strip()}\n{tag}>>>"


def unfence(text: str, tag: str) -> str | None:
    match = re.search(rf"<<<{re.escape(tag)}\n(.*?)\n{re.escape(tag)}>>>", text, re.DOTALL)
    return match.group(1) if match else None


def unfence_all(text: str, prefix: str) -> list[tuple[str, str]]:
    pattern = rf"<<<({re.escape(prefix)}[^\n]*)\n(.*?)\n\1>>>"
    return [(m.group(1), m.group(2)) for m in re.finditer(pattern, text, re.DOTALL)]


# Stage 1 ---------------------------------------------------------------

STAGE1_SYSTEM = """TASK: persona-prompt
You write immersive character briefs for role-play. Given a person's
questionnaire answers and trait scores, write about 1,000 words in the second
person ("You are ...") that let an actor become this person. Describe how each
trait shows up in everyday behaviour, feelings and relationships. Do not
mention questionnaires, items or numbers. If biographical facts are supplied,
put them in a section that starts with a line BIOGRAPHY and ends with a line
END BIOGRAPHY."""


def stage1_messages(record) -> list[Message]:
    key = pm.hexaco_key()
    beyond = pm.beyond_key()
    lines = ["PERSON: " + record.participant_id, "", "QUESTIONNAIRE ANSWERS (1 = strongly disagree, 5 = strongly agree)"]
    for item, value in zip(sorted(key.items, key=lambda it: it.index), record.hexaco_items):
        lines.append(f"{item.index}. {item.stem} -> {value}")
    lines += ["", "DOMAIN MEANS"]
    means = record.domain_means
    for d in pm.DOMAINS:
        lines.append(f"- {pm.DOMAIN_NAMES[d]} [{d}]: {means[d]:.2f} ({band(means[d])})")
    lines += ["", "ADDITIONAL SCALES"]
    for s in beyond.scales:
        v = record.subscale_means[s]
        lines.append(f"- {beyond.scale_names[s]} [{s}]: {v:.2f} ({band(v)})")
    facts = list(record.bio_facts)
    if record.appearance_note:
        facts.append(record.appearance_note)
    if facts:
        lines += ["", "BIO FACTS"] + [f"- {f}" for f in facts]
    return [Message("system", STAGE1_SYSTEM), Message("user", "\n".join(lines))]


def parse_profile_lines(text: str) -> dict[str, float]:
    return {code: float(value) for code, value in PROFILE_LINE_RE.findall(text)}


# Stage 2 ---------------------------------------------------------------

STAGE2_TASK = """TASK: life-story-interview
You are taking part in a life story interview. Stay fully in character as the
person described above. Answer each question in the first person, in a few
paragraphs of natural speech. Do not break character or mention that you are
playing a role."""

ENTITY_PROMPT = """You are a person with a life of your own, about to tell the
story of that life to an interviewer."""


def stage2_system(persona_text: str) -> str:
    return persona_text.strip() + "\n\n" + STAGE2_TASK


# Stage 3 ---------------------------------------------------------------

RATE_SYSTEM = """TASK: rate-items
INSTRUMENT: {instrument}
Read the text below and rate how well each statement describes its author,
on a scale from 1 (strongly disagree) to 5 (strongly agree). Answer directly
without explanation. Reply with one line per statement in the form
index: rating"""

SELF_REPORT_TASK = """TASK: rate-items
INSTRUMENT: {instrument}
Rate how well each statement describes you, from 1 (strongly disagree) to 5
(strongly agree). Answer directly without explanation. Reply with one line per
statement in the form
index: rating"""

STRICT_RATINGS = """Your previous reply could not be used ({problem}). Reply again
with exactly {n} lines, one per statement, each of the form index: rating with
an integer rating from {lo} to {hi}, and nothing else."""


def rating_messages(
    key: pm.ScoringKey,
    indices: Iterable[int],
    text: str | None,
    persona: str | None = None,
) -> list[Message]:
    """Scoring request for ``indices`` of ``key``.

    With ``text`` the model rates the author of the fenced text; without it the
    request is a self-report, optionally under a ``persona`` system prompt.
    """
    stems = {it.index: it.stem for it in key.items}
    items = "\n".join(f"{i}. {stems[i]}" for i in sorted(indices))
    if text is None:
        system = SELF_REPORT_TASK.format(instrument=key.instrument_id)
        if persona:
            system = persona.strip() + "\n\n" + system
        return [Message("system", system), Message("user", "STATEMENTS\n" + items)]
    system = RATE_SYSTEM.format(instrument=key.instrument_id)
    return [Message("system", system), Message("user", fence("TEXT", text) + "\n\nSTATEMENTS\n" + items)]


def parse_ratings(
    reply: str, expected: Iterable[int], bounds: tuple[int, int] = (1, 5)
) -> tuple[dict[int, int], list[int], list[int], list[str]]:
    """Parse ``index: rating`` lines.

    Returns (ratings, missing, bad, warnings). ``bad`` lists items whose rating
    was not an integer within ``bounds``; they are also absent from ``ratings``.
    """
    want = set(expected)
    lo, hi = bounds
    ratings: dict[int, int] = {}
    bad: set[int] = set()
    warnings: list[str] = []
    for line in reply.splitlines():
        if not line.strip():
            continue
        match = RATING_LINE_RE.match(line)
        if not match:
            warnings.append(f"ignored line {line.strip()[:40]!r}")
            continue
        index, raw = int(match.group(1)), match.group(2)
        if index not in want:
            warnings.append(f"unrequested item {index}")
            continue
        if index in ratings or index in bad:
            warnings.append(f"duplicate rating for item {index}; kept the first")
            continue
        try:
            value = float(raw)
        except ValueError:
            bad.add(index)
            continue
        if value != int(value) or not lo <= value <= hi:
            bad.add(index)
            continue
        ratings[index] = int(value)
    missing = sorted(want - set(ratings) - bad)
    return ratings, missing, sorted(bad), warnings


def strict_rating_message(missing: Sequence[int], bad: Sequence[int], n: int, bounds=(1, 5)) -> Message:
    problems = []
    if missing:
        problems.append("missing items " + ", ".join(map(str, missing)))
    if bad:
        problems.append("invalid ratings for items " + ", ".join(map(str, bad)))
    return Message("user", STRICT_RATINGS.format(problem="; ".join(problems), n=n, lo=bounds[0], hi=bounds[1]))


# Validation --------------------------------------------------------------

STRIP_SYSTEM = """TASK: strip-biography
Rewrite the character brief below with every biographical detail removed:
names, places, dates, occupations, family details and physical appearance.
Keep every description of personality, feelings and behaviour unchanged.
Return only the rewritten brief."""

VERIFY_SYSTEM = """TASK: verify-masking
Check the text below for any remaining biographical detail (names, places,
dates, occupations, family details, physical appearance). Reply PASS if there
is none. Otherwise reply FAIL: followed by a comma-separated list of the
offending words."""

MATCH_SYSTEM = """TASK: match-profile
Below is a life story narrative followed by {n} personality profiles. Exactly
one profile describes the narrator. Reply with a single line of the form
Answer: k
where k is the number of that profile."""

PICK_RE = re.compile(r"answer\s*[:=]?\s*(\d+)", re.IGNORECASE)


def strip_messages(text: str, flagged: Sequence[str] = ()) -> list[Message]:
    body = fence("PROFILE", text)
    if flagged:
        body += "\n\nREMOVE: " + ", ".join(flagged)
    return [Message("system", STRIP_SYSTEM), Message("user", body)]


def verify_messages(text: str) -> list[Message]:
    return [Message("system", VERIFY_SYSTEM), Message("user", fence("PROFILE", text))]


def parse_verdict(reply: str) -> tuple[bool, list[str]]:
    head = reply.strip()
    if head.upper().startswith("PASS"):
        return True, []
    _, _, rest = head.partition(":")
    return False, [t.strip() for t in rest.split(",") if t.strip()]


def match_messages(narrative: str, options: Sequence[str]) -> list[Message]:
    parts = [fence("NARRATIVE", narrative)]
    parts += [fence(f"OPTION {k}", text) for k, text in enumerate(options, start=1)]
    return [Message("system", MATCH_SYSTEM.format(n=len(options))), Message("user", "\n\n".join(parts))]


def parse_pick(reply: str, n_options: int) -> int | None:
    """Zero-based option index, or None when the reply names no valid option."""
    match = PICK_RE.search(reply) or re.search(r"^\s*(\d+)\s*$", reply, re.MULTILINE)
    if not match:
        return None
    k = int(match.group(1))
    return k - 1 if 1 <= k <= n_options else None


# Content coding --------------------------------------------------------------

CODE_SYSTEM = """TASK: code-features
Rate the text below on each feature using the anchored 1-5 scales. Answer
directly without explanation, one line per feature in the form
feature: rating

{rubric}"""


def rubric_block(features: Mapping[str, Sequence[str]]) -> str:
    chunks = []
    for name, anchors in features.items():
        chunks.append(f"FEATURE {name}\n" + "\n".join(f"  {k}. {a}" for k, a in enumerate(anchors, start=1)))
    return "\n".join(chunks)


def code_messages(unit_text: str, features: Mapping[str, Sequence[str]]) -> list[Message]:
    return [
        Message("system", CODE_SYSTEM.format(rubric=rubric_block(features))),
        Message("user", fence("TEXT", unit_text)),
    ]


def parse_feature_ratings(
    reply: str, features: Iterable[str], bounds=(1, 5)
) -> tuple[dict[str, int], list[str], list[str]]:
    want = list(features)
    lo, hi = bounds
    out: dict[str, int] = {}
    bad: list[str] = []
    for line in reply.splitlines():
        match = FEATURE_LINE_RE.match(line)
        if not match or match.group(1) not in want or match.group(1) in out:
            continue
        try:
            value = float(match.group(2))
        except ValueError:
            bad.append(match.group(1))
            continue
        if value == int(value) and lo <= value <= hi:
            out[match.group(1)] = int(value)
        else:
            bad.append(match.group(1))
    missing = [f for f in want if f not in out and f not in bad]
    return out, missing, bad
