"""Corpus schema, ingestion, and provenance-tracked artifact storage.

Participants are stored one JSON record per line; narratives, transcripts and
stage artifacts are single JSON documents. Everything is immutable once built.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

from . import psychometrics as pm
from .errors import ProtocolError, ProvenanceConflictError, RangeError, SchemaError

STAGES = ("prompt", "narrative", "score", "ceiling", "unconditioned", "mask", "match", "code")
SEED_MAX = 2**64 - 1


class DomainMeanMismatch(UserWarning):
    """Stored domain means disagree with the means recomputed from items."""


def utc_now() -> str:
    return datetime.now(timezone.utc).replace(microsecond=0).isoformat().replace("+00:00", "Z")


def check_seed(seed: int) -> int:
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed <= SEED_MAX:
        raise RangeError(f"seed must be an unsigned 64-bit integer, got {seed!r}")
    return seed


def derive_seed(master_seed: int, *parts: object) -> int:
    """Stable 64-bit child seed from a master seed and any labels."""
    text = ":".join([str(check_seed(master_seed)), *map(str, parts)])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "big")


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


@dataclass(frozen=True)
class ParticipantRecord:
    participant_id: str
    hexaco_items: tuple[int, ...]
    subscale_means: Mapping[str, float]
    stored_domain_means: Mapping[str, float] | None = None
    bio_facts: tuple[str, ...] = ()
    appearance_note: str | None = None
    conversation_refs: tuple[str, ...] = ()

    def __post_init__(self):
        if not isinstance(self.participant_id, str) or not self.participant_id:
            raise SchemaError("participant_id must be a non-empty string")
        items = tuple(self.hexaco_items)
        if len(items) != 60:
            raise SchemaError(f"{self.participant_id}: expected 60 hexaco_items, got {len(items)}")
        for pos, value in enumerate(items, start=1):
            if isinstance(value, bool) or not isinstance(value, int) or not 1 <= value <= 5:
                raise RangeError(f"{self.participant_id}: hexaco item {pos} = {value!r} outside 1..5")
        object.__setattr__(self, "hexaco_items", items)
        key = pm.beyond_key()
        names = set(key.scales)
        if set(self.subscale_means) != names:
            raise SchemaError(
                f"{self.participant_id}: subscale_means must name exactly {sorted(names)}; "
                f"got {sorted(self.subscale_means)}"
            )
        for name, value in self.subscale_means.items():
            lo, hi = key.scale_bounds[name]
            if not isinstance(value, (int, float)) or not lo <= value <= hi:
                raise RangeError(f"{self.participant_id}: subscale {name} = {value!r} outside {lo}..{hi}")
        object.__setattr__(
            self, "subscale_means", {s: float(self.subscale_means[s]) for s in key.scales}
        )
        if self.stored_domain_means is not None and set(self.stored_domain_means) != set(pm.DOMAINS):
            raise SchemaError(f"{self.participant_id}: domain_means must name exactly {list(pm.DOMAINS)}")
        object.__setattr__(self, "bio_facts", tuple(self.bio_facts))
        object.__setattr__(self, "conversation_refs", tuple(self.conversation_refs))

    @cached_property
    def domain_means(self) -> dict[str, float]:
        """Means recomputed from the items; these are authoritative."""
        return pm.aggregate(self.hexaco_items, pm.hexaco_key())

    def mean_mismatches(self, tol: float = 1e-9) -> dict[str, float]:
        if self.stored_domain_means is None:
            return {}
        computed = self.domain_means
        return {
            d: self.stored_domain_means[d] - computed[d]
            for d in pm.DOMAINS
            if abs(self.stored_domain_means[d] - computed[d]) > tol
        }

    def to_dict(self) -> dict:
        doc: dict[str, Any] = {
            "participant_id": self.participant_id,
            "hexaco_items": list(self.hexaco_items),
            "subscale_means": dict(self.subscale_means),
        }
        if self.stored_domain_means is not None:
            doc["domain_means"] = dict(self.stored_domain_means)
        if self.bio_facts:
            doc["bio_facts"] = list(self.bio_facts)
        if self.appearance_note is not None:
            doc["appearance_note"] = self.appearance_note
        if self.conversation_refs:
            doc["conversation_refs"] = list(self.conversation_refs)
        return doc

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ParticipantRecord":
        for name in ("participant_id", "hexaco_items", "subscale_means"):
            if name not in doc:
                raise SchemaError(f"missing field {name!r}")
        if not isinstance(doc["hexaco_items"], list):
            raise SchemaError("field 'hexaco_items' must be an array")
        if not isinstance(doc["subscale_means"], Mapping):
            raise SchemaError("field 'subscale_means' must be an object")
        stored = doc.get("domain_means")
        return cls(
            participant_id=doc["participant_id"],
            hexaco_items=tuple(doc["hexaco_items"]),
            subscale_means=dict(doc["subscale_means"]),
            stored_domain_means=None if stored is None else {k: float(v) for k, v in stored.items()},
            bio_facts=tuple(doc.get("bio_facts", ())),
            appearance_note=doc.get("appearance_note"),
            conversation_refs=tuple(doc.get("conversation_refs", ())),
        )


def load_participants(path: str | Path) -> list[ParticipantRecord]:
    """Read a line-delimited participants file, validating every record.

    Stored domain means that disagree with re-aggregation raise a
    :class:`DomainMeanMismatch` warning; the record still loads.
    """
    records = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(doc, dict):
                raise SchemaError(f"{path}:{lineno}: record must be an object")
            try:
                record = ParticipantRecord.from_dict(doc)
            except (SchemaError, RangeError) as exc:
                pid = doc.get("participant_id", "?")
                raise type(exc)(f"{path}:{lineno} (participant {pid}): {exc}") from None
            if record.participant_id in seen:
                raise SchemaError(f"{path}:{lineno}: duplicate participant_id {record.participant_id!r}")
            seen.add(record.participant_id)
            bad = record.mean_mismatches()
            if bad:
                detail = ", ".join(f"{d} (stored - computed = {v:+.3f})" for d, v in bad.items())
                warnings.warn(
                    f"{path}:{lineno}: participant {record.participant_id} stored domain means disagree "
                    f"with items: {detail}",
                    DomainMeanMismatch,
                    stacklevel=2,
                )
            records.append(record)
    return records


def write_participants(records: Iterable[ParticipantRecord], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(canonical_json(rec.to_dict()) + "\n")
    return path


@dataclass(frozen=True)
class LsiProtocol:
    entries: tuple[tuple[str, str], ...]
    protocol_id: str = "LSI-24"

    def __post_init__(self):
        entries = tuple((str(p), str(t)) for p, t in self.entries)
        if len(entries) != 24:
            raise ProtocolError(f"LSI protocol must have exactly 24 entries, got {len(entries)}")
        ids = [p for p, _ in entries]
        if len(set(ids)) != len(ids):
            raise ProtocolError("LSI protocol prompt_ids must be unique")
        object.__setattr__(self, "entries", entries)

    @property
    def prompt_ids(self) -> tuple[str, ...]:
        return tuple(p for p, _ in self.entries)

    @classmethod
    def from_dict(cls, doc: Mapping) -> "LsiProtocol":
        return cls(tuple((e["prompt_id"], e["text"]) for e in doc["entries"]), doc.get("protocol_id", "LSI-24"))

    @classmethod
    def load(cls, path: str | Path | None = None) -> "LsiProtocol":
        if path is None:
            return cls.from_dict(pm._load_packaged("lsi_protocol.json"))
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class LsiNarrative:
    participant_id: str
    generator_id: str
    sections: tuple[tuple[str, str], ...]
    temperature: float
    created_at: str = field(default_factory=utc_now)
    section_failures: int = 0

    def __post_init__(self):
        sections = tuple((str(p), str(t)) for p, t in self.sections)
        if len(sections) != 24:
            raise SchemaError(f"{self.participant_id}: narrative must have 24 sections, got {len(sections)}")
        empty = [p for p, t in sections if not t.strip()]
        if empty:
            raise SchemaError(f"{self.participant_id}: empty narrative sections {empty}")
        if not math.isfinite(self.temperature):
            raise SchemaError("temperature must be finite")
        object.__setattr__(self, "sections", sections)

    def check_protocol(self, protocol: LsiProtocol) -> None:
        unknown = [p for p, _ in self.sections if p not in set(protocol.prompt_ids)]
        if unknown:
            raise SchemaError(f"{self.participant_id}: prompt_ids not in protocol: {unknown}")

    @property
    def text(self) -> str:
        return "\n\n".join(t for _, t in self.sections)

    def to_dict(self) -> dict:
        return {
            "participant_id": self.participant_id,
            "generator_id": self.generator_id,
            "temperature": self.temperature,
            "created_at": self.created_at,
            "section_failures": self.section_failures,
            "sections": [{"prompt_id": p, "text": t} for p, t in self.sections],
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "LsiNarrative":
        try:
            return cls(
                participant_id=doc["participant_id"],
                generator_id=doc["generator_id"],
                sections=tuple((s["prompt_id"], s["text"]) for s in doc["sections"]),
                temperature=float(doc["temperature"]),
                created_at=doc.get("created_at", ""),
                section_failures=int(doc.get("section_failures", 0)),
            )
        except KeyError as exc:
            raise SchemaError(f"narrative missing field {exc.args[0]!r}") from None


def load_narrative(path: str | Path, protocol: LsiProtocol | None = None) -> LsiNarrative:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if "payload" in doc and "manifest" in doc:
        doc = doc["payload"]
    narrative = LsiNarrative.from_dict(doc)
    narrative.check_protocol(protocol or LsiProtocol.load())
    return narrative


@dataclass(frozen=True)
class ConversationTranscript:
    conversation_id: str
    participants: tuple[str, str]
    turns: tuple[tuple[str, str], ...]

    def __post_init__(self):
        parts = tuple(self.participants)
        if len(parts) != 2 or parts[0] == parts[1]:
            raise SchemaError(f"{self.conversation_id}: need two distinct participants")
        turns = tuple((str(s), str(t)) for s, t in self.turns)
        speakers = {s for s, _ in turns}
        silent = [p for p in parts if p not in speakers]
        if silent:
            raise SchemaError(f"{self.conversation_id}: no turns for {silent}")
        stray = speakers - set(parts)
        if stray:
            raise SchemaError(f"{self.conversation_id}: turns by unlisted speakers {sorted(stray)}")
        object.__setattr__(self, "participants", parts)
        object.__setattr__(self, "turns", turns)

    def side(self, speaker: str) -> str:
        return "\n".join(t for s, t in self.turns if s == speaker)

    def to_dict(self) -> dict:
        return {
            "conversation_id": self.conversation_id,
            "participants": list(self.participants),
            "turns": [{"speaker": s, "text": t} for s, t in self.turns],
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ConversationTranscript":
        try:
            return cls(
                doc["conversation_id"],
                tuple(doc["participants"]),
                tuple((t["speaker"], t["text"]) for t in doc["turns"]),
            )
        except KeyError as exc:
            raise SchemaError(f"transcript missing field {exc.args[0]!r}") from None


def load_transcript(path: str | Path) -> ConversationTranscript:
    with open(path, encoding="utf-8") as fh:
        return ConversationTranscript.from_dict(json.load(fh))


@dataclass(frozen=True)
class RunManifest:
    run_id: str
    stage: str
    generator_id: str
    seed: int
    scorer_id: str | None = None
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise SchemaError(f"unknown stage {self.stage!r}")
        if not self.run_id or "/" in self.run_id or self.run_id.startswith("."):
            raise SchemaError(f"invalid run_id {self.run_id!r}")
        check_seed(self.seed)
        object.__setattr__(self, "params", json.loads(canonical_json(dict(self.params))))

    @property
    def config_hash(self) -> str:
        body = {
            "stage": self.stage,
            "generator_id": self.generator_id,
            "scorer_id": self.scorer_id,
            "seed": self.seed,
            "params": self.params,
        }
        return hashlib.sha256(canonical_json(body).encode()).hexdigest()

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "stage": self.stage,
            "generator_id": self.generator_id,
            "scorer_id": self.scorer_id,
            "seed": self.seed,
            "params": dict(self.params),
            "config_hash": self.config_hash,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "RunManifest":
        manifest = cls(
            doc["run_id"], doc["stage"], doc["generator_id"], int(doc["seed"]), doc.get("scorer_id"), doc.get("params", {})
        )
        if "config_hash" in doc and doc["config_hash"] != manifest.config_hash:
            raise ProvenanceConflictError(f"run {manifest.run_id}: stored config_hash does not match parameters")
        return manifest


PAYLOAD_TYPES: dict[str, type] = {}


def payload_type(kind: str) -> Callable[[type], type]:
    def register(cls: type) -> type:
        cls.payload_kind = kind
        PAYLOAD_TYPES[kind] = cls
        return cls

    return register


payload_type("narrative")(LsiNarrative)
payload_type("transcript")(ConversationTranscript)


@payload_type("outcome")
@dataclass(frozen=True)
class UnitOutcome:
    """Non-success result for one participant at one stage (refusal or failure)."""

    participant_id: str
    status: str
    reason: str = ""

    def to_dict(self) -> dict:
        return {"participant_id": self.participant_id, "status": self.status, "reason": self.reason}

    @classmethod
    def from_dict(cls, doc: Mapping) -> "UnitOutcome":
        return cls(doc["participant_id"], doc["status"], doc.get("reason", ""))


def _payload_id(payload: Any) -> str:
    pid = getattr(payload, "participant_id", None) or getattr(payload, "conversation_id", None)
    if not pid:
        raise SchemaError(f"payload {type(payload).__name__} has no participant id")
    return str(pid)


def run_dir(root: str | Path, run_id: str) -> Path:
    return Path(root) / run_id


def _write_json(path: Path, doc: Any) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, indent=1, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def _check_run(root: Path, manifest: RunManifest) -> Path:
    directory = run_dir(root, manifest.run_id)
    directory.mkdir(parents=True, exist_ok=True)
    marker = directory / "_manifest.json"
    if marker.exists():
        existing = json.loads(marker.read_text(encoding="utf-8"))
        if existing.get("config_hash") != manifest.config_hash:
            raise ProvenanceConflictError(
                f"run {manifest.run_id} already exists with config_hash {existing.get('config_hash', '?')[:12]}, "
                f"refusing to mix with {manifest.config_hash[:12]}"
            )
    else:
        _write_json(marker, manifest.to_dict())
    return directory


def store_artifact(manifest: RunManifest, payload: Any, root: str | Path) -> Path:
    """Write ``payload`` under ``root/<run_id>/<participant_id>.json``.

    Re-writing under the same configuration is idempotent; any write into a
    run created with a different configuration raises
    :class:`ProvenanceConflictError`.
    """
    kind = getattr(type(payload), "payload_kind", None)
    if kind is None:
        raise SchemaError(f"cannot store payload of type {type(payload).__name__}")
    directory = _check_run(Path(root), manifest)
    path = directory / f"{_payload_id(payload)}.json"
    doc = {"manifest": manifest.to_dict(), "kind": kind, "payload": payload.to_dict()}
    if path.exists():
        existing = json.loads(path.read_text(encoding="utf-8"))
        if existing.get("manifest", {}).get("config_hash") != manifest.config_hash:
            raise ProvenanceConflictError(f"{path}: written by a different configuration")
        if existing == doc:
            return path
    _write_json(path, doc)
    return path


def read_artifact(path: str | Path) -> tuple[RunManifest, Any]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    try:
        cls = PAYLOAD_TYPES[doc["kind"]]
    except KeyError:
        raise SchemaError(f"{path}: unknown artifact kind {doc.get('kind')!r}") from None
    return RunManifest.from_dict(doc["manifest"]), cls.from_dict(doc["payload"])


def completed_ids(root: str | Path, manifest: RunManifest) -> set[str]:
    """Participant ids already stored for this exact configuration (for resume)."""
    directory = run_dir(root, manifest.run_id)
    if not directory.is_dir():
        return set()
    done = set()
    for path in directory.glob("*.json"):
        if path.name.startswith("_"):
            continue
        doc = json.loads(path.read_text(encoding="utf-8"))
        if doc.get("manifest", {}).get("config_hash") == manifest.config_hash and doc.get("kind") != "outcome":
            done.add(path.stem)
    return done


def load_run(directory: str | Path) -> dict[str, Any]:
    """All payloads in a run directory keyed by participant id (outcomes included)."""
    out = {}
    for path in sorted(Path(directory).glob("*.json")):
        if path.name.startswith("_"):
            continue
        _, payload = read_artifact(path)
        out[path.stem] = payload
    return out
