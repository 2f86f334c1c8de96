"""Scoring keys and Likert aggregation for HEXACO-60 and the beyond-HEXACO subscales."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import IncompletenessError, KeyMismatchError, RangeError, SchemaError

DOMAINS = ("HH", "E", "EX", "A", "C", "OP")
DOMAIN_NAMES = {
    "HH": "Honesty-Humility",
    "E": "Emotionality",
    "EX": "Extraversion",
    "A": "Agreeableness",
    "C": "Conscientiousness",
    "OP": "Openness to Experience",
}


@dataclass(frozen=True)
class KeyItem:
    index: int
    scale: str
    reversed: bool = False
    stem: str = ""


@dataclass(frozen=True)
class ScoringKey:
    instrument_id: str
    items: tuple[KeyItem, ...]
    scale_bounds: Mapping[str, tuple[int, int]]
    scale_names: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        indices = [it.index for it in self.items]
        if len(set(indices)) != len(indices):
            dupes = sorted({i for i in indices if indices.count(i) > 1})
            raise SchemaError(f"{self.instrument_id}: duplicate item indices {dupes}")
        used = {it.scale for it in self.items}
        declared = set(self.scale_names) or used
        unused = declared - used
        if unused:
            raise SchemaError(f"{self.instrument_id}: scales with no items: {sorted(unused)}")
        missing_bounds = used - set(self.scale_bounds)
        if missing_bounds:
            raise SchemaError(f"{self.instrument_id}: no bounds for {sorted(missing_bounds)}")
        if self.instrument_id.upper().startswith("HEXACO-60"):
            counts = {s: sum(1 for it in self.items if it.scale == s) for s in used}
            if len(self.items) != 60 or len(used) != 6 or set(counts.values()) != {10}:
                raise SchemaError(
                    "HEXACO-60 key must map 60 items onto 6 scales of 10 items each"
                )

    @property
    def scales(self) -> tuple[str, ...]:
        if self.scale_names:
            return tuple(self.scale_names)
        seen: dict[str, None] = {}
        for it in self.items:
            seen.setdefault(it.scale)
        return tuple(seen)

    @property
    def indices(self) -> tuple[int, ...]:
        return tuple(sorted(it.index for it in self.items))

    def items_for(self, scale: str) -> list[KeyItem]:
        return [it for it in self.items if it.scale == scale]

    def reversed_count(self, scale: str) -> int:
        return sum(1 for it in self.items if it.scale == scale and it.reversed)

    def stems(self) -> list[str]:
        return [it.stem for it in sorted(self.items, key=lambda it: it.index)]

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ScoringKey":
        try:
            raw_items = doc["items"]
            instrument = str(doc["instrument_id"])
        except KeyError as exc:
            raise SchemaError(f"key file missing field {exc.args[0]!r}") from None
        items = tuple(
            KeyItem(int(it["index"]), str(it["scale"]), bool(it.get("reversed", False)), it.get("stem", ""))
            for it in raw_items
        )
        names = dict(doc.get("scales", {}))
        scales = names or {it.scale: it.scale for it in items}
        raw_bounds = doc.get("scale_bounds", [1, 5])
        if isinstance(raw_bounds, Mapping):
            bounds = {s: tuple(int(v) for v in raw_bounds.get(s, (1, 5))) for s in scales}
        else:
            lo, hi = (int(v) for v in raw_bounds)
            bounds = {s: (lo, hi) for s in scales}
        for s in {it.scale for it in items}:
            bounds.setdefault(s, (1, 5))
        return cls(instrument, items, bounds, names)

    def to_dict(self) -> dict:
        bounds = set(self.scale_bounds.values())
        return {
            "instrument_id": self.instrument_id,
            "scale_bounds": list(next(iter(bounds))) if len(bounds) == 1 else {k: list(v) for k, v in self.scale_bounds.items()},
            "scales": dict(self.scale_names),
            "items": [
                {"index": it.index, "scale": it.scale, "reversed": it.reversed, "stem": it.stem}
                for it in self.items
            ],
        }

    @classmethod
    def load(cls, path: str | Path) -> "ScoringKey":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _load_packaged(name: str) -> dict:
    return json.loads(resources.files("psypipe").joinpath("data", name).read_text(encoding="utf-8"))


@lru_cache(maxsize=None)
def hexaco_key() -> ScoringKey:
    return ScoringKey.from_dict(_load_packaged("hexaco60_key.json"))


@lru_cache(maxsize=None)
def beyond_key() -> ScoringKey:
    return ScoringKey.from_dict(_load_packaged("beyond_hexaco_key.json"))


def subscales() -> tuple[str, ...]:
    return beyond_key().scales


def reverse_score(response: int, bounds: tuple[int, int] = (1, 5)) -> int:
    """Mirror a Likert response within ``bounds`` (6 - x on the usual 1..5 scale)."""
    lo, hi = bounds
    if isinstance(response, bool) or int(response) != response or not lo <= response <= hi:
        raise RangeError(f"response {response!r} outside {lo}..{hi}")
    return lo + hi - int(response)


def _as_mapping(items: Mapping[int, int] | Sequence[int]) -> Mapping[int, int]:
    if isinstance(items, Mapping):
        return items
    return {i + 1: v for i, v in enumerate(items)}


def aggregate(items: Mapping[int, int] | Sequence[int], key: ScoringKey) -> dict[str, float]:
    """Per-scale means of keyed responses.

    ``items`` is either a mapping from item index to response or a sequence
    read as indices 1..n.
    """
    responses = _as_mapping(items)
    known = set(key.indices)
    unknown = sorted(set(responses) - known)
    if unknown:
        raise KeyMismatchError(f"{key.instrument_id}: unknown item indices {unknown}")
    missing = sorted(known - set(responses))
    if missing:
        raise IncompletenessError(f"{key.instrument_id}: missing item indices {missing}", missing)
    sums: dict[str, int] = {s: 0 for s in key.scales}
    counts: dict[str, int] = {s: 0 for s in key.scales}
    for it in key.items:
        bounds = key.scale_bounds[it.scale]
        value = responses[it.index]
        try:
            mirrored = reverse_score(value, bounds)
        except RangeError:
            raise RangeError(f"item {it.index}: response {value!r} outside {bounds[0]}..{bounds[1]}") from None
        sums[it.scale] += mirrored if it.reversed else int(value)
        counts[it.scale] += 1
    return {s: sums[s] / counts[s] for s in key.scales}


def profile_distance(a: Mapping[str, float], b: Mapping[str, float]) -> dict[str, float]:
    """Signed per-scale deltas ``a - b``."""
    if set(a) != set(b):
        raise KeyMismatchError(f"profiles cover different scales: {sorted(set(a) ^ set(b))}")
    return {k: a[k] - b[k] for k in a}


def items_for_means(
    means: Mapping[str, float], key: ScoringKey, rng: np.random.Generator | None = None
) -> dict[int, int]:
    """Build raw responses whose aggregation reproduces ``means`` on the key's grid.

    Each scale mean is snapped to the nearest achievable value (a multiple of
    1/k for a k-item scale). With ``rng`` the items receiving the larger keyed
    value are chosen at random, otherwise the lowest indices get them.
    """
    out: dict[int, int] = {}
    for scale in key.scales:
        scale_items = sorted(key.items_for(scale), key=lambda it: it.index)
        k = len(scale_items)
        lo, hi = key.scale_bounds[scale]
        total = int(round(float(means[scale]) * k))
        total = min(max(total, lo * k), hi * k)
        base, extra = divmod(total, k)
        order = list(range(k)) if rng is None else list(rng.permutation(k))
        bumped = set(order[:extra])
        for pos, it in enumerate(scale_items):
            keyed = base + 1 if pos in bumped else base
            out[it.index] = lo + hi - keyed if it.reversed else keyed
    return dict(sorted(out.items()))
