"""Signal-validation controls: masked matching, leakage scanning, and bias decomposition."""
from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import kernels, prompts
from . import psychometrics as pm
from .data_model import LsiNarrative, derive_seed
from .errors import AlignmentError, CapacityError, RangeError, SchemaError
from .gateway import ChatRequest, Gateway
from .stats import binomial_test
from .textutil import split_sentences, tokenize

log = logging.getLogger(__name__)


# Biography masking -----------------------------------------------------------

@dataclass(frozen=True)
class MaskResult:
    participant_id: str
    text: str | None
    passed: bool
    attempts: int
    flagged: tuple[str, ...] = ()

    @property
    def reason(self) -> str:
        return "" if self.passed else "biography verification failed: " + ", ".join(self.flagged)


def strip_biography(
    prompt,
    stripper: str,
    verifier: str,
    gateway: Gateway,
    seed: int | None = None,
    temperature: float = 0.0,
) -> MaskResult:
    """Remove biographical detail from a persona prompt and have a second model verify it.

    A failed verification triggers one re-strip that names the flagged
    details; a second failure marks the participant as excluded.
    """
    if not prompt.text.strip():
        raise SchemaError(f"{prompt.participant_id}: empty persona prompt")
    if stripper == verifier:
        warnings.warn("stripper and verifier are the same model; verification is not independent", stacklevel=2)

    def ask(model, messages):
        return gateway.complete(ChatRequest(model, tuple(messages), temperature, seed=seed)).text

    masked = ask(stripper, prompts.strip_messages(prompt.text)).strip()
    flagged: list[str] = []
    for attempt in (1, 2):
        ok, flagged = prompts.parse_verdict(ask(verifier, prompts.verify_messages(masked)))
        if ok:
            return MaskResult(prompt.participant_id, masked, True, attempt)
        if attempt == 1:
            masked = ask(stripper, prompts.strip_messages(masked, flagged)).strip()
    return MaskResult(prompt.participant_id, None, False, 2, tuple(flagged))


# Lineups ---------------------------------------------------------------------

@dataclass(frozen=True)
class Lineup:
    narrative_ref: str
    option_ids: tuple[str, ...]
    correct_index: int
    lineup_seed: int

    def __post_init__(self):
        ids = tuple(self.option_ids)
        if len(set(ids)) != len(ids):
            raise SchemaError(f"lineup for {self.narrative_ref}: repeated options")
        if ids.count(self.narrative_ref) != 1 or ids[self.correct_index] != self.narrative_ref:
            raise SchemaError(f"lineup for {self.narrative_ref}: correct option misplaced")
        object.__setattr__(self, "option_ids", ids)

    @property
    def n_options(self) -> int:
        return len(self.option_ids)

    def to_dict(self) -> dict:
        return {
            "narrative_ref": self.narrative_ref,
            "option_ids": list(self.option_ids),
            "correct_index": self.correct_index,
            "lineup_seed": self.lineup_seed,
        }


def build_lineups(
    participants: Sequence[str],
    lineups_per_participant: int = 3,
    options: int = 5,
    seed: int = 0,
) -> list[Lineup]:
    """Forced-choice lineups: each participant's own profile among distinct random distractors."""
    ids = list(participants)
    if len(set(ids)) != len(ids):
        raise SchemaError("participant ids must be unique")
    if options < 2:
        raise RangeError("a lineup needs at least 2 options")
    if len(ids) < options:
        raise CapacityError(f"{len(ids)} participants cannot fill {options}-option lineups")
    out = []
    for pos, pid in enumerate(ids):
        others = ids[:pos] + ids[pos + 1 :]
        for j in range(lineups_per_participant):
            lseed = derive_seed(seed, "lineup", pid, j)
            rng = np.random.default_rng(lseed)
            picks = [others[k] for k in rng.choice(len(others), size=options - 1, replace=False)]
            correct = int(rng.integers(options))
            picks.insert(correct, pid)
            out.append(Lineup(pid, tuple(picks), correct, lseed))
    return out


@dataclass(frozen=True)
class MatchResult:
    matcher: str
    trials: int
    correct: int
    unparseable: int
    accuracy: float
    p_value: float
    picks: tuple[int | None, ...]
    chance: float

    def summary(self) -> dict:
        return {
            "matcher": self.matcher,
            "trials": self.trials,
            "correct": self.correct,
            "unparseable": self.unparseable,
            "accuracy": self.accuracy,
            "chance": self.chance,
            "p_value": self.p_value,
        }


def evaluate_matcher(
    lineups: Sequence[Lineup],
    narratives: Mapping[str, str],
    masked: Mapping[str, str],
    matcher: str,
    gateway: Gateway,
    concurrency: int = 4,
    temperature: float = 0.0,
) -> MatchResult:
    """Run every lineup through ``matcher``; unparseable answers count as wrong."""
    if not lineups:
        raise CapacityError("no lineups to evaluate")
    n_options = lineups[0].n_options
    if any(l.n_options != n_options for l in lineups):
        raise SchemaError("all lineups must have the same number of options")
    absent = sorted({i for l in lineups for i in l.option_ids if i not in masked} | {l.narrative_ref for l in lineups if l.narrative_ref not in narratives})
    if absent:
        raise AlignmentError(f"lineups reference participants without texts: {absent[:10]}")

    def trial(lineup: Lineup) -> int | None:
        messages = prompts.match_messages(narratives[lineup.narrative_ref], [masked[i] for i in lineup.option_ids])
        reply = gateway.complete(ChatRequest(matcher, tuple(messages), temperature, seed=lineup.lineup_seed)).text
        return prompts.parse_pick(reply, n_options)

    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        picks = tuple(pool.map(trial, lineups))
    correct = sum(1 for l, p in zip(lineups, picks) if p == l.correct_index)
    unparseable = sum(1 for p in picks if p is None)
    trials = len(lineups)
    chance = 1.0 / n_options
    return MatchResult(matcher, trials, correct, unparseable, correct / trials,
                       binomial_test(correct, trials, chance), picks, chance)


# Leakage ---------------------------------------------------------------------

@dataclass(frozen=True)
class LeakageFlag:
    narrative_ref: str
    prompt_id: str
    sentence: str
    item_index: int
    jaccard: float


@dataclass(frozen=True)
class LeakageScan:
    flags: tuple[LeakageFlag, ...]
    sentences: int
    skipped: int
    threshold: float


def _csr(token_sets: Sequence[Iterable[str]], vocab: dict[str, int]) -> tuple[np.ndarray, np.ndarray]:
    ptr = [0]
    tok: list[int] = []
    for tokens in token_sets:
        ids = sorted({vocab.setdefault(t, len(vocab)) for t in tokens})
        tok.extend(ids)
        ptr.append(len(tok))
    return np.asarray(ptr, dtype=np.int32), np.asarray(tok, dtype=np.int32)


def scan_leakage(
    narratives: Iterable[LsiNarrative],
    item_stems: Sequence[str] | None = None,
    threshold: float = 0.7,
    item_indices: Sequence[int] | None = None,
) -> LeakageScan:
    """Flag narrative sentences whose token-set Jaccard with some item stem exceeds ``threshold``.

    Each sentence is compared with every stem and reported against its best
    match (lowest item index on ties). Flags come back sorted by Jaccard,
    highest first.
    """
    stems = list(item_stems if item_stems is not None else pm.hexaco_key().stems())
    if not stems:
        raise SchemaError("no item stems to scan against")
    indices = list(item_indices) if item_indices is not None else list(range(1, len(stems) + 1))
    vocab: dict[str, int] = {}
    stem_ptr, stem_tok = _csr([set(tokenize(s)) for s in stems], vocab)
    where: list[tuple[str, str, str]] = []
    token_sets = []
    skipped = 0
    for narrative in narratives:
        for prompt_id, text in narrative.sections:
            for sentence in split_sentences(text):
                tokens = set(tokenize(sentence))
                if not tokens:
                    skipped += 1
                    continue
                where.append((narrative.participant_id, prompt_id, sentence))
                token_sets.append(tokens)
    flags = []
    if token_sets:
        sent_ptr, sent_tok = _csr(token_sets, vocab)
        best, value = kernels.jaccard_best(sent_ptr, sent_tok, stem_ptr, stem_tok)
        for k in np.flatnonzero(value > threshold):
            ref, pid, sentence = where[k]
            flags.append(LeakageFlag(ref, pid, sentence, indices[int(best[k])], float(value[k])))
    flags.sort(key=lambda f: (-f.jaccard, f.narrative_ref, f.prompt_id, f.sentence))
    return LeakageScan(tuple(flags), len(token_sets), skipped, threshold)


# Bias decomposition ------------------------------------------------------------

@dataclass(frozen=True)
class BiasReport:
    """Per-domain additive bias stages.

    stage1 = prompt - truth, stage2 = narrative - prompt, stage2a = resting
    bias (unconditioned - sample truth mean), stage2b = stage2 - stage2a,
    total = narrative - truth.
    """

    stage1: Mapping[str, float]
    stage2: Mapping[str, float]
    stage2a: Mapping[str, float]
    stage2b: Mapping[str, float]
    total: Mapping[str, float]
    n: int
    generator_id: str = ""
    scorer_id: str = ""

    def check(self, tol: float = 1e-12) -> None:
        for d in self.total:
            if abs(self.total[d] - (self.stage1[d] + self.stage2[d])) > tol:
                raise AssertionError(f"{d}: total != stage1 + stage2")
            if abs(self.stage2[d] - (self.stage2a[d] + self.stage2b[d])) > tol:
                raise AssertionError(f"{d}: stage2 != stage2a + stage2b")

    def rows(self) -> list[dict]:
        return [
            {"domain": d, "stage1": self.stage1[d], "stage2": self.stage2[d], "stage2a": self.stage2a[d],
             "stage2b": self.stage2b[d], "total": self.total[d]}
            for d in self.total
        ]


def _mean_diff(a: Mapping[str, Mapping[str, float]], b: Mapping[str, Mapping[str, float]], d: str, ids) -> float:
    return math.fsum(a[i][d] - b[i][d] for i in ids) / len(ids)


def decompose_bias(
    truth: Mapping[str, Mapping[str, float]],
    prompt_scored: Mapping[str, Mapping[str, float]],
    narrative_scored: Mapping[str, Mapping[str, float]],
    unconditioned: Mapping[str, float],
    domains: Sequence[str] = pm.DOMAINS,
    generator_id: str = "",
    scorer_id: str = "",
) -> BiasReport:
    ids = set(truth)
    if set(prompt_scored) != ids or set(narrative_scored) != ids:
        diff = sorted((ids ^ set(prompt_scored)) | (ids ^ set(narrative_scored)))
        raise AlignmentError(f"participant sets differ: {diff[:10]}")
    if not ids:
        raise AlignmentError("no participants to decompose")
    ids = sorted(ids)
    stage1, stage2, stage2a, stage2b, total = {}, {}, {}, {}, {}
    for d in domains:
        stage1[d] = _mean_diff(prompt_scored, truth, d, ids)
        stage2[d] = _mean_diff(narrative_scored, prompt_scored, d, ids)
        total[d] = _mean_diff(narrative_scored, truth, d, ids)
        stage2a[d] = unconditioned[d] - math.fsum(truth[i][d] for i in ids) / len(ids)
        stage2b[d] = stage2[d] - stage2a[d]
    report = BiasReport(stage1, stage2, stage2a, stage2b, total, len(ids), generator_id, scorer_id)
    report.check()
    return report
