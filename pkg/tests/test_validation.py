from collections import Counter

import numpy as np
import pytest
from scipy.stats import chisquare

from conftest import make_gateway
from psypipe import stats
from psypipe import psychometrics as pm
from psypipe.data_model import LsiNarrative
from psypipe.errors import AlignmentError, CapacityError, SchemaError
from psypipe.gateway import ChatResponse, Gateway
from psypipe.pipeline import PersonaPrompt, run_stage1_prompt, run_stage2_narrative
from psypipe.synthetic import (
    SCALES,
    SyntheticPersonaConfig,
    decode_text,
    synth_generate_narrative,
    synth_participants,
    truth_profile,
)
from psypipe.textutil import jaccard, token_set
from psypipe.validation import (
    Lineup,
    build_lineups,
    decompose_bias,
    evaluate_matcher,
    scan_leakage,
    strip_biography,
)

STEMS = [
    "I would be quite bored by a visit to an art gallery",
    "I plan ahead and organize things to avoid scrambling at the last minute",
    "I rarely hold a grudge even against people who have badly wronged me",
    "I feel reasonably satisfied with myself overall",
]


def narrative_with(protocol, sentences, pid="P1"):
    texts = ["Speaking about this part of my life, this is how I remember it."] * 24
    texts[3] = " ".join(sentences)
    return LsiNarrative(pid, "g/x", tuple(zip(protocol.prompt_ids, texts)), 1.0, "")


# masking


def test_strip_removes_biography_block(records, gateway):
    prompt = run_stage1_prompt(records[0], "synthetic/persona", gateway)
    assert "BIOGRAPHY" in prompt.text
    result = strip_biography(prompt, "synthetic/persona#s", "synthetic/persona#v", gateway)
    assert result.passed and result.attempts == 1
    assert "BIOGRAPHY" not in result.text
    for place in ("Halden", "Tromsdal", "Varnek", "Oskby", "Lindqvist", "Marrow"):
        assert place not in result.text


def test_masked_text_keeps_profile(records, gateway):
    config = SyntheticPersonaConfig.default()
    prompt = run_stage1_prompt(records[1], "synthetic/persona", gateway)
    masked = strip_biography(prompt, "synthetic/persona#s", "synthetic/persona#v", gateway)
    assert decode_text(masked.text, config).profile(SCALES) == decode_text(prompt.text, config).profile(SCALES)


def test_planted_name_restrip_then_pass(gateway):
    prompt = PersonaPrompt("P1", "You are someone whose personality is calm. You often visit Ingrid on Sundays.", "g")
    result = strip_biography(prompt, "synthetic/persona#s", "synthetic/persona#v", gateway)
    assert result.passed and result.attempts == 2
    assert "Ingrid" not in result.text


def test_verification_failure_excludes():
    class Stubborn:
        def send(self, request):
            if "verify-masking" in request.messages[0].content:
                return ChatResponse("FAIL: Oslo", request.model_id)
            return ChatResponse("still mentions Oslo", request.model_id)

    gw = Gateway({"stub": Stubborn()})
    result = strip_biography(PersonaPrompt("P1", "lives in Oslo", "g"), "stub/a", "stub/b", gw)
    assert not result.passed and result.text is None and "Oslo" in result.reason


def test_same_model_warns(gateway):
    with pytest.warns(UserWarning):
        strip_biography(PersonaPrompt("P1", "You are someone whose personality is calm.", "g"),
                        "synthetic/persona", "synthetic/persona", gateway)


# lineups


def test_lineup_counts_and_capacity():
    ids = [f"P{i:03d}" for i in range(290)]
    lineups = build_lineups(ids, 3, 5, seed=1)
    assert len(lineups) == 870
    assert all(l.n_options == 5 and l.option_ids[l.correct_index] == l.narrative_ref for l in lineups)
    with pytest.raises(CapacityError):
        build_lineups(ids[:4], 3, 5)


def test_lineups_deterministic():
    ids = [f"P{i}" for i in range(30)]
    assert build_lineups(ids, seed=5) == build_lineups(ids, seed=5)
    assert build_lineups(ids, seed=5) != build_lineups(ids, seed=6)


def test_lineup_uniformity():
    ids = [f"P{i}" for i in range(20)]
    lineups = build_lineups(ids, 50, 5, seed=3)
    positions = Counter(l.correct_index for l in lineups)
    assert all(150 < positions[k] < 250 for k in range(5))
    # distractors are drawn uniformly from the other participants
    appearances = Counter(o for l in lineups for o in l.option_ids if o != l.narrative_ref)
    assert sum(appearances.values()) == 20 * 50 * 4
    assert chisquare([appearances[i] for i in ids]).pvalue > 1e-3


def test_lineup_invariants():
    with pytest.raises(SchemaError):
        Lineup("a", ("a", "a", "b"), 0, 1)
    with pytest.raises(SchemaError):
        Lineup("a", ("b", "a", "c"), 0, 1)


def test_oracle_and_random_matchers(protocol):
    gw = make_gateway()
    config = SyntheticPersonaConfig.default()
    records = synth_participants(40, seed=2, with_bio=False)
    masked = {r.participant_id: run_stage1_prompt(r, "synthetic/persona", gw).text for r in records}
    narratives = {
        r.participant_id: synth_generate_narrative(truth_profile(r), config, r.participant_id, protocol).text
        for r in records
    }
    lineups = build_lineups(sorted(masked), 3, 5, seed=1)
    oracle = evaluate_matcher(lineups, narratives, masked, "synthetic/persona#m", gw)
    assert oracle.accuracy == 1.0 and oracle.p_value < 1e-10
    rand = evaluate_matcher(lineups, narratives, masked, "synthetic/random#m", gw)
    lo, hi = stats.binomial_central_interval(len(lineups), 0.2, 0.99)
    assert lo <= rand.correct <= hi
    with pytest.raises(AlignmentError):
        evaluate_matcher(lineups, {}, masked, "synthetic/random", gw)


# leakage


def test_jaccard_examples():
    assert jaccard(set("abc"), set("bcd")) == 0.5
    assert jaccard(token_set(STEMS[0]), token_set(STEMS[0])) == 1.0


def test_planted_stems_flagged(protocol):
    near = "I plan ahead and organize things so as to avoid scrambling at the last minute"
    assert jaccard(token_set(near), token_set(STEMS[1])) > 0.7
    narrative = narrative_with(protocol, [STEMS[0] + ".", near + ".", "A b c."])
    scan = scan_leakage([narrative], STEMS)
    assert {f.item_index for f in scan.flags} == {1, 2}
    assert scan.flags[0].jaccard == 1.0


def test_below_threshold_not_flagged(protocol):
    scan = scan_leakage([narrative_with(protocol, ["b c d."])], ["a b c"])
    assert scan.flags == ()
    scan = scan_leakage([narrative_with(protocol, ["b c d."])], ["a b c"], threshold=0.4)
    assert scan.flags[0].jaccard == 0.5


def test_empty_sentences_counted(protocol):
    scan = scan_leakage([narrative_with(protocol, ["Fine.", "... !!!"])], STEMS)
    assert scan.skipped >= 1


def test_clean_synthetic_corpus_has_no_flags(protocol):
    config = SyntheticPersonaConfig.default(noise_sd=0.5, valence_jitter=1.0)
    corpus = [synth_generate_narrative(truth_profile(r), config, r.participant_id, protocol)
              for r in synth_participants(20, seed=1)]
    assert scan_leakage(corpus).flags == ()
    assert scan_leakage(corpus, STEMS).flags == ()


# bias


def random_profiles(rng, ids, loc=3.0):
    return {i: {d: float(rng.normal(loc, 0.5)) for d in pm.DOMAINS} for i in ids}


def test_bias_identity_case():
    rng = np.random.default_rng(0)
    ids = [f"P{i}" for i in range(30)]
    truth = random_profiles(rng, ids)
    unc = {d: 3.2 for d in pm.DOMAINS}
    rep = decompose_bias(truth, truth, truth, unc)
    for d in pm.DOMAINS:
        assert rep.stage1[d] == 0 and rep.stage2[d] == 0 and rep.total[d] == 0
        assert rep.stage2a[d] == -rep.stage2b[d]


def test_bias_additivity_random():
    rng = np.random.default_rng(1)
    for _ in range(50):
        ids = [f"P{i}" for i in range(int(rng.integers(1, 60)))]
        rep = decompose_bias(random_profiles(rng, ids), random_profiles(rng, ids, 3.3),
                             random_profiles(rng, ids, 2.7), {d: float(rng.uniform(1, 5)) for d in pm.DOMAINS})
        for d in pm.DOMAINS:
            assert abs(rep.total[d] - (rep.stage1[d] + rep.stage2[d])) <= 1e-12
            assert abs(rep.stage2[d] - (rep.stage2a[d] + rep.stage2b[d])) <= 1e-12


def test_bias_injected_offsets():
    rng = np.random.default_rng(2)
    ids = [f"P{i}" for i in range(50)]
    truth = random_profiles(rng, ids)
    delta, delta2 = 0.37, -0.21
    prompt = {i: dict(p) | {"A": p["A"] + delta} for i, p in truth.items()}
    narrative = {i: dict(p) | {"A": p["A"] + delta2} for i, p in prompt.items()}
    truth_mean_a = sum(p["A"] for p in truth.values()) / len(ids)
    rep = decompose_bias(truth, prompt, narrative, {d: 3.0 for d in pm.DOMAINS} | {"A": truth_mean_a + 0.1})
    assert rep.stage1["A"] == pytest.approx(delta, abs=1e-9)
    assert rep.stage2["A"] == pytest.approx(delta2, abs=1e-9)
    assert rep.total["A"] == pytest.approx(delta + delta2, abs=1e-9)
    assert rep.stage2a["A"] == pytest.approx(0.1, abs=1e-9)
    assert rep.stage2b["A"] == pytest.approx(delta2 - 0.1, abs=1e-9)
    for d in pm.DOMAINS:
        if d != "A":
            assert abs(rep.stage1[d]) < 1e-12 and abs(rep.stage2[d]) < 1e-12


def test_bias_alignment():
    truth = {"a": {d: 3.0 for d in pm.DOMAINS}}
    with pytest.raises(AlignmentError):
        decompose_bias(truth, {}, truth, {d: 3.0 for d in pm.DOMAINS})
