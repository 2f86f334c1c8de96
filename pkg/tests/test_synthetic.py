import re

import numpy as np
import pytest

from psypipe import psychometrics as pm
from psypipe.data_model import LsiNarrative
from psypipe.errors import SchemaError, SyntheticDecodeError
from psypipe.synthetic import (
    NARRATIVE_SIGNATURE,
    SCALES,
    SyntheticPersonaConfig,
    decode_text,
    encode_count,
    flag_capitalized,
    persona_text,
    section_text,
    synth_conversations,
    synth_generate_narrative,
    synth_participants,
    synth_score_narrative,
    truth_profile,
)


@pytest.fixture(scope="module")
def config():
    return SyntheticPersonaConfig.default()


def flat(value=3.0, **kw):
    return {s: value for s in SCALES} | kw


def test_extraversion_five_encodes_net_count(config, protocol):
    narrative = synth_generate_narrative(flat(EX=5.0), config, protocol=protocol)
    high, low = config.poles("EX")
    for _, text in narrative.sections:
        words = re.findall(r"[a-z]+", text.lower())
        net = sum(w in high for w in words) - sum(w in low for w in words)
        assert net == 20 == encode_count(5.0)
        assert decode_text(text, config).level("EX") == 5.0


def test_same_seed_same_narrative(config):
    profile = flat(HH=2.4, OP=4.1)
    noisy = SyntheticPersonaConfig.default(noise_sd=0.4, seed=5)
    assert synth_generate_narrative(profile, noisy, "P1") == synth_generate_narrative(profile, noisy, "P1")
    assert synth_generate_narrative(profile, noisy, "P1") != synth_generate_narrative(profile, noisy, "P2")


def test_zero_noise_recovers_rounded_profile(config, records):
    for rec in records:
        truth = truth_profile(rec)
        scores = synth_score_narrative(synth_generate_narrative(truth, config, rec.participant_id), config)
        for d in pm.DOMAINS:
            assert scores.domain_means[d] == pytest.approx(round(truth[d], 1), abs=1e-9)
        for s, v in scores.subscale_means.items():
            assert abs(v - truth[s]) <= 0.1 + 1e-9


def test_all_zero_markers_decode_to_midpoint(config):
    text = " ".join(section_text(config, {}) for _ in range(24))
    decoded = decode_text(text, config)
    assert decoded.units == 24
    assert decoded.profile(SCALES) == {s: 3.0 for s in SCALES}


def test_unrecognized_text_raises(config):
    with pytest.raises(SyntheticDecodeError):
        decode_text("I was born in a small town and liked football.", config)
    assert decode_text("anything at all", config, strict=False).units == 1


def test_lexicon_disjoint_and_templates_clean(config):
    markers = config.markers
    lists = [set(w) for s in config.scales for w in config.poles(s)] + [set(w) for w in config.poles("valence")]
    assert sum(len(x) for x in lists) == len(set().union(*lists))
    template_words = set(re.findall(r"[a-z]+", section_text(config, {}).lower()))
    template_words |= set(re.findall(r"[a-z]+", "people who know me would call me with other people i come across as the memory feels"))
    assert not template_words & markers
    bare = persona_text(config, flat())
    assert not set(re.findall(r"[a-z]+", bare.lower())) & markers


def test_config_rejects_overlap():
    base = SyntheticPersonaConfig.default()
    lexicon = dict(base.lexicon)
    lexicon["HH"] = (base.lexicon["EX"][0], base.lexicon["HH"][1])
    with pytest.raises(SchemaError):
        SyntheticPersonaConfig(lexicon, base.subscale_lexicon, base.valence_lexicon)


def test_missing_domain_rejected(config):
    with pytest.raises(SchemaError):
        synth_generate_narrative({"HH": 3.0}, config)


def test_persona_text_decodes(config, records):
    truth = truth_profile(records[0])
    text = persona_text(config, truth, records[0].bio_facts)
    decoded = decode_text(text, config).profile(SCALES)
    for s in SCALES:
        assert abs(decoded[s] - truth[s]) <= 0.05 + 1e-9
    assert "BIOGRAPHY" in text and NARRATIVE_SIGNATURE not in text.lower()


def test_flag_capitalized(config, records):
    text = persona_text(config, truth_profile(records[0]), records[0].bio_facts)
    flagged = flag_capitalized(text)
    assert "BIOGRAPHY" in flagged
    assert any(name in flagged for name in ("Halden", "Tromsdal", "Varnek", "Oskby", "Lindqvist", "Marrow", "Ingrid", "Tomas", "Selma", "Arvid", "Klara", "Nils"))
    assert flag_capitalized(persona_text(config, truth_profile(records[0]))) == []


def test_participants_deterministic_and_spread():
    a = synth_participants(200, seed=3, spread=0.5)
    assert a == synth_participants(200, seed=3, spread=0.5)
    assert [r.participant_id for r in a[:2]] == ["P001", "P002"]
    sd = np.std([r.domain_means["C"] for r in a], ddof=1)
    assert 0.4 < sd < 0.6
    assert synth_participants(3, with_bio=False)[0].bio_facts == ()


def test_conversations_cover_everyone(config, records):
    convos = synth_conversations(records, config, per_participant=3)
    counts = {r.participant_id: 0 for r in records}
    for c in convos:
        for p in c.participants:
            counts[p] += 1
        assert [t[0] for t in c.turns[:2]] == list(c.participants)
    assert min(counts.values()) >= 3


def test_noise_is_one_draw_per_scale(protocol):
    noisy = SyntheticPersonaConfig.default(noise_sd=0.5, seed=1)
    narrative = synth_generate_narrative(flat(), noisy, "P1", protocol)
    # every section carries the same counts when valence jitter is off
    assert len({text for _, text in narrative.sections}) == 1
    assert isinstance(narrative, LsiNarrative)
