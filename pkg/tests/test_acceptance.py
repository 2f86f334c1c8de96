"""Acceptance suite: one test per primary criterion, each printing a pass/fail line."""
import math
import time

import numpy as np
import pytest

import oracles
from conftest import make_gateway
from criteria import record
from psypipe import content, report, stats, validation
from psypipe import psychometrics as pm
from psypipe.data_model import LsiNarrative, LsiProtocol
from psypipe.pipeline import PersonaPrompt, Pipeline, PipelineConfig, RecoveredScores, successes
from psypipe.study import StudyConfig, run_synthetic_study
from psypipe.synthetic import (
    SyntheticPersonaConfig,
    synth_generate_narrative,
    synth_participants,
    synth_score_narrative,
    truth_profile,
)
from psypipe.textutil import jaccard, token_set
from test_psychometrics import brute_force_domains
from test_stats import SHROUT_FLEISS

SPREAD = 0.5


def domain_rs(truth, recovered):
    return {d: stats.pearson([t[d] for t in truth], [r[d] for r in recovered]).r for d in pm.DOMAINS}


def test_scoring_key_oracle(hexaco):
    rng = np.random.default_rng(1)
    vectors = rng.integers(1, 6, size=(1000, 60)).tolist()
    start = time.perf_counter()
    got = [pm.aggregate(v, hexaco) for v in vectors]
    midpoint = pm.aggregate([3] * 60, hexaco)
    elapsed = time.perf_counter() - start
    mismatches = sum(g != brute_force_domains(v) for g, v in zip(got, vectors))
    ok = mismatches == 0 and midpoint == {d: 3.0 for d in pm.DOMAINS} and elapsed < 1.0
    assert record("scoring-key oracle", ok, f"1000 vectors, {mismatches} mismatches, all-3s -> 3.0, {elapsed:.3f}s")


def test_statistics_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = {"pearson": 0.0, "spearman": 0.0, "t_tail": 0.0, "fisher": 0.0, "icc": 0.0, "binomial": 0.0}
    cases = {k: 0 for k in worst}
    for i in range(24):
        n = int(rng.integers(5, 80))
        x = rng.normal(size=n)
        y = rng.uniform(-1, 1) * x + rng.normal(size=n)
        if i % 3 == 0:
            x, y = np.round(x), np.round(y * 2) / 2
        x, y = x.tolist(), y.tolist()
        res = stats.pearson(x, y)
        worst["pearson"] = max(worst["pearson"], abs(res.r - oracles.pearson_loop(x, y)))
        t = res.r * math.sqrt((n - 2) / (1 - res.r**2))
        worst["t_tail"] = max(worst["t_tail"], abs(res.p_two_tailed - oracles.t_tail_two_sided(t, n - 2)))
        rho = oracles.pearson_loop(oracles.midranks(x), oracles.midranks(y))
        worst["spearman"] = max(worst["spearman"], abs(stats.spearman(x, y).r - rho))
        r, m = float(rng.uniform(-0.99, 0.99)), int(rng.integers(4, 3000))
        worst["fisher"] = max(worst["fisher"], max(map(abs, np.subtract(stats.fisher_ci(r, m), oracles.fisher_closed_form(r, m)))))
        mat = (rng.normal(size=(int(rng.integers(2, 40)), 1)) + rng.normal(size=(1, int(rng.integers(2, 6))))
               + rng.normal(size=(1, 1))).tolist()
        mat = [[v + float(rng.normal()) for v in row] for row in mat]
        worst["icc"] = max(worst["icc"], abs(stats.icc_2_1(mat).icc - oracles.icc21_loop(mat)))
        trials = int(rng.integers(1, 150))
        k = int(rng.integers(0, trials + 1))
        p0 = float(rng.choice([0.2, 0.5, 0.3, 0.05]))
        worst["binomial"] = max(worst["binomial"], abs(stats.binomial_test(k, trials, p0) - oracles.binom_minlike(k, trials, p0)))
        for key in cases:
            cases[key] += 1
    worst["icc"] = max(worst["icc"], abs(stats.icc_2_1(SHROUT_FLEISS).icc - oracles.icc21_loop(SHROUT_FLEISS)))
    elapsed = time.perf_counter() - start
    bonf = stats.bonferroni(0.05, 15)
    ok = (
        all(v <= 1e-9 for k, v in worst.items() if k != "t_tail")
        and worst["t_tail"] <= 1e-6
        and min(cases.values()) >= 20
        and abs(bonf - 0.05 / 15) < 1e-15 and round(bonf, 4) == 0.0033
        and elapsed < 5.0
    )
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert record("statistics oracles", ok, f"{min(cases.values())} cases each, max abs error: {detail}; "
                                            f"bonferroni(0.05,15)={bonf:.6f}; {elapsed:.2f}s")


def test_zero_noise_round_trip(tmp_path):
    records = synth_participants(300, seed=21, spread=SPREAD)
    start = time.perf_counter()
    pipe = Pipeline(PipelineConfig(seed=21, concurrency=4), make_gateway(), tmp_path)
    stages = pipe.round_trip(records)
    elapsed = time.perf_counter() - start
    scores = successes(stages["score"], RecoveredScores)
    rs = domain_rs([r.domain_means for r in records], [scores[r.participant_id].domain_means for r in records])
    ok = len(scores) == 300 and min(rs.values()) >= 0.99 and elapsed < 30
    assert record("zero-noise round trip", ok, f"N=300, min domain r {min(rs.values()):.4f}, {elapsed:.1f}s")


def test_synthetic_attenuation(protocol):
    start = time.perf_counter()
    lines, ok = [], True
    for sigma in (0.25, 0.5, 1.0):
        target = SPREAD / math.sqrt(SPREAD**2 + sigma**2)
        means, covered = [], 0
        for draw in range(50):
            records = synth_participants(300, seed=derive(sigma, draw), spread=SPREAD, with_bio=False)
            config = SyntheticPersonaConfig.default(noise_sd=sigma, seed=draw)
            truth = [r.domain_means for r in records]
            rec = [
                synth_score_narrative(synth_generate_narrative(truth_profile(r), config, r.participant_id, protocol), config).domain_means
                for r in records
            ]
            boot = stats.bootstrap_mean_r(truth, rec, seed=draw)
            means.append(boot.mean_r)
            covered += boot.ci_low <= target <= boot.ci_high
        mean_r = float(np.mean(means))
        ok &= abs(mean_r - target) <= 0.05 and covered >= 45
        lines.append(f"sigma {sigma}: mean r {mean_r:.3f} vs {target:.3f}, CI coverage {covered}/50")
    elapsed = time.perf_counter() - start
    ok &= elapsed < 300
    assert record("synthetic attenuation", ok, "; ".join(lines) + f"; {elapsed:.0f}s")


def derive(sigma, draw):
    return int(sigma * 1000) * 1000 + draw


def test_ceiling_ordering(tmp_path):
    results, ok = [], True
    for sigma in (0.25, 0.5, 1.0):
        for seed in (1, 2, 3):
            records = synth_participants(60, seed=seed, spread=SPREAD)
            cfg = PipelineConfig(seed=seed, synthetic={"noise_sd": sigma})
            pipe = Pipeline(cfg, make_gateway(noise_sd=sigma), tmp_path / f"{sigma}-{seed}")
            stages = pipe.round_trip(records)
            scores = successes(stages["score"], RecoveredScores)
            ceiling = successes(stages["ceiling"], RecoveredScores)
            truth = [r.domain_means for r in records]
            narrative_r = np.mean(list(domain_rs(truth, [scores[r.participant_id].domain_means for r in records]).values()))
            ceiling_r = np.mean(list(domain_rs(truth, [ceiling[r.participant_id].domain_means for r in records]).values()))
            ok &= ceiling_r >= narrative_r
            results.append(ceiling_r - narrative_r)
    assert record("ceiling ordering", ok, f"9 noisy corpora, ceiling - narrative mean r in "
                                          f"[{min(results):.3f}, {max(results):.3f}]")


def test_bias_decomposition():
    rng = np.random.default_rng(5)
    worst_add = 0.0
    for _ in range(200):
        ids = [f"P{i}" for i in range(int(rng.integers(1, 100)))]
        prof = lambda loc: {i: {d: float(rng.normal(loc, 0.7)) for d in pm.DOMAINS} for i in ids}
        rep = validation.decompose_bias(prof(3), prof(3.4), prof(2.8), {d: float(rng.uniform(1, 5)) for d in pm.DOMAINS})
        for d in pm.DOMAINS:
            worst_add = max(worst_add, abs(rep.total[d] - rep.stage1[d] - rep.stage2[d]),
                            abs(rep.stage2[d] - rep.stage2a[d] - rep.stage2b[d]))
    records = synth_participants(80, seed=3)
    truth = {r.participant_id: r.domain_means for r in records}
    worst_off = 0.0
    for d in pm.DOMAINS:
        delta, delta2, rest = float(rng.uniform(-1, 1)), float(rng.uniform(-1, 1)), float(rng.uniform(-1, 1))
        prompt = {i: dict(p) | {d: p[d] + delta} for i, p in truth.items()}
        narrative = {i: dict(p) | {d: p[d] + delta2} for i, p in prompt.items()}
        mean_truth = {x: math.fsum(p[x] for p in truth.values()) / len(truth) for x in pm.DOMAINS}
        unconditioned = {x: mean_truth[x] + (rest if x == d else 0.0) for x in pm.DOMAINS}
        rep = validation.decompose_bias(truth, prompt, narrative, unconditioned)
        worst_off = max(worst_off, abs(rep.stage1[d] - delta), abs(rep.stage2[d] - delta2),
                        abs(rep.stage2a[d] - rest), abs(rep.stage2b[d] - (delta2 - rest)))
        for other in pm.DOMAINS:
            if other != d:
                worst_off = max(worst_off, abs(rep.stage1[other]), abs(rep.stage2[other]), abs(rep.stage2a[other]))
    ok = worst_add <= 1e-12 and worst_off <= 1e-9
    assert record("bias decomposition", ok, f"additivity max error {worst_add:.1e} over 200 random inputs; "
                                            f"injected offsets max error {worst_off:.1e}")


PLANT_STEMS = [
    "I usually remember the birthdays of my closest friends and family",
    "When I am under pressure I tend to snap at the people around me",
    "I would rather spend a quiet evening reading than go to a crowded party",
    "I often question rules that do not seem to make any sense to me",
    "I am careful to double check my work before I hand it in",
    "It bothers me a great deal when someone takes credit for my ideas",
    "I find it easy to start a conversation with a complete stranger",
    "I try to keep my promises even when they become inconvenient",
    "Sad films and stories can move me to tears quite easily",
    "I enjoy learning how complicated machines and systems actually work",
]


def near_variants(stem, rng):
    tokens = stem.split()
    extra = tokens[:] + ["honestly"]
    swapped = tokens[:]
    swapped[int(rng.integers(1, len(tokens)))] = "really"
    return [" ".join(extra), " ".join(swapped)]


def test_leakage_scanner(protocol):
    rng = np.random.default_rng(9)
    config = SyntheticPersonaConfig.default(noise_sd=0.5, valence_jitter=1.0)
    records = synth_participants(60, seed=8)
    corpus = [synth_generate_narrative(truth_profile(r), config, r.participant_id, protocol) for r in records]
    placeholder_stems = pm.hexaco_key().stems()
    clean_flags = len(validation.scan_leakage(corpus).flags) + len(validation.scan_leakage(corpus, PLANT_STEMS).flags)

    planted = {}
    stems = PLANT_STEMS + placeholder_stems[:5]
    for k, stem in enumerate(stems):
        for variant in [stem] + near_variants(stem, rng):
            assert jaccard(token_set(variant), token_set(stem)) > 0.7
            planted[(f"P{k:02d}-{len(planted)}", variant)] = k + 1
    planted_corpus = list(corpus)
    for n, ((ref, sentence), item) in enumerate(planted.items()):
        base = corpus[n % len(corpus)]
        sections = list(base.sections)
        j = int(rng.integers(24))
        sections[j] = (sections[j][0], sections[j][1] + " " + sentence + ".")
        planted_corpus.append(LsiNarrative(ref, base.generator_id, tuple(sections), 1.0, ""))
    scan = validation.scan_leakage(planted_corpus, stems)
    hits = {(f.narrative_ref, f.item_index) for f in scan.flags}
    recalled = sum((ref, item) in hits for (ref, _), item in planted.items())
    false_flags = len(scan.flags) - recalled
    ok = recalled == len(planted) and clean_flags == 0 and false_flags == 0
    assert record("leakage scanner", ok, f"recall {recalled}/{len(planted)} (verbatim and near-verbatim), "
                                         f"{false_flags} extra flags, clean corpus flags {clean_flags}")


def test_matching_harness(tmp_path, protocol):
    records = synth_participants(290, seed=13, spread=SPREAD)
    gw = make_gateway()
    pipe = Pipeline(PipelineConfig(seed=13), gw, tmp_path)
    persona = successes(pipe.prompts(records), PersonaPrompt)
    narratives = successes(pipe.narratives(persona), LsiNarrative)
    masks = {pid: validation.strip_biography(p, "synthetic/persona#strip", "synthetic/persona#verify", gw)
             for pid, p in persona.items()}
    masked = {pid: m.text for pid, m in masks.items() if m.passed}
    ids = sorted(set(masked) & set(narratives))
    lineups = validation.build_lineups(ids, 3, 5, seed=13)
    deterministic = lineups == validation.build_lineups(ids, 3, 5, seed=13)
    texts = {pid: narratives[pid].text for pid in ids}
    oracle = validation.evaluate_matcher(lineups, texts, masked, "synthetic/persona#match", gw)
    rand = validation.evaluate_matcher(lineups, texts, masked, "synthetic/random#match", gw)
    lo, hi = stats.binomial_central_interval(len(lineups), 0.2, 0.99)
    ok = len(lineups) == 870 and oracle.accuracy == 1.0 and lo <= rand.correct <= hi and deterministic
    assert record("matching harness", ok, f"{len(lineups)} trials; oracle {oracle.correct}/{oracle.trials}; "
                                          f"random {rand.correct} in 99% band [{lo}, {hi}]; "
                                          f"lineups deterministic: {deterministic}")


def test_reliability():
    rng = np.random.default_rng(17)
    subjects = rng.normal(3, 1, size=200)
    identical = stats.icc_2_1(np.column_stack([subjects] * 3)).icc
    random_icc = stats.icc_2_1(rng.integers(1, 6, size=(200, 3)).astype(float)).icc
    base = rng.integers(1, 6, size=30).astype(float)
    offset = np.column_stack([base, base + 1, base + 2])
    offset_icc = stats.icc_2_1(offset).icc
    exact = oracles.icc21_loop(offset.tolist())
    ok = abs(identical - 1.0) < 1e-12 and abs(random_icc) <= 0.15 and abs(offset_icc - exact) <= 1e-12 and offset_icc < 1
    assert record("reliability", ok, f"identical {identical:.6f}; random (200 units) {random_icc:+.3f}; "
                                     f"offset raters {offset_icc:.6f} vs ANOVA oracle {exact:.6f}")


def test_reactivity_construction(protocol):
    rubric = content.FeatureRubric.load()
    outcomes_, ok = [], True
    for seed in (1, 2, 3):
        config = SyntheticPersonaConfig.default(noise_sd=0.3, valence_jitter=1.0, annotator_noise_sd=0.3, seed=seed)
        gw = make_gateway(noise_sd=0.3, valence_jitter=1.0, annotator_noise_sd=0.3, seed=seed)
        records = synth_participants(80, seed=seed, spread=SPREAD)
        narratives = [synth_generate_narrative(truth_profile(r), config, r.participant_id, protocol) for r in records]
        units = content.narrative_units(narratives)
        run = content.code_units(units, rubric, ["synthetic/persona#a", "synthetic/persona#b"], gw, seed=seed)
        result = content.reactivity_analysis(content.section_series(units, run.codings),
                                             {r.participant_id: r.domain_means for r in records})
        r_sd, r_mean = result.r_sd_emotionality.r, result.r_mean_emotionality.r
        ok &= r_sd > 0 and abs(r_sd) > abs(r_mean)
        outcomes_.append(f"r_sd {r_sd:+.3f} / r_mean {r_mean:+.3f}")
    assert record("reactivity construction", ok, "; ".join(outcomes_))


def test_determinism(tmp_path):
    config = PipelineConfig(seed=2024, synthetic={"noise_sd": 0.3, "valence_jitter": 1.0, "annotator_noise_sd": 0.3})
    study = StudyConfig(n_participants=40, n_resamples=1000)
    paths = []
    for k in ("a", "b"):
        bundle = run_synthetic_study(config, tmp_path / k / "runs", study)
        paths.append(report.emit(bundle, tmp_path / k))
    same = all(a.read_bytes() == b.read_bytes() for a, b in zip(*paths))
    size = sum(p.stat().st_size for p in paths[0])
    assert record("determinism", same, f"two full synthetic runs with seed 2024 -> byte-identical reports ({size} bytes)")
