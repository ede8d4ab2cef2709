import numpy as np
import pytest

from kgreason.fari import RuleClass, Tag, ground_rule, score_by_grounding
from kgreason.kg import Query, Scenario, load_dataset
from kgreason.synth import SynthSpec, synth_kg, write_tsv
from kgreason.training import build_filter, query_filter, rank_of


@pytest.mark.parametrize("rules", [[(3, [1, 9])], [(3, [])], [(2, [1, 2])], [(8, [0])]])
def test_inconsistent_specs_are_rejected(rules):
    with pytest.raises(ValueError):
        synth_kg(SynthSpec(n_relations=8, rules=rules))


def test_noise_out_of_range():
    with pytest.raises(ValueError):
        synth_kg(SynthSpec(noise=1.0))


def test_noise_free_answers_have_length_two_witnesses():
    skg = synth_kg(SynthSpec(n_relations=3, rules=[(2, [0, 1])], noise=0.0), 1)
    rule = skg.rules[0]
    assert rule.relations == (0, 1)
    for q in skg.splits.test:
        if q.r != 2:
            continue
        witnesses = dict(ground_rule(rule, skg.kg, q))
        assert q.label in witnesses
        (s, r1, y, _), (y2, r2, o, _) = witnesses[q.label]
        assert (s, r1, r2, o) == (q.s, 0, 1, q.label) and y == y2


def test_noise_free_graph_has_no_head_facts_outside_the_rules():
    skg = synth_kg(SynthSpec(n_relations=3, rules=[(2, [0, 1])], noise=0.0), 2)
    entailed = {tuple(f) for f in skg.entailed.tolist()}
    for f in skg.facts["train"].tolist():
        if f[1] == 2:
            assert tuple(f) in entailed


def test_temporal_entailments_respect_order():
    skg = synth_kg(SynthSpec(temporal=True), 0)
    assert skg.scenario == Scenario.TKG_E
    assert all(r.cls == RuleClass.TEH for r in skg.rules)
    assert skg.rules[0].body[0][1] == Tag.UNCONSTRAINED and skg.rules[0].body[1][1] == Tag.GE_PREV
    rules = {r.head: r for r in skg.rules}
    for s, h, o, t in skg.entailed.tolist():
        q = Query(s, h, t, Scenario.TKG_E, o)
        witnesses = dict(ground_rule(rules[h], skg.kg, q))
        assert o in witnesses
        times = [f[3] for f in witnesses[o]]
        assert times == sorted(times) and times[-1] < t


def test_held_out_facts_are_absent_from_training_graph():
    skg = synth_kg(SynthSpec(), 0)
    train = {tuple(f) for f in skg.facts["train"].tolist()}
    for split in ("valid", "test"):
        assert not train & {tuple(f) for f in skg.facts[split].tolist()}
    assert len(skg.kg.facts) == len(skg.facts["train"])


def test_generation_is_seeded():
    a, b, c = synth_kg(SynthSpec(), 5), synth_kg(SynthSpec(), 5), synth_kg(SynthSpec(), 6)
    np.testing.assert_array_equal(a.known_facts, b.known_facts)
    assert not np.array_equal(a.known_facts, c.known_facts)


@pytest.mark.parametrize("temporal", [False, True])
def test_planted_rules_answer_every_held_out_query(temporal):
    skg = synth_kg(SynthSpec(temporal=temporal), 0)
    filt = build_filter(skg.known_facts, skg.kg.vocab.n_base)
    qs = skg.rule_queries("test")
    assert len(qs) >= 10
    ranks = [rank_of(score_by_grounding(skg.rules, skg.kg, q), q.label, query_filter(q, filt)) for q in qs]
    assert np.mean(np.asarray(ranks) == 1.0) == 1.0


def test_tsv_export_loads_back(tmp_path):
    skg = synth_kg(SynthSpec(temporal=True), 0)
    write_tsv(skg, tmp_path)
    ds = load_dataset(tmp_path, Scenario.TKG_E)
    assert len(ds.kg.facts) == len(skg.kg.facts)
    assert len(ds.splits.test) == 2 * len(skg.facts["test"])
