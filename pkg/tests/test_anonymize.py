import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prosanon.anonymize import PlanError, apply_shuffle, build_shuffle_plan, random_selection, shuffle_table
from prosanon.core import EmbeddingTable
from prosanon.evaluation import EvalConfig, evaluate
from prosanon.mi import SelectionSet
from prosanon.synth import SynthSpec, gen_embeddings


def table(n=5, dim=4, seed=0):
    rng = np.random.default_rng(seed)
    return EmbeddingTable([f"r{i}" for i in range(n)], [f"s{i % 2}" for i in range(n)],
                          [i % 2 for i in range(n)], rng.standard_normal((n, dim)))


def keep(*dims):
    return SelectionSet(tuple(dims), None)


def test_keeping_every_dim_is_identity():
    t = table()
    plan = build_shuffle_plan(t, keep(0, 1, 2, 3), seed=1)
    assert plan.permutations == {}
    assert apply_shuffle(t, plan) == t


def test_complement_gets_permutations():
    plan = build_shuffle_plan(table(n=3), keep(0, 1), seed=2)
    assert sorted(plan.permutations) == [2, 3]
    for perm in plan.permutations.values():
        assert sorted(perm.tolist()) == [0, 1, 2]


def test_same_seed_same_plan():
    t = table(n=50)
    a = build_shuffle_plan(t, keep(1), seed=3).to_json()
    b = build_shuffle_plan(t, keep(1), seed=3).to_json()
    assert a == b
    assert a != build_shuffle_plan(t, keep(1), seed=4).to_json()


def test_single_column_is_a_permutation_of_its_values():
    t = EmbeddingTable(["a", "b", "c"], ["x", "x", "y"], [0, 1, 0], np.array([[1.0], [2.0], [3.0]]))
    out = shuffle_table(t, keep(), seed=0)
    assert sorted(out.vectors[:, 0].tolist()) == [1.0, 2.0, 3.0]


def test_columns_use_independent_permutations():
    plan = build_shuffle_plan(table(n=200, dim=6), keep(), seed=5)
    perms = [tuple(p) for p in plan.permutations.values()]
    assert len(set(perms)) == 6


def test_permutation_depends_only_on_seed_and_dim():
    t = table(n=30, dim=6)
    a = build_shuffle_plan(t, keep(0, 1), seed=9)
    b = build_shuffle_plan(t, keep(0, 4), seed=9)
    assert np.array_equal(a.permutations[3], b.permutations[3])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.integers(1, 6), st.integers(0, 2**32 - 1), st.data())
def test_marginals_selected_columns_and_labels_preserved(n, dim, seed, data):
    t = table(n, dim, seed=seed % 1000)
    chosen = data.draw(st.sets(st.integers(0, dim - 1)))
    out = shuffle_table(t, keep(*sorted(chosen)), seed)
    for d in range(dim):
        assert np.array_equal(np.sort(out.vectors[:, d]), np.sort(t.vectors[:, d]))
        if d in chosen:
            assert out.vectors[:, d].tobytes() == t.vectors[:, d].tobytes()
    assert (out.sample_ids, out.speaker_ids, out.attributes) == (t.sample_ids, t.speaker_ids, t.attributes)


def test_applying_twice_composes_the_permutation():
    t = table(n=7, dim=3)
    plan = build_shuffle_plan(t, keep(0), seed=11)
    twice = apply_shuffle(apply_shuffle(t, plan), plan)
    for d, p in plan.permutations.items():
        composed = [p[p[i]] for i in range(7)]
        assert np.array_equal(twice.vectors[:, d], t.vectors[composed, d])


def test_random_selection_draws_without_replacement():
    sel = random_selection(64, 50, seed=0)
    assert len(set(sel.selected)) == 50 and max(sel.selected) < 64
    assert sel == random_selection(64, 50, seed=0)
    plan = build_shuffle_plan(table(n=10, dim=64), "random:50", seed=0)
    assert plan.mode == "random" and len(plan.permutations) == 14


@pytest.mark.parametrize(
    "call",
    [
        lambda: build_shuffle_plan(table(), keep(4), seed=0),
        lambda: build_shuffle_plan(table(), "random:9", seed=0),
        lambda: build_shuffle_plan(table(), "top:2", seed=0),
        lambda: build_shuffle_plan(table(), keep(0), seed=0, mode="bogus"),
        lambda: apply_shuffle(table(n=6), build_shuffle_plan(table(n=5), keep(0), seed=0)),
    ],
)
def test_invalid_plans_raise(call):
    with pytest.raises(PlanError):
        call()


def test_plan_json_is_auditable(tmp_path):
    plan = build_shuffle_plan(table(n=4), keep(2), seed=6, mode="mi_prosody")
    plan.save(tmp_path / "plan.json")
    doc = json.loads((tmp_path / "plan.json").read_text())
    assert doc["mode"] == "mi_prosody" and doc["selection"]["selected"] == [2]
    assert sorted(doc["permutations"]) == ["0", "1", "3"]


def test_shuffling_speaker_dims_removes_identity_keeps_attribute():
    corpus = gen_embeddings(SynthSpec(seed=0))
    train, _ = corpus.split("train")
    test, _ = corpus.split("test")
    sel = keep(*corpus.truth["attribute_dims"])
    cfg = EvalConfig(resamples=20)
    before = evaluate(train, test, cfg=cfg)
    after = evaluate(shuffle_table(train, sel, seed=1), shuffle_table(test, sel, seed=2), cfg=cfg)
    chance = 1 / corpus.truth["n_speakers"]
    assert after.spk_f1 <= 2 * chance
    assert after.ad_f1 >= 0.9 * before.ad_f1
