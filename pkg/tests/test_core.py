import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from prosanon.core import (
    PROSODY_FEATURES,
    EmbeddingTable,
    ProsodyTable,
    TableFormatError,
    derive_rng,
    dumps_embedding_table,
    load_embedding_table,
    load_prosody_table,
    loads_embedding_table,
    normalize_minmax,
    save_embedding_table,
    save_prosody_table,
)

ids = st.from_regex(r"[A-Za-z0-9_-]{1,8}", fullmatch=True)
finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@st.composite
def tables(draw, max_rows=6, max_dim=5):
    n = draw(st.integers(0, max_rows))
    d = draw(st.integers(1, max_dim))
    sample_ids = draw(st.lists(ids, min_size=n, max_size=n, unique=True))
    speakers = draw(st.lists(ids, min_size=n, max_size=n))
    attrs = draw(st.lists(st.sampled_from([0, 1, None]), min_size=n, max_size=n))
    vecs = draw(hnp.arrays(np.float64, (n, d), elements=finite))
    return EmbeddingTable(sample_ids, speakers, attrs, vecs)


def small_table():
    return EmbeddingTable(
        ["a", "b", "c"], ["s1", "s1", "s2"], [0, 1, None],
        np.array([[0.1, -2.0, 3.5, 1e-300], [4.0, 5.0, 6.0, -0.0], [7.0, 8.0, 9.0, 1.0]]),
    )


@settings(max_examples=150, deadline=None)
@given(tables())
def test_embedding_round_trip_is_exact(table):
    text = dumps_embedding_table(table)
    back = loads_embedding_table(text)
    assert back == table
    assert dumps_embedding_table(back) == text


def test_load_three_rows_keeps_order_and_dim(tmp_path):
    path = tmp_path / "t.csv"
    save_embedding_table(small_table(), path)
    table = load_embedding_table(path)
    assert (table.n_rows, table.dim) == (3, 4)
    assert table.sample_ids == ("a", "b", "c")
    assert table.attributes == (0, 1, None)


def test_file_format_is_lf_and_shortest_repr(tmp_path):
    path = tmp_path / "t.csv"
    save_embedding_table(small_table(), path)
    raw = path.read_bytes()
    assert b"\r" not in raw
    lines = raw.decode().splitlines()
    assert lines[0] == "sample_id,speaker_id,attribute,e0,e1,e2,e3"
    assert lines[1] == "a,s1,0,0.1,-2.0,3.5,1e-300"
    assert lines[3].startswith("c,s2,,")


def test_point_one_survives_round_trip():
    t = EmbeddingTable(["x"], ["s"], [1], np.array([[0.1]]))
    assert loads_embedding_table(dumps_embedding_table(t)).vectors[0, 0] == 0.1


def test_empty_table_is_header_only():
    t = EmbeddingTable([], [], [], np.empty((0, 2)))
    assert dumps_embedding_table(t) == "sample_id,speaker_id,attribute,e0,e1\n"
    assert loads_embedding_table(dumps_embedding_table(t)) == t


@pytest.mark.parametrize(
    "body, row, fragment",
    [
        ("a,s,0,1,2,3,4\nb,s,1,1,2,3\n", 3, "ragged"),
        ("a,s,0,1,2,x,4\n", 2, "non-numeric"),
        ("a,s,0,1,2,3,4\na,s,1,1,2,3,4\n", 3, "duplicate"),
        ("a,s,2,1,2,3,4\n", 2, "attribute"),
        ("a,s,0,1,nan,3,4\n", 2, "non-finite"),
        ("a b,s,0,1,2,3,4\n", 2, "invalid id"),
    ],
)
def test_malformed_rows_report_row_number(body, row, fragment):
    text = "sample_id,speaker_id,attribute,e0,e1,e2,e3\n" + body
    with pytest.raises(TableFormatError) as err:
        loads_embedding_table(text)
    assert err.value.row == row
    assert fragment in str(err.value)


@pytest.mark.parametrize("header", ["sample_id,speaker_id,e0", "id,speaker_id,attribute,e0", "sample_id,speaker_id,attribute,e1"])
def test_bad_header_is_row_one(header):
    with pytest.raises(TableFormatError) as err:
        loads_embedding_table(header + "\n")
    assert err.value.row == 1


def test_table_vectors_are_read_only():
    t = small_table()
    with pytest.raises(ValueError):
        t.vectors[0, 0] = 1.0


def test_normalize_examples():
    out, b = normalize_minmax([2, 4, 6])
    assert out.tolist() == [0.0, 0.5, 1.0] and b == (2.0, 6.0)
    out, b = normalize_minmax([5, 5, 5])
    assert out.tolist() == [0.0, 0.0, 0.0] and b == (5.0, 5.0)
    out, _ = normalize_minmax([3], stored_bounds=(2, 6))
    assert out.tolist() == [0.25]


def test_normalize_clips_held_out_values_and_rejects_empty():
    out, _ = normalize_minmax([0, 8], stored_bounds=(2, 6))
    assert out.tolist() == [0.0, 1.0]
    with pytest.raises(ValueError):
        normalize_minmax([])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=20))
def test_normalize_is_idempotent_on_unit_columns(values):
    once, bounds = normalize_minmax(values)
    twice, _ = normalize_minmax(once, stored_bounds=(0.0, 1.0))
    assert np.array_equal(once, twice)
    again, _ = normalize_minmax(once, stored_bounds=normalize_minmax(once)[1])
    assert np.allclose(again, once, atol=1e-15)


def _prosody(n=4, seed=0):
    rng = np.random.default_rng(seed)
    return ProsodyTable([f"r{i}" for i in range(n)], rng.uniform(0, 10, size=(n, 6)))


def test_prosody_round_trip_with_bounds(tmp_path):
    tab = _prosody().normalized()
    path = tmp_path / "p.csv"
    save_prosody_table(tab, path)
    header = path.read_text().splitlines()[0].split(",")
    assert header == ["sample_id", *PROSODY_FEATURES, *(f + "_norm" for f in PROSODY_FEATURES)]
    assert json.loads((tmp_path / "p.csv.bounds.json").read_text()).keys() == set(PROSODY_FEATURES)
    assert load_prosody_table(path) == tab


def test_prosody_raw_round_trip(tmp_path):
    tab = _prosody(3, seed=4)
    path = tmp_path / "p.csv"
    save_prosody_table(tab, path)
    assert path.read_text().splitlines()[0] == "sample_id,spr,nsyll,pnum,plength,f0,nrg"
    assert load_prosody_table(path) == tab


def test_held_out_split_uses_training_bounds():
    train = _prosody(10, seed=1).normalized()
    test = ProsodyTable(["t0"], np.full((1, 6), 100.0)).normalized(train.bounds)
    assert test.norm.tolist() == [[1.0] * 6]
    assert test.bounds == train.bounds


def test_prosody_alignment_reorders_and_rejects_missing():
    tab = _prosody()
    aligned = tab.aligned_to(["r2", "r0"])
    assert aligned.sample_ids == ("r2", "r0")
    assert np.array_equal(aligned.raw, tab.raw[[2, 0]])
    with pytest.raises(TableFormatError):
        tab.aligned_to(["nope"])


def test_derive_rng_depends_only_on_seed_and_keys():
    a = derive_rng(7, 1, 2).random(5)
    assert np.array_equal(a, derive_rng(7, 1, 2).random(5))
    assert not np.array_equal(a, derive_rng(7, 2, 1).random(5))
    assert not np.array_equal(a, derive_rng(8, 1, 2).random(5))
