import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bdbscm import (
    HistoricalStudy,
    ParseError,
    ValidationError,
    builtin_dataset,
    parse_historical,
    serialize_historical,
    summarize,
)
from bdbscm.data import as_counts


def test_parse_single_row():
    (s,) = parse_historical(b"simpson2020,7,85\n", "csv")
    assert (s.id, s.responders, s.arm_size) == ("simpson2020", 7, 85)


def test_parse_with_header():
    studies = parse_historical(b"id,responders,n\na,1,10\nb,2,20\n", "csv")
    assert [s.id for s in studies] == ["a", "b"]


@pytest.mark.parametrize("fmt", ["csv", "json"])
def test_empty_input(fmt):
    assert parse_historical(b"", fmt) == []


def test_responders_exceed_arm_size():
    with pytest.raises(ValidationError, match="'x'"):
        parse_historical(b"x,10,5", "csv")


def test_malformed_record_reports_location():
    with pytest.raises(ParseError) as err:
        parse_historical(b"id,responders,n\na,1,10\nb,two,20\n", "csv")
    assert err.value.line == 3 and err.value.field == "responders"


def test_wrong_column_count():
    with pytest.raises(ParseError):
        parse_historical(b"a,1\n", "csv")


def test_bad_utf8():
    with pytest.raises(ParseError):
        parse_historical(b"\xff\xfe,1,2", "csv")


def test_json_missing_key():
    with pytest.raises(ParseError, match="n"):
        parse_historical(json.dumps([{"id": "a", "responders": 1}]).encode(), "json")


def test_duplicate_ids():
    with pytest.raises(ValidationError, match="duplicate"):
        parse_historical(b"a,1,10\na,2,10\n", "csv")


def test_builtin_dataset():
    studies = builtin_dataset()
    pairs = [(s.responders, s.arm_size) for s in studies]
    assert pairs == [(7, 85), (33, 123), (28, 79), (39, 122), (6, 94), (6, 32)]
    summ = summarize(studies)
    assert summ.total_n == 535
    assert summ.total_responders == 119
    assert studies[4].rate == pytest.approx(0.0638, abs=1e-4)


def test_summary_of_builtin():
    summ = summarize(builtin_dataset())
    assert summ.mean_arm_size == pytest.approx(535 / 6, rel=1e-15)
    assert round(summ.mean_arm_size, 1) == 89.2
    assert summ.pooled_rate == pytest.approx(119 / 535, rel=1e-15)
    assert summ.pooled_rate == pytest.approx(0.2224, abs=1e-4)


def test_summary_single_study():
    summ = summarize([HistoricalStudy("a", 5, 10)])
    assert summ.pooled_rate == 0.5
    assert summ.mean_arm_size == 10


def test_summary_empty():
    with pytest.raises(ValueError):
        summarize([])


def test_as_counts_accepts_arrays():
    r, n = as_counts([[1, 10], [3, 7]])
    np.testing.assert_array_equal(r, [1, 3])
    np.testing.assert_array_equal(n, [10, 7])
    with pytest.raises(ValidationError):
        as_counts([[5, 4]])


study_lists = st.lists(
    st.tuples(st.integers(1, 500)).flatmap(lambda t: st.tuples(st.integers(0, t[0]), st.just(t[0]))),
    min_size=1,
    max_size=12,
).map(lambda pairs: [HistoricalStudy(f"s{i}", r, n) for i, (r, n) in enumerate(pairs)])


@given(study_lists, st.sampled_from(["csv", "json"]))
def test_round_trip(studies, fmt):
    text = serialize_historical(studies, fmt)
    assert parse_historical(text.encode(), fmt) == studies


@given(study_lists, st.randoms(use_true_random=False))
def test_summary_permutation_invariant(studies, rnd):
    shuffled = list(studies)
    rnd.shuffle(shuffled)
    a, b = summarize(studies), summarize(shuffled)
    assert a.pooled_rate == b.pooled_rate
    assert a.mean_arm_size == pytest.approx(b.mean_arm_size, rel=1e-12)
    assert a.total_n == b.total_n and a.total_responders == b.total_responders


@given(study_lists)
def test_pooled_rate_within_study_range(studies):
    summ = summarize(studies)
    assert min(summ.study_rates) - 1e-12 <= summ.pooled_rate <= max(summ.study_rates) + 1e-12
    assert len(summ.study_rates) == len(studies)
