import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from passion.presence import (
    PresenceError,
    PresenceMatrix,
    available_modalities,
    draw_quota_mask,
    format_manifest,
    load_manifest,
    missing_rates,
    parse_manifest,
    quota,
    sample_presence,
    save_manifest,
    validate,
)


def test_missing_rates_direct_count():
    C = PresenceMatrix(np.array([[1, 1], [1, 0], [1, 1], [1, 0]]))
    np.testing.assert_array_equal(missing_rates(C), [0.0, 0.5])


@pytest.mark.parametrize("shape", [(1, 1), (5, 3), (17, 4)])
def test_missing_rates_full_availability(shape):
    np.testing.assert_array_equal(missing_rates(np.ones(shape)), np.zeros(shape[1]))


def test_missing_rates_rejects_empty_column():
    with pytest.raises(PresenceError):
        missing_rates(np.array([[1, 0], [1, 0]]))


def test_sampled_rates_track_targets():
    targets = (0.2, 0.5, 0.8)
    C = sample_presence(targets, 1000, seed=3)
    # quota arithmetic: round-half-up of 1000 * t is exact here
    assert [quota(t, 1000) for t in targets] == [200, 500, 800]
    assert np.all(np.abs(missing_rates(C) - targets) <= 0.05)


def test_zero_targets_give_all_ones():
    C = sample_presence((0, 0, 0), 10, seed=0)
    np.testing.assert_array_equal(C.entries, np.ones((10, 3)))


def test_single_column_quota():
    assert quota(0.5, 4) == 2
    raw = draw_quota_mask((0.5,), 4, np.random.default_rng(11))
    assert int((raw == 0).sum()) == 2
    # with one modality every zero empties its row, so repair must restore it
    C = sample_presence((0.5,), 4, seed=11)
    np.testing.assert_array_equal(C.entries, np.ones((4, 1)))
    assert C.repairs == 2


def test_quota_rounds_half_up():
    assert quota(0.25, 10) == 3
    assert quota(0.15, 10) == 2
    assert quota(0.99, 10) == 9  # capped so the column keeps one sample


def test_extreme_rates_stay_valid():
    C = sample_presence((0.9, 0.9), 10, seed=5)
    assert C.entries.sum(axis=1).min() >= 1
    assert C.entries.sum(axis=0).min() >= 1
    validate(C.entries)


@pytest.mark.parametrize("targets,N", [((1.0, 0.2), 10), ((0.2, -0.1), 10), ((0.2,), 0)])
def test_sample_presence_rejects_bad_arguments(targets, N):
    with pytest.raises(PresenceError):
        sample_presence(targets, N, seed=0)


def test_available_modalities():
    C = PresenceMatrix(np.array([[1, 0, 1], [1, 1, 1]]))
    assert available_modalities(C, 0) == {0, 2}
    assert available_modalities(C, 1) == {0, 1, 2}
    with pytest.raises(IndexError):
        available_modalities(C, 2)


def test_all_zero_row_is_rejected():
    with pytest.raises(PresenceError):
        PresenceMatrix(np.array([[0, 0, 0], [1, 1, 1]]))


@settings(max_examples=60, deadline=None)
@given(
    targets=st.lists(st.floats(0.0, 0.95), min_size=1, max_size=5),
    N=st.integers(1, 200),
    seed=st.integers(0, 2**32 - 1),
)
def test_rate_error_bounded_by_repairs(targets, N, seed):
    C = sample_presence(targets, N, seed)
    err = np.abs(missing_rates(C) - np.asarray(targets))
    assert np.all(err <= (1 + C.repairs) / N + 1e-12)


@settings(max_examples=30, deadline=None)
@given(
    targets=st.lists(st.floats(0.0, 0.95), min_size=1, max_size=4),
    N=st.integers(1, 100),
    seed=st.integers(0, 10**6),
)
def test_sampling_is_pure(targets, N, seed):
    assert sample_presence(targets, N, seed) == sample_presence(targets, N, seed)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.data())
def test_validate_rejects_exactly_invalid(n, m, data):
    arr = np.array(data.draw(st.lists(st.integers(0, 1), min_size=n * m, max_size=n * m))).reshape(n, m)
    ok = arr.sum(axis=0).min() > 0 and arr.sum(axis=1).min() > 0
    if ok:
        validate(arr)
    else:
        with pytest.raises(PresenceError):
            validate(arr)


def test_validate_rejects_non_binary():
    with pytest.raises(PresenceError):
        validate(np.array([[1, 2], [1, 1]]))


def test_manifest_round_trip_is_bit_exact(tmp_path):
    C = sample_presence((0.2, 0.5, 0.8), 37, seed=9)
    text = format_manifest(C)
    lines = text.splitlines()
    assert lines[0] == "37 3 9"
    assert lines[1] == "0.2 0.5 0.8"
    assert len([ln for ln in lines[2:] if not ln.startswith("#")]) == 37
    back = parse_manifest(text)
    assert back == C and back.repairs == C.repairs
    assert format_manifest(back) == text
    path = save_manifest(C, tmp_path / "presence.txt")
    assert path.read_bytes() == text.encode()
    assert load_manifest(path) == C


def test_manifest_header_mismatch():
    with pytest.raises(PresenceError):
        parse_manifest("3 2 0\n0.1 0.2\n1 1\n1 0\n")
