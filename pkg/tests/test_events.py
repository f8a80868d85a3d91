import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gazeshift import (
    DataIntegrityError,
    Event,
    EventStream,
    ValidationError,
    aggregate_window,
    load_events,
    save_events,
)
from gazeshift.events import EVENT_DTYPE, make_stream


def stream_of(ts, width=32, height=32, t_start=0, t_end=None):
    ts = np.asarray(ts, dtype=np.uint64)
    n = len(ts)
    return make_stream(
        np.arange(n) % width,
        np.arange(n) % height,
        ts,
        np.where(np.arange(n) % 2 == 0, 1, -1),
        width,
        height,
        t_start,
        t_end if t_end is not None else (int(ts.max()) + 1 if n else 1),
    )


class TestEvent:
    def test_valid(self):
        Event(1, 2, 3, 1)
        Event(0, 0, 0, -1)

    def test_bad_polarity(self):
        with pytest.raises(ValidationError):
            Event(1, 2, 3, 0)

    def test_negative_field(self):
        with pytest.raises(ValidationError):
            Event(-1, 2, 3, 1)


class TestEventStream:
    def test_record_layout_is_14_bytes_little_endian(self):
        assert EVENT_DTYPE.itemsize == 14
        s = stream_of([5])
        assert s.events.tobytes()[4:12] == (5).to_bytes(8, "little")

    def test_unsorted_rejected(self):
        with pytest.raises(DataIntegrityError):
            stream_of([5, 3])

    def test_events_outside_window_rejected(self):
        with pytest.raises(ValidationError):
            stream_of([5], t_start=0, t_end=5)

    def test_out_of_bounds_coordinate_rejected(self):
        with pytest.raises(ValidationError):
            make_stream([40], [0], [0], [1], 32, 32, 0, 1)

    def test_bad_polarity_rejected(self):
        with pytest.raises(ValidationError):
            make_stream([0], [0], [0], [2], 32, 32, 0, 1)

    def test_duration(self):
        assert stream_of([1, 2], t_start=0, t_end=10).duration == 10


class TestAggregateWindow:
    def test_half_open_window(self):
        s = stream_of([0, 5, 9, 10, 15])
        w = aggregate_window(s, 5, 5)  # [5, 10)
        assert list(w.events["t"]) == [5, 9]
        assert (w.t_start, w.t_end) == (5, 10)

    def test_empty_window(self):
        s = stream_of([0, 100])
        assert len(aggregate_window(s, 40, 10)) == 0

    def test_bad_dt(self):
        with pytest.raises(ValidationError):
            aggregate_window(stream_of([0]), 0, 0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_adjacent_windows_partition_the_stream(self, seed):
        rng = np.random.default_rng(seed)
        ts = np.sort(rng.integers(0, 100, size=30))
        s = stream_of(ts, t_end=100)
        mid = int(rng.integers(1, 99))
        a = aggregate_window(s, 0, mid)
        b = aggregate_window(s, mid, 100 - mid)
        recombined = np.concatenate([a.events, b.events])
        assert np.array_equal(recombined, s.events)


class TestEvtFormat:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(7)
        ts = np.sort(rng.integers(0, 10_000, size=500))
        s = stream_of(ts, t_end=10_000)
        path = tmp_path / "x.evt"
        save_events(s, path)
        assert path.stat().st_size == 14 * len(s)
        back = load_events(path, s.width, s.height, s.t_start, s.t_end)
        assert back.events.tobytes() == s.events.tobytes()

    def test_empty_stream_round_trip(self, tmp_path):
        s = stream_of([], t_end=1)
        path = tmp_path / "empty.evt"
        save_events(s, path)
        assert len(load_events(path, 32, 32, 0, 1)) == 0
