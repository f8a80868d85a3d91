"""Event data model, time-window aggregation and the binary .evt format.

Events are kept as a numpy structured array rather than a list of objects:
streams routinely hold 1e5+ events and every consumer is vectorized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataIntegrityError, ValidationError

# On-disk record: little-endian (x: u16, y: u16, t: u64 us, polarity: i8, pad: i8)
EVENT_DTYPE = np.dtype(
    [("x", "<u2"), ("y", "<u2"), ("t", "<u8"), ("polarity", "i1"), ("pad", "i1")]
)


@dataclass(frozen=True)
class Event:
    """A single sensor event. x/y in pixels, t in microseconds, polarity ±1."""

    x: int
    y: int
    t: int
    polarity: int

    def __post_init__(self):
        if self.x < 0 or self.y < 0 or self.t < 0:
            raise ValidationError(f"negative event field: {self}")
        if self.polarity not in (-1, 1):
            raise ValidationError(f"polarity must be +1 or -1, got {self.polarity}")


@dataclass(frozen=True)
class EventStream:
    """An ordered window of events on a width x height sensor.

    `events` is a structured array with EVENT_DTYPE fields; timestamps are
    non-decreasing and all lie inside [t_start, t_end).
    """

    events: np.ndarray
    width: int
    height: int
    t_start: int
    t_end: int

    def __post_init__(self):
        ev = np.ascontiguousarray(self.events, dtype=EVENT_DTYPE)
        object.__setattr__(self, "events", ev)
        if self.width <= 0 or self.height <= 0:
            raise ValidationError("sensor dimensions must be positive")
        if self.t_end < self.t_start:
            raise ValidationError("t_end < t_start")
        if len(ev):
            t = ev["t"]
            if np.any(t[1:] < t[:-1]):
                raise DataIntegrityError("event timestamps are not sorted")
            if t[0] < self.t_start or t[-1] >= self.t_end:
                raise ValidationError("events outside [t_start, t_end)")
            if ev["x"].max() >= self.width or ev["y"].max() >= self.height:
                raise ValidationError("event coordinates outside sensor bounds")
            pol = ev["polarity"]
            if not np.all((pol == 1) | (pol == -1)):
                raise ValidationError("polarities must be ±1")

    def __len__(self) -> int:
        return len(self.events)

    @property
    def duration(self) -> int:
        return self.t_end - self.t_start


def make_stream(x, y, t, polarity, width, height, t_start, t_end) -> EventStream:
    """Assemble an EventStream from parallel coordinate arrays."""
    ev = np.zeros(len(x), dtype=EVENT_DTYPE)
    ev["x"], ev["y"], ev["t"], ev["polarity"] = x, y, t, polarity
    return EventStream(ev, width, height, t_start, t_end)


def aggregate_window(stream: EventStream, t0: int, dt: int) -> EventStream:
    """Slice out the events with t0 <= t < t0 + dt, preserving order.

    Raises DataIntegrityError on an unsorted stream (checked at construction,
    re-checked here because callers may hand in raw arrays via make_stream).
    """
    if dt <= 0:
        raise ValidationError(f"dt must be positive, got {dt}")
    t = stream.events["t"]
    if len(t) and np.any(t[1:] < t[:-1]):
        raise DataIntegrityError("cannot aggregate an unsorted stream")
    lo = np.searchsorted(t, t0, side="left")
    hi = np.searchsorted(t, t0 + dt, side="left")
    return EventStream(
        stream.events[lo:hi].copy(), stream.width, stream.height, t0, t0 + dt
    )


def save_events(stream: EventStream, path) -> None:
    """Write the raw little-endian record block (no header)."""
    stream.events.tofile(path)


def load_events(path, width: int, height: int, t_start: int, t_end: int) -> EventStream:
    """Read a .evt file back into an EventStream with the given window bounds."""
    try:
        ev = np.fromfile(path, dtype=EVENT_DTYPE)
    except OSError as exc:
        raise DataIntegrityError(f"cannot read event file {path}: {exc}") from exc
    return EventStream(ev, width, height, t_start, t_end)
