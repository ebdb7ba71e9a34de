"""Contact schedules: periodic gait patterns, lookup windows and switching.

A gait pattern is a cyclic sequence of contact modes with durations,
anchored in absolute time: the cycle starts at ``anchor`` and repeats with
the cycle period.  ``stand`` is a single double-stance mode of infinite
duration.  Mode lookups are right-continuous: at a boundary the new mode
is already active.

Pattern switching takes effect at a mode boundary of the active pattern,
never mid-mode, so no foot is reassigned from swing to stance while it is
in the air.  For ``stand`` every instant is a boundary (ending a
double-stance segment early strands no foot mid-swing).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .model import DOUBLE_STANCE, LEFT_STANCE, RIGHT_STANCE, ContactMode


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class GaitPattern:
    name: str
    modes: tuple[ContactMode, ...]
    durations: tuple[float, ...]

    def __post_init__(self):
        if len(self.modes) != len(self.durations) or not self.modes:
            raise ScheduleError("pattern needs matching modes and durations")
        if any(d <= 0 for d in self.durations):
            raise ScheduleError("mode durations must be positive")
        if any(math.isinf(d) for d in self.durations) and len(self.modes) != 1:
            raise ScheduleError("infinite modes are only allowed alone")

    @property
    def cycle_period(self) -> float:
        return float(sum(self.durations))

    @property
    def is_static(self) -> bool:
        return math.isinf(self.cycle_period)

    def mode_index_at(self, t: float, anchor: float) -> tuple[int, float]:
        """(index of active mode, time already spent in it) at absolute t."""
        if t < anchor - 1e-12:
            raise ScheduleError(f"lookup at t={t} before anchor {anchor}")
        if self.is_static:
            return 0, t - anchor
        local = (t - anchor) % self.cycle_period
        acc = 0.0
        for i, d in enumerate(self.durations):
            if local < acc + d - 1e-12:
                return i, local - acc
            acc += d
        return 0, 0.0  # landed exactly on the cycle end == next cycle start


@dataclass(frozen=True)
class PhaseSample:
    """Normalized progress through the active mode at one instant."""
    mode: ContactMode
    mode_index: int
    phase: float            # in [0, 1)
    time_in_mode: float
    mode_duration: float
    mode_start: float       # absolute time the mode began


@dataclass(frozen=True)
class ScheduleEvent:
    t: float
    before: ContactMode
    after: ContactMode


@dataclass(frozen=True)
class ScheduleWindow:
    """Contact modes over [t0, t1]: non-overlapping segments + transition times."""
    t0: float
    t1: float
    segments: tuple[tuple[float, float, ContactMode], ...]
    events: tuple[ScheduleEvent, ...]

    def mode_at(self, t: float) -> ContactMode:
        if not (self.t0 - 1e-12 <= t <= self.t1 + 1e-12):
            raise ScheduleError(f"t={t} outside window [{self.t0}, {self.t1}]")
        for (a, b, mode) in self.segments:
            if t < b - 1e-12:
                return mode
        return self.segments[-1][2]


def stand_pattern() -> GaitPattern:
    return GaitPattern("stand", (DOUBLE_STANCE,), (math.inf,))


def trot_pattern(stance_duration: float = 0.35) -> GaitPattern:
    """Alternating single stance, no double support."""
    return GaitPattern("trot", (LEFT_STANCE, RIGHT_STANCE),
                       (stance_duration, stance_duration))


def walk_pattern(single_duration: float = 0.35,
                 double_duration: float = 0.05) -> GaitPattern:
    """Alternating single stance with a short double-support interval."""
    return GaitPattern(
        "walk",
        (LEFT_STANCE, DOUBLE_STANCE, RIGHT_STANCE, DOUBLE_STANCE),
        (single_duration, double_duration, single_duration, double_duration))


_BUILTIN = {"stand": stand_pattern, "trot": trot_pattern, "walk": walk_pattern}


def named_pattern(name: str, **kwargs) -> GaitPattern:
    try:
        return _BUILTIN[name](**kwargs)
    except KeyError:
        raise ScheduleError(f"unknown gait pattern {name!r}") from None


def phase_at(pattern: GaitPattern, t: float, anchor: float) -> PhaseSample:
    """Phase in [0, 1) through the active mode at absolute time t."""
    idx, elapsed = pattern.mode_index_at(t, anchor)
    dur = pattern.durations[idx]
    phase = 0.0 if math.isinf(dur) else min(elapsed / dur, 1.0 - 1e-12)
    return PhaseSample(pattern.modes[idx], idx, phase, elapsed, dur,
                       t - elapsed)


def window(pattern: GaitPattern, t0: float, horizon: float,
           anchor: float) -> ScheduleWindow:
    """Unroll the pattern over [t0, t0 + horizon]."""
    if horizon < 0:
        raise ScheduleError("window horizon must be non-negative")
    t1 = t0 + horizon
    idx, elapsed = pattern.mode_index_at(t0, anchor)
    segments = []
    events = []
    t = t0
    remaining = (pattern.durations[idx] - elapsed
                 if not math.isinf(pattern.durations[idx]) else math.inf)
    while True:
        seg_end = min(t + remaining, t1)
        segments.append((t, seg_end, pattern.modes[idx]))
        if seg_end >= t1 - 1e-12:
            break
        next_idx = (idx + 1) % len(pattern.modes)
        if pattern.modes[next_idx].mode_id != pattern.modes[idx].mode_id:
            events.append(ScheduleEvent(seg_end, pattern.modes[idx],
                                        pattern.modes[next_idx]))
        idx = next_idx
        t = seg_end
        remaining = pattern.durations[idx]
    # merge consecutive segments with identical modes (no discontinuity)
    merged = [segments[0]]
    for seg in segments[1:]:
        last = merged[-1]
        if seg[2].mode_id == last[2].mode_id:
            merged[-1] = (last[0], seg[1], last[2])
        else:
            merged.append(seg)
    return ScheduleWindow(t0, t1, tuple(merged), tuple(events))


def next_boundary(pattern: GaitPattern, t: float, anchor: float) -> float:
    """First mode boundary at or after t; for static patterns, t itself."""
    if pattern.is_static:
        return t
    idx, elapsed = pattern.mode_index_at(t, anchor)
    if elapsed < 1e-12:
        return t
    return t + (pattern.durations[idx] - elapsed)


def switch_pattern(current: GaitPattern, target: GaitPattern, t_now: float,
                   anchor: float) -> tuple[float, GaitPattern]:
    """Schedule a pattern change: returns (new anchor, active pattern).

    The target becomes active at the next mode boundary of the current
    pattern; its cycle starts there.  Switching to the already-active
    pattern is a no-op.
    """
    if target.name == current.name and target.durations == current.durations:
        return anchor, current
    t_switch = next_boundary(current, t_now, anchor)
    return t_switch, target
