"""EV flexibility estimation from per-household session history.

Intervals are nearest-rank empirical quantiles per day type; with too few
samples the estimate falls back to pessimistic values (earliest arrival,
longest stay, most energy).  User-declared preferences override the
estimate field by field.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from datetime import date, datetime, time, timedelta
from fractions import Fraction
from pathlib import Path

from .scenario import ScenarioSpec, TimeGrid, day_type

DAY_TYPES = ("weekday", "weekend", "holiday")


@dataclass(frozen=True)
class SessionRecord:
    id: str
    arrival_min: float
    duration_min: float
    energy_kwh: float

    def __post_init__(self):
        vals = (self.arrival_min, self.duration_min, self.energy_kwh)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("session record values must be finite")
        if self.duration_min <= 0 or self.energy_kwh < 0:
            raise ValueError("duration must be > 0 and energy >= 0")


@dataclass(frozen=True)
class SessionHistory:
    by_day_type: tuple = ()  # ((day_type, (SessionRecord, ...)), ...)

    def records(self, dt: str) -> tuple:
        for k, v in self.by_day_type:
            if k == dt:
                return v
        return ()

    def count(self, dt: str | None = None) -> int:
        if dt is None:
            return sum(len(v) for _, v in self.by_day_type)
        return len(self.records(dt))

    def ids(self) -> set:
        return {r.id for _, v in self.by_day_type for r in v}


def update_history(h: SessionHistory, record: SessionRecord, dt: str) -> SessionHistory:
    """Append a completed session under its day type; no-op for a known id."""
    if dt not in DAY_TYPES:
        raise ValueError(f"unknown day type {dt!r}")
    if record.id in h.ids():
        return h
    buckets = dict(h.by_day_type)
    buckets[dt] = buckets.get(dt, ()) + (record,)
    return SessionHistory(tuple((k, buckets[k]) for k in DAY_TYPES if k in buckets))


def day_type_of(d: date, holidays=()) -> str:
    if d in holidays:
        return "holiday"
    return "weekend" if d.weekday() >= 5 else "weekday"


@dataclass(frozen=True)
class FlexDefaults:
    """Cold-start values used when a household has no history at all."""

    arrival_min: float = 16 * 60.0
    duration_min: float = 14 * 60.0
    energy_kwh: float = 30.0


@dataclass(frozen=True)
class FlexEstimate:
    day_type: str
    confidence: float
    arrival_min: tuple
    duration_min: tuple
    energy_kwh: tuple
    basis: str  # estimated | pessimistic_default | user_override
    sample_count: int


def nearest_rank_bounds(n: int, c: float) -> tuple[int, int]:
    """1-indexed ranks ``ceil(n(1-c)/2)`` and ``ceil(n(1+c)/2)``, clamped to [1, n].

    The confidence is converted to an exact fraction first so that e.g.
    c=0.7, n=20 yields rank 3, not 4.
    """
    cf = Fraction(c).limit_denominator(10**9)
    lo = math.ceil(n * (1 - cf) / 2)
    hi = math.ceil(n * (1 + cf) / 2)
    return min(max(lo, 1), n), min(max(hi, 1), n)


def nearest_rank_interval(values, c: float) -> tuple[float, float]:
    xs = sorted(values)
    lo, hi = nearest_rank_bounds(len(xs), c)
    return xs[lo - 1], xs[hi - 1]


def estimate_flexibility(h: SessionHistory, dt: str, c: float = 0.9, n_min: int = 10,
                         defaults: FlexDefaults = FlexDefaults()) -> FlexEstimate:
    if not 0 < c < 1:
        raise ValueError("confidence must lie in (0, 1)")
    if n_min < 1:
        raise ValueError("n_min must be >= 1")
    recs = h.records(dt)
    n = len(recs)
    if n < n_min:
        if recs:
            arr = min(r.arrival_min for r in recs)
            dur = max(r.duration_min for r in recs)
            en = max(r.energy_kwh for r in recs)
        else:
            arr, dur, en = defaults.arrival_min, defaults.duration_min, defaults.energy_kwh
        return FlexEstimate(dt, c, (arr, arr), (dur, dur), (en, en), "pessimistic_default", n)
    return FlexEstimate(
        dt, c,
        nearest_rank_interval([r.arrival_min for r in recs], c),
        nearest_rank_interval([r.duration_min for r in recs], c),
        nearest_rank_interval([r.energy_kwh for r in recs], c),
        "estimated", n,
    )


@dataclass(frozen=True)
class UserPreference:
    departure: time | None = None
    soc_target: float | None = None
    earliest_start: time | None = None
    valid_on: date | None = None

    @classmethod
    def from_dict(cls, d: dict, valid_on: date | None = None) -> "UserPreference":
        def t(x):
            return time.fromisoformat(x) if x is not None else None
        target = d.get("soc_target")
        if target is not None and not 0 <= float(target) <= 1:
            raise ValueError("soc_target must lie in [0, 1]")
        return cls(t(d.get("departure")), None if target is None else float(target),
                   t(d.get("earliest_start")), valid_on)


def load_preferences(path) -> dict:
    """Read ``{building: {YYYY-MM-DD: {departure, soc_target, earliest_start}}}``."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    out = {}
    for building, days in doc.items():
        out[building] = {date.fromisoformat(d): UserPreference.from_dict(v, date.fromisoformat(d))
                         for d, v in days.items()}
    return out


@dataclass(frozen=True)
class EffectiveEv:
    departure_step: int
    soc_target: float
    earliest_start_step: int
    basis: str


def _next_step_at(grid: TimeGrid, after_step: int, tod: time) -> int:
    """First grid step strictly after ``after_step`` whose start is at or past ``tod``."""
    ts = grid.time_of(after_step)
    cand = datetime.combine(ts.date(), tod, tzinfo=ts.tzinfo)
    if cand <= ts:
        cand += timedelta(days=1)
    delta = (cand - grid.start).total_seconds() / 60.0
    return math.ceil(delta / grid.interval_minutes)


def resolve_preferences(est: FlexEstimate, pref: UserPreference | None, *, connect_step: int,
                        grid: TimeGrid, capacity_kwh: float, soc_at_connect: float) -> EffectiveEv:
    """Departure step and target SoC for a session; declared fields win."""
    # estimate: leave at the short end of the stay interval, need the high end of energy
    stay = est.duration_min[0]
    departure = connect_step + max(1, math.floor(stay / grid.interval_minutes))
    target = min(1.0, soc_at_connect + est.energy_kwh[1] / capacity_kwh)
    earliest = connect_step
    basis = est.basis
    if pref is not None:
        if pref.departure is not None:
            departure = _next_step_at(grid, connect_step, pref.departure)
            basis = "user_override"
        if pref.soc_target is not None:
            target = pref.soc_target
            basis = "user_override"
        if pref.earliest_start is not None:
            earliest = _next_step_at(grid, connect_step - 1, pref.earliest_start)
            if earliest >= departure:
                earliest = connect_step
            basis = "user_override"
    return EffectiveEv(departure, target, earliest, basis)


class FlexibilityTracker:
    """Per-building session history fed by observed departures."""

    def __init__(self, scenario: ScenarioSpec, confidence: float = 0.9, n_min: int = 10,
                 defaults: FlexDefaults = FlexDefaults()):
        self.scenario = scenario
        self.confidence = confidence
        self.n_min = n_min
        self.defaults = defaults
        self.history: dict[str, SessionHistory] = {b.id: SessionHistory() for b in scenario.buildings}

    def complete(self, building: str, session_id: str, arrival_step: int, departure_step: int,
                 energy_kwh: float) -> None:
        g = self.scenario.grid
        ts = g.time_of(arrival_step)
        rec = SessionRecord(session_id, ts.hour * 60.0 + ts.minute,
                            (departure_step - arrival_step) * g.interval_minutes, max(energy_kwh, 0.0))
        dt = day_type(self.scenario, ts.date())
        self.history[building] = update_history(self.history[building], rec, dt)

    def estimate(self, building: str, step: int) -> FlexEstimate:
        dt = day_type(self.scenario, self.scenario.grid.time_of(step).date())
        return estimate_flexibility(self.history[building], dt, self.confidence, self.n_min,
                                    self.defaults)
