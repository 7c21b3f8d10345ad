"""Telemetry pipeline: align raw readings, filter anomalies, impute gaps,
encode observations and keep the decision audit trail.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import queue
from collections import deque
from dataclasses import asdict, dataclass, is_dataclass
from datetime import datetime
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .errors import StorageError
from .scenario import ScenarioSpec, format_utc, parse_utc

log = logging.getLogger(__name__)

METRICS = ("load_kwh", "pv_kwh", "battery_soc", "ev_soc", "ev_power_kw", "price")
STATE_METRICS = frozenset({"battery_soc", "ev_soc"})
# commanded metrics move with the controller; only exogenous ones get the spike test
SPIKE_METRICS = frozenset({"load_kwh", "pv_kwh", "price"})
ASSET_OF = {"load_kwh": "meter", "pv_kwh": "pv", "battery_soc": "battery",
            "ev_soc": "charger", "ev_power_kw": "charger", "price": None}
QUALITY_FLAGS = ("measured", "carried_forward", "pattern_imputed", "default_imputed",
                 "rejected_anomaly")
MARKET = "market"

SKEW_TOLERANCE_S = 30.0
MAD_FACTOR = 6.0
MAD_WINDOW = 96
MIN_SPIKE_HISTORY = 8
LOCF_MAX_GAP = 4


@dataclass(frozen=True)
class RawReading:
    source_id: str
    metric: str
    timestamp: datetime
    value: float


class Cell(NamedTuple):
    value: float | None
    flag: str | None  # None while the value is missing

    @property
    def missing(self) -> bool:
        return self.value is None or self.flag == "rejected_anomaly"


MISSING = Cell(None, None)


@dataclass
class AlignedFrame:
    step: int
    values: dict  # building -> metric -> Cell

    def building_completeness(self, building: str) -> float:
        cells = self.values.get(building, {})
        if not cells:
            return 1.0
        return sum(c.flag == "measured" for c in cells.values()) / len(cells)

    @property
    def completeness(self) -> float:
        cells = [c for b in self.values.values() for c in b.values()]
        if not cells:
            return 1.0
        return sum(c.flag == "measured" for c in cells) / len(cells)

    def value(self, building: str, metric: str, default: float = 0.0) -> float:
        c = self.values.get(building, {}).get(metric)
        if c is None or c.missing:
            return default
        return c.value

    def copy(self) -> "AlignedFrame":
        return AlignedFrame(self.step, {b: dict(m) for b, m in self.values.items()})


class Layout:
    """Which metrics each building is expected to report for a given frame."""

    def __init__(self, scenario: ScenarioSpec):
        self.scenario = scenario
        self.base: dict[str, list[str]] = {}
        self.sources: dict[str, tuple[str, str | None]] = {MARKET: (MARKET, None)}
        steps = scenario.grid.steps
        self.ev_expected: dict[str, np.ndarray] = {}
        for b in scenario.buildings:
            metrics = ["load_kwh"]
            self.sources[f"{b.id}.meter"] = (b.id, "meter")
            if b.pv is not None:
                metrics.append("pv_kwh")
                self.sources[f"{b.id}.pv"] = (b.id, "pv")
            if b.battery is not None:
                metrics.append("battery_soc")
                self.sources[f"{b.id}.battery"] = (b.id, "battery")
            if b.charger is not None:
                metrics.append("ev_power_kw")
                self.sources[f"{b.id}.charger"] = (b.id, "charger")
                # frame k reports the plug state seen at decision k + 1
                mask = np.zeros(steps + 1, dtype=bool)
                for e in scenario.sessions_for(b.id):
                    mask[e.arrival_step:e.departure_step] = True
                self.ev_expected[b.id] = mask[1:]
            self.base[b.id] = metrics

    def expected(self, building: str, step: int) -> list[str]:
        if building == MARKET:
            return ["price"]
        metrics = self.base[building]
        mask = self.ev_expected.get(building)
        if mask is not None and 0 <= step < len(mask) and mask[step]:
            return metrics + ["ev_soc"]
        return metrics

    def buildings(self):
        return list(self.base) + [MARKET]

    def resolve(self, source_id: str, metric: str):
        """Map a reading to its building, or None when the source is unknown."""
        hit = self.sources.get(source_id)
        if hit is None or metric not in ASSET_OF:
            return None
        building, asset = hit
        if ASSET_OF[metric] != asset:
            return None
        return building


class Aligner:
    """Streaming bucketer: readings in, one frame per grid step out.

    A reading stamped ``t`` falls in interval ``k`` when
    ``start_k + tol < t <= end_k + tol``; meters report at interval end and
    may run up to ``tol`` seconds late.
    """

    def __init__(self, scenario: ScenarioSpec, tolerance_s: float = SKEW_TOLERANCE_S):
        self.scenario = scenario
        self.layout = Layout(scenario)
        self.start = scenario.grid.start
        self.interval_s = scenario.grid.interval_minutes * 60.0
        self.tolerance_s = tolerance_s
        self._buckets: dict[int, dict] = {}
        self.unknown = 0
        self.late = 0
        self.out_of_range = 0
        self._emitted = -1

    def bucket_of(self, ts: datetime) -> int:
        x = ((ts - self.start).total_seconds() - self.tolerance_s) / self.interval_s
        return math.ceil(x) - 1

    def add(self, r: RawReading) -> None:
        building = self.layout.resolve(r.source_id, r.metric)
        if building is None:
            self.unknown += 1
            log.debug("dropping reading from unknown source %s/%s", r.source_id, r.metric)
            return
        if not math.isfinite((r.timestamp - self.start).total_seconds()):
            self.out_of_range += 1
            return
        k = self.bucket_of(r.timestamp)
        if k < 0 or k >= self.scenario.grid.steps:
            self.out_of_range += 1
            return
        if k <= self._emitted:
            self.late += 1
            return
        self._buckets.setdefault(k, {}).setdefault((building, r.metric), []).append(r)

    def frame(self, step: int) -> AlignedFrame:
        """Close bucket ``step`` and return its frame (missing cells for silent metrics)."""
        raw = self._buckets.pop(step, {})
        values = {}
        for building in self.layout.buildings():
            cells = {}
            for metric in self.layout.expected(building, step):
                rs = raw.get((building, metric))
                if not rs:
                    cells[metric] = MISSING
                elif metric in STATE_METRICS:
                    last = max(enumerate(rs), key=lambda ir: (ir[1].timestamp, ir[0]))[1]
                    cells[metric] = Cell(float(last.value), "measured")
                else:
                    cells[metric] = Cell(math.fsum(r.value for r in rs) / len(rs), "measured")
            values[building] = cells
        self._emitted = max(self._emitted, step)
        return AlignedFrame(step, values)


def align_to_grid(readings: Iterable[RawReading], scenario: ScenarioSpec,
                  tolerance_s: float = SKEW_TOLERANCE_S):
    """Bucket an unordered stream onto the grid; returns (frames, aligner stats).

    Flow metrics are averaged over the interval, state metrics keep the
    latest reading.  Readings from unknown sources are dropped and counted.
    """
    al = Aligner(scenario, tolerance_s)
    for r in readings:
        al.add(r)
    frames = [al.frame(k) for k in range(scenario.grid.steps)]
    if al.unknown:
        log.warning("dropped %d readings from unknown sources", al.unknown)
    return frames, al


def read_replay_csv(path) -> list[RawReading]:
    """Read a replay file with header ``timestamp,source_id,metric,value``."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["timestamp", "source_id", "metric", "value"]:
            raise ValueError("replay CSV header must be timestamp,source_id,metric,value")
        for row in reader:
            out.append(RawReading(row["source_id"], row["metric"], parse_utc(row["timestamp"]),
                                  float(row["value"])))
    return out


def write_replay_csv(path, readings: Iterable[RawReading]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "source_id", "metric", "value"])
        for r in readings:
            ts = r.timestamp.isoformat().replace("+00:00", "Z")
            w.writerow([ts, r.source_id, r.metric, repr(r.value)])


class ReadingQueue:
    """Thread-safe inbox; any number of producers, one consumer."""

    def __init__(self):
        self._q: queue.Queue = queue.Queue()

    def put(self, reading: RawReading) -> None:
        self._q.put(reading)

    def extend(self, readings: Iterable[RawReading]) -> None:
        for r in readings:
            self._q.put(r)

    def drain(self) -> list[RawReading]:
        out = []
        while True:
            try:
                out.append(self._q.get_nowait())
            except queue.Empty:
                return out


# ---------------------------------------------------------------------------
# anomaly filtering


def physical_bounds(scenario: ScenarioSpec, building: str, metric: str):
    if metric in ("battery_soc", "ev_soc"):
        return 0.0, 1.0
    if metric == "ev_power_kw":
        rated = scenario.building(building).charger.rated_kw
        return -rated, rated
    return 0.0, math.inf


class AnomalyFilter:
    """Bound checks plus a robust spike test on exogenous metrics.

    A value is a spike when it differs from the last accepted value by more
    than ``MAD_FACTOR`` times the MAD of the trailing accepted deltas.  The
    scale is floored at a tenth of the trailing value range so that
    piecewise-flat series (PV at night) do not reject every change.
    """

    def __init__(self, scenario: ScenarioSpec, window: int = MAD_WINDOW):
        self.scenario = scenario
        self.window = window
        self._deltas: dict = {}
        self._values: dict = {}
        self._last: dict = {}  # key -> (step, value)

    def is_spike(self, key, step: int, value: float) -> bool:
        last = self._last.get(key)
        deltas = self._deltas.get(key)
        if last is None or deltas is None or len(deltas) < MIN_SPIKE_HISTORY:
            return False
        if step - last[0] > LOCF_MAX_GAP:
            return False  # re-anchor after a long silence
        d = np.fromiter(deltas, float)
        mad = float(np.median(np.abs(d - np.median(d))))
        vals = self._values[key]
        floor = 0.1 * (max(vals) - min(vals))
        scale = max(mad, floor, 1e-12)
        return abs(value - last[1]) > MAD_FACTOR * scale

    def accept(self, key, step: int, value: float) -> None:
        last = self._last.get(key)
        if last is not None:
            self._deltas.setdefault(key, deque(maxlen=self.window)).append(value - last[1])
        self._values.setdefault(key, deque(maxlen=self.window)).append(value)
        self._last[key] = (step, value)

    def filter(self, frame: AlignedFrame) -> AlignedFrame:
        out = {}
        for building, cells in frame.values.items():
            new = {}
            for metric, cell in cells.items():
                if cell.value is None or cell.flag != "measured":
                    new[metric] = cell
                    continue
                v = cell.value
                key = (building, metric)
                lo, hi = physical_bounds(self.scenario, building, metric)
                if not math.isfinite(v) or v < lo or v > hi:
                    new[metric] = Cell(v, "rejected_anomaly")
                elif metric in SPIKE_METRICS and self.is_spike(key, frame.step, v):
                    new[metric] = Cell(v, "rejected_anomaly")
                else:
                    new[metric] = cell
                    if metric in SPIKE_METRICS:
                        self.accept(key, frame.step, v)
            out[building] = new
        return AlignedFrame(frame.step, out)


def detect_anomalies(frame: AlignedFrame, history, scenario: ScenarioSpec) -> AlignedFrame:
    """Flag out-of-bounds values and spikes in ``frame`` given earlier frames."""
    f = AnomalyFilter(scenario)
    for h in sorted(history, key=lambda x: x.step):
        f.filter(h)
    return f.filter(frame)


# ---------------------------------------------------------------------------
# imputation


class Imputer:
    """Fills missing cells frame by frame.

    Gaps up to ``LOCF_MAX_GAP`` intervals carry the last measured value
    forward; longer gaps use the trailing four-week hour-of-week mean; with
    neither available the scenario default profile is used.  In causal mode
    the gap length is the run so far; otherwise the caller supplies the full
    length of the gap each missing cell belongs to.
    """

    def __init__(self, profiles):
        self.profiles = profiles  # a forecast.ForecastModel
        self._last: dict = {}
        self._run: dict = {}

    def impute(self, frame: AlignedFrame, gap_lengths=None) -> AlignedFrame:
        out = {}
        seen = set()
        for building, cells in frame.values.items():
            new = {}
            for metric, cell in cells.items():
                key = (building, metric)
                seen.add(key)
                if not cell.missing:
                    new[metric] = cell
                    self._last[key] = cell.value
                    self._run[key] = 0
                    continue
                run = self._run.get(key, 0) + 1
                self._run[key] = run
                gap = gap_lengths.get(key, run) if gap_lengths is not None else run
                last = self._last.get(key)
                if gap <= LOCF_MAX_GAP and last is not None:
                    new[metric] = Cell(last, "carried_forward")
                    continue
                mean, count = self.profiles.slot_mean(building, metric, frame.step)
                if count:
                    new[metric] = Cell(mean, "pattern_imputed")
                else:
                    new[metric] = Cell(self.profiles.default(building, metric, frame.step),
                                       "default_imputed")
            out[building] = new
        # a metric that was not expected breaks its LOCF chain
        for key in list(self._last):
            if key not in seen:
                del self._last[key]
                self._run.pop(key, None)
        self.profiles.observe(frame)
        return AlignedFrame(frame.step, out)


def _gap_lengths(frames):
    """For each frame, map (building, metric) of a missing cell to its gap length."""
    result = [dict() for _ in frames]
    open_runs: dict = {}
    for i, f in enumerate(frames):
        present = set()
        for b, cells in f.values.items():
            for m, c in cells.items():
                key = (b, m)
                present.add(key)
                if c.missing:
                    open_runs.setdefault(key, []).append(i)
                elif key in open_runs:
                    idx = open_runs.pop(key)
                    for j in idx:
                        result[j][key] = len(idx)
        for key in [k for k in open_runs if k not in present]:
            idx = open_runs.pop(key)
            for j in idx:
                result[j][key] = len(idx)
    for key, idx in open_runs.items():
        for j in idx:
            result[j][key] = len(idx)
    return result


def impute_gaps(frames, profiles) -> list[AlignedFrame]:
    """Impute every missing cell of a consecutive, anomaly-filtered sequence.

    ``profiles`` is a :class:`~reccontrol.forecast.ForecastModel`; it is fed
    the measured values as the sequence is walked.
    """
    frames = sorted(frames, key=lambda f: f.step)
    imp = Imputer(profiles)
    gaps = _gap_lengths(frames)
    return [imp.impute(f, g) for f, g in zip(frames, gaps)]


# ---------------------------------------------------------------------------
# observation encoding

OBS_FIELDS = (
    "hour_sin", "hour_cos", "dow_sin", "dow_cos", "price_now", "price_next",
    "pv_forecast", "load_forecast", "battery_soc", "ev_connected", "ev_soc",
    "ev_required_kwh", "ev_intervals_to_departure", "completeness",
)
OBS_DIM = len(OBS_FIELDS)


@dataclass(frozen=True)
class EvContext:
    """What the controller knows about the plugged-in vehicle."""

    connected: bool = False
    capacity_kwh: float = 0.0
    departure_step: int = 0
    soc_target: float = 0.0


def encode_observation(frame: AlignedFrame, building: str, step: int, ev: EvContext,
                       forecasts, prices, scenario: ScenarioSpec) -> np.ndarray:
    """Fixed-layout observation vector for one building at decision ``step``.

    ``forecasts`` is (pv, load) for the step, ``prices`` is (now, next).
    """
    ts = scenario.grid.time_of(step)
    minutes = ts.hour * 60 + ts.minute
    hour = 2.0 * math.pi * minutes / 1440.0
    dow = 2.0 * math.pi * ts.weekday() / 7.0
    soc = frame.value(building, "battery_soc", 0.0)
    if ev.connected:
        ev_soc = frame.value(building, "ev_soc", 0.0)
        required = max(0.0, ev.soc_target - ev_soc) * ev.capacity_kwh
        remaining = float(max(0, ev.departure_step - step))
        conn = 1.0
    else:
        ev_soc = required = remaining = conn = 0.0
    vec = np.array([
        math.sin(hour), math.cos(hour), math.sin(dow), math.cos(dow),
        prices[0], prices[1], forecasts[0], forecasts[1], soc,
        conn, ev_soc, required, remaining, frame.building_completeness(building),
    ], dtype=float)
    # encoders never emit NaN
    return np.nan_to_num(vec, nan=0.0, posinf=0.0, neginf=0.0)


# ---------------------------------------------------------------------------
# audit log


def _enc(x):
    if isinstance(x, float):
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    if isinstance(x, (np.floating, np.integer)):
        return _enc(x.item())
    if isinstance(x, np.ndarray):
        return [_enc(v) for v in x.tolist()]
    if is_dataclass(x):
        return {k: _enc(v) for k, v in asdict(x).items()}
    if isinstance(x, dict):
        return {k: _enc(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_enc(v) for v in x]
    return x


def _dec_float(x):
    if x == "nan":
        return math.nan
    if x == "inf":
        return math.inf
    if x == "-inf":
        return -math.inf
    return x


def _dec(x):
    if isinstance(x, dict):
        return {k: _dec(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_dec(v) for v in x]
    return _dec_float(x) if isinstance(x, str) else x


def encode_record(record: dict) -> str:
    return json.dumps(_enc(record), separators=(",", ":"), allow_nan=False)


def decode_record(line: str) -> dict:
    rec = json.loads(line)
    for k in ("observation", "proposed_action", "vetted_action", "interventions"):
        if k in rec:
            rec[k] = _dec(rec[k])
    return rec


class AuditLog:
    """Append-only JSONL trail of observations and decisions."""

    def __init__(self, path):
        self.path = Path(path)
        self._last: dict[str, int] = {}
        self.count = 0
        try:
            self._fh = open(self.path, "a", encoding="utf-8")
        except OSError as exc:
            raise StorageError(f"cannot open audit log {self.path}: {exc}") from exc

    def log_decision(self, step: int, ts, building: str, observation, proposed_action,
                     vetted_action, interventions=()) -> dict:
        if step <= self._last.get(building, -1):
            raise StorageError(f"audit records for {building} must have increasing steps")
        rec = {
            "step": int(step),
            "ts": format_utc(ts) if isinstance(ts, datetime) else ts,
            "building": building,
            "observation": observation,
            "proposed_action": proposed_action,
            "vetted_action": vetted_action,
            "interventions": list(interventions),
        }
        try:
            self._fh.write(encode_record(rec) + "\n")
        except (OSError, ValueError) as exc:
            raise StorageError(f"cannot append to {self.path}: {exc}") from exc
        self._last[building] = step
        self.count += 1
        return rec

    def close(self) -> None:
        try:
            self._fh.close()
        except OSError as exc:
            raise StorageError(str(exc)) from exc

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def log_decision(audit: AuditLog, step, ts, observations, actions, vetted_actions,
                 interventions) -> list[dict]:
    """Write one record per building for decision ``step``."""
    out = []
    for b in observations:
        out.append(audit.log_decision(step, ts, b, observations[b], actions[b],
                                      vetted_actions[b], interventions.get(b, ())))
    return out


def read_audit(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [decode_record(line) for line in fh if line.strip()]
