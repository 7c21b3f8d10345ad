"""Static description of the community and the synthetic generator.

A scenario document is UTF-8 JSON with top-level keys ``grid``,
``buildings``, ``sessions``, ``tariff`` and ``seed`` (``holidays`` is
optional).  Series are stored inline as arrays or as a path, relative to
the document, to a CSV file with header ``step,value``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError

Series = tuple  # tuple[float, ...]; kept immutable so specs compare by value


def parse_utc(text: str) -> datetime:
    ts = datetime.fromisoformat(text.replace("Z", "+00:00"))
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def format_utc(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass(frozen=True)
class TimeGrid:
    start: datetime
    interval_minutes: int = 15
    steps: int = 96

    @property
    def dt_h(self) -> float:
        return self.interval_minutes / 60.0

    @property
    def steps_per_day(self) -> int:
        return 1440 // self.interval_minutes

    @property
    def steps_per_week(self) -> int:
        return 7 * self.steps_per_day

    def time_of(self, step: int) -> datetime:
        return self.start + timedelta(minutes=self.interval_minutes * step)

    def slot_of_week(self, step: int) -> int:
        ts = self.time_of(step)
        minutes = (ts.weekday() * 24 + ts.hour) * 60 + ts.minute
        return minutes // self.interval_minutes

    def slot_of_day(self, step: int) -> int:
        ts = self.time_of(step)
        return (ts.hour * 60 + ts.minute) // self.interval_minutes


@dataclass(frozen=True)
class PvSpec:
    peak_kw: float
    profile: Series


@dataclass(frozen=True)
class BatterySpec:
    capacity_kwh: float
    rated_kw: float
    soc_min: float = 0.1
    soc_max: float = 0.95
    eta_charge: float = 0.95
    eta_discharge: float = 0.95
    soc_init: float = 0.5


@dataclass(frozen=True)
class ChargerSpec:
    rated_kw: float = 7.4
    v2g_enabled: bool = False
    eta_charge: float = 0.95
    eta_discharge: float = 0.95


@dataclass(frozen=True)
class EvSessionSpec:
    id: str
    arrival_step: int
    departure_step: int
    soc_arrival: float
    soc_target: float
    ev_capacity_kwh: float


@dataclass(frozen=True)
class BuildingSpec:
    id: str
    load_profile: Series
    pv: PvSpec | None = None
    battery: BatterySpec | None = None
    charger: ChargerSpec | None = None
    # metric -> one value per slot of the day; used when no history exists
    default_profile: tuple = ()

    def default_value(self, metric: str, slot_of_day: int) -> float:
        for name, values in self.default_profile:
            if name == metric:
                return float(values[slot_of_day % len(values)])
        if metric == "battery_soc" and self.battery is not None:
            return self.battery.soc_init
        return 0.0


@dataclass(frozen=True)
class TariffSpec:
    import_price: Series
    export_price: Series


@dataclass(frozen=True)
class ScenarioSpec:
    grid: TimeGrid
    buildings: tuple
    sessions: tuple  # ((building_id, (EvSessionSpec, ...)), ...)
    tariff: TariffSpec
    seed: int = 0
    holidays: tuple = ()

    def building(self, building_id: str) -> BuildingSpec:
        for b in self.buildings:
            if b.id == building_id:
                return b
        raise KeyError(building_id)

    @property
    def building_ids(self) -> list[str]:
        return [b.id for b in self.buildings]

    def sessions_for(self, building_id: str) -> tuple:
        for bid, sessions in self.sessions:
            if bid == building_id:
                return sessions
        return ()


# ---------------------------------------------------------------------------
# validation


def _check_series(path, values, steps, out, *, nonneg=True):
    if len(values) != steps:
        out.append(f"{path}: series length {len(values)} != steps {steps}")
    for i, v in enumerate(values):
        if not math.isfinite(v):
            out.append(f"{path}[{i}]: value must be finite")
        elif nonneg and v < 0:
            out.append(f"{path}[{i}]: value {v} must be >= 0")


def validate_scenario(s: ScenarioSpec) -> list[str]:
    """Return every violated invariant as ``"<field path>: <message>"``."""
    out: list[str] = []
    g = s.grid
    if g.interval_minutes <= 0 or 60 % g.interval_minutes != 0:
        out.append(f"grid.interval_minutes: {g.interval_minutes} must divide 60")
    if g.steps < 1:
        out.append("grid.steps: must be >= 1")
    if not (0 <= s.seed < 2**64):
        out.append("seed: must be a 64-bit unsigned integer")
    if not s.buildings:
        out.append("buildings: at least one building is required")

    dt_h = g.interval_minutes / 60.0
    seen = set()
    for i, b in enumerate(s.buildings):
        p = f"buildings[{i}]"
        if b.id in seen:
            out.append(f"{p}.id: duplicate building id {b.id!r}")
        seen.add(b.id)
        _check_series(f"{p}.load_profile", b.load_profile, g.steps, out)
        if b.pv is not None:
            if b.pv.peak_kw < 0:
                out.append(f"{p}.pv.peak_kw: must be >= 0")
            if len(b.pv.profile) != g.steps:
                out.append(f"{p}.pv.profile: series length {len(b.pv.profile)} != steps {g.steps}")
            cap = b.pv.peak_kw * dt_h
            for k, v in enumerate(b.pv.profile):
                if not math.isfinite(v) or v < 0:
                    out.append(f"{p}.pv.profile[{k}]: value {v} must be finite and >= 0")
                elif v > cap + 1e-12:
                    out.append(f"{p}.pv.profile[{k}]: value {v} exceeds peak_kw*interval_hours = {cap}")
        bat = b.battery
        if bat is not None:
            q = f"{p}.battery"
            if not bat.capacity_kwh > 0:
                out.append(f"{q}.capacity_kwh: must be > 0")
            if not bat.rated_kw > 0:
                out.append(f"{q}.rated_kw: must be > 0")
            for name in ("soc_min", "soc_max", "soc_init"):
                v = getattr(bat, name)
                if not 0 <= v <= 1:
                    out.append(f"{q}.{name}: must lie in [0, 1]")
            for name in ("eta_charge", "eta_discharge"):
                v = getattr(bat, name)
                if not 0 < v <= 1:
                    out.append(f"{q}.{name}: must lie in (0, 1]")
            if not bat.soc_min < bat.soc_max:
                out.append(f"{q}.soc_min: soc_min < soc_max violated ({bat.soc_min} >= {bat.soc_max})")
            elif not bat.soc_min <= bat.soc_init <= bat.soc_max:
                out.append(f"{q}.soc_init: soc_min <= soc_init <= soc_max violated")
        ch = b.charger
        if ch is not None:
            q = f"{p}.charger"
            if not ch.rated_kw > 0:
                out.append(f"{q}.rated_kw: must be > 0")
            for name in ("eta_charge", "eta_discharge"):
                v = getattr(ch, name)
                if not 0 < v <= 1:
                    out.append(f"{q}.{name}: must lie in (0, 1]")
        for metric, values in b.default_profile:
            if len(values) != g.steps_per_day:
                out.append(f"{p}.default_profile.{metric}: length {len(values)} != {g.steps_per_day}")

    ids = {b.id: b for b in s.buildings}
    for bid, sessions in s.sessions:
        p = f"sessions.{bid}"
        if bid not in ids:
            out.append(f"{p}: unknown building {bid!r}")
        elif ids[bid].charger is None:
            out.append(f"{p}: building {bid!r} has no charger")
        for j, e in enumerate(sessions):
            q = f"{p}[{j}]"
            if not e.arrival_step < e.departure_step:
                out.append(f"{q}: arrival_step < departure_step violated")
            if e.arrival_step < 0 or e.departure_step > g.steps:
                out.append(f"{q}: session outside the time grid")
            if not 0 <= e.soc_arrival <= e.soc_target <= 1:
                out.append(f"{q}: 0 <= soc_arrival <= soc_target <= 1 violated")
            if not e.ev_capacity_kwh > 0:
                out.append(f"{q}.ev_capacity_kwh: must be > 0")
        ordered = sorted(sessions, key=lambda e: (e.arrival_step, e.departure_step))
        for a, b in zip(ordered, ordered[1:]):
            if b.arrival_step < a.departure_step:
                out.append(f"{p}: sessions {a.id!r} and {b.id!r} overlap")
        sids = [e.id for e in sessions]
        if len(set(sids)) != len(sids):
            out.append(f"{p}: duplicate session ids")

    t = s.tariff
    _check_series("tariff.import_price", t.import_price, g.steps, out)
    _check_series("tariff.export_price", t.export_price, g.steps, out)
    for i, d in enumerate(s.holidays):
        if not isinstance(d, date):
            out.append(f"holidays[{i}]: must be an ISO date")
    return out


# ---------------------------------------------------------------------------
# serialization


def scenario_to_dict(s: ScenarioSpec) -> dict:
    buildings = []
    for b in s.buildings:
        d: dict = {"id": b.id, "load_profile": list(b.load_profile)}
        if b.pv is not None:
            d["pv"] = {"peak_kw": b.pv.peak_kw, "profile": list(b.pv.profile)}
        if b.battery is not None:
            d["battery"] = dict(vars(b.battery))
        if b.charger is not None:
            d["charger"] = dict(vars(b.charger))
        if b.default_profile:
            d["default_profile"] = {m: list(v) for m, v in b.default_profile}
        buildings.append(d)
    return {
        "grid": {
            "start": format_utc(s.grid.start),
            "interval_minutes": s.grid.interval_minutes,
            "steps": s.grid.steps,
        },
        "buildings": buildings,
        "sessions": {bid: [dict(vars(e)) for e in ss] for bid, ss in s.sessions},
        "tariff": {
            "import_price": list(s.tariff.import_price),
            "export_price": list(s.tariff.export_price),
        },
        "holidays": [d.isoformat() for d in s.holidays],
        "seed": s.seed,
    }


def dumps_scenario(s: ScenarioSpec) -> str:
    return json.dumps(scenario_to_dict(s), separators=(",", ":")) + "\n"


def save_scenario(s: ScenarioSpec, path) -> None:
    Path(path).write_text(dumps_scenario(s), encoding="utf-8")


def _series(value, base: Path | None, where: str) -> Series:
    if isinstance(value, str):
        if base is None:
            raise ParseError(f"{where}: CSV reference {value!r} needs a document path")
        try:
            with open(base / value, newline="", encoding="utf-8") as fh:
                reader = csv.DictReader(fh)
                if reader.fieldnames != ["step", "value"]:
                    raise ParseError(f"{where}: CSV header must be 'step,value'")
                rows = sorted((int(r["step"]), float(r["value"])) for r in reader)
        except OSError as exc:
            raise ParseError(f"{where}: cannot read {value!r}: {exc}") from exc
        if [k for k, _ in rows] != list(range(len(rows))):
            raise ParseError(f"{where}: CSV steps must be 0..n-1")
        return tuple(v for _, v in rows)
    if not isinstance(value, list):
        raise ParseError(f"{where}: series must be an array or a CSV path")
    try:
        return tuple(float(v) for v in value)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{where}: non-numeric series value") from exc


def scenario_from_dict(doc: dict, base: Path | None = None) -> ScenarioSpec:
    try:
        g = doc["grid"]
        grid = TimeGrid(
            start=parse_utc(g["start"]),
            interval_minutes=int(g.get("interval_minutes", 15)),
            steps=int(g["steps"]),
        )
        buildings = []
        for i, b in enumerate(doc["buildings"]):
            where = f"buildings[{i}]"
            pv = None
            if b.get("pv") is not None:
                pv = PvSpec(float(b["pv"]["peak_kw"]), _series(b["pv"]["profile"], base, where + ".pv.profile"))
            battery = BatterySpec(**b["battery"]) if b.get("battery") is not None else None
            charger = ChargerSpec(**b["charger"]) if b.get("charger") is not None else None
            defaults = tuple(
                (m, _series(v, base, f"{where}.default_profile.{m}"))
                for m, v in (b.get("default_profile") or {}).items()
            )
            buildings.append(BuildingSpec(
                id=str(b["id"]),
                load_profile=_series(b["load_profile"], base, where + ".load_profile"),
                pv=pv, battery=battery, charger=charger, default_profile=defaults,
            ))
        sessions = tuple(
            (str(bid), tuple(EvSessionSpec(**e) for e in ss))
            for bid, ss in (doc.get("sessions") or {}).items()
        )
        t = doc["tariff"]
        imp = _series(t["import_price"], base, "tariff.import_price")
        exp = _series(t["export_price"], base, "tariff.export_price") if "export_price" in t else (0.0,) * len(imp)
        holidays = tuple(date.fromisoformat(d) for d in doc.get("holidays", []))
        return ScenarioSpec(grid=grid, buildings=tuple(buildings), sessions=sessions,
                            tariff=TariffSpec(imp, exp), seed=int(doc.get("seed", 0)),
                            holidays=holidays)
    except ParseError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed scenario document: {exc!r}") from exc


def load_scenario(path) -> ScenarioSpec:
    """Parse and validate a scenario document; raise on any violation."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: top level must be an object")
    s = scenario_from_dict(doc, base=path.parent)
    violations = validate_scenario(s)
    if violations:
        raise ValidationError(violations)
    return s


def bundled_scenario_path(name: str = "community4") -> Path:
    return Path(__file__).parent / "data" / f"{name}.scn.json"


# ---------------------------------------------------------------------------
# synthetic communities

_START = datetime(2024, 5, 6, tzinfo=timezone.utc)  # a Monday in late spring


def _bump(hours, centre, width):
    d = (hours - centre + 12.0) % 24.0 - 12.0
    return np.exp(-0.5 * (d / width) ** 2)


def _load_shape(hours):
    """Residential daily load shape in kW (before building scaling)."""
    return 0.30 + 0.55 * _bump(hours, 7.75, 1.0) + 0.35 * _bump(hours, 13.0, 1.2) \
        + 1.10 * _bump(hours, 20.0, 1.6)


def _pv_shape(hours):
    """Clear-sky generation as a fraction of peak (sunrise 6:30, sunset 20:30)."""
    x = (hours - 6.5) / 14.0
    return np.where((x > 0) & (x < 1), np.sin(np.pi * np.clip(x, 0, 1)) ** 1.5, 0.0)


def _price_shape(hours):
    """Import price in currency/kWh: cheap nights, morning shoulder, solar dip, evening peak."""
    return np.select(
        [hours < 6, hours < 7, hours < 10, hours < 17, hours < 18, hours < 22],
        [0.09, 0.12, 0.17, 0.13, 0.18, 0.25],
        0.15,
    )


# per-building asset layout mirroring a four-household community:
# every house has a charger, three have PV, one has a 9.6 kWh battery
_LAYOUT = [
    {"pv": 4.0, "battery": True, "load": 1.00, "ev": 40.0},
    {"pv": 3.0, "battery": False, "load": 0.85, "ev": 50.0},
    {"pv": 2.5, "battery": False, "load": 1.15, "ev": 40.0},
    {"pv": None, "battery": False, "load": 0.95, "ev": 60.0},
]


def generate_synthetic(seed: int, buildings: int = 4, days: int = 30) -> ScenarioSpec:
    """Build a reproducible residential community on a 15-minute grid.

    Loads peak in the morning and evening, PV follows a midday bell with a
    per-day cloud factor, prices peak in the evening and EVs arrive around
    18:00 and leave around 08:00, so shifting charging into the night pays.
    """
    if buildings < 1 or days < 1:
        raise ValueError("buildings and days must be >= 1")
    rng = np.random.default_rng(seed)
    interval = 15
    per_day = 1440 // interval
    steps = days * per_day
    dt_h = interval / 60.0
    hours = (np.arange(steps) % per_day) * dt_h
    day_hours = np.arange(per_day) * dt_h
    weekday = np.array([(_START + timedelta(days=d)).weekday() for d in range(days)])

    day_scale = rng.uniform(0.85, 1.15, days).repeat(per_day)
    import_price = np.round(_price_shape(hours) * day_scale * rng.uniform(0.97, 1.03, steps), 5)
    cloud = rng.uniform(0.35, 1.0, days).repeat(per_day)

    specs = []
    sessions = []
    for i in range(buildings):
        layout = _LAYOUT[i % len(_LAYOUT)]
        bid = f"B{i + 1}"
        scale = layout["load"] * rng.uniform(0.9, 1.1)
        weekend = np.isin(weekday, (5, 6)).repeat(per_day)
        kw = _load_shape(hours) * scale * np.where(weekend, 1.1, 1.0)
        kw = kw * rng.lognormal(0.0, 0.15, steps)
        load = np.round(kw * dt_h, 5)
        defaults = [("load_kwh", tuple(np.round(_load_shape(day_hours) * layout["load"] * dt_h, 5).tolist()))]
        pv = None
        if layout["pv"] is not None:
            peak = layout["pv"]
            gen = peak * dt_h * _pv_shape(hours) * cloud * rng.uniform(0.95, 1.0, steps)
            gen = np.minimum(np.round(gen, 5), peak * dt_h)
            pv = PvSpec(peak, tuple(gen.tolist()))
            defaults.append(("pv_kwh", tuple(np.round(peak * dt_h * 0.6 * _pv_shape(day_hours), 5).tolist())))
        battery = BatterySpec(9.6, 3.0, 0.1, 0.95, 0.95, 0.95, 0.5) if layout["battery"] else None
        charger = ChargerSpec(7.4, False, 0.95, 0.95)

        cap = layout["ev"]
        evs = []
        for night in range(-1, days):
            # the vehicle plugs in on the evening of `night` and leaves next morning
            off_day = night + 1 < days and weekday[night + 1] in (5, 6)
            arr_h = rng.normal(18.0, 0.6)
            dep_h = rng.normal(9.5 if off_day else 8.0, 0.35)
            soc_a = round(float(rng.uniform(0.25, 0.55)), 3)
            arrival = int(round(night * per_day + np.clip(arr_h, 16.0, 21.0) * 4))
            departure = int(round((night + 1) * per_day + np.clip(dep_h, 6.5, 10.5) * 4))
            arrival = max(arrival, 0)
            departure = min(departure, steps)
            if arrival >= departure or arrival >= steps:
                continue
            need = (0.8 - soc_a) * cap
            if need > (departure - arrival) * charger.rated_kw * dt_h * charger.eta_charge:
                continue
            evs.append(EvSessionSpec(f"{bid}-{len(evs):03d}", arrival, departure, soc_a, 0.8, cap))
        specs.append(BuildingSpec(bid, tuple(load.tolist()), pv, battery, charger, tuple(defaults)))
        sessions.append((bid, tuple(evs)))

    grid = TimeGrid(_START, interval, steps)
    tariff = TariffSpec(tuple(import_price.tolist()), (0.0,) * steps)
    return ScenarioSpec(grid, tuple(specs), tuple(sessions), tariff, seed=int(seed))


def day_type(s: ScenarioSpec, day: date) -> str:
    if day in s.holidays:
        return "holiday"
    return "weekend" if day.weekday() >= 5 else "weekday"


@dataclass
class ScenarioArrays:
    """Numpy views of a scenario for the hot simulation loop."""

    load: np.ndarray  # (buildings, steps)
    pv: np.ndarray
    import_price: np.ndarray
    export_price: np.ndarray
    session_index: np.ndarray  # (buildings, steps), -1 when no vehicle
    ids: list = field(default_factory=list)

    @classmethod
    def of(cls, s: ScenarioSpec) -> "ScenarioArrays":
        n, T = len(s.buildings), s.grid.steps
        load = np.array([b.load_profile for b in s.buildings], dtype=float).reshape(n, T)
        pv = np.zeros((n, T))
        idx = np.full((n, T), -1, dtype=int)
        for i, b in enumerate(s.buildings):
            if b.pv is not None:
                pv[i] = b.pv.profile
            for j, e in enumerate(s.sessions_for(b.id)):
                idx[i, e.arrival_step:e.departure_step] = j
        return cls(load, pv, np.array(s.tariff.import_price), np.array(s.tariff.export_price),
                   idx, [b.id for b in s.buildings])
