"""Discrete-time digital twin of the community plus fault injection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from datetime import timedelta
from typing import Iterable, Iterator

import numpy as np

from .errors import EpisodeOver
from .scenario import BatterySpec, ChargerSpec, EvSessionSpec, ScenarioArrays, ScenarioSpec
from .telemetry import RawReading

# shortfalls below this are floating-point residue of an exactly met target
SHORTFALL_EPS_KWH = 1e-9


@dataclass(frozen=True)
class Action:
    battery_cmd: float = 0.0
    ev_cmd: float = 0.0


@dataclass(frozen=True)
class BatteryState:
    soc: float


@dataclass(frozen=True)
class EvState:
    connected: bool = False
    soc: float = 0.0
    session: EvSessionSpec | None = None
    unmet_kwh_at_departure: float = 0.0


def step_battery(b: BatterySpec, state: BatteryState, cmd: float, dt_h: float):
    """Apply a fractional power command; return (new state, signed AC-side kWh).

    Commands are clipped against the SoC bounds, never rejected.
    """
    soc = state.soc
    if cmd > 0:
        gain = min(cmd * b.rated_kw * dt_h * b.eta_charge, (b.soc_max - soc) * b.capacity_kwh)
        gain = max(gain, 0.0)
        new = min(soc + gain / b.capacity_kwh, b.soc_max)
        return BatteryState(new), gain / b.eta_charge
    if cmd < 0:
        draw = min(-cmd * b.rated_kw * dt_h / b.eta_discharge, (soc - b.soc_min) * b.capacity_kwh)
        draw = max(draw, 0.0)
        new = max(soc - draw / b.capacity_kwh, b.soc_min)
        return BatteryState(new), -draw * b.eta_discharge
    return state, 0.0


def ev_reserve(c: ChargerSpec, session: EvSessionSpec | None) -> float:
    """SoC floor for discharging: arrival SoC under V2G, otherwise irrelevant (0)."""
    if session is None or not c.v2g_enabled:
        return 0.0
    return session.soc_arrival


def _ev_battery(c: ChargerSpec, session: EvSessionSpec) -> BatterySpec:
    return BatterySpec(
        capacity_kwh=session.ev_capacity_kwh, rated_kw=c.rated_kw,
        soc_min=ev_reserve(c, session), soc_max=1.0,
        eta_charge=c.eta_charge, eta_discharge=c.eta_discharge, soc_init=session.soc_arrival,
    )


def step_ev(c: ChargerSpec, s: EvState, sessions, cmd: float, dt_h: float, step: int):
    """Advance one charger by one interval; return (new state, AC-side kWh, unmet kWh).

    ``sessions`` is the building's schedule.  Departure and arrival are
    resolved at the boundary after the interval so the returned state is
    what the controller sees at ``step + 1``.
    """
    ac = 0.0
    if s.connected and s.session is not None:
        if not c.v2g_enabled:
            cmd = max(cmd, 0.0)
        spec = _ev_battery(c, s.session)
        lo = min(spec.soc_min, s.soc)
        spec = replace(spec, soc_min=lo)
        new_b, ac = step_battery(spec, BatteryState(s.soc), cmd, dt_h)
        s = replace(s, soc=new_b.soc)
    unmet = 0.0
    nxt = step + 1
    if s.connected and s.session is not None and s.session.departure_step == nxt:
        short = max(0.0, s.session.soc_target - s.soc) * s.session.ev_capacity_kwh
        unmet = short if short > SHORTFALL_EPS_KWH else 0.0
        s = EvState(False, s.soc, None, s.unmet_kwh_at_departure + unmet)
    if not s.connected:
        for e in sessions:
            if e.arrival_step == nxt:
                s = EvState(True, e.soc_arrival, e, s.unmet_kwh_at_departure)
                break
    return s, ac, unmet


def initial_ev_state(sessions) -> EvState:
    for e in sessions:
        if e.arrival_step == 0:
            return EvState(True, e.soc_arrival, e, 0.0)
    return EvState()


def step_building(spec, state, action: Action, step: int, *, load: float, pv: float,
                  sessions=(), dt_h: float = 0.25):
    """Return ((battery state, ev state), net kWh, details) for one building."""
    bat_state, ev_state = state
    bat_ac = 0.0
    if spec.battery is not None and bat_state is not None:
        bat_state, bat_ac = step_battery(spec.battery, bat_state, action.battery_cmd, dt_h)
    ev_ac, unmet = 0.0, 0.0
    if spec.charger is not None and ev_state is not None:
        ev_state, ev_ac, unmet = step_ev(spec.charger, ev_state, sessions, action.ev_cmd, dt_h, step)
    net = load - pv + bat_ac + ev_ac
    return (bat_state, ev_state), net, {"battery_ac": bat_ac, "ev_ac": ev_ac, "unmet": unmet}


@dataclass
class GridExchange:
    """Per-step ledger of the episode, one row per step and one column per building."""

    net_kwh: list = field(default_factory=list)
    load_kwh: list = field(default_factory=list)
    pv_kwh: list = field(default_factory=list)
    battery_ac_kwh: list = field(default_factory=list)
    ev_ac_kwh: list = field(default_factory=list)
    import_cost: list = field(default_factory=list)
    export_credit: list = field(default_factory=list)
    unmet_kwh: list = field(default_factory=list)

    @property
    def community_kwh(self) -> np.ndarray:
        return np.asarray(self.net_kwh, dtype=float).reshape(-1, self.n_buildings).sum(axis=1)

    @property
    def n_buildings(self) -> int:
        return len(self.net_kwh[0]) if self.net_kwh else 0

    def arrays(self) -> dict:
        return {k: np.asarray(getattr(self, k), dtype=float) for k in (
            "net_kwh", "load_kwh", "pv_kwh", "battery_ac_kwh", "ev_ac_kwh",
            "import_cost", "export_credit", "unmet_kwh")}


@dataclass
class StepOutcome:
    step: int
    net_kwh: np.ndarray
    cost: np.ndarray
    community_kwh: float
    unmet_kwh: np.ndarray
    load_kwh: np.ndarray
    pv_kwh: np.ndarray
    battery_ac_kwh: np.ndarray
    ev_ac_kwh: np.ndarray


@dataclass
class SimState:
    step: int
    battery: list  # BatteryState | None per building
    ev: list  # EvState | None per building
    exchange: GridExchange


class Twin:
    """The community simulator.  ``step`` advances every building by one interval."""

    def __init__(self, scenario: ScenarioSpec):
        self.scenario = scenario
        self.arrays = ScenarioArrays.of(scenario)
        self.dt_h = scenario.grid.dt_h
        self._sessions = [scenario.sessions_for(b.id) for b in scenario.buildings]
        self.reset()

    def reset(self) -> SimState:
        s = self.scenario
        self.state = SimState(
            step=0,
            battery=[BatteryState(b.battery.soc_init) if b.battery else None for b in s.buildings],
            ev=[initial_ev_state(ss) if b.charger else None for b, ss in zip(s.buildings, self._sessions)],
            exchange=GridExchange(),
        )
        return self.state

    @property
    def done(self) -> bool:
        return self.state.step >= self.scenario.grid.steps

    def step(self, actions) -> StepOutcome:
        """Advance one interval; ``actions`` is a sequence of :class:`Action` in building order."""
        st = self.state
        t = st.step
        if t >= self.scenario.grid.steps:
            raise EpisodeOver(f"episode already has {t} steps")
        n = len(self.scenario.buildings)
        if len(actions) != n:
            raise ValueError(f"expected {n} actions, got {len(actions)}")
        a = self.arrays
        net = np.zeros(n)
        bat_ac = np.zeros(n)
        ev_ac = np.zeros(n)
        unmet = np.zeros(n)
        for i, spec in enumerate(self.scenario.buildings):
            (bs, es), net[i], d = step_building(
                spec, (st.battery[i], st.ev[i]), actions[i], t,
                load=a.load[i, t], pv=a.pv[i, t], sessions=self._sessions[i], dt_h=self.dt_h)
            st.battery[i], st.ev[i] = bs, es
            bat_ac[i], ev_ac[i], unmet[i] = d["battery_ac"], d["ev_ac"], d["unmet"]
        imp = a.import_price[t] * np.maximum(net, 0.0)
        exp = a.export_price[t] * np.maximum(-net, 0.0)
        ex = st.exchange
        ex.net_kwh.append(net.tolist())
        ex.load_kwh.append(a.load[:, t].tolist())
        ex.pv_kwh.append(a.pv[:, t].tolist())
        ex.battery_ac_kwh.append(bat_ac.tolist())
        ex.ev_ac_kwh.append(ev_ac.tolist())
        ex.import_cost.append(imp.tolist())
        ex.export_credit.append(exp.tolist())
        ex.unmet_kwh.append(unmet.tolist())
        st.step = t + 1
        return StepOutcome(t, net, imp - exp, float(net.sum()), unmet,
                           a.load[:, t].copy(), a.pv[:, t].copy(), bat_ac, ev_ac)

    def readings(self, outcome: StepOutcome) -> list[RawReading]:
        """Meter/asset readings describing the interval just simulated.

        Timestamped at the interval end; state metrics report the state seen
        by the controller at the next decision.
        """
        sc = self.scenario
        ts = sc.grid.time_of(outcome.step + 1)
        out = []
        for i, b in enumerate(sc.buildings):
            out.append(RawReading(f"{b.id}.meter", "load_kwh", ts, float(outcome.load_kwh[i])))
            if b.pv is not None:
                out.append(RawReading(f"{b.id}.pv", "pv_kwh", ts, float(outcome.pv_kwh[i])))
            if b.battery is not None:
                out.append(RawReading(f"{b.id}.battery", "battery_soc", ts, float(self.state.battery[i].soc)))
            if b.charger is not None:
                out.append(RawReading(f"{b.id}.charger", "ev_power_kw", ts,
                                      float(outcome.ev_ac_kwh[i] / self.dt_h)))
                ev = self.state.ev[i]
                if ev.connected:
                    out.append(RawReading(f"{b.id}.charger", "ev_soc", ts, float(ev.soc)))
        out.append(RawReading("market", "price", ts, float(self.arrays.import_price[outcome.step])))
        return out


def step_community(twin: Twin, actions) -> SimState:
    """Functional-style wrapper: advance ``twin`` one step and return its state."""
    twin.step(actions)
    return twin.state


# ---------------------------------------------------------------------------
# fault injection


@dataclass(frozen=True)
class FaultConfig:
    dropout_rate: float = 0.0
    noise_sigma: float = 0.0
    skew_s: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("dropout_rate", "noise_sigma"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.skew_s < 0 or not math.isfinite(self.skew_s):
            raise ValueError("skew_s must be a finite non-negative number of seconds")

    @property
    def active(self) -> bool:
        return self.dropout_rate > 0 or self.noise_sigma > 0 or self.skew_s > 0


class FaultInjector:
    """Stateful degrader; successive calls continue the same random streams.

    Dropout, noise and skew draw from independent child streams of the
    seed, so the set of dropped readings does not depend on whether noise
    or skew are enabled.
    """

    def __init__(self, cfg: FaultConfig):
        self.cfg = cfg
        drop, noise, skew = np.random.SeedSequence(cfg.seed).spawn(3)
        self._drop = np.random.default_rng(drop)
        self._noise = np.random.default_rng(noise)
        self._skew = np.random.default_rng(skew)

    def apply(self, feed: Iterable[RawReading]) -> Iterator[RawReading]:
        cfg = self.cfg
        for r in feed:
            # one draw per stream per reading, always, so the streams stay aligned
            u = self._drop.random()
            z = self._noise.standard_normal()
            k = self._skew.uniform(-1.0, 1.0)
            if u < cfg.dropout_rate:
                continue
            if cfg.noise_sigma == 0 and cfg.skew_s == 0:
                yield r
                continue
            value = r.value * (1.0 + cfg.noise_sigma * z)
            ts = r.timestamp + timedelta(seconds=k * cfg.skew_s)
            yield RawReading(r.source_id, r.metric, ts, value)


def inject_faults(feed: Iterable[RawReading], cfg: FaultConfig) -> Iterator[RawReading]:
    return FaultInjector(cfg).apply(feed)
