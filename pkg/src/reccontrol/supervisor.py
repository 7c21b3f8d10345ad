"""Fail-safe supervisor: vets proposed actions against the safety envelope.

Checks run in a fixed order so interventions are reproducible:
invalid values, stale data, magnitude clamp, SoC projection, EV
feasibility watchdog.  Every change to the action is recorded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .scenario import BatterySpec, BuildingSpec, ChargerSpec
from .twin import Action, EvState, ev_reserve

REASONS = ("overrated_power", "soc_bound", "ev_reserve", "infeasible_target", "stale_data",
           "invalid_value")


@dataclass(frozen=True)
class SafetyEnvelope:
    battery: BatterySpec | None = None
    charger: ChargerSpec | None = None
    max_observation_age: int = 2
    feasibility_margin: float = 1.0
    dt_h: float = 0.25

    def __post_init__(self):
        if self.max_observation_age < 1:
            raise ValueError("max_observation_age must be >= 1")
        for spec in (self.battery, self.charger):
            if spec is not None and not spec.rated_kw > 0:
                raise ValueError("ratings must be positive")

    @classmethod
    def for_building(cls, b: BuildingSpec, dt_h: float, **kw) -> "SafetyEnvelope":
        return cls(b.battery, b.charger, dt_h=dt_h, **kw)


@dataclass(frozen=True)
class AssetState:
    """Device state read at actuation time plus the session's effective targets."""

    step: int
    battery_soc: float | None = None
    ev: EvState | None = None
    departure_step: int | None = None
    soc_target: float | None = None


@dataclass(frozen=True)
class Intervention:
    step: int
    building: str
    reason: str
    proposed: Action
    applied: Action


def battery_cmd_range(b: BatterySpec, soc: float, dt_h: float) -> tuple[float, float]:
    """Command interval whose post-step SoC stays in bounds (same arithmetic as the twin)."""
    hi = (b.soc_max - soc) * b.capacity_kwh / (b.rated_kw * dt_h * b.eta_charge)
    lo = -(soc - b.soc_min) * b.capacity_kwh * b.eta_discharge / (b.rated_kw * dt_h)
    return min(max(lo, -1.0), 0.0), max(min(hi, 1.0), 0.0)


def ev_cmd_range(c: ChargerSpec, ev: EvState, dt_h: float) -> tuple[float, float]:
    if not ev.connected or ev.session is None:
        return 0.0, 0.0
    cap = ev.session.ev_capacity_kwh
    hi = (1.0 - ev.soc) * cap / (c.rated_kw * dt_h * c.eta_charge)
    if not c.v2g_enabled:
        return 0.0, max(min(hi, 1.0), 0.0)
    reserve = ev_reserve(c, ev.session)
    lo = -(ev.soc - reserve) * cap * c.eta_discharge / (c.rated_kw * dt_h)
    return min(max(lo, -1.0), 0.0), max(min(hi, 1.0), 0.0)


def ev_soc_after(c: ChargerSpec, ev: EvState, cmd: float, dt_h: float) -> float:
    cap = ev.session.ev_capacity_kwh
    if cmd >= 0:
        return ev.soc + cmd * c.rated_kw * dt_h * c.eta_charge / cap
    return ev.soc + cmd * c.rated_kw * dt_h / c.eta_discharge / cap


def feasibility_watchdog(ev_soc: float, capacity_kwh: float, intervals_left: int, soc_target: float,
                         charger: ChargerSpec, dt_h: float = 0.25, margin: float = 1.0):
    """Return an override command (+1) when the target is out of reach, else None.

    ``intervals_left`` counts the intervals still available for charging.
    """
    required = (soc_target - ev_soc) * capacity_kwh
    if required <= 0:
        return None
    deliverable = max(intervals_left, 0) * charger.rated_kw * dt_h * charger.eta_charge * margin
    return 1.0 if required > deliverable else None


def ev_cmd_floor(c: ChargerSpec, ev: EvState, departure_step: int | None, soc_target: float | None,
                 step: int, dt_h: float, margin: float = 1.0) -> float:
    """Smallest EV command the watchdog lets through unchanged.

    Anything lower is overridden to the top of ``ev_cmd_range``, so the
    commands a policy can actually realize are ``[floor, hi]`` (or ``hi``
    alone when the target already needs full power).
    """
    lo, hi = ev_cmd_range(c, ev, dt_h)
    if departure_step is None or soc_target is None or hi <= lo:
        return lo
    cap = ev.session.ev_capacity_kwh
    left = departure_step - step - 1
    slack = (soc_target - ev.soc) * cap - max(left, 0) * c.rated_kw * dt_h * c.eta_charge * margin
    if slack > 0:
        cmd = slack / (c.rated_kw * dt_h * c.eta_charge)
    else:
        cmd = slack * c.eta_discharge / (c.rated_kw * dt_h)
    def passes(x):
        return feasibility_watchdog(ev_soc_after(c, ev, x, dt_h), cap, left, soc_target, c, dt_h,
                                    margin) is None

    cmd = min(max(cmd, lo), hi)
    if passes(cmd):
        return cmd
    if not passes(hi):
        return hi
    # rounding left the closed form a hair short: bisect onto the boundary
    a, b = cmd, hi
    for _ in range(64):
        m = 0.5 * (a + b)
        if m in (a, b):
            break
        a, b = (a, m) if passes(m) else (m, b)
    return b


def _finite(a: Action) -> bool:
    return math.isfinite(a.battery_cmd) and math.isfinite(a.ev_cmd)


def default_fallback(state: AssetState, env: SafetyEnvelope) -> Action:
    ev = state.ev
    charge = ev is not None and ev.connected and state.soc_target is not None and ev.soc < state.soc_target
    return Action(0.0, 1.0 if charge else 0.0)


def vet_action(proposed: Action, state: AssetState, envelope: SafetyEnvelope,
               observation_age: int, *, building: str = "", fallback: Action | None = None):
    """Return (applied action, interventions).  Total: always yields a safe action."""
    reasons: list[str] = []
    step = state.step
    a = proposed

    # 1-2: unusable proposal or stale inputs -> rule-based fallback
    if not _finite(a) or observation_age > envelope.max_observation_age:
        reason = "invalid_value" if not _finite(a) else "stale_data"
        fb = fallback if fallback is not None and _finite(fallback) else default_fallback(state, envelope)
        reasons.append(reason)
        a = fb

    # 3: magnitude clamp to rated power (and to zero for absent assets)
    b_lo, b_hi = (-1.0, 1.0) if envelope.battery is not None and state.battery_soc is not None else (0.0, 0.0)
    ch = envelope.charger
    ev = state.ev
    if ch is not None and ev is not None and ev.connected:
        e_lo, e_hi = (-1.0 if ch.v2g_enabled else 0.0), 1.0
    else:
        e_lo, e_hi = 0.0, 0.0
    clamped = Action(min(max(a.battery_cmd, b_lo), b_hi), min(max(a.ev_cmd, e_lo), e_hi))
    if clamped != a:
        reasons.append("overrated_power")
        a = clamped

    # 4: projection so the post-step SoC respects bounds and EV reserve
    if envelope.battery is not None and state.battery_soc is not None:
        lo, hi = battery_cmd_range(envelope.battery, state.battery_soc, envelope.dt_h)
        cmd = min(max(a.battery_cmd, lo), hi)
        if cmd != a.battery_cmd:
            a = Action(cmd, a.ev_cmd)
            reasons.append("soc_bound")
    if ch is not None and ev is not None and ev.connected:
        lo, hi = ev_cmd_range(ch, ev, envelope.dt_h)
        cmd = min(max(a.ev_cmd, lo), hi)
        if cmd != a.ev_cmd:
            reason = "ev_reserve" if cmd > a.ev_cmd else "soc_bound"
            a = Action(a.battery_cmd, cmd)
            reasons.append(reason)

        # 5: will the target still be reachable after this step?
        if state.departure_step is not None and state.soc_target is not None:
            soc_next = ev_soc_after(ch, ev, a.ev_cmd, envelope.dt_h)
            left = state.departure_step - step - 1
            if feasibility_watchdog(soc_next, ev.session.ev_capacity_kwh, left, state.soc_target,
                                    ch, envelope.dt_h, envelope.feasibility_margin) is not None:
                cmd = hi
                if cmd != a.ev_cmd:
                    a = Action(a.battery_cmd, cmd)
                    reasons.append("infeasible_target")
    # every intervention reports the action finally applied
    return a, [Intervention(step, building, r, proposed, a) for r in reasons]
