"""Closed-loop episodes: twin -> telemetry -> controller -> supervisor -> twin.

At decision ``t`` the controller sees the cleaned frame describing interval
``t-1`` (a bootstrap frame built from the initial state at ``t = 0``).
Actions are vetted against the true device state at actuation time and
every decision is optionally appended to the audit log.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .control import (NoiseState, PolicyParams, Trainer, Transition, TrainConfig, act,
                      rbc_act, reward)
from .flexibility import EffectiveEv, FlexibilityTracker, UserPreference, resolve_preferences
from .forecast import ForecastModel, predict
from .scenario import ScenarioSpec
from .supervisor import (AssetState, SafetyEnvelope, battery_cmd_range, ev_cmd_floor, ev_cmd_range,
                         vet_action)
from .telemetry import (MARKET, OBS_DIM, OBS_FIELDS, Aligner, AlignedFrame, AnomalyFilter, Cell,
                        EvContext, Imputer, ReadingQueue, encode_observation)
from .twin import Action, FaultConfig, FaultInjector, Twin

log = logging.getLogger(__name__)

CONTROLLERS = ("maddpg", "rbc", "none", "random")


def observation_scale(scenario: ScenarioSpec) -> np.ndarray:
    """Fixed per-feature scale bringing observations to roughly unit range."""
    tariff = scenario.tariff
    pmax = max(max(tariff.import_price), 1e-6)
    pv_max = max([max(b.pv.profile) for b in scenario.buildings if b.pv is not None] + [1e-6])
    load_max = max(max(max(b.load_profile) for b in scenario.buildings), 1e-6)
    cap = max([e.ev_capacity_kwh for _, ss in scenario.sessions for e in ss] + [1.0])
    scale = {
        "price_now": 1.0 / pmax, "price_next": 1.0 / pmax,
        "pv_forecast": 1.0 / pv_max, "load_forecast": 1.0 / load_max,
        "ev_required_kwh": 1.0 / cap,
        "ev_intervals_to_departure": 1.0 / scenario.grid.steps_per_day,
    }
    return np.array([scale.get(f, 1.0) for f in OBS_FIELDS])


class DataPipeline:
    """Streaming ingestion: align, filter anomalies, impute, keep forecasts current."""

    def __init__(self, scenario: ScenarioSpec, faults: FaultConfig | None = None):
        self.scenario = scenario
        self.queue = ReadingQueue()
        self.aligner = Aligner(scenario)
        self.anomaly = AnomalyFilter(scenario)
        self.forecast = ForecastModel(scenario, metrics=("load_kwh", "pv_kwh"))
        self.imputer = Imputer(self.forecast)
        self.injector = FaultInjector(faults) if faults is not None and faults.active else None
        self.completeness: list[float] = []
        self.rejected = 0
        self.last_measured = {b.id: -1 for b in scenario.buildings}

    def bootstrap_frame(self, twin: Twin) -> AlignedFrame:
        """Initial-state frame used for the first decision."""
        s = self.scenario
        values = {}
        for i, b in enumerate(s.buildings):
            cells = {"load_kwh": Cell(b.default_value("load_kwh", s.grid.slot_of_day(0)), "default_imputed")}
            if b.pv is not None:
                cells["pv_kwh"] = Cell(b.default_value("pv_kwh", s.grid.slot_of_day(0)), "default_imputed")
            if b.battery is not None:
                cells["battery_soc"] = Cell(twin.state.battery[i].soc, "measured")
            if b.charger is not None:
                cells["ev_power_kw"] = Cell(0.0, "measured")
                ev = twin.state.ev[i]
                if ev.connected:
                    cells["ev_soc"] = Cell(ev.soc, "measured")
            values[b.id] = cells
        values[MARKET] = {"price": Cell(float(s.tariff.import_price[0]), "measured")}
        return AlignedFrame(-1, values)

    def ingest(self, readings, step: int) -> AlignedFrame:
        """Push the readings describing interval ``step`` and return its clean frame."""
        if self.injector is not None:
            readings = self.injector.apply(readings)
        self.queue.extend(readings)
        for r in self.queue.drain():
            self.aligner.add(r)
        raw = self.aligner.frame(step)
        self.completeness.append(raw.completeness)
        for b in self.last_measured:
            if raw.building_completeness(b) > 0:
                self.last_measured[b] = step
        filtered = self.anomaly.filter(raw)
        self.rejected += sum(c.flag == "rejected_anomaly" for cells in filtered.values.values()
                             for c in cells.values())
        # rejected values are treated as missing downstream
        cleaned = AlignedFrame(step, {
            b: {m: (Cell(None, None) if c.flag == "rejected_anomaly" else c) for m, c in cells.items()}
            for b, cells in filtered.values.items()})
        return self.imputer.impute(cleaned)

    def observation_age(self, building: str, decision_step: int) -> int:
        last = self.last_measured[building]
        # the bootstrap frame counts as fresh for the first decision
        return 1 if last < 0 and decision_step <= 1 else decision_step - last


class EvTracker:
    """Per-building effective departure/target for the plugged-in vehicle."""

    def __init__(self, scenario: ScenarioSpec, use_preferences: bool = True):
        self.scenario = scenario
        self.use_preferences = use_preferences
        self.flex = FlexibilityTracker(scenario)
        self.active: dict[str, tuple] = {}  # building -> (session, EffectiveEv, connect_step)

    def effective(self, building: str, ev, step: int) -> EffectiveEv | None:
        if ev is None or not ev.connected or ev.session is None:
            cur = self.active.pop(building, None)
            if cur is not None:
                sess = cur[0]
                energy = max(0.0, ev.soc - sess.soc_arrival) * sess.ev_capacity_kwh if ev else 0.0
                self.flex.complete(building, sess.id, sess.arrival_step, sess.departure_step, energy)
            return None
        cur = self.active.get(building)
        if cur is not None and cur[0] is ev.session:
            return cur[1]
        if cur is not None:
            prev = cur[0]
            self.flex.complete(building, prev.id, prev.arrival_step, prev.departure_step,
                               max(0.0, ev.soc - prev.soc_arrival) * prev.ev_capacity_kwh)
        sess = ev.session
        grid = self.scenario.grid
        pref = None
        if self.use_preferences:
            pref = UserPreference(grid.time_of(sess.departure_step).time(), sess.soc_target)
        est = self.flex.estimate(building, step)
        eff = resolve_preferences(est, pref, connect_step=step, grid=grid,
                                  capacity_kwh=sess.ev_capacity_kwh, soc_at_connect=ev.soc)
        self.active[building] = (sess, eff, step)
        return eff


@dataclass
class EpisodeResult:
    exchange: object
    rewards: np.ndarray  # (steps, n)
    interventions: int
    interventions_by_reason: dict
    completeness: list
    missing_observations: int
    unmet_kwh: float
    observations: list = field(default_factory=list)

    @property
    def min_completeness(self) -> float:
        return min(self.completeness) if self.completeness else 1.0


class RandomController:
    """Adversarial proposals: wide uniform commands with occasional NaN/inf."""

    def __init__(self, seed: int, scale: float = 3.0, invalid_rate: float = 0.05):
        self.rng = np.random.default_rng(seed)
        self.scale = scale
        self.invalid_rate = invalid_rate

    def __call__(self) -> Action:
        a = self.rng.uniform(-self.scale, self.scale, size=2)
        if self.rng.random() < self.invalid_rate:
            a[self.rng.integers(0, 2)] = self.rng.choice([np.nan, np.inf, -np.inf])
        return Action(float(a[0]), float(a[1]))


def run_episode(scenario: ScenarioSpec, controller: str = "none", *, policy: PolicyParams | None = None,
                faults: FaultConfig | None = None, audit=None, trainer: Trainer | None = None,
                noise: NoiseState | None = None, cfg: TrainConfig | None = None, seed: int = 0,
                use_preferences: bool = True, keep_observations: bool = False,
                max_observation_age: int = 2, global_step: int = 0) -> EpisodeResult:
    """Run one full episode and return its ledger and diagnostics.

    With ``trainer`` set, transitions are stored and MADDPG updates run
    every ``cfg.train_every`` steps once the buffer holds enough samples.
    """
    if controller not in CONTROLLERS:
        raise ValueError(f"unknown controller {controller!r}")
    if controller == "maddpg" and policy is None:
        raise ValueError("maddpg needs a policy")
    cfg = cfg or TrainConfig()
    twin = Twin(scenario)
    data = DataPipeline(scenario, faults)
    evs = EvTracker(scenario, use_preferences)
    grid = scenario.grid
    dt_h = grid.dt_h
    ids = scenario.building_ids
    n = len(ids)
    envelopes = [SafetyEnvelope.for_building(b, dt_h, max_observation_age=max_observation_age)
                 for b in scenario.buildings]
    prices = np.asarray(scenario.tariff.import_price, dtype=float)
    rnd = RandomController(seed) if controller == "random" else None
    steps = grid.steps
    rewards = np.zeros((steps, n))
    by_reason: dict[str, int] = {}
    n_interventions = 0
    missing = 0
    kept = []
    frame = data.bootstrap_frame(twin)
    prev_obs = prev_act = prev_rew = prev_lim = None

    for t in range(steps):
        st = twin.state
        obs = np.zeros((n, OBS_DIM))
        effs = []
        for i, b in enumerate(scenario.buildings):
            ev = st.ev[i]
            eff = evs.effective(b.id, ev, t) if b.charger is not None else None
            effs.append(eff)
            if eff is not None:
                ctx = EvContext(True, ev.session.ev_capacity_kwh, eff.departure_step, eff.soc_target)
            else:
                ctx = EvContext()
            fc = (predict(data.forecast, b.id, "pv_kwh", t).value_kwh if b.pv is not None else 0.0,
                  predict(data.forecast, b.id, "load_kwh", t).value_kwh)
            p_next = prices[t + 1] if t + 1 < steps else prices[t]
            vec = encode_observation(frame, b.id, t, ctx, fc, (prices[t], p_next), scenario)
            if not np.all(np.isfinite(vec)):
                missing += 1
            obs[i] = vec

        lim = command_ranges(scenario, st, dt_h, effs, t) if trainer is not None else None
        if trainer is not None and prev_obs is not None:
            trainer.buffer.add(Transition(prev_obs, prev_act, prev_rew, obs, False, *prev_lim, *lim))
            gs = global_step + t
            if trainer.buffer.size >= max(cfg.batch, cfg.warmup) and gs % cfg.train_every == 0:
                trainer.train_step()

        proposed, applied, all_iv = [], [], {}
        for i, b in enumerate(scenario.buildings):
            if controller == "maddpg":
                ns = None if noise is None else NoiseState(noise.seed, global_step + t, noise.sigma)
                a = act(policy, i, obs[i], explore=ns is not None, noise_state=ns)
                prop = Action(float(a[0]), float(a[1]))
            elif controller == "rbc":
                prop = rbc_act(frame, b, _rbc_ev(st.ev[i], effs[i], frame, b.id), dt_h)
            elif controller == "random":
                prop = rnd()
            else:
                prop = Action(0.0, 0.0)
            eff = effs[i]
            bat = st.battery[i]
            state = AssetState(t, bat.soc if bat is not None else None, st.ev[i],
                               eff.departure_step if eff else None, eff.soc_target if eff else None)
            age = data.observation_age(b.id, t)
            fallback = None
            if age > max_observation_age or not (math.isfinite(prop.battery_cmd) and math.isfinite(prop.ev_cmd)):
                fallback = rbc_act(frame, b, _rbc_ev(st.ev[i], eff, frame, b.id), dt_h)
            vetted, ivs = vet_action(prop, state, envelopes[i], age, building=b.id, fallback=fallback)
            proposed.append(prop)
            applied.append(vetted)
            if ivs:
                all_iv[b.id] = ivs
                n_interventions += len(ivs)
                for iv in ivs:
                    by_reason[iv.reason] = by_reason.get(iv.reason, 0) + 1

        if audit is not None:
            ts = grid.time_of(t)
            for i, b in enumerate(ids):
                audit.log_decision(t, ts, b, obs[i], _act_dict(proposed[i]), _act_dict(applied[i]),
                                   [_iv_dict(iv) for iv in all_iv.get(b, ())])
        if keep_observations:
            kept.append(obs.copy())

        outcome = twin.step(applied)
        r = reward(outcome, cfg.lambda_peak, cfg.lambda_ev)
        rewards[t] = r
        prev_obs = obs
        prev_act = np.array([[a.battery_cmd, a.ev_cmd] for a in applied])
        prev_rew = r
        prev_lim = lim
        frame = data.ingest(twin.readings(outcome), t)

    if trainer is not None and prev_obs is not None:
        # terminal transition: the next observation is never bootstrapped
        trainer.buffer.add(Transition(prev_obs, prev_act, prev_rew, prev_obs, True, *prev_lim, *prev_lim))
    ex = twin.state.exchange
    unmet = float(np.sum(ex.unmet_kwh)) if ex.unmet_kwh else 0.0
    return EpisodeResult(ex, rewards, n_interventions, by_reason, data.completeness, missing,
                         unmet, kept)


def command_ranges(scenario: ScenarioSpec, st, dt_h: float, effs=None, step: int = 0):
    """Per-building (low, high) command ranges the supervisor allows in state ``st``.

    With the effective EV sessions ``effs`` the EV floor includes the
    feasibility watchdog, so a critic bootstrapping from these ranges sees
    the charging the supervisor would force.
    """
    n = len(scenario.buildings)
    low, high = np.zeros((n, 2)), np.zeros((n, 2))
    for i, b in enumerate(scenario.buildings):
        if b.battery is not None:
            low[i, 0], high[i, 0] = battery_cmd_range(b.battery, st.battery[i].soc, dt_h)
        if b.charger is not None:
            low[i, 1], high[i, 1] = ev_cmd_range(b.charger, st.ev[i], dt_h)
            eff = effs[i] if effs is not None else None
            if eff is not None and st.ev[i].connected:
                low[i, 1] = ev_cmd_floor(b.charger, st.ev[i], eff.departure_step, eff.soc_target,
                                         step, dt_h)
    return low, high


@dataclass(frozen=True)
class RbcEv:
    """EV view for the rule-based controller: telemetry SoC, effective target."""

    connected: bool = False
    soc: float = 0.0
    soc_target: float = 0.0


def _rbc_ev(ev, eff, frame, building) -> RbcEv:
    if ev is None or not ev.connected or eff is None:
        return RbcEv()
    return RbcEv(True, frame.value(building, "ev_soc", ev.soc), eff.soc_target)


def _act_dict(a: Action) -> dict:
    return {"battery_cmd": a.battery_cmd, "ev_cmd": a.ev_cmd}


def _iv_dict(iv) -> dict:
    return {"reason": iv.reason, "proposed": _act_dict(iv.proposed), "applied": _act_dict(iv.applied)}


def make_policy(scenario: ScenarioSpec, cfg: TrainConfig) -> PolicyParams:
    from .control import action_limits, init_policy

    lo, hi = action_limits(scenario.buildings)
    return init_policy(scenario.building_ids, OBS_DIM, observation_scale(scenario), lo, hi,
                       cfg.seed, cfg.hidden)


def train_policy(scenario: ScenarioSpec, cfg: TrainConfig, faults: FaultConfig | None = None,
                 progress=None) -> tuple[PolicyParams, list[dict]]:
    """Run ``cfg.episodes`` exploring episodes with MADDPG updates."""
    policy = make_policy(scenario, cfg)
    trainer = Trainer(policy, cfg)
    history = []
    steps = scenario.grid.steps
    for ep in range(cfg.episodes):
        sigma = cfg.sigma * cfg.sigma_decay ** ep
        ep_faults = None
        if faults is not None and faults.active:
            ep_faults = FaultConfig(faults.dropout_rate, faults.noise_sigma, faults.skew_s,
                                    faults.seed + 1 + ep)
        res = run_episode(scenario, "maddpg", policy=policy, trainer=trainer, cfg=cfg,
                          noise=NoiseState(cfg.seed, 0, sigma), faults=ep_faults,
                          global_step=ep * steps)
        info = {"episode": ep, "sigma": sigma, "return": float(res.rewards.sum()),
                "unmet_kwh": res.unmet_kwh, "interventions": res.interventions,
                "updates": trainer.updates}
        history.append(info)
        log.info("episode %d return %.3f updates %d", ep, info["return"], trainer.updates)
        if progress is not None:
            progress(info)
    return policy, history
