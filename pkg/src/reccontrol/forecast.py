"""Hour-of-week historical-mean forecasts for load and PV.

The model keeps, per building and metric, a ring buffer spanning the
trailing four weeks of measured values.  Position ``step % window`` holds
the value of ``step`` so the four same-slot entries of any future step are
exactly the four preceding weeks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .scenario import ScenarioSpec

SOURCES = ("hour_of_week", "persistence", "default_profile")


@dataclass(frozen=True)
class Forecast:
    metric: str
    step: int
    value_kwh: float
    source: str


class ForecastModel:
    def __init__(self, scenario: ScenarioSpec, weeks: int = 4, metrics=None):
        self.scenario = scenario
        self.grid = scenario.grid
        self.week = scenario.grid.steps_per_week
        self.weeks = weeks
        self.window = weeks * self.week
        self.last_step = -1
        self._buf: dict[tuple[str, str], np.ndarray] = {}
        self._last: dict[tuple[str, str], float] = {}
        self._metrics = metrics

    def _buffer(self, key):
        buf = self._buf.get(key)
        if buf is None:
            buf = self._buf[key] = np.full(self.window, np.nan)
        return buf

    def observe(self, frame) -> None:
        """Record the measured values of ``frame``; frames must arrive in step order."""
        step = frame.step
        if step <= self.last_step:
            raise ValueError(f"frame {step} is not after {self.last_step}")
        # clear skipped steps so stale values never leak into the window
        for s in range(max(self.last_step + 1, step - self.window + 1), step):
            for buf in self._buf.values():
                buf[s % self.window] = np.nan
        pos = step % self.window
        for buf in self._buf.values():
            buf[pos] = np.nan
        for building, cells in frame.values.items():
            for metric, cell in cells.items():
                if self._metrics is not None and metric not in self._metrics:
                    continue
                if cell.flag == "measured" and cell.value is not None:
                    self._buffer((building, metric))[pos] = cell.value
                    self._last[(building, metric)] = cell.value
        self.last_step = step

    def slot_values(self, building: str, metric: str, step: int) -> list[float]:
        """Measured values at ``step - k*week`` (k = 1..weeks) still inside the window."""
        buf = self._buf.get((building, metric))
        if buf is None:
            return []
        lo = self.last_step - self.window
        out = []
        for k in range(1, self.weeks + 1):
            s = step - k * self.week
            if s < 0:
                break
            if lo < s <= self.last_step:
                v = buf[s % self.window]
                if not math.isnan(v):
                    out.append(float(v))
        return out

    def slot_mean(self, building: str, metric: str, step: int):
        vals = self.slot_values(building, metric, step)
        if not vals:
            return None, 0
        return math.fsum(vals) / len(vals), len(vals)

    def last_measured(self, building: str, metric: str):
        return self._last.get((building, metric))

    def default(self, building: str, metric: str, step: int) -> float:
        if building == "market":
            return 0.0
        b = self.scenario.building(building)
        return b.default_value(metric, self.grid.slot_of_day(step))

    def table(self, building: str, metric: str):
        """Slot means and counts for the week following the fitted history."""
        means = np.zeros(self.week)
        counts = np.zeros(self.week, dtype=int)
        base = self.last_step + 1
        for k in range(self.week):
            step = base + k
            m, c = self.slot_mean(building, metric, step)
            slot = self.grid.slot_of_week(step) if step < self.grid.steps else (
                self.grid.slot_of_week(step % self.week))
            counts[slot] = c
            means[slot] = m if c else self.default(building, metric, step)
        return means, counts


def fit_profile(history, scenario: ScenarioSpec, weeks: int = 4) -> ForecastModel:
    """Fit slot means from aligned frames; only ``measured`` values count."""
    model = ForecastModel(scenario, weeks)
    for frame in sorted(history, key=lambda f: f.step):
        model.observe(frame)
    return model


def predict(model: ForecastModel, building: str, metric: str, step: int) -> Forecast:
    mean, count = model.slot_mean(building, metric, step)
    if count:
        return Forecast(metric, step, mean, "hour_of_week")
    last = model.last_measured(building, metric)
    if last is not None:
        return Forecast(metric, step, last, "persistence")
    return Forecast(metric, step, model.default(building, metric, step), "default_profile")
