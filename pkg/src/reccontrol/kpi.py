"""Community KPIs (consumption, cost, self-sufficiency, peak, ramping).

Raw KPIs come from the per-step exchange ledger of one episode; the
normalized report expresses a controlled run relative to the no-control
baseline.  Cost, consumption, peak and ramping deltas are percentage
changes (negative is better); self-sufficiency is a percentage-point
difference (positive is better).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BaselineZero, EmptyRun

KPI_ROWS = ("D", "C", "Z", "P", "R")
# which cells the table shows per building and at community level
BUILDING_KPIS = ("D", "C", "Z")
COMMUNITY_KPIS = ("C", "Z", "P", "R")
RATIO_KPIS = ("D", "C", "P", "R")


@dataclass(frozen=True)
class KpiReport:
    """Raw KPIs; ``buildings`` maps id -> {D, C, Z}, ``community`` holds {C, Z, P, R}.

    Community D is kept as well (it is simply not shown in the table).
    """

    buildings: dict
    community: dict
    building_ids: tuple = ()

    def to_dict(self) -> dict:
        return {"buildings": self.buildings, "community": self.community}


@dataclass(frozen=True)
class NormalizedReport:
    raw: KpiReport
    baseline: KpiReport
    deltas: dict  # column -> kpi -> percent
    omitted: tuple = field(default=())  # (column, kpi) with zero baseline

    def to_dict(self) -> dict:
        return {
            "raw": self.raw.to_dict(),
            "baseline": self.baseline.to_dict(),
            "normalized_pct": self.deltas,
            "omitted": [list(x) for x in self.omitted],
        }


def _day_chunks(n: int, steps_per_day: int):
    return [(s, min(s + steps_per_day, n)) for s in range(0, n, steps_per_day)]


def compute_kpis(net, import_price, export_price, consumption, steps_per_day: int,
                 building_ids=None) -> KpiReport:
    """KPIs from arrays shaped (steps, buildings) plus per-step prices.

    ``consumption`` is each building's own demand per step: load plus the
    charging side of battery and EV flows.
    """
    net = np.asarray(net, dtype=float)
    if net.ndim == 1:
        net = net[:, None]
    if net.size == 0:
        raise EmptyRun("no steps recorded")
    t, n = net.shape
    imp_p = np.asarray(import_price, dtype=float)[:t]
    exp_p = np.asarray(export_price, dtype=float)[:t]
    cons = np.asarray(consumption, dtype=float).reshape(t, n)
    ids = tuple(building_ids) if building_ids is not None else tuple(f"B{i + 1}" for i in range(n))
    imports = np.maximum(net, 0.0)
    exports = np.maximum(-net, 0.0)
    buildings = {}
    for i, b in enumerate(ids):
        d = math.fsum(imports[:, i])
        c = math.fsum(imp_p * imports[:, i]) - math.fsum(exp_p * exports[:, i])
        total = math.fsum(cons[:, i])
        z = 1.0 - d / total if total > 0 else 1.0
        buildings[b] = {"D": d, "C": c, "Z": min(max(z, 0.0), 1.0)}
    community = net.sum(axis=1)
    comm_imp = np.maximum(community, 0.0)
    total = math.fsum(cons.ravel())
    z = 1.0 - math.fsum(comm_imp) / total if total > 0 else 1.0
    peaks = [float(comm_imp[a:b].max()) for a, b in _day_chunks(t, steps_per_day)]
    comm = {
        "D": math.fsum(comm_imp),
        "C": math.fsum(v["C"] for v in buildings.values()),
        "Z": min(max(z, 0.0), 1.0),
        "P": math.fsum(peaks) / len(peaks),
        "R": math.fsum(np.abs(np.diff(community))),
    }
    return KpiReport(buildings, comm, ids)


def consumption_of(load, battery_ac, ev_ac) -> np.ndarray:
    return (np.asarray(load, dtype=float) + np.maximum(np.asarray(battery_ac, dtype=float), 0.0)
            + np.maximum(np.asarray(ev_ac, dtype=float), 0.0))


def kpis_from_exchange(exchange, scenario) -> KpiReport:
    a = exchange.arrays()
    if a["net_kwh"].size == 0:
        raise EmptyRun("episode has no recorded steps")
    t = a["net_kwh"].shape[0]
    prices = scenario.tariff
    return compute_kpis(
        a["net_kwh"], np.asarray(prices.import_price)[:t], np.asarray(prices.export_price)[:t],
        consumption_of(a["load_kwh"], a["battery_ac_kwh"], a["ev_ac_kwh"]),
        scenario.grid.steps_per_day, scenario.building_ids,
    )


def delta(kpi: str, control: float, baseline: float) -> float:
    """Normalized change of one KPI; raises BaselineZero for ratio KPIs with baseline <= 0."""
    if kpi == "Z":
        return (control - baseline) * 100.0
    if not baseline > 0:
        raise BaselineZero(f"{kpi} baseline is {baseline}")
    return (control / baseline - 1.0) * 100.0


def normalize_report(control: KpiReport, baseline: KpiReport) -> NormalizedReport:
    if control.building_ids != baseline.building_ids:
        raise ValueError("reports describe different buildings")
    deltas, omitted = {}, []
    cols = [(b, control.buildings[b], baseline.buildings[b], BUILDING_KPIS) for b in control.building_ids]
    cols.append(("REC", control.community, baseline.community, COMMUNITY_KPIS))
    for col, cur, base, kpis in cols:
        deltas[col] = {}
        for k in kpis:
            try:
                deltas[col][k] = delta(k, cur[k], base[k])
            except BaselineZero:
                omitted.append((col, k))
    return NormalizedReport(control, baseline, deltas, tuple(omitted))


def format_pct(x: float) -> str:
    if x == 0:
        return "0.00%"
    return f"{x:+.2f}%"


def render_table(report: NormalizedReport) -> str:
    """Aligned text table: KPI rows, building columns then the community."""
    cols = list(report.raw.building_ids) + ["REC"]
    rows = [["KPI"] + cols]
    for k in KPI_ROWS:
        row = [k]
        for c in cols:
            shown = (k in COMMUNITY_KPIS) if c == "REC" else (k in BUILDING_KPIS)
            if not shown:
                row.append("-")
            elif k in report.deltas.get(c, {}):
                row.append(format_pct(report.deltas[c][k]))
            else:
                row.append("n/a")
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(cols) + 1)]
    lines = ["  ".join(cell.rjust(w) if j else cell.ljust(w) for j, (cell, w) in enumerate(zip(r, widths)))
             for r in rows]
    return "\n".join(lines) + "\n"


def report_json(report: NormalizedReport) -> str:
    return json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"


def parse_table(text: str) -> dict:
    """Read a rendered table back into {column: {kpi: percent}} (blank cells skipped)."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    cols = lines[0].split()[1:]
    out = {c: {} for c in cols}
    for ln in lines[1:]:
        cells = ln.split()
        for c, cell in zip(cols, cells[1:]):
            if cell.endswith("%"):
                out[c][cells[0]] = float(cell[:-1])
    return out
