"""Desk benchmark: train on the bundled community, then compare controllers.

Usage: python scripts/desk_benchmark.py [--out DIR] [--episodes N]

Prints the wall time of train+eval, the normalized KPI table of the
trained policy, and the same table for the rule-based controller.
"""

import argparse
import tempfile
import time
from pathlib import Path

from reccontrol.cli import run_evaluate, run_train
from reccontrol.control import TrainConfig
from reccontrol.kpi import render_table


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", help="run directory (temporary if omitted)")
    p.add_argument("--scenario", default="community4")
    p.add_argument("--episodes", type=int, default=TrainConfig.episodes)
    p.add_argument("--train-every", type=int, default=TrainConfig.train_every)
    args = p.parse_args()
    out = Path(args.out) if args.out else Path(tempfile.mkdtemp(prefix="rec-bench-"))
    cfg = TrainConfig(episodes=args.episodes, train_every=args.train_every)

    t0 = time.monotonic()
    run_train(args.scenario, out, cfg)
    wall = time.monotonic() - t0
    print(f"train+eval {wall:.1f} s ({cfg.episodes} episodes, update every {cfg.train_every} steps)")
    print((out / "kpi.txt").read_text(), end="")

    doc, report = run_evaluate(scenario_ref=args.scenario, controller="rbc")
    print("\nrule-based controller")
    print(render_table(report), end="")
    print(f"unmet {doc['episode']['unmet_kwh']:.3f} kWh")
    print(f"\nrun directory: {out}")


if __name__ == "__main__":
    main()
