"""Regenerate the bundled community scenario and the small golden test file."""

from pathlib import Path

from reccontrol.scenario import bundled_scenario_path, dumps_scenario, generate_synthetic

ROOT = Path(__file__).resolve().parents[1]


def main():
    bundled_scenario_path("community4").write_text(
        dumps_scenario(generate_synthetic(42, 4, 30)), encoding="utf-8")
    golden = ROOT / "tests" / "data" / "synthetic_7_1_1.json"
    golden.write_text(dumps_scenario(generate_synthetic(7, 1, 1)), encoding="utf-8")
    print("wrote", bundled_scenario_path("community4"), "and", golden)


if __name__ == "__main__":
    main()
