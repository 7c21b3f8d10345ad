import json
from dataclasses import replace
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from reccontrol.errors import ParseError, ValidationError
from reccontrol.scenario import (
    PvSpec, bundled_scenario_path, dumps_scenario, generate_synthetic, load_scenario,
    save_scenario, scenario_from_dict, scenario_to_dict, validate_scenario,
)

from builders import battery, building, one_house, scenario, session

GOLDEN = Path(__file__).parent / "data" / "synthetic_7_1_1.json"


class TestLoad:
    def test_bundled_community_round_trips(self, tmp_path):
        s = load_scenario(bundled_scenario_path("community4"))
        assert len(s.buildings) == 4
        assert s.grid.interval_minutes == 15
        p = tmp_path / "again.json"
        save_scenario(s, p)
        assert load_scenario(p) == s

    def test_bundled_is_the_seed_42_generator_output(self):
        text = bundled_scenario_path("community4").read_text(encoding="utf-8")
        assert text == dumps_scenario(generate_synthetic(42, 4, 30))

    def test_inverted_soc_bounds_rejected(self, tmp_path):
        doc = scenario_to_dict(one_house())
        doc["buildings"][0]["battery"].update(soc_min=0.9, soc_max=0.2)
        p = tmp_path / "bad.json"
        p.write_text(json.dumps(doc))
        with pytest.raises(ValidationError) as exc:
            load_scenario(p)
        assert any("soc_min < soc_max" in v for v in exc.value.violations)
        assert any(v.startswith("buildings[0].battery") for v in exc.value.violations)

    def test_empty_buildings_rejected(self, tmp_path):
        doc = scenario_to_dict(one_house())
        doc["buildings"] = []
        doc["sessions"] = {}
        p = tmp_path / "empty.json"
        p.write_text(json.dumps(doc))
        with pytest.raises(ValidationError, match="at least one building"):
            load_scenario(p)

    @pytest.mark.parametrize("text", ["{", "[]", '{"grid": {}}'])
    def test_malformed_documents(self, tmp_path, text):
        p = tmp_path / "x.json"
        p.write_text(text)
        with pytest.raises(ParseError):
            load_scenario(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ParseError):
            load_scenario(tmp_path / "nope.json")

    def test_csv_series_reference(self, tmp_path):
        s = one_house(steps=4)
        doc = scenario_to_dict(s)
        (tmp_path / "load.csv").write_text("step,value\n0,0.1\n1,0.2\n2,0.3\n3,0.4\n")
        doc["buildings"][0]["load_profile"] = "load.csv"
        p = tmp_path / "s.json"
        p.write_text(json.dumps(doc))
        assert load_scenario(p).buildings[0].load_profile == (0.1, 0.2, 0.3, 0.4)

    def test_csv_with_wrong_header(self, tmp_path):
        doc = scenario_to_dict(one_house(steps=2))
        (tmp_path / "load.csv").write_text("t,v\n0,1\n1,1\n")
        doc["buildings"][0]["load_profile"] = "load.csv"
        p = tmp_path / "s.json"
        p.write_text(json.dumps(doc))
        with pytest.raises(ParseError, match="header"):
            load_scenario(p)


class TestValidate:
    def test_valid_scenario_has_no_violations(self):
        assert validate_scenario(one_house()) == []

    def test_overlapping_sessions_named(self):
        s = one_house(sessions=(session("a", 0, 5), session("b", 3, 8)))
        v = validate_scenario(s)
        assert len(v) == 1
        assert "'a'" in v[0] and "'b'" in v[0]

    def test_pv_above_peak_reports_step_index(self):
        # peak 1 kW on a 15-minute grid caps each interval at 0.25 kWh
        b = building("B1", 8)
        b = replace(b, pv=PvSpec(1.0, (0.1, 0.2, 0.25, 0.3, 0.0, 0.0, 0.0, 0.0)))
        v = validate_scenario(scenario([b], 8))
        assert len(v) == 1
        assert v[0].startswith("buildings[0].pv.profile[3]")

    def test_every_violation_has_a_field_path(self):
        b = building("B1", 8, load=-1.0, battery=battery(soc_init=0.99))
        v = validate_scenario(scenario([b, b], 8, price=-0.1))
        assert v
        assert all(": " in x and x.split(": ")[0] for x in v)
        assert any("duplicate building id" in x for x in v)

    def test_session_on_building_without_charger(self):
        s = scenario([building("B1", 8)], 8, sessions=(("B1", (session(),)),))
        assert any("has no charger" in v for v in validate_scenario(s))

    def test_session_target_below_arrival(self):
        s = one_house(sessions=(session(soc_arrival=0.9, soc_target=0.5),))
        assert any("soc_arrival <= soc_target" in v for v in validate_scenario(s))


class TestSynthetic:
    def test_community_dimensions(self):
        s = generate_synthetic(42, 4, 30)
        assert s.grid.steps == 30 * 96
        assert len(s.buildings) == 4

    def test_same_seed_same_bytes(self):
        assert dumps_scenario(generate_synthetic(5, 2, 3)) == dumps_scenario(generate_synthetic(5, 2, 3))

    def test_different_seed_differs(self):
        assert dumps_scenario(generate_synthetic(5, 2, 3)) != dumps_scenario(generate_synthetic(6, 2, 3))

    def test_golden_single_building_day(self):
        s = generate_synthetic(7, 1, 1)
        assert s.grid.steps == 96 and len(s.buildings) == 1
        assert len(s.sessions_for("B1")) >= 1
        assert json.loads(dumps_scenario(s)) == json.loads(GOLDEN.read_text(encoding="utf-8"))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_generator_output_always_valid(self, seed):
        assert validate_scenario(generate_synthetic(seed, 4, 2)) == []

    def test_shapes_favour_load_shifting(self):
        s = generate_synthetic(42, 4, 7)
        hour = [(k % 96) / 4 for k in range(s.grid.steps)]
        price = s.tariff.import_price
        night = [p for p, h in zip(price, hour) if h < 6]
        evening = [p for p, h in zip(price, hour) if 18 <= h < 22]
        assert max(night) < min(evening)
        pv = s.buildings[0].pv.profile
        assert sum(v for v, h in zip(pv, hour) if 11 <= h < 15) > 0
        assert all(v == 0 for v, h in zip(pv, hour) if h < 6)
        arrivals = [(e.arrival_step % 96) / 4 for e in s.sessions_for("B1")]
        assert all(16 <= h <= 21 for h in arrivals[1:])

    def test_rejects_degenerate_arguments(self):
        with pytest.raises(ValueError):
            generate_synthetic(1, 0, 1)


class TestRoundTrip:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 3))
    def test_serialize_then_parse_is_identity(self, seed, n, days):
        s = generate_synthetic(seed, n, days)
        assert scenario_from_dict(json.loads(dumps_scenario(s))) == s
