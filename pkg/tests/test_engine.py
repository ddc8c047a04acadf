"""Scenario parsing, the block loop, audits and reports."""

from __future__ import annotations

import copy
import json

import pytest

from datamarket.engine import (
    Engine,
    ScenarioParseError,
    bundled_scenarios,
    load_scenario,
    parse_scenario,
    read_scenario,
    run_file,
    run_scenario,
    summary_table,
    tokens,
)
from datamarket.ledger import TOKEN

from conftest import scenario_dict


def _location(raw: dict) -> str:
    with pytest.raises(ScenarioParseError) as info:
        parse_scenario(raw)
    return info.value.location


class TestTokens:
    def test_decimal_exact(self) -> None:
        assert tokens("0.000000001", "$") == 1
        assert tokens(2.5, "$") == 5 * TOKEN // 2
        assert tokens(0.1, "$") == TOKEN // 10

    def test_sub_unit_refused(self) -> None:
        with pytest.raises(ScenarioParseError):
            tokens("0.0000000001", "$.x")

    @pytest.mark.parametrize("bad", [True, "ten", -1])
    def test_nonsense_refused(self, bad: object) -> None:
        with pytest.raises(ScenarioParseError):
            tokens(bad, "$.x")


class TestParseErrors:
    def test_unknown_top_level_field(self) -> None:
        assert _location(scenario_dict(colour="red")) == "$.colour"

    def test_dangling_notary_on_order(self) -> None:
        raw = scenario_dict()
        raw["buyers"][0]["orders"][0]["notaries"] = ["ghost"]
        assert _location(raw) == "$.buyers[0].orders[0].notaries"

    def test_dangling_notary_names_seller(self) -> None:
        raw = scenario_dict(3)
        raw["seller_groups"][0]["trusted"] = ["ghost"]
        with pytest.raises(ScenarioParseError) as info:
            parse_scenario(raw)
        assert info.value.location == "$.seller_groups[0][0].trusted"
        assert "seller0" in str(info.value)

    def test_undeclared_attribute_in_audience(self) -> None:
        raw = scenario_dict()
        raw["buyers"][0]["orders"][0]["audience"] = [["height", ">=", 150]]
        assert _location(raw) == "$.buyers[0].orders[0].audience"

    def test_undeclared_attribute_on_seller(self) -> None:
        raw = scenario_dict(1)
        raw["seller_groups"][0]["attributes"]["height"] = 180
        assert _location(raw) == "$.seller_groups[0][0].attributes"

    def test_undeclared_entity(self) -> None:
        raw = scenario_dict()
        raw["buyers"][0]["orders"][0]["requested"] = [{"entity": "dreams"}]
        assert _location(raw) == "$.buyers[0].orders[0].requested"

    def test_short_response_window(self) -> None:
        raw = scenario_dict()
        raw["buyers"][0]["orders"][0]["response_window"] = 1
        assert _location(raw) == "$.buyers[0].orders[0].response_window"

    def test_bad_curve(self) -> None:
        assert _location(scenario_dict(curve="curve25519")) == "$.curve"

    @pytest.mark.parametrize("seed", [-1, 2**64])
    def test_seed_range(self, seed: int) -> None:
        assert _location(scenario_dict(seed=seed)) == "$.seed"

    def test_unknown_behavior(self) -> None:
        raw = scenario_dict(1)
        raw["seller_groups"][0]["behaviors"] = ["pirate"]
        assert _location(raw) == "$.seller_groups[0][0].behaviors"

    def test_duplicate_names(self) -> None:
        raw = scenario_dict(1)
        raw["seller_groups"][0]["name"] = "dup"
        raw["seller_groups"].append(dict(raw["seller_groups"][0], count=1))
        assert _location(raw).endswith(".name")

    def test_missing_required(self) -> None:
        raw = scenario_dict()
        del raw["buyers"][0]["orders"][0]["price"]
        assert _location(raw) == "$.buyers[0].orders[0]"

    def test_percentage_range(self) -> None:
        raw = scenario_dict()
        raw["notaries"][0]["percentage"] = 1.5
        assert _location(raw) == "$.notaries[0].percentage"

    def test_unknown_generator(self) -> None:
        raw = scenario_dict(1)
        raw["seller_groups"][0]["data"] = {"purchases": {"generate": "lottery"}}
        assert _location(raw) == "$.seller_groups[0][0].data.purchases"

    def test_bad_json_reports_line(self, tmp_path) -> None:
        p = tmp_path / "broken.json"
        p.write_text('{\n  "name": "x",\n  oops\n}')
        with pytest.raises(ScenarioParseError) as info:
            read_scenario(p)
        assert info.value.location == "broken.json:3:3"

    def test_missing_file(self) -> None:
        with pytest.raises(ScenarioParseError):
            load_scenario("/nonexistent/nowhere.json")


class TestParsing:
    def test_group_templates(self) -> None:
        raw = scenario_dict(3)
        raw["seller_groups"][0]["attributes"]["age"] = {"cycle": [20, 40]}
        sc = parse_scenario(raw)
        assert [s.name for s in sc.sellers] == ["seller0", "seller1", "seller2"]
        assert [s.attributes["age"] for s in sc.sellers] == [20, 40, 20]

    def test_generated_data_depends_on_seed_and_name(self) -> None:
        a = parse_scenario(scenario_dict(2))
        b = parse_scenario(scenario_dict(2))
        c = parse_scenario(scenario_dict(2), seed=6)
        assert a.sellers[0].data == b.sellers[0].data
        assert a.sellers[0].data != a.sellers[1].data
        assert a.sellers[0].data != c.sellers[0].data

    def test_seed_override(self) -> None:
        assert parse_scenario(scenario_dict(), seed=99).seed == 99

    def test_all_bundled_parse(self) -> None:
        names = bundled_scenarios()
        assert len(names) >= 10 and "happy_1000" in names and "challenge_matrix" in names
        for name in names:
            load_scenario(name)


class TestEngine:
    def test_happy_report_shape(self) -> None:
        r = run_scenario(parse_scenario(scenario_dict(4))).report
        assert r["ok"] and r["violations"] == []
        [order] = r["orders"]
        assert order["selected"] == order["approved"] == order["recovered_verified"] == 4
        assert r["supply"]["accounted"] == r["supply"]["total"]
        assert all(c["ok"] for c in r["invariants"].values())

    def test_sellers_paid_price(self) -> None:
        r = run_scenario(parse_scenario(scenario_dict(3))).report
        for name in ("seller0", "seller1", "seller2"):
            b = r["balances"][name]
            assert b["end"]["token"] + b["end"]["batpay"] - b["start"]["token"] - b["start"]["batpay"] == 10 * TOKEN

    def test_idle_stop(self) -> None:
        r = run_scenario(parse_scenario(scenario_dict(2, blocks=10_000))).report
        assert r["blocks_run"] < 200

    def test_block_budget_respected(self) -> None:
        r = run_scenario(parse_scenario(scenario_dict(2, blocks=3))).report
        assert r["blocks_run"] == 3

    def test_same_seed_same_bytes(self) -> None:
        runs = [run_scenario(parse_scenario(scenario_dict(3))) for _ in range(2)]
        assert runs[0].report_json() == runs[1].report_json()
        assert runs[0].trace_text() == runs[1].trace_text()

    def test_other_seed_other_keys(self) -> None:
        a = run_scenario(parse_scenario(scenario_dict(3))).report
        b = run_scenario(parse_scenario(scenario_dict(3), seed=77)).report
        assert a["balances"]["seller0"]["address"] != b["balances"]["seller0"]["address"]

    def test_secp256k1_runs(self) -> None:
        r = run_scenario(parse_scenario(scenario_dict(2, curve="secp256k1")))
        assert r.ok
        assert r.report["balances"]["seller0"]["address"] != run_scenario(parse_scenario(scenario_dict(2))).report["balances"]["seller0"]["address"]

    def test_trace_lines_are_json(self) -> None:
        result = run_scenario(parse_scenario(scenario_dict(2)))
        kinds = {json.loads(line)["type"] for line in result.trace}
        assert {"tx", "delivery", "decision"} <= kinds

    def test_silent_notary_refunds(self) -> None:
        raw = scenario_dict(3)
        raw["notaries"][0]["behaviors"] = ["silent_notary"]
        r = run_scenario(parse_scenario(raw)).report
        [order] = r["orders"]
        assert order["refunded"] == order["payments"] and order["recovered"] == 0
        b = r["balances"]["buyer0"]
        assert b["end"] == b["start"]

    def _greedy(self, first: bool) -> dict:
        raw = scenario_dict(2)
        greedy = dict(copy.deepcopy(raw["seller_groups"][0]), count=1, name="greedy{i}", behaviors=["greedy_collector"])
        raw["seller_groups"].insert(0 if first else 1, greedy)
        raw["monitors"] = [{"name": "watch", "tokens": 100, "deposit": 50}]
        return run_scenario(parse_scenario(raw)).report

    def test_greedy_collector_caught(self) -> None:
        r = self._greedy(first=True)
        assert r["ok"]
        [c] = r["challenges"]
        assert (c["seller"], c["winner"], c["status"]) == ("greedy0", "challenger", "settled_fraud")

    def test_greedy_without_headroom_collects_honestly(self) -> None:
        r = self._greedy(first=False)
        assert r["ok"] and r["challenges"] == [] and r["failed_transactions"] == 0
        b = r["balances"]["greedy0"]
        assert b["end"]["token"] - b["start"]["token"] == 10 * TOKEN

    def test_engine_steps_manually(self) -> None:
        e = Engine(parse_scenario(scenario_dict(1)))
        e.setup()
        for block in range(1, 4):
            e.step(block)
        assert e.ledger.block >= 3


class TestMatrixScenario:
    def test_small_matrix(self) -> None:
        raw = {"name": "tiny", "kind": "challenge_matrix", "matrix": {"max_payments": 2, "max_sellers": 3}}
        r = run_scenario(parse_scenario(raw)).report
        m = r["matrix"]
        assert r["ok"] and m["configs"] == 4 + 16
        assert m["honest_settled_ok_pct"] == m["fraud_settled_fraud_pct"] == 100.0

    def test_summary_table(self) -> None:
        raw = {"name": "tiny", "kind": "challenge_matrix", "matrix": {"max_payments": 1}}
        text = summary_table(run_scenario(parse_scenario(raw)).report)
        assert "configurations" in text and text.endswith("ok")


class TestSummary:
    def test_protocol_rows(self) -> None:
        text = summary_table(run_file("happy_small").report)
        assert "gas/payment combined" in text and "conservation" in text
        assert text.splitlines()[-1].split() == ["result", "ok"]
