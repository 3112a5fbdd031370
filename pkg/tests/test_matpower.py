import re

import pytest

from varflow.grid import make_figure1_case
from varflow.matpower import (MatpowerParseError, parse_matpower,
                              serialize_matpower)

THREE_BUS = """
function mpc = three
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
    1 1 0 0 0 0 1 1 0 345 1 1.1 0.9;
    2 1 0 0 0 0 1 1 0 345 1 1.1 0.9;
    3 1 5 0 0 0 1 1 0 345 1 1.1 0.9;
];
mpc.gen = [
    1 0 0 0 0 1 100 1 10 0;
];
mpc.branch = [
    1 2 0 1.0 0 10 0 0 0 0 1 -360 360;
    2 3 0 1.0 0 10 0 0 0 0 1 -360 360;
    1 3 0 1.0 0 10 0 0 0 0 1 -360 360;
];
mpc.gencost = [
    2 0 0 2 1.5 0;
];
"""


class TestParse:
    def test_three_bus_direct_mapping(self):
        grid = parse_matpower(THREE_BUS)
        assert grid.n_buses == 3
        assert grid.n_lines == 3
        assert [ln.susceptance for ln in grid.lines] == [1.0, 1.0, 1.0]
        assert grid.buses[2].load == 5.0
        assert grid.base_mva == 100.0
        g = grid.generators[0]
        assert (g.cost_c0, g.cost_c1, g.cost_c2) == (0.0, 1.5, 0.0)
        assert (g.p_min, g.p_max) == (0.0, 10.0)
        assert grid.slack_bus == 2  # highest label by default

    def test_out_of_service_branch_dropped(self):
        text = THREE_BUS.replace("2 3 0 1.0 0 10 0 0 0 0 1 -360 360",
                                 "2 3 0 1.0 0 10 0 0 0 0 0 -360 360")
        grid = parse_matpower(text)
        assert grid.n_lines == 2
        assert all({ln.from_bus, ln.to_bus} != {1, 2} for ln in grid.lines)

    def test_rate_a_zero_becomes_large_cap(self):
        text = THREE_BUS.replace("1 2 0 1.0 0 10", "1 2 0 1.0 0 0")
        grid = parse_matpower(text)
        assert grid.lines[0].limit == pytest.approx(100.0 * 5.0)

    def test_slack_override(self):
        grid = parse_matpower(THREE_BUS, slack_bus=0)
        assert grid.slack_bus == 0

    def test_case9__counts_match_text_level_scan(self, case9_text):
        # independent oracle: block row counts straight off the text
        def block_rows(name):
            body = re.search(rf"mpc\.{name}\s*=\s*\[(.*?)\];", case9_text, re.S).group(1)
            return [r for r in body.split(";") if r.strip()]

        bus_rows = block_rows("bus")
        branch_rows = block_rows("branch")
        gen_rows = block_rows("gen")
        load_total = sum(float(r.split()[2]) for r in bus_rows)

        grid = parse_matpower(case9_text)
        assert grid.n_buses == len(bus_rows) == 9
        assert grid.n_lines == len(branch_rows) == 9
        assert len(grid.generators) == len(gen_rows) == 3
        assert sum(b.load for b in grid.buses) == pytest.approx(load_total) == 315.0

    def test_case9_details(self, case9_text):
        grid = parse_matpower(case9_text)
        # branch 1-4 has x = 0.0576
        ln = grid.lines[0]
        assert ln.susceptance == pytest.approx(1 / 0.0576)
        g1 = grid.generators[0]
        assert (g1.cost_c0, g1.cost_c1, g1.cost_c2) == (0.11, 5.0, 150.0)


class TestParseErrors:
    def test_malformed_matrix(self):
        with pytest.raises(MatpowerParseError, match="malformed"):
            parse_matpower(THREE_BUS.replace("2 1 0 0 0 0 1 1 0 345 1 1.1 0.9",
                                             "2 1 zap 0 0 0 1 1 0 345 1 1.1 0.9"))

    def test_unknown_bus_reference(self):
        with pytest.raises(MatpowerParseError, match="unknown bus"):
            parse_matpower(THREE_BUS.replace("1 3 0 1.0 0 10", "1 7 0 1.0 0 10"))

    def test_duplicate_generator(self):
        text = THREE_BUS.replace(
            "mpc.gen = [\n    1 0 0 0 0 1 100 1 10 0;",
            "mpc.gen = [\n    1 0 0 0 0 1 100 1 10 0;\n    1 0 0 0 0 1 100 1 10 0;")
        text = text.replace("mpc.gencost = [\n    2 0 0 2 1.5 0;",
                            "mpc.gencost = [\n    2 0 0 2 1.5 0;\n    2 0 0 2 1.5 0;")
        with pytest.raises(MatpowerParseError, match="duplicate generator"):
            parse_matpower(text)

    def test_disconnected_graph(self):
        text = THREE_BUS.replace("    2 3 0 1.0 0 10 0 0 0 0 1 -360 360;\n", "")
        text = text.replace("    1 3 0 1.0 0 10 0 0 0 0 1 -360 360;\n", "")
        with pytest.raises(MatpowerParseError, match="disconnected"):
            parse_matpower(text)

    def test_missing_block(self):
        with pytest.raises(MatpowerParseError, match="missing"):
            parse_matpower("mpc.baseMVA = 100;")


class TestRoundTrip:
    def test_parse_serialize_parse_identical(self, case9_text):
        g1 = parse_matpower(case9_text)
        g2 = parse_matpower(serialize_matpower(g1))
        assert g1 == g2

    def test_three_bus_round_trip(self):
        g1 = parse_matpower(THREE_BUS)
        assert g1 == parse_matpower(serialize_matpower(g1))

    def test_figure1_structure_survives(self):
        grid, _ = make_figure1_case(3, 2, 400.0, 100.0, 50.0, variant="limited")
        reparsed = parse_matpower(serialize_matpower(grid))
        assert reparsed.n_buses == grid.n_buses
        assert reparsed.n_lines == grid.n_lines
        assert [ln.limit for ln in reparsed.lines] == [ln.limit for ln in grid.lines]
        # safety/participation metadata lives in the stochastic file, not the case
        assert parse_matpower(serialize_matpower(reparsed)) == reparsed
