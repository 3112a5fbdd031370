"""MATPOWER case-file subset: parser and writer.

Grammar accepted: ``mpc.baseMVA = <num>;`` plus the matrix blocks
``mpc.bus``, ``mpc.branch``, ``mpc.gen``, ``mpc.gencost`` written as
``mpc.<name> = [ row; row; ... ];`` with whitespace-separated decimal
numbers and ``%`` line comments.  Only the columns the DC model needs are
interpreted; everything else is parsed and ignored.
"""

from __future__ import annotations

import re

import numpy as np

from .grid import Bus, Generator, Grid, GridError, Line

__all__ = ["parse_matpower", "serialize_matpower", "MatpowerParseError"]

# RATE_A = 0 means "no limit" in MATPOWER; replace with a large finite cap so
# every downstream formulation stays bounded.
UNLIMITED_FACTOR = 100.0


class MatpowerParseError(ValueError):
    pass


_ASSIGN_RE = re.compile(r"mpc\.(\w+)\s*=\s*([^\[;]+);")
_MATRIX_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\];", re.DOTALL)


def _strip_comments(text: str) -> str:
    return "\n".join(line.split("%", 1)[0] for line in text.splitlines())


def _parse_matrix(body: str, name: str) -> list[list[float]]:
    rows = []
    for chunk in body.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        try:
            rows.append([float(tok) for tok in chunk.split()])
        except ValueError as exc:
            raise MatpowerParseError(f"malformed row in mpc.{name}: {chunk!r}") from exc
    if rows and len({len(r) for r in rows}) != 1:
        raise MatpowerParseError(f"ragged rows in mpc.{name}")
    return rows


def parse_matpower(text: str, slack_bus: int | None = None) -> Grid:
    """Parse a MATPOWER case into a Grid.

    Line susceptance is 1/BR_X; out-of-service branches (BR_STATUS = 0) are
    dropped; RATE_A = 0 becomes 100x the total load.  The slack (reduction)
    bus defaults to the highest-labelled bus unless overridden with an
    internal index.
    """
    stripped = _strip_comments(text)
    matrices: dict[str, list[list[float]]] = {}
    for m in _MATRIX_RE.finditer(stripped):
        matrices[m.group(1)] = _parse_matrix(m.group(2), m.group(1))
    scalars: dict[str, float] = {}
    no_matrices = _MATRIX_RE.sub("", stripped)
    for m in _ASSIGN_RE.finditer(no_matrices):
        try:
            scalars[m.group(1)] = float(m.group(2))
        except ValueError:
            continue  # e.g. mpc.version = '2'
    for required in ("bus", "branch", "gen"):
        if required not in matrices or not matrices[required]:
            raise MatpowerParseError(f"missing mpc.{required} block")

    bus_rows = matrices["bus"]
    if any(len(r) < 3 for r in bus_rows):
        raise MatpowerParseError("bus rows need at least 3 columns")
    labels = [int(r[0]) for r in bus_rows]
    if len(set(labels)) != len(labels):
        raise MatpowerParseError("duplicate bus labels")
    label_to_index = {lab: i for i, lab in enumerate(labels)}
    buses = tuple(Bus(index=i, label=lab, load=float(r[2]))
                  for i, (lab, r) in enumerate(zip(labels, bus_rows)))

    total_load = sum(b.load for b in buses)
    big = UNLIMITED_FACTOR * max(total_load, 1.0)

    lines = []
    for r in matrices["branch"]:
        if len(r) < 11:
            raise MatpowerParseError("branch rows need at least 11 columns")
        if r[10] == 0:  # BR_STATUS
            continue
        f_lab, t_lab = int(r[0]), int(r[1])
        if f_lab not in label_to_index or t_lab not in label_to_index:
            raise MatpowerParseError(f"branch references unknown bus {f_lab} or {t_lab}")
        x = float(r[3])
        if x <= 0:
            raise MatpowerParseError(f"branch {f_lab}-{t_lab}: BR_X must be > 0")
        rate_a = float(r[5])
        limit = rate_a if rate_a > 0 else big
        lines.append(Line(label_to_index[f_lab], label_to_index[t_lab],
                          susceptance=1.0 / x, limit=limit))

    gen_rows = matrices["gen"]
    cost_rows = matrices.get("gencost", [])
    if cost_rows and len(cost_rows) != len(gen_rows):
        raise MatpowerParseError("gencost row count does not match gen")
    gens = []
    seen_buses = set()
    for gi, r in enumerate(gen_rows):
        if len(r) < 10:
            raise MatpowerParseError("gen rows need at least 10 columns")
        lab = int(r[0])
        if lab not in label_to_index:
            raise MatpowerParseError(f"generator references unknown bus {lab}")
        if lab in seen_buses:
            raise MatpowerParseError(f"duplicate generator on bus {lab}")
        seen_buses.add(lab)
        c0 = c1 = c2 = 0.0
        if cost_rows:
            c0, c1, c2 = _parse_gencost_row(cost_rows[gi], lab)
        gens.append(Generator(bus=label_to_index[lab], p_min=float(r[9]),
                              p_max=float(r[8]), cost_c0=c0, cost_c1=c1, cost_c2=c2))

    if slack_bus is None:
        slack_bus = label_to_index[max(labels)]
    grid = Grid(buses=buses, lines=tuple(lines), generators=tuple(gens),
                slack_bus=slack_bus, base_mva=scalars.get("baseMVA", 100.0))
    if not grid.is_connected():
        raise MatpowerParseError("grid graph is disconnected")
    return grid


def _parse_gencost_row(row: list[float], bus_label: int) -> tuple[float, float, float]:
    if len(row) < 4:
        raise MatpowerParseError(f"gencost row for bus {bus_label} too short")
    model, ncost = int(row[0]), int(row[3])
    if model != 2:
        raise MatpowerParseError(f"gencost for bus {bus_label}: only polynomial model 2 supported")
    coeffs = row[4:4 + ncost]
    if len(coeffs) != ncost:
        raise MatpowerParseError(f"gencost for bus {bus_label}: expected {ncost} coefficients")
    if ncost == 3:
        return float(coeffs[0]), float(coeffs[1]), float(coeffs[2])
    if ncost == 2:
        return 0.0, float(coeffs[0]), float(coeffs[1])
    raise MatpowerParseError(f"gencost for bus {bus_label}: NCOST must be 2 or 3")


def serialize_matpower(grid: Grid, name: str = "case") -> str:
    """Write a Grid back out as MATPOWER text.

    Limits are written as stored (a parsed unlimited line keeps its big
    finite cap, so parse -> serialize -> parse round-trips exactly).
    Safety parameters and participation flags have no MATPOWER columns and
    are carried in the stochastic-model file instead.
    """
    out = [f"function mpc = {name}", "mpc.version = '2';",
           f"mpc.baseMVA = {_num(grid.base_mva)};", ""]
    out.append("mpc.bus = [")
    for b in grid.buses:
        btype = 3 if b.index == grid.slack_bus else 1
        out.append(f"\t{b.label}\t{btype}\t{_num(b.load)}\t0\t0\t0\t1\t1\t0\t345\t1\t1.1\t0.9;")
    out.append("];\n")
    out.append("mpc.gen = [")
    for g in grid.generators:
        lab = grid.buses[g.bus].label
        out.append(f"\t{lab}\t0\t0\t0\t0\t1\t{_num(grid.base_mva)}\t1\t{_num(g.p_max)}\t{_num(g.p_min)};")
    out.append("];\n")
    out.append("mpc.branch = [")
    for ln in grid.lines:
        f_lab = grid.buses[ln.from_bus].label
        t_lab = grid.buses[ln.to_bus].label
        x = 1.0 / ln.susceptance
        out.append(f"\t{f_lab}\t{t_lab}\t0\t{_num(x)}\t0\t{_num(ln.limit)}\t0\t0\t0\t0\t1\t-360\t360;")
    out.append("];\n")
    out.append("mpc.gencost = [")
    for g in grid.generators:
        out.append(f"\t2\t0\t0\t3\t{_num(g.cost_c0)}\t{_num(g.cost_c1)}\t{_num(g.cost_c2)};")
    out.append("];")
    return "\n".join(out) + "\n"


def _num(x: float) -> str:
    return repr(float(x))
