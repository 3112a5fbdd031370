"""Power-grid data model: buses, lines, generators, validation, synthetic cases.

All quantities are kept in MW (no per-unit conversion); the DC model is
linear, so only ratios of susceptances matter and baseMVA is recorded but
never used.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "Bus",
    "Line",
    "Generator",
    "Grid",
    "ValidationReport",
    "GridError",
    "validate",
    "make_figure1_case",
]

BALANCE_TOL = 1e-6


class GridError(ValueError):
    """Raised for structurally invalid grid data."""


@dataclass(frozen=True)
class Bus:
    index: int                    # internal 0-based position
    label: int                    # original case-file label
    load: float = 0.0             # MW
    stochastic_mean: float = 0.0  # MW; 0 unless a stochastic source sits here


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    susceptance: float            # 1/x, > 0
    limit: float                  # MW, > 0
    safety_param: float = 0.0     # standard-deviation multiplier on this line

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise GridError(f"line connects bus {self.from_bus} to itself")
        if self.susceptance <= 0:
            raise GridError(f"line {self.from_bus}-{self.to_bus}: susceptance must be > 0")
        if self.limit <= 0:
            raise GridError(f"line {self.from_bus}-{self.to_bus}: limit must be > 0")


@dataclass(frozen=True)
class Generator:
    bus: int
    p_min: float
    p_max: float
    cost_c0: float = 0.0          # quadratic cost coefficient, >= 0
    cost_c1: float = 0.0          # linear cost coefficient
    cost_c2: float = 0.0          # constant cost term
    participating: bool = False   # available for balancing
    safety_param: float = 0.0     # standard-deviation multiplier on output bounds

    def __post_init__(self):
        if self.p_min > self.p_max:
            raise GridError(f"generator at bus {self.bus}: p_min > p_max")
        if self.cost_c0 < 0:
            raise GridError(f"generator at bus {self.bus}: quadratic cost must be >= 0")

    def cost(self, p: float) -> float:
        return self.cost_c0 * p * p + self.cost_c1 * p + self.cost_c2


@dataclass(frozen=True)
class Grid:
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    generators: tuple[Generator, ...]
    slack_bus: int
    base_mva: float = 100.0

    def __post_init__(self):
        n = len(self.buses)
        for ln in self.lines:
            if not (0 <= ln.from_bus < n and 0 <= ln.to_bus < n):
                raise GridError(f"line {ln.from_bus}-{ln.to_bus} references unknown bus")
        seen = set()
        for g in self.generators:
            if not 0 <= g.bus < n:
                raise GridError(f"generator references unknown bus {g.bus}")
            if g.bus in seen:
                raise GridError(f"duplicate generator on bus {g.bus}")
            seen.add(g.bus)
        if not 0 <= self.slack_bus < n:
            raise GridError(f"slack bus {self.slack_bus} out of range")

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def n_lines(self) -> int:
        return len(self.lines)

    def loads(self) -> np.ndarray:
        return np.array([b.load for b in self.buses])

    def stochastic_means(self) -> np.ndarray:
        return np.array([b.stochastic_mean for b in self.buses])

    def generator_at(self, bus: int) -> Generator | None:
        for g in self.generators:
            if g.bus == bus:
                return g
        return None

    def line_limits(self) -> np.ndarray:
        return np.array([ln.limit for ln in self.lines])

    def line_susceptances(self) -> np.ndarray:
        return np.array([ln.susceptance for ln in self.lines])

    def line_safety_params(self) -> np.ndarray:
        return np.array([ln.safety_param for ln in self.lines])

    def is_connected(self) -> bool:
        return len(_reachable(self)) == self.n_buses

    def with_safety_params(self, nu_line: float, nu_gen: float | None = None) -> "Grid":
        """Copy of this grid with uniform safety parameters applied.

        Generators keep nu_gen (defaults to nu_line) only where participating;
        non-participating units need no output margin.
        """
        if nu_gen is None:
            nu_gen = nu_line
        lines = tuple(replace(ln, safety_param=nu_line) for ln in self.lines)
        gens = tuple(
            replace(g, safety_param=nu_gen if g.participating else g.safety_param)
            for g in self.generators
        )
        return replace(self, lines=lines, generators=gens)

    def with_participants(self, buses) -> "Grid":
        """Copy with the participating flag set exactly on the given buses."""
        marked = set(buses)
        gens = tuple(replace(g, participating=g.bus in marked) for g in self.generators)
        return replace(self, generators=gens)


def _reachable(grid: Grid) -> set[int]:
    if grid.n_buses == 0:
        return set()
    adj: dict[int, list[int]] = {i: [] for i in range(grid.n_buses)}
    for ln in grid.lines:
        adj[ln.from_bus].append(ln.to_bus)
        adj[ln.to_bus].append(ln.from_bus)
    seen = {0}
    stack = [0]
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return seen


@dataclass
class ValidationReport:
    ok: bool
    violations: list[tuple[str, str]] = field(default_factory=list)
    balance_residual: float | None = None

    def codes(self) -> set[str]:
        return {c for c, _ in self.violations}


def validate(grid: Grid, dispatch: np.ndarray | None = None,
             balance_tol: float = BALANCE_TOL) -> ValidationReport:
    """Structural checks plus, when a dispatch is given, the power balance.

    The balance residual is sum_i (p_i - d_i + mu_i) over all buses; a
    balanced system has residual 0 (fluctuations are handled separately by
    the participation machinery).
    """
    violations: list[tuple[str, str]] = []
    reach = _reachable(grid)
    if len(reach) != grid.n_buses:
        missing = sorted(set(range(grid.n_buses)) - reach)
        violations.append(("disconnected", f"buses unreachable from bus 0: {missing}"))
    for b in grid.buses:
        if b.load < 0:
            violations.append(("negative_load", f"bus {b.label} has load {b.load}"))
    residual = None
    if dispatch is not None:
        dispatch = np.asarray(dispatch, dtype=float)
        if dispatch.shape != (grid.n_buses,):
            violations.append(("bad_dispatch_shape",
                               f"dispatch has shape {dispatch.shape}, expected ({grid.n_buses},)"))
        else:
            residual = float(np.sum(dispatch - grid.loads() + grid.stochastic_means()))
            if abs(residual) > balance_tol:
                violations.append(("unbalanced", f"balance residual {residual:.3e}"))
    return ValidationReport(ok=not violations, violations=violations,
                            balance_residual=residual)


def make_figure1_case(k: int, D: int, L: float, mu: float, sigma: float,
                      c0: float = 1.0, c_mid: float = 5.0, c_top: float = 10.0,
                      variant: str = "unlimited"):
    """Build the adversarial star-and-spur family used by the worked examples.

    Topology: a large non-participating generator (bus 0) and k identical
    participating generators each tied to a hub bus ``a``; the hub feeds the
    load bus ``b``, which carries the single stochastic source; one more
    participating generator reaches ``b`` over a spur of D lines (D-1
    intermediate empty buses).

    The ``limited`` variant prices line capacity into the picture: limits
    9L/8 on the two trunk lines, 2*sigma on the k spokes and the spur, and
    requires mu = L/4, sigma = L/8.

    Returns (grid, stochastic_model).
    """
    from .stochastic import StochasticModel

    if k < 1 or D < 1:
        raise GridError("k and D must be >= 1")
    if not mu < L:
        raise GridError(f"need mu < L, got mu={mu}, L={L}")
    if not (c0 < c_mid < c_top):
        raise GridError("costs must satisfy c0 < c_mid < c_top")
    if variant not in ("unlimited", "limited"):
        raise GridError(f"unknown variant {variant!r}")
    if variant == "limited":
        if not (math.isclose(mu, L / 4) and math.isclose(sigma, L / 8)):
            raise GridError("limited variant requires mu = L/4 and sigma = L/8")

    # Bus layout: 0 | 1..k | k+1 (spur generator) | k+2..k+D (spur path) | a | b
    n = k + D + 3
    idx_top = k + 1
    spur_path = list(range(k + 2, k + D + 1))   # D-1 intermediate buses
    idx_a = k + D + 1
    idx_b = k + D + 2

    big = 100.0 * L
    if variant == "limited":
        trunk_limit = 9.0 * L / 8.0
        spoke_limit = 2.0 * sigma
        nu = 3.0
    else:
        trunk_limit = big
        spoke_limit = big
        nu = 3.0

    buses = [Bus(index=i, label=i + 1) for i in range(n)]
    buses[idx_b] = Bus(index=idx_b, label=idx_b + 1, load=L, stochastic_mean=mu)

    lines = [Line(0, idx_a, 1.0, trunk_limit, nu)]
    lines += [Line(i, idx_a, 1.0, spoke_limit, nu) for i in range(1, k + 1)]
    lines.append(Line(idx_a, idx_b, 1.0, trunk_limit, nu))
    spur_chain = [idx_top] + spur_path + [idx_b]
    lines += [Line(u, v, 1.0, spoke_limit, nu) for u, v in zip(spur_chain, spur_chain[1:])]

    gens = [Generator(bus=0, p_min=0.0, p_max=2.0 * L, cost_c1=c0)]
    gens += [Generator(bus=i, p_min=0.0, p_max=2.0 * L, cost_c1=c_mid,
                       participating=True, safety_param=3.0) for i in range(1, k + 1)]
    gens.append(Generator(bus=idx_top, p_min=0.0, p_max=2.0 * L, cost_c1=c_top,
                          participating=True, safety_param=3.0))

    grid = Grid(buses=tuple(buses), lines=tuple(lines), generators=tuple(gens),
                slack_bus=idx_b)
    stoch = StochasticModel(sources=(idx_b,), mu=np.array([mu]),
                            cov=np.array([[sigma ** 2]]),
                            participants=tuple(range(1, k + 2)))
    return grid, stoch


def figure1_indices(k: int, D: int) -> dict:
    """Named bus/line indices for a make_figure1_case grid."""
    return {
        "bus0": 0,
        "mids": list(range(1, k + 1)),
        "top": k + 1,
        "hub": k + D + 1,
        "load": k + D + 2,
        "line_0a": 0,
        "lines_ia": list(range(1, k + 1)),
        "line_ab": k + 1,
        "spur_lines": list(range(k + 2, k + D + 2)),
    }
