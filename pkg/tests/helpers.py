"""Shared instance builders for the test suite."""

from __future__ import annotations

import numpy as np

from varflow import build_susceptance, dc_flows, solve_dcopf
from varflow.formulations import InfeasibleDispatchError, solve_safety_opf
from varflow.grid import Bus, Generator, Grid, Line
from varflow.stochastic import ParticipationMatrix, PatternK, StochasticModel


def two_bus(limit: float = 20.0) -> Grid:
    """Single generator feeding a 10 MW load over one line."""
    return Grid(
        buses=(Bus(0, 1), Bus(1, 2, load=10.0)),
        lines=(Line(0, 1, 1.0, limit),),
        generators=(Generator(0, 0.0, 50.0, cost_c1=1.0),),
        slack_bus=1)


def tri_cycle(limit: float = 10.0, load: float = 9.0) -> Grid:
    """Three-bus cycle: generators on buses 1 and 2, load on bus 3."""
    return Grid(
        buses=(Bus(0, 1), Bus(1, 2), Bus(2, 3, load=load)),
        lines=(Line(0, 1, 1.0, limit), Line(1, 2, 1.0, limit), Line(0, 2, 1.0, limit)),
        generators=(Generator(0, 0.0, 50.0, cost_c1=1.0),
                    Generator(1, 0.0, 50.0, cost_c1=2.0)),
        slack_bus=2)


def tri_cycle_stochastic(nu: float = 3.0, sigma2: float = 1.0,
                         participants=(2,), limit: float = 10.0) -> tuple[Grid, StochasticModel]:
    """Cycle with one stochastic source at bus 1 (internal 0)."""
    grid = tri_cycle(limit=limit).with_safety_params(nu)
    grid = grid.with_participants([b for b in participants])
    stoch = StochasticModel((0,), np.array([0.0]), np.array([[sigma2]]),
                            tuple(participants))
    return grid, stoch


def random_connected_grid(rng: np.random.Generator, n: int,
                          extra_frac: float = 0.5, limit: float = 1e4) -> Grid:
    """Random spanning tree plus extra chords; unit loads optional."""
    lines = []
    for v in range(1, n):
        u = int(rng.integers(0, v))
        lines.append(Line(u, v, float(rng.uniform(0.5, 3.0)), limit))
    n_extra = int(extra_frac * n)
    for _ in range(n_extra):
        u, v = rng.integers(0, n, size=2)
        if u == v:
            continue
        lines.append(Line(int(min(u, v)), int(max(u, v)),
                          float(rng.uniform(0.5, 3.0)), limit))
    buses = tuple(Bus(i, i + 1) for i in range(n))
    return Grid(buses=buses, lines=tuple(lines), generators=(),
                slack_bus=n - 1)


def random_participation(rng: np.random.Generator, pattern: PatternK,
                         nonneg: bool = False) -> ParticipationMatrix:
    """Random matrix with each source column summing to one."""
    nR, nS = pattern.shape
    raw = rng.uniform(0.05, 1.0, size=(nR, nS)) if nonneg else \
        rng.normal(0.0, 1.0, size=(nR, nS))
    if not nonneg:
        raw = raw + 0.5
    entries = raw / raw.sum(axis=0, keepdims=True)
    return ParticipationMatrix(entries, pattern)


def random_psd(rng: np.random.Generator, k: int, scale: float = 1.0,
               rank: int | None = None) -> np.ndarray:
    r = rank or k
    W = rng.normal(size=(k, r))
    cov = W @ W.T * (scale / max(r, 1))
    return 0.5 * (cov + cov.T)


def random_stochastic_grid(seed: int, n_lo: int = 4, n_hi: int = 8):
    """Random grid + stochastic model (no limits tuned yet)."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(n_lo, n_hi + 1))
    grid = random_connected_grid(rng, n, extra_frac=0.6)
    n_gens = int(rng.integers(2, min(4, n) + 1))
    gen_buses = list(rng.choice(n, size=n_gens, replace=False))
    other = [b for b in range(n) if b not in gen_buses]
    n_src = max(1, min(len(other), int(rng.integers(1, 3))))
    src_buses = list(rng.choice(other, size=n_src, replace=False)) if other else [0]
    load_buses = list(rng.choice(n, size=max(1, n // 2), replace=False))

    buses = list(grid.buses)
    for b in load_buses:
        b = int(b)
        buses[b] = Bus(b, b + 1, load=float(rng.uniform(6.0, 16.0)))
    gens = tuple(
        Generator(int(b), 0.0, float(rng.uniform(30.0, 60.0)),
                  cost_c0=float(rng.uniform(0.05, 0.3)),
                  cost_c1=float(rng.uniform(1.0, 4.0)),
                  participating=True, safety_param=3.0)
        for b in gen_buses)
    grid = Grid(tuple(buses), grid.lines, gens, slack_bus=grid.slack_bus)

    mu = rng.uniform(0.0, 2.0, size=len(src_buses))
    std = rng.uniform(0.4, 1.2, size=len(src_buses))
    if len(src_buses) > 1 and rng.random() < 0.5:
        corr = random_psd(rng, len(src_buses), 1.0)
        dd = np.sqrt(np.diag(corr))
        corr = corr / np.outer(dd, dd)
    else:
        corr = np.eye(len(src_buses))
    cov = np.diag(std) @ corr @ np.diag(std)
    stoch = StochasticModel(tuple(int(b) for b in src_buses), mu, cov,
                            tuple(int(b) for b in gen_buses))
    return grid, stoch, rng


def feasible_instance(seed: int, nu: float = 3.0, tightness=(1.15, 1.6),
                      max_tries: int = 40):
    """Random instance whose safety-constrained problem is solvable.

    Limits are set around the flows of the mean-injection dispatch plus a
    safety cushion from an equal-split participation matrix; seeds that
    still come out infeasible are skipped deterministically.
    """
    from varflow.stochastic import line_variances

    for attempt in range(max_tries):
        grid, stoch, rng = random_stochastic_grid(seed * 1000 + attempt)
        grid = grid.with_safety_params(nu)
        sys_ = build_susceptance(grid)
        try:
            base = solve_dcopf(sys_, mu=stoch.mu_full(grid.n_buses))
        except InfeasibleDispatchError:
            continue
        pattern = PatternK.for_model(stoch)
        eq = ParticipationMatrix(
            np.full(pattern.shape, 1.0 / max(pattern.shape[0], 1)), pattern)
        cushion = nu * np.sqrt(line_variances(sys_, eq, stoch.cov))
        factors = rng.uniform(*tightness, size=grid.n_lines)
        lines = tuple(
            Line(ln.from_bus, ln.to_bus, ln.susceptance,
                 float(max(factors[i] * (abs(base.f_bar[i]) + cushion[i]), 2.0)),
                 nu)
            for i, ln in enumerate(grid.lines))
        grid = Grid(grid.buses, lines, grid.generators, grid.slack_bus)
        sys_ = build_susceptance(grid)
        try:
            start = solve_safety_opf(sys_, stoch, pattern)
        except InfeasibleDispatchError:
            continue
        return grid, stoch, sys_, start
    raise RuntimeError(f"no feasible instance found for seed {seed}")


def calibration_instance(seed: int, eps: float, max_tries: int = 40):
    """Feasible instance with safety multipliers set from a violation target.

    Limit factors start at 1.0 so a couple of lines typically come out
    binding, which is where the empirical violation rate approaches the
    target.
    """
    from varflow.stochastic import line_variances, nu_from_epsilon

    nu = nu_from_epsilon(eps)
    for attempt in range(max_tries):
        grid, stoch, rng = random_stochastic_grid(seed * 1000 + attempt)
        grid = grid.with_safety_params(nu)
        sys_ = build_susceptance(grid)
        try:
            base = solve_dcopf(sys_, mu=stoch.mu_full(grid.n_buses))
        except InfeasibleDispatchError:
            continue
        pattern = PatternK.for_model(stoch)
        eq = ParticipationMatrix(
            np.full(pattern.shape, 1.0 / pattern.shape[0]), pattern)
        cushion = nu * np.sqrt(line_variances(sys_, eq, stoch.cov))
        factors = rng.uniform(1.0, 1.35, size=grid.n_lines)
        lines = tuple(
            Line(ln.from_bus, ln.to_bus, ln.susceptance,
                 float(max(factors[i] * (abs(base.f_bar[i]) + cushion[i]), 2.0)), nu)
            for i, ln in enumerate(grid.lines))
        grid = Grid(grid.buses, lines, grid.generators, grid.slack_bus)
        sys_ = build_susceptance(grid)
        try:
            start = solve_safety_opf(sys_, stoch, pattern)
        except InfeasibleDispatchError:
            continue
        return grid, stoch, sys_, start
    raise RuntimeError(f"no feasible calibration instance for seed {seed}")


def build_large_case(seed: int, n: int = 120, n_src: int = 10,
                     tightness=(1.04, 1.4)):
    """Seeded synthetic transmission case at a hundred-plus buses.

    Stochastic sites sit on non-generator buses with standard deviation 30%
    of the mean; balancing participants are the ten units the mean-injection
    dispatch keeps strictly inside their output range (pinned units would
    freeze the shifting step).  Limits wrap the base flows plus an
    equal-split safety cushion with per-line slack factors, leaving a
    realistic share of nearly-binding lines.
    """
    from varflow.stochastic import line_variances

    rng = np.random.default_rng(seed)
    grid = random_connected_grid(rng, n, extra_frac=0.4)
    n_gens = 25
    gen_buses = sorted(int(b) for b in rng.choice(n, size=n_gens, replace=False))
    load_buses = [int(b) for b in rng.choice(n, size=int(0.6 * n), replace=False)]
    buses = list(grid.buses)
    for b in load_buses:
        buses[b] = Bus(b, b + 1, load=float(rng.uniform(20.0, 80.0)))
    total_load = sum(bs.load for bs in buses)
    gens = tuple(Generator(b, 0.0, float(rng.uniform(1.5, 3.5)) * total_load / n_gens,
                           cost_c0=float(rng.uniform(0.01, 0.05)),
                           cost_c1=float(rng.uniform(5.0, 20.0)))
                 for b in gen_buses)
    grid = Grid(tuple(buses), grid.lines, gens, slack_bus=n - 1)
    non_gen = [b for b in range(n) if b not in gen_buses]
    src = sorted(int(b) for b in rng.choice(non_gen, size=n_src, replace=False))
    mu = rng.uniform(25.0, 60.0, size=n_src)
    std = 0.3 * mu
    cov = np.diag(std ** 2)
    mu_full = np.zeros(n)
    mu_full[src] = mu
    base = solve_dcopf(build_susceptance(grid), mu=mu_full)
    interior = [g.bus for g in gens
                if 0.12 * g.p_max < base.p_bar[g.bus] < 0.88 * g.p_max]
    participants = sorted(interior[:10])
    stoch = StochasticModel(tuple(src), mu, cov, tuple(participants))
    grid = grid.with_participants(participants).with_safety_params(3.0)
    sys_ = build_susceptance(grid)
    pattern = PatternK.for_model(stoch)
    eq = ParticipationMatrix(np.full(pattern.shape, 1.0 / pattern.shape[0]), pattern)
    cushion = 3.0 * np.sqrt(line_variances(sys_, eq, stoch.cov))
    factors = rng.uniform(*tightness, size=grid.n_lines)
    lines = tuple(Line(l.from_bus, l.to_bus, l.susceptance,
                       float(max(factors[i] * (abs(base.f_bar[i]) + cushion[i]), 10.0)),
                       3.0)
                  for i, l in enumerate(grid.lines))
    return Grid(grid.buses, lines, grid.generators, grid.slack_bus), stoch


def fig1_candidate(grid, stoch, k: int, D: int, L: float, mu: float, sigma: float):
    """The analytic optimum of the adversarial family: (p_bar, A, f_bar)."""
    from varflow.grid import figure1_indices

    idx = figure1_indices(k, D)
    pattern = PatternK.for_model(stoch, lower=0.0)
    entries = np.array([[1.0 / k]] * k + [[0.0]])
    A = ParticipationMatrix(entries, pattern)
    p_bar = np.zeros(grid.n_buses)
    p_bar[0] = L - mu - 3.0 * sigma
    for i in idx["mids"]:
        p_bar[i] = 3.0 * sigma / k
    sys_ = build_susceptance(grid)
    f_bar = dc_flows(sys_, p_bar - grid.loads() + stoch.mu_full(grid.n_buses))
    return p_bar, A, f_bar
