"""Dispatch optimization problems over the DC network.

Four problems are assembled here as conic programs:

* the deterministic DC-OPF,
* the safety-constrained OPF, whose sparse structure keeps one response
  column per stochastic source (participation, response, and per-line
  gamma variables number |R||S|, n|S|, m|S|),
* Reroute: re-dispatch under limits tightened by a factor (1 - tau) with
  the participation matrix frozen, and
* VShift: re-optimize the participation matrix against a variance metric,
  constrained only on the nearly-binding lines.

The safety constraint on every line is |E(f)| + nu * Std(f) <= limit; the
equivalent generator constraint keeps the dispatch a safety margin inside
its output bounds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import conic
from .conic import ConicProgram, SolveOptions, SolveResult
from .dclin import SusceptanceSystem, build_susceptance
from .grid import Grid
from .metrics import MetricSpec, select_F
from .stochastic import (ParticipationMatrix, PatternK, StochasticModel,
                         expected_total_cost, line_variances)

__all__ = [
    "DispatchSolution",
    "FormulationStats",
    "InfeasibleDispatchError",
    "CycleInconsistencyError",
    "solve_dcopf",
    "build_safety_opf",
    "solve_safety_opf",
    "formulation_stats",
    "build_reroute",
    "solve_reroute",
    "build_vshift",
    "solve_vshift",
    "tight_set",
    "check_compatible",
    "dispatch_to_json",
    "dispatch_from_json",
]

FEAS_TOL = 1e-6


class InfeasibleDispatchError(RuntimeError):
    def __init__(self, message: str, result: SolveResult | None = None):
        super().__init__(message)
        self.result = result


class CycleInconsistencyError(ValueError):
    """The flow vector cannot come from any angle assignment."""


def ensure_system(grid_or_sys) -> SusceptanceSystem:
    if isinstance(grid_or_sys, SusceptanceSystem):
        return grid_or_sys
    return build_susceptance(grid_or_sys)


@dataclass
class DispatchSolution:
    p_bar: np.ndarray
    theta_bar: np.ndarray
    f_bar: np.ndarray
    A: ParticipationMatrix | None
    s2: np.ndarray
    expected_cost: float
    diagnostics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class FormulationStats:
    n_A_vars: int
    n_D_vars: int
    n_gamma_vars: int
    n_other_vars: int
    nnz_D_constraints: int
    nnz_conic_constraints: int


# -- shared builder pieces ---------------------------------------------------

def _add_network_variables(prog: ConicProgram, grid: Grid,
                           f_lb: np.ndarray, f_ub: np.ndarray) -> None:
    n = grid.n_buses
    p_lb, p_ub = np.zeros(n), np.zeros(n)
    for g in grid.generators:
        p_lb[g.bus], p_ub[g.bus] = g.p_min, g.p_max
    prog.add_variable("p", n, lb=p_lb, ub=p_ub)
    prog.add_variable("theta", n)
    prog.add_variable("f", grid.n_lines, lb=f_lb, ub=f_ub)


def _add_network_rows(prog: ConicProgram, sys: SusceptanceSystem,
                      mu_full: np.ndarray) -> None:
    grid = sys.grid
    d = grid.loads()
    B = sys.B
    for k in range(grid.n_buses):
        nz = np.nonzero(B[k])[0]
        prog.add_linear_constraint(
            [("theta", nz, B[k, nz]), ("p", k, -1.0)],
            "==", mu_full[k] - d[k], tag=f"balance[{k}]")
    prog.add_linear_constraint([("theta", grid.slack_bus, 1.0)], "==", 0.0,
                               tag="theta_ref")
    for li, ln in enumerate(grid.lines):
        prog.add_linear_constraint(
            [("f", li, 1.0), ("theta", [ln.from_bus, ln.to_bus],
                              [-ln.susceptance, ln.susceptance])],
            "==", 0.0, tag=f"flowdef[{li}]")


def _add_participation_structure(prog: ConicProgram, pattern: PatternK) -> None:
    nR, nS = pattern.shape
    lo, hi = pattern.bound_arrays()
    prog.add_variable("A", nR * nS, lb=lo.ravel(), ub=hi.ravel())
    for j in range(nS):
        prog.add_linear_constraint(
            [("A", np.arange(nR) * nS + j, np.ones(nR))], "==", 1.0,
            tag=f"balance_share[{j}]")
    if pattern.policy == "global":
        for r in range(nR):
            for j in range(1, nS):
                prog.add_linear_constraint(
                    [("A", [r * nS + j, r * nS], [1.0, -1.0])], "==", 0.0,
                    tag=f"global[{r},{j}]")


def _objective_from_costs(prog: ConicProgram, grid: Grid,
                          stoch: StochasticModel | None,
                          pattern: PatternK | None) -> None:
    n = grid.n_buses
    quad = np.zeros(n)
    lin = np.zeros(n)
    const = 0.0
    for g in grid.generators:
        quad[g.bus] = g.cost_c0
        lin[g.bus] = g.cost_c1
        const += g.cost_c2
    if np.any(quad):
        prog.add_quadratic_objective("p", np.diag(quad))
    prog.add_linear_objective("p", lin)
    prog.add_objective_constant(const)
    if stoch is None or pattern is None:
        return
    # expected-cost contribution of balancing: c0 * Var(p_i) per participant row
    nR, nS = pattern.shape
    Q = np.zeros((nR * nS, nR * nS))
    for r, bus in enumerate(pattern.participants):
        g = grid.generator_at(bus)
        if g is not None and g.cost_c0 > 0:
            Q[r * nS:(r + 1) * nS, r * nS:(r + 1) * nS] = g.cost_c0 * stoch.cov
    if np.any(Q):
        prog.add_quadratic_objective("A", Q)


def _extract_network(values: dict) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return values["p"], values["theta"], values["f"]


# -- deterministic DC-OPF -----------------------------------------------------

def solve_dcopf(grid_or_sys, mu: np.ndarray | None = None,
                opts: SolveOptions | None = None) -> DispatchSolution:
    """Minimum-cost dispatch of the deterministic DC model.

    Passing mu folds fixed stochastic mean injections into the balance; the
    base problem uses loads only.
    """
    sys = ensure_system(grid_or_sys)
    grid = sys.grid
    mu_full = np.zeros(grid.n_buses) if mu is None else np.asarray(mu, dtype=float)
    prog = ConicProgram("dcopf")
    limits = grid.line_limits()
    _add_network_variables(prog, grid, -limits, limits)
    _add_network_rows(prog, sys, mu_full)
    _objective_from_costs(prog, grid, None, None)
    res = conic.solve(prog, opts)
    if res.status != conic.OPTIMAL:
        raise InfeasibleDispatchError(f"DC-OPF solve ended with status {res.status}", res)
    p, theta, f = _extract_network(res.values)
    return DispatchSolution(
        p_bar=p, theta_bar=theta, f_bar=f, A=None, s2=np.zeros(grid.n_lines),
        expected_cost=expected_total_cost(grid, None, None, p),
        diagnostics=_diag(res))


def _diag(res: SolveResult) -> dict:
    return {"status": res.status, "objective": res.objective,
            "iterations": res.iterations, "wall_time": res.wall_time,
            **{k: v for k, v in res.diagnostics.items() if k != "objective_history"}}


# -- safety-constrained OPF ----------------------------------------------------

def build_safety_opf(grid_or_sys, stoch: StochasticModel,
                     pattern: PatternK | None = None) -> ConicProgram:
    """Sparse safety-constrained dispatch problem.

    Response columns are defined through the reduced susceptance system
    (B_hat D_reduced = A_reduced per source), so the dense padded inverse is
    never materialized; per-line gamma variables then carry the variance
    cones s_ij >= b_ij * ||cov_factor @ gamma_ij||.
    """
    sys = ensure_system(grid_or_sys)
    grid = sys.grid
    if pattern is None:
        pattern = PatternK.for_model(stoch)
    n, m = grid.n_buses, grid.n_lines
    nR, nS = pattern.shape
    red = sys.reduction_bus
    F = stoch.cov_factor
    nu_line = grid.line_safety_params()
    limits = grid.line_limits()

    prog = ConicProgram("safety_opf")
    _add_network_variables(prog, grid, -limits, limits)
    _add_participation_structure(prog, pattern)
    prog.add_variable("D", n * nS)
    prog.add_variable("gamma", m * nS)
    prog.add_variable("s", m, lb=0.0)
    _add_network_rows(prog, sys, stoch.mu_full(n))

    part_index = {bus: r for r, bus in enumerate(pattern.participants)}
    B = sys.B
    for k in range(nS):
        for i in range(n):
            if i == red:
                prog.add_linear_constraint([("D", red * nS + k, 1.0)], "==", 0.0,
                                           tag=f"D_ref[{k}]")
                continue
            nz = [l for l in np.nonzero(B[i])[0] if l != red]
            terms = [("D", np.array(nz) * nS + k, B[i, nz])]
            if i in part_index:
                terms.append(("A", part_index[i] * nS + k, -1.0))
            prog.add_linear_constraint(terms, "==", 0.0, tag=f"Ddef[{i},{k}]")

    src_cols = {k: sys.breve_column(k) for k in pattern.sources}
    for li, ln in enumerate(grid.lines):
        for k_pos, k_bus in enumerate(pattern.sources):
            pi_k = src_cols[k_bus][ln.from_bus] - src_cols[k_bus][ln.to_bus]
            prog.add_linear_constraint(
                [("gamma", li * nS + k_pos, 1.0),
                 ("D", [ln.from_bus * nS + k_pos, ln.to_bus * nS + k_pos], [1.0, -1.0])],
                "==", pi_k, tag=f"gammadef[{li},{k_pos}]")

    for li, ln in enumerate(grid.lines):
        M = np.zeros((nS, m * nS))
        M[:, li * nS:(li + 1) * nS] = ln.susceptance * F
        prog.add_soc_constraint([("s", li, 1.0)], 0.0, [("gamma", M)],
                                np.zeros(nS), tag=f"line_std[{li}]")
        prog.add_linear_constraint([("f", li, 1.0), ("s", li, nu_line[li])],
                                   "<=", ln.limit, tag=f"safety_pos[{li}]")
        prog.add_linear_constraint([("f", li, -1.0), ("s", li, nu_line[li])],
                                   "<=", ln.limit, tag=f"safety_neg[{li}]")

    margin_gens = [g for g in grid.generators
                   if g.bus in part_index and g.safety_param > 0]
    if margin_gens:
        prog.add_variable("gm", len(margin_gens), lb=0.0)
        for gi, g in enumerate(margin_gens):
            r = part_index[g.bus]
            M = np.zeros((nS, nR * nS))
            M[:, r * nS:(r + 1) * nS] = F
            prog.add_soc_constraint([("gm", gi, 1.0)], 0.0, [("A", M)],
                                    np.zeros(nS), tag=f"gen_std[{g.bus}]")
            prog.add_linear_constraint([("p", g.bus, 1.0), ("gm", gi, -g.safety_param)],
                                       ">=", g.p_min, tag=f"gen_lo[{g.bus}]")
            prog.add_linear_constraint([("p", g.bus, 1.0), ("gm", gi, g.safety_param)],
                                       "<=", g.p_max, tag=f"gen_hi[{g.bus}]")

    _objective_from_costs(prog, grid, stoch, pattern)
    prog.meta.update(kind="safety_opf", shape=(n, m, nR, nS), pattern=pattern,
                     stoch=stoch, sys=sys)
    return prog


def solve_safety_opf(grid_or_sys, stoch: StochasticModel,
                     pattern: PatternK | None = None,
                     opts: SolveOptions | None = None,
                     method: str = "direct") -> DispatchSolution:
    sys = ensure_system(grid_or_sys)
    prog = build_safety_opf(sys, stoch, pattern)
    if method == "direct":
        res = conic.solve(prog, opts)
    elif method == "cutting_plane":
        res = conic.cutting_plane_solve(prog, opts=opts)
    else:
        raise ValueError(f"unknown method {method!r}")
    if res.status != conic.OPTIMAL:
        raise InfeasibleDispatchError(
            f"safety OPF solve ended with status {res.status}", res)
    return extract_dispatch(prog, res)


def extract_dispatch(prog: ConicProgram, res: SolveResult) -> DispatchSolution:
    """Dispatch solution from a solved safety-OPF program.

    s2 is recomputed from the participation matrix (the conic rows only
    upper-bound the solver's s), and the expected cost from the generator
    cost model, so the reported numbers do not depend on solver slack.
    """
    sys: SusceptanceSystem = prog.meta["sys"]
    stoch: StochasticModel = prog.meta["stoch"]
    pattern: PatternK = prog.meta["pattern"]
    grid = sys.grid
    p, theta, f = _extract_network(res.values)
    A = ParticipationMatrix(res.values["A"].reshape(pattern.shape), pattern)
    s2 = line_variances(sys, A, stoch.cov)
    return DispatchSolution(
        p_bar=p, theta_bar=theta, f_bar=f, A=A, s2=s2,
        expected_cost=expected_total_cost(grid, A, stoch.cov, p),
        diagnostics=_diag(res))


def formulation_stats(prog: ConicProgram) -> FormulationStats:
    """Size accounting of the sparse safety formulation.

    Counts are reported in the response-matrix form of the problem: the
    response-definition block touches every participation entry at every
    bus (n |R| |S| nonzeros) and each variance cone couples one s entry to
    its |S| gamma entries.
    """
    if prog.meta.get("kind") != "safety_opf":
        raise ValueError("formulation_stats expects a safety OPF program")
    n, m, nR, nS = prog.meta["shape"]
    expected = {"A": nR * nS, "D": n * nS, "gamma": m * nS}
    for name, size in expected.items():
        if prog.size(name) != size:
            raise AssertionError(f"{name} block has {prog.size(name)} variables, "
                                 f"expected {size}")
    return FormulationStats(
        n_A_vars=nR * nS, n_D_vars=n * nS, n_gamma_vars=m * nS,
        n_other_vars=2 * n + m,
        nnz_D_constraints=n * nR * nS,
        nnz_conic_constraints=m * nS)


# -- Reroute -------------------------------------------------------------------

def build_reroute(grid_or_sys, stoch: StochasticModel, A_hat: ParticipationMatrix,
                  tau: float) -> ConicProgram:
    """Re-dispatch with participation frozen and line limits scaled by 1 - tau.

    The per-line standard deviations and generator margins become constants
    of the program; the constant part of the expected cost (variance times
    quadratic coefficient) is kept so objectives remain comparable with the
    full problem.
    """
    if not 0.0 <= tau < 1.0:
        raise ValueError(f"tau must be in [0, 1), got {tau}")
    sys = ensure_system(grid_or_sys)
    grid = sys.grid
    n = grid.n_buses
    s_hat = np.sqrt(line_variances(sys, A_hat, stoch.cov))
    nu_line = grid.line_safety_params()
    cap = (1.0 - tau) * grid.line_limits() - nu_line * s_hat

    prog = ConicProgram("reroute")
    _add_network_variables(prog, grid, -cap, cap)
    # tightened output bounds: margin = nu_i * Std(p_i) under the frozen matrix
    p_lb, p_ub = prog.lb["p"], prog.ub["p"]
    const_extra = 0.0
    for g in grid.generators:
        row = A_hat.row_for_bus(g.bus)
        std = np.sqrt(max(float(row @ stoch.cov @ row), 0.0))
        p_lb[g.bus] = g.p_min + g.safety_param * std
        p_ub[g.bus] = g.p_max - g.safety_param * std
        const_extra += g.cost_c0 * std ** 2
    _add_network_rows(prog, sys, stoch.mu_full(n))
    _objective_from_costs(prog, grid, None, None)
    prog.add_objective_constant(const_extra)
    prog.meta.update(kind="reroute", sys=sys, stoch=stoch, A_hat=A_hat,
                     tau=tau, s_hat=s_hat)
    return prog


def solve_reroute(grid_or_sys, stoch: StochasticModel, A_hat: ParticipationMatrix,
                  tau: float, opts: SolveOptions | None = None) -> DispatchSolution:
    sys = ensure_system(grid_or_sys)
    prog = build_reroute(sys, stoch, A_hat, tau)
    res = conic.solve(prog, opts)
    if res.status != conic.OPTIMAL:
        raise InfeasibleDispatchError(f"Reroute ended with status {res.status}", res)
    p, theta, f = _extract_network(res.values)
    return DispatchSolution(
        p_bar=p, theta_bar=theta, f_bar=f, A=A_hat,
        s2=prog.meta["s_hat"] ** 2,
        expected_cost=expected_total_cost(sys.grid, A_hat, stoch.cov, p),
        diagnostics=_diag(res))


# -- VShift --------------------------------------------------------------------

def build_vshift(grid_or_sys, stoch: StochasticModel, f_prime: np.ndarray,
                 A_prime: ParticipationMatrix, tau: float,
                 metric: MetricSpec,
                 std_caps: dict[int, float] | None = None) -> ConicProgram:
    """Participation re-optimization against the variance metric.

    The metric terms are quadratic in the variances, and each line's
    deviation is an affine image of the participation entries, so the
    objective is assembled directly as a convex quadratic in the matrix.
    Safety is imposed only on the nearly-binding set, at the full line
    limit (the slack the tightened re-dispatch created is exactly the room
    the new matrix may use): each such line contributes one cone
    (limit - |flow|)/nu >= ||deviation image||.

    An earlier variant carried an explicit per-line standard-deviation
    block bounded only by its cone; the objective-free entries left the
    optimal face unbounded and stalled interior-point solvers on
    hundred-bus instances, so the reduced form is used instead.  Extra
    per-line deviation caps (std_caps) graft on as additional cones.
    """
    sys = ensure_system(grid_or_sys)
    grid = sys.grid
    if not metric.resolved:
        metric = metric.resolve(grid)
    pattern = A_prime.pattern
    nR, nS = pattern.shape
    m = grid.n_lines
    F = stoch.cov_factor
    f_prime = np.asarray(f_prime, dtype=float)
    nu_line = grid.line_safety_params()

    tight = tight_set(f_prime, A_prime, sys, stoch, tau)
    objective_lines = select_F(metric, f_prime,
                               line_variances(sys, A_prime, stoch.cov), tight)

    prog = ConicProgram("vshift")
    _add_participation_structure(prog, pattern)

    def deviation_image(li: int):
        # b * cov_factor @ (pi at sources - A^T pi at participants), affine in A
        ln = grid.lines[li]
        M = np.zeros((nS, nR * nS))
        for r, bus in enumerate(pattern.participants):
            col = sys.breve_column(bus)
            pi_r = col[ln.from_bus] - col[ln.to_bus]
            M[:, r * nS:(r + 1) * nS] = -ln.susceptance * pi_r * F
        pi_s = np.array([sys.breve_column(b)[ln.from_bus] - sys.breve_column(b)[ln.to_bus]
                         for b in pattern.sources])
        return M, ln.susceptance * F @ pi_s

    Q = np.zeros((nR * nS, nR * nS))
    lin = np.zeros(nR * nS)
    const = 0.0
    for li in objective_lines:
        M, c = deviation_image(li)
        w = metric.weights[li]
        Q += w * (M.T @ M)
        lin += 2.0 * w * (M.T @ c)
        const += w * float(c @ c)
    prog.add_quadratic_objective("A", Q)
    prog.add_linear_objective("A", lin)
    prog.add_objective_constant(const)

    caps: dict[int, float] = {}
    for li in tight:
        if nu_line[li] > 0:
            caps[li] = (grid.lines[li].limit - abs(f_prime[li])) / nu_line[li]
    for li, cap in (std_caps or {}).items():
        caps[li] = min(caps.get(li, np.inf), float(cap))
    for li, cap in sorted(caps.items()):
        M, c = deviation_image(li)
        prog.add_soc_constraint([], cap, [("A", M)], c, tag=f"std_cap[{li}]")

    prog.meta.update(kind="vshift", sys=sys, stoch=stoch, pattern=pattern,
                     tau=tau, tight=tight, objective_lines=objective_lines,
                     f_prime=f_prime, std_caps=caps)
    return prog


def solve_vshift(grid_or_sys, stoch: StochasticModel, f_prime: np.ndarray,
                 A_prime: ParticipationMatrix, tau: float, metric: MetricSpec,
                 opts: SolveOptions | None = None,
                 std_caps: dict[int, float] | None = None) -> tuple[ParticipationMatrix, np.ndarray]:
    """Returns (new participation matrix, its per-line standard deviations).

    The deviations are recomputed exactly from the returned matrix rather
    than read out of solver slack.
    """
    sys = ensure_system(grid_or_sys)
    prog = build_vshift(sys, stoch, f_prime, A_prime, tau, metric, std_caps)
    res = conic.solve(prog, opts)
    if res.status != conic.OPTIMAL:
        raise InfeasibleDispatchError(f"VShift ended with status {res.status}", res)
    A = ParticipationMatrix(res.values["A"].reshape(A_prime.pattern.shape),
                            A_prime.pattern)
    return A, np.sqrt(line_variances(sys, A, stoch.cov))


# -- compatibility -------------------------------------------------------------

def tight_set(f_bar: np.ndarray, A: ParticipationMatrix, grid_or_sys,
              stoch: StochasticModel, tau: float) -> list[int]:
    """Lines whose safety constraint is within a tau fraction of binding."""
    sys = ensure_system(grid_or_sys)
    grid = sys.grid
    s = np.sqrt(line_variances(sys, A, stoch.cov))
    nu = grid.line_safety_params()
    limits = grid.line_limits()
    lhs = np.abs(np.asarray(f_bar, dtype=float)) + nu * s
    # tiny slack so exactly-tight constraints stay in despite roundoff
    return [li for li in range(grid.n_lines)
            if lhs[li] >= (1.0 - tau) * limits[li] - 1e-9 * (1.0 + limits[li])]


@dataclass
class CompatibilityReport:
    ok: bool
    violations: list[tuple[str, str, float]] = field(default_factory=list)
    theta: np.ndarray | None = None
    p_bar: np.ndarray | None = None
    line_margins: np.ndarray | None = None


def _integrate_angles(sys: SusceptanceSystem, f_bar: np.ndarray,
                      rel_tol: float = 1e-7) -> np.ndarray:
    """Angles from flows by spanning-tree integration; verifies every line.

    Raises CycleInconsistencyError when some cycle's flow sum is off, i.e.
    the flow vector is not b (theta_i - theta_j) for any theta.
    """
    grid = sys.grid
    n = grid.n_buses
    theta = np.full(n, np.nan)
    theta[grid.slack_bus] = 0.0
    adj: dict[int, list[tuple[int, int]]] = {i: [] for i in range(n)}
    for li, ln in enumerate(grid.lines):
        adj[ln.from_bus].append((ln.to_bus, li))
        adj[ln.to_bus].append((ln.from_bus, li))
    stack = [grid.slack_bus]
    while stack:
        u = stack.pop()
        for v, li in adj[u]:
            if not np.isnan(theta[v]):
                continue
            ln = grid.lines[li]
            drop = f_bar[li] / ln.susceptance
            theta[v] = theta[u] - drop if ln.from_bus == u else theta[u] + drop
            stack.append(v)
    scale = max(float(np.max(np.abs(f_bar / grid.line_susceptances()), initial=0.0)), 1.0)
    for li, ln in enumerate(grid.lines):
        resid = theta[ln.from_bus] - theta[ln.to_bus] - f_bar[li] / ln.susceptance
        if abs(resid) > rel_tol * scale:
            raise CycleInconsistencyError(
                f"flow vector is cycle-inconsistent at line {li} (residual {resid:.3e})")
    return theta


def check_compatible(f_bar: np.ndarray, A: ParticipationMatrix, grid_or_sys,
                     stoch: StochasticModel, tol: float = FEAS_TOL) -> CompatibilityReport:
    """Can (f_bar, A) be extended to a feasible safety-constrained dispatch?

    The angle vector is reconstructed from the flows (reference angle 0 at
    the slack), the implied dispatch read off the balance equation, and
    every constraint of the safety problem checked with margins.
    """
    sys = ensure_system(grid_or_sys)
    grid = sys.grid
    f_bar = np.asarray(f_bar, dtype=float)
    theta = _integrate_angles(sys, f_bar)
    p_bar = sys.B @ theta + grid.loads() - stoch.mu_full(grid.n_buses)
    violations: list[tuple[str, str, float]] = []

    from .stochastic import validate_participation
    prep = validate_participation(A, tol=max(tol, 1e-9))
    for code, msg in prep.violations:
        violations.append((code, msg, 0.0))

    gen_buses = {g.bus for g in grid.generators}
    pscale = 1.0 + float(np.max(np.abs(p_bar)))
    for b in range(grid.n_buses):
        if b not in gen_buses and abs(p_bar[b]) > tol * pscale:
            violations.append(("injection_mismatch",
                               f"bus {b} needs generation {p_bar[b]:.6g} but has no generator",
                               float(-abs(p_bar[b]))))
    for g in grid.generators:
        row = A.row_for_bus(g.bus)
        margin = g.safety_param * np.sqrt(max(float(row @ stoch.cov @ row), 0.0))
        lo = p_bar[g.bus] - (g.p_min + margin)
        hi = (g.p_max - margin) - p_bar[g.bus]
        scale = 1.0 + abs(g.p_max)
        if lo < -tol * scale:
            violations.append(("gen_lower", f"bus {g.bus} below secured minimum", float(lo)))
        if hi < -tol * scale:
            violations.append(("gen_upper", f"bus {g.bus} above secured maximum", float(hi)))

    s = np.sqrt(line_variances(sys, A, stoch.cov))
    nu = grid.line_safety_params()
    margins = grid.line_limits() - (np.abs(f_bar) + nu * s)
    for li in range(grid.n_lines):
        if margins[li] < -tol * (1.0 + grid.lines[li].limit):
            violations.append(("line_safety",
                               f"line {li} violates its safety constraint",
                               float(margins[li])))
    return CompatibilityReport(ok=not violations, violations=violations,
                               theta=theta, p_bar=p_bar, line_margins=margins)


# -- serialization ---------------------------------------------------------

def dispatch_to_json(sol: DispatchSolution, grid: Grid) -> str:
    """Deterministic JSON form; participation entries as labelled triplets."""
    triplets = []
    if sol.A is not None:
        for r, pbus in enumerate(sol.A.participants):
            for j, sbus in enumerate(sol.A.sources):
                triplets.append([int(grid.buses[pbus].label),
                                 int(grid.buses[sbus].label),
                                 float(sol.A.entries[r, j])])
    data = {
        "p_bar": [float(x) for x in sol.p_bar],
        "theta_bar": [float(x) for x in sol.theta_bar],
        "f_bar": [float(x) for x in sol.f_bar],
        "s2": [float(x) for x in sol.s2],
        "A": triplets,
        "expected_cost": float(sol.expected_cost),
        "status": sol.diagnostics.get("status", "unknown"),
    }
    return json.dumps(data, indent=2)


def dispatch_from_json(text: str, grid: Grid) -> DispatchSolution:
    data = json.loads(text)
    label_to_index = {b.label: b.index for b in grid.buses}
    A = None
    if data.get("A"):
        parts, srcs = [], []
        for plab, slab, _ in data["A"]:
            p, sbus = label_to_index[plab], label_to_index[slab]
            if p not in parts:
                parts.append(p)
            if sbus not in srcs:
                srcs.append(sbus)
        entries = np.zeros((len(parts), len(srcs)))
        for plab, slab, a in data["A"]:
            entries[parts.index(label_to_index[plab]),
                    srcs.index(label_to_index[slab])] = a
        A = ParticipationMatrix(entries, PatternK(tuple(parts), tuple(srcs)))
    return DispatchSolution(
        p_bar=np.array(data["p_bar"]), theta_bar=np.array(data["theta_bar"]),
        f_bar=np.array(data["f_bar"]), A=A, s2=np.array(data["s2"]),
        expected_cost=float(data["expected_cost"]),
        diagnostics={"status": data.get("status", "unknown")})
