"""Solver-agnostic conic programs, solver adapters, and cutting planes.

The program representation covers exactly what the dispatch formulations
need: named variable blocks, a convex block-diagonal quadratic objective,
linear rows, per-variable bounds, and second-order-cone rows t >= ||y||
with t scalar-affine and y vector-affine.

Two adapters are bundled: Clarabel (interior-point, handles the cones
directly; the default) and OSQP (convex QPs with linear rows only, enough
for every cutting-plane and fixed-participation solve).  Results from any
adapter are re-checked for primal feasibility independently before being
reported optimal.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse

__all__ = [
    "ConicProgram",
    "SolveOptions",
    "SolveResult",
    "solve",
    "cutting_plane_solve",
    "UnsupportedProgramError",
]

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
NUMERIC_FAILURE = "numeric_failure"
ITERATION_LIMIT = "iteration_limit"


class UnsupportedProgramError(RuntimeError):
    """The selected adapter cannot handle a feature of this program."""


@dataclass
class LinearRow:
    terms: list        # [(var, int-array indices, float-array coeffs), ...]
    sense: str         # "<=", "==", ">="
    rhs: float
    tag: str = ""


@dataclass
class SocRow:
    """t >= ||y||_2 with t = t_terms . x + t_const and y = sum M_v x_v + y_const."""
    t_terms: list      # [(var, index, coef), ...]
    t_const: float
    y_terms: list      # [(var, matrix of shape (dim, var_size)), ...]
    y_const: np.ndarray
    tag: str = ""

    @property
    def dim(self) -> int:
        return len(self.y_const)


class ConicProgram:
    """Mutable while being built; treat as read-only once handed to a solver."""

    def __init__(self, name: str = "program"):
        self.name = name
        self._sizes: dict[str, int] = {}
        self._order: list[str] = []
        self.lb: dict[str, np.ndarray] = {}
        self.ub: dict[str, np.ndarray] = {}
        self.obj_quad: dict[str, np.ndarray] = {}
        self.obj_lin: dict[str, np.ndarray] = {}
        self.obj_const: float = 0.0
        self.linear_rows: list[LinearRow] = []
        self.soc_rows: list[SocRow] = []
        self.meta: dict = {}

    # -- construction -----------------------------------------------------

    def add_variable(self, name: str, size: int, lb=-np.inf, ub=np.inf) -> str:
        if name in self._sizes:
            raise ValueError(f"variable {name!r} already declared")
        self._sizes[name] = size
        self._order.append(name)
        self.lb[name] = np.broadcast_to(np.asarray(lb, dtype=float), (size,)).copy()
        self.ub[name] = np.broadcast_to(np.asarray(ub, dtype=float), (size,)).copy()
        return name

    def size(self, name: str) -> int:
        return self._sizes[name]

    @property
    def variables(self) -> list[str]:
        return list(self._order)

    @property
    def total_vars(self) -> int:
        return sum(self._sizes.values())

    def offset(self, name: str) -> int:
        off = 0
        for v in self._order:
            if v == name:
                return off
            off += self._sizes[v]
        raise KeyError(name)

    def add_quadratic_objective(self, name: str, Q) -> None:
        """Accumulate x_name^T Q x_name into the objective (Q symmetric PSD)."""
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        if Q.shape != (self._sizes[name],) * 2:
            raise ValueError(f"quadratic block for {name!r} has shape {Q.shape}")
        self.obj_quad[name] = self.obj_quad.get(name, 0.0) + 0.5 * (Q + Q.T)

    def add_linear_objective(self, name: str, c) -> None:
        c = np.broadcast_to(np.asarray(c, dtype=float), (self._sizes[name],))
        self.obj_lin[name] = self.obj_lin.get(name, 0.0) + c

    def add_objective_constant(self, k: float) -> None:
        self.obj_const += float(k)

    def add_linear_constraint(self, terms, sense: str, rhs: float, tag: str = "") -> None:
        if sense not in ("<=", "==", ">="):
            raise ValueError(f"bad sense {sense!r}")
        norm = []
        for var, idx, coef in terms:
            idx = np.atleast_1d(np.asarray(idx, dtype=int))
            coef = np.broadcast_to(np.asarray(coef, dtype=float), idx.shape)
            if idx.size and (idx.min() < 0 or idx.max() >= self._sizes[var]):
                raise ValueError(f"index out of range for variable {var!r}")
            norm.append((var, idx, coef.copy()))
        self.linear_rows.append(LinearRow(norm, sense, float(rhs), tag))

    def add_soc_constraint(self, t_terms, t_const: float, y_terms, y_const,
                           tag: str = "") -> None:
        y_const = np.atleast_1d(np.asarray(y_const, dtype=float))
        norm_y = []
        for var, M in y_terms:
            M = np.atleast_2d(np.asarray(M, dtype=float))
            if M.shape != (len(y_const), self._sizes[var]):
                raise ValueError(f"SOC matrix for {var!r} has shape {M.shape}, "
                                 f"expected ({len(y_const)}, {self._sizes[var]})")
            norm_y.append((var, M))
        norm_t = [(var, int(i), float(c)) for var, i, c in t_terms]
        self.soc_rows.append(SocRow(norm_t, float(t_const), norm_y, y_const, tag))

    def copy(self, drop_soc: bool = False) -> "ConicProgram":
        out = ConicProgram(self.name)
        out._sizes = dict(self._sizes)
        out._order = list(self._order)
        out.lb = {k: v.copy() for k, v in self.lb.items()}
        out.ub = {k: v.copy() for k, v in self.ub.items()}
        out.obj_quad = {k: np.array(v) for k, v in self.obj_quad.items()}
        out.obj_lin = {k: np.array(v) for k, v in self.obj_lin.items()}
        out.obj_const = self.obj_const
        out.linear_rows = [LinearRow([(v, i.copy(), c.copy()) for v, i, c in r.terms],
                                     r.sense, r.rhs, r.tag) for r in self.linear_rows]
        if not drop_soc:
            out.soc_rows = [SocRow(list(r.t_terms), r.t_const,
                                   [(v, M.copy()) for v, M in r.y_terms],
                                   r.y_const.copy(), r.tag) for r in self.soc_rows]
        out.meta = dict(self.meta)
        return out

    # -- evaluation helpers -------------------------------------------------

    def split(self, x: np.ndarray) -> dict[str, np.ndarray]:
        out, off = {}, 0
        for v in self._order:
            out[v] = x[off:off + self._sizes[v]].copy()
            off += self._sizes[v]
        return out

    def objective_value(self, values: dict[str, np.ndarray]) -> float:
        total = self.obj_const
        for v, Q in self.obj_quad.items():
            total += float(values[v] @ Q @ values[v])
        for v, c in self.obj_lin.items():
            total += float(np.dot(c, values[v]))
        return total

    def eval_row(self, row: LinearRow, values: dict[str, np.ndarray]) -> float:
        return sum(float(np.dot(coef, values[var][idx])) for var, idx, coef in row.terms)

    def eval_soc(self, soc: SocRow, values: dict[str, np.ndarray]) -> tuple[float, np.ndarray]:
        t = soc.t_const + sum(c * values[var][i] for var, i, c in soc.t_terms)
        y = soc.y_const.copy()
        for var, M in soc.y_terms:
            y = y + M @ values[var]
        return float(t), y

    def max_violation(self, values: dict[str, np.ndarray],
                      include_soc: bool = True) -> float:
        """Largest scaled primal infeasibility across rows, bounds, and cones."""
        worst = 0.0
        for row in self.linear_rows:
            lhs = self.eval_row(row, values)
            scale = 1.0 + abs(row.rhs)
            if row.sense == "<=":
                worst = max(worst, (lhs - row.rhs) / scale)
            elif row.sense == ">=":
                worst = max(worst, (row.rhs - lhs) / scale)
            else:
                worst = max(worst, abs(lhs - row.rhs) / scale)
        for v in self._order:
            x = values[v]
            scale = 1.0 + float(np.max(np.abs(x), initial=0.0))
            worst = max(worst, float(np.max(self.lb[v] - x, initial=0.0)) / scale)
            worst = max(worst, float(np.max(x - self.ub[v], initial=0.0)) / scale)
        if include_soc:
            for soc in self.soc_rows:
                t, y = self.eval_soc(soc, values)
                worst = max(worst, (float(np.linalg.norm(y)) - t) / (1.0 + abs(t)))
        return worst

    # -- canonical assembly -------------------------------------------------

    def assemble(self):
        """Canonical arrays: c, Q, (A_eq, b_eq), (A_ub, b_ub), lb, ub.

        Bounds are kept separate from rows; adapters fold them in as needed.
        """
        nvar = self.total_vars
        offsets = {}
        off = 0
        for v in self._order:
            offsets[v] = off
            off += self._sizes[v]
        c = np.zeros(nvar)
        for v, vec in self.obj_lin.items():
            c[offsets[v]:offsets[v] + self._sizes[v]] += vec
        qr, qc, qv = [], [], []
        for v, Q in self.obj_quad.items():
            o = offsets[v]
            nz = np.nonzero(Q)
            qr.extend(nz[0] + o)
            qc.extend(nz[1] + o)
            qv.extend(Q[nz])
        Q = sparse.coo_matrix((qv, (qr, qc)), shape=(nvar, nvar)).tocsc()

        def build(rows_sense):
            data, ri, ci, rhs = [], [], [], []
            for r, (row, flip) in enumerate(rows_sense):
                s = -1.0 if flip else 1.0
                for var, idx, coef in row.terms:
                    ri.extend([r] * len(idx))
                    ci.extend(offsets[var] + idx)
                    data.extend(s * coef)
                rhs.append(s * row.rhs)
            A = sparse.coo_matrix((data, (ri, ci)),
                                  shape=(len(rows_sense), nvar)).tocsr()
            return A, np.array(rhs)

        eq_rows = [(r, False) for r in self.linear_rows if r.sense == "=="]
        ub_rows = [(r, r.sense == ">=") for r in self.linear_rows if r.sense != "=="]
        A_eq, b_eq = build(eq_rows)
        A_ub, b_ub = build(ub_rows)
        lb = np.concatenate([self.lb[v] for v in self._order]) if self._order else np.zeros(0)
        ub = np.concatenate([self.ub[v] for v in self._order]) if self._order else np.zeros(0)
        return offsets, c, Q, A_eq, b_eq, A_ub, b_ub, lb, ub

    def soc_matrix_form(self, offsets):
        """Each SOC row as (t_vec, t_const, M, y_const) over the stacked x."""
        nvar = self.total_vars
        out = []
        for soc in self.soc_rows:
            t_vec = np.zeros(nvar)
            for var, i, cf in soc.t_terms:
                t_vec[offsets[var] + i] += cf
            M = sparse.lil_matrix((soc.dim, nvar))
            for var, mat in soc.y_terms:
                o = offsets[var]
                M[:, o:o + mat.shape[1]] += mat
            out.append((t_vec, soc.t_const, M.tocsr(), soc.y_const))
        return out

    def dump(self) -> str:
        """Stable human-readable listing for external solver debugging."""
        lines = [f"program {self.name}", "variables:"]
        for v in self._order:
            lines.append(f"  {v}[{self._sizes[v]}]")
        lines.append(f"objective constant: {self.obj_const!r}")
        for v in self._order:
            if v in self.obj_lin:
                lines.append(f"objective linear {v}: {np.array2string(self.obj_lin[v], precision=8)}")
        for v in self._order:
            if v in self.obj_quad:
                lines.append(f"objective quadratic {v}: nnz={int(np.count_nonzero(self.obj_quad[v]))}")
        lines.append(f"linear rows: {len(self.linear_rows)}")
        for row in self.linear_rows:
            parts = []
            for var, idx, coef in row.terms:
                parts.extend(f"{c:+.8g}*{var}[{i}]" for i, c in zip(idx, coef))
            lines.append(f"  {' '.join(parts)} {row.sense} {row.rhs:.8g}  # {row.tag}")
        lines.append(f"soc rows: {len(self.soc_rows)}")
        for soc in self.soc_rows:
            tp = " ".join(f"{c:+.8g}*{var}[{i}]" for var, i, c in soc.t_terms)
            lines.append(f"  {tp} {soc.t_const:+.8g} >= ||y||, dim {soc.dim}  # {soc.tag}")
        return "\n".join(lines)


@dataclass
class SolveOptions:
    adapter: str = "clarabel"
    verbose: bool = False
    tol: float = 1e-9            # adapter convergence tolerance
    feas_tol: float = 1e-6       # independent primal feasibility re-check
    max_iter: int = 200_000
    soc_tolerance: float = 1e-6  # cutting-plane cone tolerance
    max_rounds: int = 50
    max_cuts_per_cone: int | None = None


@dataclass
class SolveResult:
    status: str
    values: dict[str, np.ndarray] | None = None
    objective: float | None = None
    duals: dict | None = None
    iterations: int = 0
    wall_time: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


# -- adapters ---------------------------------------------------------------

def _bounds_as_rows(nvar, lb, ub):
    """Finite bounds as sparse rows of A x <= b."""
    rows, rhs = [], []
    finite_ub = np.where(np.isfinite(ub))[0]
    finite_lb = np.where(np.isfinite(lb))[0]
    data = np.concatenate([np.ones(len(finite_ub)), -np.ones(len(finite_lb))])
    ri = np.arange(len(finite_ub) + len(finite_lb))
    ci = np.concatenate([finite_ub, finite_lb])
    A = sparse.coo_matrix((data, (ri, ci)),
                          shape=(len(finite_ub) + len(finite_lb), nvar)).tocsr()
    b = np.concatenate([ub[finite_ub], -lb[finite_lb]])
    return A, b


def _solve_clarabel(program: ConicProgram, opts: SolveOptions):
    import clarabel

    offsets, c, Q, A_eq, b_eq, A_ub, b_ub, lb, ub = program.assemble()
    nvar = program.total_vars
    A_bnd, b_bnd = _bounds_as_rows(nvar, lb, ub)
    blocks = [A_eq, sparse.vstack([A_ub, A_bnd], format="csr")]
    rhs = [b_eq, np.concatenate([b_ub, b_bnd])]
    cones = []
    if A_eq.shape[0]:
        cones.append(clarabel.ZeroConeT(A_eq.shape[0]))
    n_ineq = A_ub.shape[0] + A_bnd.shape[0]
    if n_ineq:
        cones.append(clarabel.NonnegativeConeT(n_ineq))
    for t_vec, t_const, M, y_const in program.soc_matrix_form(offsets):
        # s = b - Ax must equal (t; y) in the cone
        blocks.append(sparse.vstack([sparse.csr_matrix(-t_vec), -M], format="csr"))
        rhs.append(np.concatenate([[t_const], y_const]))
        cones.append(clarabel.SecondOrderConeT(1 + M.shape[0]))
    A = sparse.vstack(blocks, format="csc") if blocks else sparse.csc_matrix((0, nvar))
    b = np.concatenate(rhs) if rhs else np.zeros(0)

    settings = clarabel.DefaultSettings()
    settings.verbose = opts.verbose
    settings.tol_gap_abs = opts.tol
    settings.tol_gap_rel = opts.tol
    settings.tol_feas = opts.tol
    P = sparse.triu(2.0 * Q, format="csc")
    solver = clarabel.DefaultSolver(P, c, A, b, cones, settings)
    sol = solver.solve()
    status = str(sol.status)
    mapping = {
        "Solved": OPTIMAL,
        "AlmostSolved": OPTIMAL,   # re-check below decides
        "PrimalInfeasible": INFEASIBLE,
        "AlmostPrimalInfeasible": INFEASIBLE,
        "DualInfeasible": UNBOUNDED,
        "AlmostDualInfeasible": UNBOUNDED,
        "MaxIterations": ITERATION_LIMIT,
        "MaxTime": ITERATION_LIMIT,
    }
    return (mapping.get(status, NUMERIC_FAILURE), np.asarray(sol.x),
            int(sol.iterations), {"adapter_status": status})


def _solve_osqp(program: ConicProgram, opts: SolveOptions):
    import osqp

    if program.soc_rows:
        raise UnsupportedProgramError(
            "the osqp adapter handles convex QPs with linear rows only; "
            "use cutting_plane_solve or the clarabel adapter for cone rows")
    offsets, c, Q, A_eq, b_eq, A_ub, b_ub, lb, ub = program.assemble()
    nvar = program.total_vars
    ident = sparse.identity(nvar, format="csr")
    A = sparse.vstack([A_eq, A_ub, ident], format="csc")
    l = np.concatenate([b_eq, np.full(A_ub.shape[0], -np.inf), lb])
    u = np.concatenate([b_eq, b_ub, ub])
    P = sparse.triu(2.0 * Q, format="csc")
    solver = osqp.OSQP()
    solver.setup(P=P, q=c, A=A, l=l, u=u, verbose=opts.verbose,
                 eps_abs=min(opts.tol * 10, 1e-8), eps_rel=min(opts.tol * 10, 1e-8),
                 max_iter=opts.max_iter, polishing=True)
    res = solver.solve(raise_error=False)
    status = res.info.status
    mapping = {
        "solved": OPTIMAL,
        "solved inaccurate": OPTIMAL,
        "primal infeasible": INFEASIBLE,
        "primal infeasible inaccurate": INFEASIBLE,
        "dual infeasible": UNBOUNDED,
        "dual infeasible inaccurate": UNBOUNDED,
        "maximum iterations reached": ITERATION_LIMIT,
        "run time limit reached": ITERATION_LIMIT,
    }
    x = np.asarray(res.x) if res.x is not None else np.full(nvar, np.nan)
    return (mapping.get(status, NUMERIC_FAILURE), x,
            int(res.info.iter), {"adapter_status": status})


_ADAPTERS = {"clarabel": _solve_clarabel, "osqp": _solve_osqp}


def solve(program: ConicProgram, opts: SolveOptions | None = None) -> SolveResult:
    """Solve through the configured adapter; re-verify feasibility on success."""
    opts = opts or SolveOptions()
    if opts.adapter not in _ADAPTERS:
        raise ValueError(f"unknown adapter {opts.adapter!r}; have {sorted(_ADAPTERS)}")
    start = time.perf_counter()
    try:
        status, x, iterations, diag = _ADAPTERS[opts.adapter](program, opts)
    except UnsupportedProgramError:
        raise
    except Exception as exc:  # adapter crash -> structured failure
        return SolveResult(status=NUMERIC_FAILURE, iterations=0,
                           wall_time=time.perf_counter() - start,
                           diagnostics={"error": f"{type(exc).__name__}: {exc}"})
    wall = time.perf_counter() - start
    if status != OPTIMAL or not np.all(np.isfinite(x)):
        values = program.split(x) if np.all(np.isfinite(x)) else None
        return SolveResult(status=status, values=values, iterations=iterations,
                           wall_time=wall, diagnostics=diag)
    values = program.split(x)
    viol = program.max_violation(values)
    diag["primal_violation"] = viol
    if viol > opts.feas_tol:
        return SolveResult(status=NUMERIC_FAILURE, values=values,
                           objective=program.objective_value(values),
                           iterations=iterations, wall_time=wall, diagnostics=diag)
    return SolveResult(status=OPTIMAL, values=values,
                       objective=program.objective_value(values),
                       iterations=iterations, wall_time=wall, diagnostics=diag)


def cutting_plane_solve(program: ConicProgram, soc_tolerance: float | None = None,
                        max_rounds: int | None = None,
                        opts: SolveOptions | None = None) -> SolveResult:
    """Outer approximation: replace cone rows by accumulated gradient cuts.

    Each round solves the program with cones dropped and cuts added; every
    cone violated by more than the tolerance contributes the supporting cut
    t >= (y*/||y*||) . y at the current iterate (all violated cones per
    round).  Cuts never remove feasible points of the original program, so
    round objectives are non-decreasing.  A zero y* is skipped: the cone is
    already satisfied there because t is kept nonnegative.
    """
    opts = opts or SolveOptions()
    tol = opts.soc_tolerance if soc_tolerance is None else soc_tolerance
    rounds_cap = opts.max_rounds if max_rounds is None else max_rounds

    base = program.copy(drop_soc=True)
    for soc in program.soc_rows:
        # keep t >= 0 so dropping the cone cannot unbound it downward
        if len(soc.t_terms) == 1 and soc.t_terms[0][2] == 1.0 and soc.t_const == 0.0:
            var, i, _ = soc.t_terms[0]
            base.lb[var][i] = max(base.lb[var][i], 0.0)
        else:
            base.add_linear_constraint(
                [(var, i, cf) for var, i, cf in soc.t_terms],
                ">=", -soc.t_const, tag="cp_t_nonneg")

    cuts: list[list] = [[] for _ in program.soc_rows]
    history: list[float] = []
    result = None
    for rnd in range(1, rounds_cap + 1):
        work = base.copy()
        for per_cone in cuts:
            for terms, rhs in per_cone:
                work.add_linear_constraint(terms, ">=", rhs, tag="cut")
        result = solve(work, opts)
        if result.status != OPTIMAL:
            result.diagnostics["rounds"] = rnd
            return result
        history.append(result.objective)
        violated = 0
        for ci, soc in enumerate(program.soc_rows):
            t, y = program.eval_soc(soc, result.values)
            norm_y = float(np.linalg.norm(y))
            if norm_y - t <= tol:
                continue
            if norm_y == 0.0:
                continue
            violated += 1
            u = y / norm_y
            terms = [(var, i, cf) for var, i, cf in soc.t_terms]
            for var, M in soc.y_terms:
                row = u @ M
                idx = np.nonzero(row)[0]
                if idx.size:
                    terms.append((var, idx, -row[idx]))
            cuts[ci].append((terms, float(u @ soc.y_const) - soc.t_const))
            if opts.max_cuts_per_cone is not None and len(cuts[ci]) > opts.max_cuts_per_cone:
                cuts[ci].pop(0)  # FIFO eviction
        if violated == 0:
            result.iterations = rnd
            result.diagnostics["rounds"] = rnd
            result.diagnostics["objective_history"] = history
            result.diagnostics["cut_rows"] = [cut for per_cone in cuts for cut in per_cone]
            result.diagnostics["max_soc_violation"] = program.max_violation(
                result.values) if program.soc_rows else 0.0
            return result
    result.status = ITERATION_LIMIT
    result.iterations = rounds_cap
    result.diagnostics["rounds"] = rounds_cap
    result.diagnostics["objective_history"] = history
    result.diagnostics["cut_rows"] = [cut for per_cone in cuts for cut in per_cone]
    return result
