"""The variance-shifting procedure and its stopping certificate.

Starting from a feasible safety-constrained dispatch, each iteration

1. re-dispatches under limits tightened by (1 - tau) with the current
   participation matrix frozen (creating slack on every line),
2. re-optimizes the participation matrix against the variance metric,
   constrained only on nearly-binding lines,
3. walks from the old matrix toward the new one as far as compatibility
   allows -- the per-line variance along the segment is an exact quadratic
   in the step, so the largest admissible step is computed in closed form,
4. stops when the metric no longer improves.

For metrics that are convex nondecreasing functions of the variances alone
(model I), a stop in step 4 certifies that the incumbent metric equals the
minimum over all compatible pairs; a brute-force grid search is provided to
validate the certificate on tiny instances.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .conic import SolveOptions
from .formulations import (DispatchSolution, InfeasibleDispatchError,
                           build_reroute, check_compatible, ensure_system,
                           solve_reroute, solve_vshift, tight_set)
from .metrics import (MODEL_I, SHIFTABLE_MODELS, MetricSpec, metric_eval,
                      select_F)
from .stochastic import (ParticipationMatrix, StochasticModel,
                         expected_total_cost, line_variances)
from . import conic

__all__ = [
    "ShiftRecord",
    "ShiftTrace",
    "StopCertificate",
    "max_step",
    "run_procedure",
    "certify_stop",
    "brute_force_delta_star",
]

STEP1_RETRY_CAP = 8


@dataclass
class ShiftRecord:
    k: int
    cost: float
    delta: float
    lam: float | None
    tight_count: int | None
    tau: float
    stop_reason: str | None = None

    def to_json(self) -> str:
        return json.dumps({
            "k": self.k, "cost": self.cost, "delta": self.delta,
            "lambda": self.lam, "tight_count": self.tight_count,
            "tau": self.tau, "stop_reason": self.stop_reason,
        })


@dataclass
class ShiftTrace:
    records: list[ShiftRecord] = field(default_factory=list)
    final: DispatchSolution | None = None
    stop_reason: str | None = None
    stop_iteration: int | None = None
    meta: dict = field(default_factory=dict)

    def to_jsonl(self) -> str:
        return "\n".join(r.to_json() for r in self.records) + "\n"

    @property
    def deltas(self) -> list[float]:
        return [r.delta for r in self.records]


@dataclass
class StopCertificate:
    """Claim: the metric value held when step 4 tripped is the compatible optimum."""
    delta_stop: float
    iteration: int
    witness_delta: float   # metric value of the step-2 optimizer at the stop


def _quad_through(v0: float, v_half: float, v1: float) -> tuple[float, float, float]:
    """Coefficients (a, b, c) of the parabola through t = 0, 1/2, 1."""
    a = 2.0 * v0 - 4.0 * v_half + 2.0 * v1
    b = -3.0 * v0 + 4.0 * v_half - v1
    return a, b, float(v0)


def _largest_feasible_step(a: float, b: float, c: float, cap: float) -> float:
    """Largest t in [0, 1] with a t^2 + b t + c <= cap.

    The start t = 0 is compatible by precondition; re-dispatches routinely
    leave constraints exactly binding there, so any roundoff excess of c
    over cap is absorbed into the cap rather than rejecting the whole step.
    The step then stops at the first crossing above that level (convexity
    makes the violation set a tail interval).
    """
    scale = max(abs(a), abs(b), abs(c), abs(cap), 1.0)
    cap_eff = max(cap, c) + 1e-12 * scale
    g = lambda t: a * t * t + b * t + c - cap_eff
    if g(1.0) <= 0.0:
        return 1.0
    if abs(a) < 1e-14 * scale:
        if b <= 0:
            return 1.0  # non-increasing yet g(1) > 0: roundoff, keep the full step
        return min(1.0, max(0.0, (cap_eff - c) / b))
    disc = b * b - 4.0 * a * (c - cap_eff)
    if disc <= 0:
        return 1.0
    sq = math.sqrt(disc)
    roots = sorted(((-b - sq) / (2 * a), (-b + sq) / (2 * a)))
    for r in roots:
        if r > 0.0:
            return min(1.0, r)
    return 1.0


def max_step(grid_or_sys, stoch: StochasticModel, f_bar: np.ndarray,
             A_prev: ParticipationMatrix, A_hat: ParticipationMatrix) -> float:
    """Largest step toward the new participation matrix keeping compatibility.

    The flow vector stays fixed, so only the variance-dependent constraints
    move: per-line safety and per-generator secured bounds.  Each squared
    deviation along the blend is an exact quadratic in t, recovered from
    evaluations at t = 0, 1/2, 1; the inequality nu * sqrt(q(t)) <= margin
    is solved as q(t) <= (margin/nu)^2.

    Returns 0.0 when even an infinitesimal step breaks compatibility
    (callers should stop).
    """
    sys = ensure_system(grid_or_sys)
    grid = sys.grid
    f_bar = np.asarray(f_bar, dtype=float)
    lam = 1.0

    variants = {t: A_prev.blend(A_hat, t) for t in (0.0, 0.5, 1.0)}
    var_t = {t: line_variances(sys, variants[t], stoch.cov) for t in variants}
    nu = grid.line_safety_params()
    for li, ln in enumerate(grid.lines):
        if nu[li] == 0:
            continue
        margin = ln.limit - abs(f_bar[li])
        if margin < 0:
            return 0.0
        cap = (margin / nu[li]) ** 2
        a, b, c = _quad_through(var_t[0.0][li], var_t[0.5][li], var_t[1.0][li])
        lam = min(lam, _largest_feasible_step(a, b, c, cap))

    # implied dispatch from the flows; generator margins move quadratically too
    report = check_compatible(f_bar, A_prev, sys, stoch)
    p_bar = report.p_bar
    cov = stoch.cov
    for g in grid.generators:
        if g.safety_param == 0:
            continue
        rows = {t: variants[t].row_for_bus(g.bus) for t in variants}
        q = {t: max(float(rows[t] @ cov @ rows[t]), 0.0) for t in variants}
        a, b, c = _quad_through(q[0.0], q[0.5], q[1.0])
        margin = min(p_bar[g.bus] - g.p_min, g.p_max - p_bar[g.bus])
        if margin < 0:
            return 0.0
        cap = (margin / g.safety_param) ** 2
        lam = min(lam, _largest_feasible_step(a, b, c, cap))
    return max(lam, 0.0)


def _delta_at(spec: MetricSpec, sys, stoch, f_bar, A, s2, tau) -> float:
    tight = tight_set(f_bar, A, sys, stoch, tau) if spec.model == "composite" else None
    return metric_eval(spec, f_bar, s2, tight=tight)


def run_procedure(start: DispatchSolution, spec: MetricSpec, tau: float, K: int,
                  *, grid_or_sys, stoch: StochasticModel,
                  opts: SolveOptions | None = None,
                  retry_after_stop: bool = False,
                  step1_retry_cap: int = STEP1_RETRY_CAP) -> ShiftTrace:
    """Run up to K shifting iterations from a feasible starting dispatch.

    When the tightened re-dispatch is infeasible, tau is halved and the
    re-dispatch retried up to a cap before giving up.  A non-improving
    metric stops the run by default; with retry_after_stop the run instead
    halves tau and keeps going while iterations remain (the metric record
    keeps the incumbent in that case).
    """
    sys = ensure_system(grid_or_sys)
    grid = sys.grid
    if start.A is None:
        raise ValueError("starting dispatch carries no participation matrix")
    spec = spec if spec.resolved else spec.resolve(grid)
    if spec.model not in SHIFTABLE_MODELS:
        raise ValueError(f"metric model {spec.model!r} is evaluation-only; "
                         f"the shifting step supports {SHIFTABLE_MODELS}")

    A_cur = start.A
    f_cur = start.f_bar
    s2_cur = line_variances(sys, A_cur, stoch.cov)
    delta_cur = _delta_at(spec, sys, stoch, f_cur, A_cur, s2_cur, tau)
    trace = ShiftTrace()
    trace.records.append(ShiftRecord(
        k=0, cost=start.expected_cost, delta=delta_cur, lam=None,
        tight_count=len(tight_set(f_cur, A_cur, sys, stoch, tau)), tau=tau))
    best = DispatchSolution(start.p_bar, start.theta_bar, start.f_bar, A_cur,
                            s2_cur, start.expected_cost, dict(start.diagnostics))

    for k in range(1, K + 1):
        # step 1: re-dispatch under tightened limits, frozen participation
        rerouted = None
        tau_k = tau
        for _ in range(step1_retry_cap + 1):
            try:
                rerouted = solve_reroute(sys, stoch, A_cur, tau_k, opts)
                break
            except InfeasibleDispatchError:
                tau_k *= 0.5
        if rerouted is None:
            trace.stop_reason = "step1_infeasible"
            trace.records.append(ShiftRecord(
                k=k, cost=best.expected_cost, delta=delta_cur, lam=None,
                tight_count=None, tau=tau_k, stop_reason="step1_infeasible"))
            break
        tau = tau_k
        f_k = rerouted.f_bar

        # step 2: re-optimize participation on the rerouted flows
        A_hat, _ = solve_vshift(sys, stoch, f_k, A_cur, tau, spec, opts)
        n_tight = len(tight_set(f_k, A_cur, sys, stoch, tau))

        # step 3: largest compatible step along the blend
        lam = max_step(sys, stoch, f_k, A_cur, A_hat)
        if lam <= 0.0:
            trace.stop_reason = "zero_step"
            trace.records.append(ShiftRecord(
                k=k, cost=rerouted.expected_cost, delta=delta_cur, lam=0.0,
                tight_count=n_tight, tau=tau, stop_reason="zero_step"))
            break

        # step 4: accept the blended matrix
        A_next = A_cur.blend(A_hat, lam)
        s2_next = line_variances(sys, A_next, stoch.cov)
        compat = check_compatible(f_k, A_next, sys, stoch)
        if not compat.ok:
            raise RuntimeError(f"stepsize produced an incompatible pair: {compat.violations}")
        cost_k = expected_total_cost(grid, A_next, stoch.cov, rerouted.p_bar)
        delta_k = _delta_at(spec, sys, stoch, f_k, A_next, s2_next, tau)

        # step 5: stop on non-improvement
        stopped = delta_k >= delta_cur
        hat_s2 = line_variances(sys, A_hat, stoch.cov)
        witness = _delta_at(spec, sys, stoch, f_k, A_hat, hat_s2, tau)
        record = ShiftRecord(k=k, cost=cost_k, delta=delta_k, lam=lam,
                             tight_count=n_tight, tau=tau,
                             stop_reason="step5_no_improvement" if stopped else None)
        trace.records.append(record)
        if stopped:
            trace.stop_reason = "step5_no_improvement"
            trace.stop_iteration = k
            trace.meta["witness_delta"] = witness
            tau *= 0.5
            if not retry_after_stop:
                break
            continue

        A_cur, f_cur, s2_cur, delta_cur = A_next, f_k, s2_next, delta_k
        best = DispatchSolution(rerouted.p_bar, rerouted.theta_bar, f_k, A_next,
                                s2_next, cost_k, dict(rerouted.diagnostics))

    if trace.stop_reason is None:
        trace.stop_reason = "iterations_exhausted"
    trace.final = best
    return trace


def certify_stop(trace: ShiftTrace) -> StopCertificate | None:
    """Certificate that a step-5 stop pinned the compatible metric optimum.

    Only meaningful for metric model I runs (the guarantee needs the metric
    to cover all lines and depend on the variances alone); returns None for
    traces that ended any other way.
    """
    if trace.stop_reason != "step5_no_improvement" or trace.stop_iteration is None:
        return None
    k = trace.stop_iteration
    delta_prev = next(r.delta for r in trace.records if r.k == k - 1)
    return StopCertificate(delta_stop=delta_prev, iteration=k,
                           witness_delta=trace.meta.get("witness_delta", float("nan")))


def brute_force_delta_star(grid_or_sys, stoch: StochasticModel, pattern,
                           spec: MetricSpec, alpha_step: float = 0.02,
                           opts: SolveOptions | None = None) -> tuple[float, int]:
    """Grid search for the minimum metric over all compatible pairs.

    Participation entries are discretized on [0, 1] with the given step
    (each source column must sum to one, so one participant per column is
    eliminated); a candidate matrix is compatible when a zero-tightening
    re-dispatch with it frozen is feasible.  Candidates are checked in order
    of increasing metric, so the first compatible one is the grid optimum.
    Only practical for tiny instances.

    Returns (best metric value, number of candidate grid points).
    """
    sys = ensure_system(grid_or_sys)
    grid = sys.grid
    spec = spec if spec.resolved else spec.resolve(grid)
    if spec.model != MODEL_I:
        raise ValueError("the brute-force benchmark is defined for metric model I")
    nR, nS = pattern.shape
    ticks = np.round(np.arange(0.0, 1.0 + alpha_step / 2, alpha_step), 12)
    lo, hi = pattern.bound_arrays()
    feas_opts = opts or SolveOptions()
    candidates = []
    for combo in itertools.product(itertools.product(ticks, repeat=nR - 1), repeat=nS):
        entries = np.zeros((nR, nS))
        ok = True
        for j, col in enumerate(combo):
            head = np.array(col)
            last = 1.0 - head.sum()
            colv = np.append(head, last)
            if np.any(colv < lo[:, j] - 1e-12) or np.any(colv > hi[:, j] + 1e-12):
                ok = False
                break
            entries[:, j] = colv
        if not ok:
            continue
        A = ParticipationMatrix(entries, pattern)
        s2 = line_variances(sys, A, stoch.cov)
        candidates.append((metric_eval(spec, np.zeros(grid.n_lines), s2), A))
    candidates.sort(key=lambda pair: pair[0])
    for val, A in candidates:
        prog = build_reroute(sys, stoch, A, 0.0)
        res = conic.solve(prog, feas_opts)
        if res.status == conic.OPTIMAL:
            return val, len(candidates)
    return float("inf"), len(candidates)
