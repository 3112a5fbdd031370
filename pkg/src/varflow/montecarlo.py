"""Empirical validation of dispatches by sampling the fluctuation model.

Draws zero-mean Gaussian fluctuations with the configured covariance
(counter-based RNG so parallel workers could split streams reproducibly),
propagates each sample through the affine balancing law, and accumulates
per-line and per-generator statistics with mergeable (count, mean, M2)
accumulators.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .formulations import DispatchSolution, ensure_system
from .stochastic import StochasticModel

__all__ = [
    "SampleBatch",
    "EmpiricalStats",
    "StreamingMoments",
    "sample_omega",
    "simulate",
    "violation_report",
    "ViolationReport",
]

BALANCE_SAMPLE_TOL = 1e-9


@dataclass(frozen=True)
class SampleBatch:
    omega: np.ndarray          # n_samples x |S|
    seed: int
    distribution: str = "gaussian"

    @property
    def n_samples(self) -> int:
        return self.omega.shape[0]


def sample_omega(stoch: StochasticModel, n_samples: int, seed: int) -> SampleBatch:
    """Zero-mean Gaussian draws with the model covariance.

    Uses the symmetric PSD square root, so rank-deficient covariances
    produce draws supported on the right subspace.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    z = rng.standard_normal((n_samples, stoch.n_sources))
    omega = z @ stoch.cov_factor  # factor is symmetric
    return SampleBatch(omega=omega, seed=seed)


class StreamingMoments:
    """Mergeable running (count, mean, M2) over vector observations."""

    def __init__(self, dim: int):
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def update(self, batch: np.ndarray) -> None:
        other = StreamingMoments(batch.shape[1])
        other.count = batch.shape[0]
        other.mean = batch.mean(axis=0)
        other.m2 = ((batch - other.mean) ** 2).sum(axis=0)
        self.merge(other)

    def merge(self, other: "StreamingMoments") -> None:
        if other.count == 0:
            return
        if self.count == 0:
            self.count, self.mean, self.m2 = other.count, other.mean.copy(), other.m2.copy()
            return
        total = self.count + other.count
        delta = other.mean - self.mean
        self.m2 = self.m2 + other.m2 + delta ** 2 * (self.count * other.count / total)
        self.mean = self.mean + delta * (other.count / total)
        self.count = total

    def variance(self) -> np.ndarray:
        if self.count < 2:
            return np.zeros_like(self.m2)
        return self.m2 / (self.count - 1)


@dataclass
class EmpiricalStats:
    line_mean: np.ndarray
    line_variance: np.ndarray
    line_violation_rate: np.ndarray
    gen_mean: np.ndarray
    gen_variance: np.ndarray
    gen_bound_violation_rate: np.ndarray
    mean_cost: float
    n_samples: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["line_id", "mean", "variance", "violation_rate"])
        for i in range(len(self.line_mean)):
            w.writerow([i, repr(float(self.line_mean[i])),
                        repr(float(self.line_variance[i])),
                        repr(float(self.line_violation_rate[i]))])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({
            "n_samples": self.n_samples,
            "mean_cost": self.mean_cost,
            "line_mean": [float(x) for x in self.line_mean],
            "line_variance": [float(x) for x in self.line_variance],
            "line_violation_rate": [float(x) for x in self.line_violation_rate],
            "gen_mean": [float(x) for x in self.gen_mean],
            "gen_variance": [float(x) for x in self.gen_variance],
            "gen_bound_violation_rate": [float(x) for x in self.gen_bound_violation_rate],
        }, indent=2)


def simulate(grid_or_sys, stoch: StochasticModel, solution: DispatchSolution,
             batch: SampleBatch, chunk: int = 16384) -> EmpiricalStats:
    """Propagate every sample through the balancing law and aggregate.

    Per sample, each participant offsets its share of the fluctuations, so
    net injections stay balanced exactly; a residual beyond tolerance means
    the participation matrix was corrupted upstream and is reported as an
    error rather than silently absorbed.
    """
    sys = ensure_system(grid_or_sys)
    grid = sys.grid
    if solution.A is None:
        raise ValueError("solution carries no participation matrix")
    A = solution.A
    n, m = grid.n_buses, grid.n_lines
    sources = list(A.sources)
    participants = list(A.participants)
    gens = grid.generators

    # line factors stacked once: flows = injections @ Pi^T (scaled by b)
    Pi = np.zeros((m, n))
    for li, ln in enumerate(grid.lines):
        Pi[li] = ln.susceptance * (sys.breve_column(ln.from_bus) - sys.breve_column(ln.to_bus))

    base = solution.p_bar - grid.loads() + stoch.mu_full(n)
    f_base = Pi @ base
    limits = grid.line_limits()

    line_acc = StreamingMoments(m)
    gen_acc = StreamingMoments(len(gens))
    line_viol = np.zeros(m, dtype=np.int64)
    gen_viol = np.zeros(len(gens), dtype=np.int64)
    cost_acc = StreamingMoments(1)
    gen_rows = np.array([A.row_for_bus(g.bus) for g in gens])  # |G| x |S|
    p_gen_base = np.array([solution.p_bar[g.bus] for g in gens])
    c0 = np.array([g.cost_c0 for g in gens])
    c1 = np.array([g.cost_c1 for g in gens])
    c2 = sum(g.cost_c2 for g in gens)
    pmin = np.array([g.p_min for g in gens])
    pmax = np.array([g.p_max for g in gens])

    for start in range(0, batch.n_samples, chunk):
        om = batch.omega[start:start + chunk]          # N x |S|
        resp = om @ A.entries.T                        # N x |R|
        inj = np.zeros((om.shape[0], n))
        inj[:, sources] += om
        inj[:, participants] -= resp
        residual = np.abs(inj.sum(axis=1))
        scale = 1.0 + np.abs(om).sum(axis=1)
        if np.any(residual > BALANCE_SAMPLE_TOL * scale):
            raise ArithmeticError(
                f"sample imbalance {residual.max():.3e}; participation column sums broken")
        flows = f_base + inj @ Pi.T
        line_acc.update(flows)
        line_viol += (np.abs(flows) > limits).sum(axis=0)
        p_gen = p_gen_base - om @ gen_rows.T
        gen_acc.update(p_gen)
        gen_viol += ((p_gen < pmin - 1e-12) | (p_gen > pmax + 1e-12)).sum(axis=0)
        cost = (c0 * p_gen ** 2 + c1 * p_gen).sum(axis=1) + c2
        cost_acc.update(cost[:, None])

    N = batch.n_samples
    return EmpiricalStats(
        line_mean=line_acc.mean, line_variance=line_acc.variance(),
        line_violation_rate=line_viol / N,
        gen_mean=gen_acc.mean, gen_variance=gen_acc.variance(),
        gen_bound_violation_rate=gen_viol / N,
        mean_cost=float(cost_acc.mean[0]), n_samples=N)


@dataclass
class ViolationReport:
    ok: bool
    flagged: list[int] = field(default_factory=list)
    entries: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"ok": self.ok, "flagged": self.flagged,
                           "lines": self.entries}, indent=2)


def violation_report(stats: EmpiricalStats, grid, nu_used: np.ndarray) -> ViolationReport:
    """Compare empirical per-line violation rates to the Gaussian targets.

    A line with safety multiplier nu targets epsilon = 1 - Phi(nu); it is
    flagged when the empirical rate exceeds epsilon + 3 sqrt(epsilon / N).
    """
    from scipy.special import ndtr

    nu_used = np.asarray(nu_used, dtype=float)
    N = stats.n_samples
    entries = []
    flagged = []
    for li in range(len(stats.line_violation_rate)):
        eps = float(1.0 - ndtr(nu_used[li]))
        rate = float(stats.line_violation_rate[li])
        bound = float(eps + 3.0 * np.sqrt(eps / N)) if eps > 0 else 0.0
        bad = bool(rate > bound)
        entries.append({"line": li, "rate": rate, "epsilon": eps, "bound": bound,
                        "flagged": bad})
        if bad:
            flagged.append(li)
    return ViolationReport(ok=not flagged, flagged=flagged, entries=entries)
