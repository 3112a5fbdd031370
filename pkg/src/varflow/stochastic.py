"""Stochastic injections, participation factors, and closed-form variances.

A fluctuation vector omega (zero mean, covariance Omega supported on the
source buses) is balanced by an affine response: each participating bus i
offsets sum_j alpha_ij * omega_j.  Exact balancing for every omega requires
each source's participation column to sum to one.  With that structure the
flow variance on every line has two equivalent closed forms:

* the gamma form, built from the padded-inverse response matrix D, and
* the pi form, built directly from the line factors.

Both are implemented; the gamma form is the production path (it reuses D),
the pi form is the audit path.  Their agreement is distribution-free.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import special

from .dclin import SusceptanceSystem, breve_row
from .grid import Generator, Grid

__all__ = [
    "StochasticModel",
    "PatternK",
    "ParticipationMatrix",
    "ParticipationReport",
    "validate_participation",
    "gamma_matrix",
    "line_variances",
    "generation_stats",
    "nu_from_epsilon",
    "load_stochastic_json",
    "dump_stochastic_json",
]

PSD_TOL = 1e-10
COLUMN_SUM_TOL = 1e-9


class StochasticModelError(ValueError):
    pass


@dataclass(frozen=True)
class StochasticModel:
    """Sources with means and covariance, plus the balancing participant set."""

    sources: tuple[int, ...]
    mu: np.ndarray                 # |S| means, MW
    cov: np.ndarray                # |S| x |S| covariance, MW^2
    participants: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(int(s) for s in self.sources))
        object.__setattr__(self, "participants", tuple(int(p) for p in self.participants))
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        ns = len(self.sources)
        if len(set(self.sources)) != ns:
            raise StochasticModelError("duplicate source buses")
        if len(set(self.participants)) != len(self.participants):
            raise StochasticModelError("duplicate participant buses")
        if mu.shape != (ns,):
            raise StochasticModelError(f"mu has shape {mu.shape}, expected ({ns},)")
        if cov.shape != (ns, ns):
            raise StochasticModelError(f"cov has shape {cov.shape}, expected ({ns},{ns})")
        scale = np.max(np.abs(cov)) if ns else 0.0
        if ns and np.max(np.abs(cov - cov.T)) > PSD_TOL * max(scale, 1.0):
            raise StochasticModelError("covariance is not symmetric")
        cov = 0.5 * (cov + cov.T)
        if ns:
            eigmin = float(np.linalg.eigvalsh(cov)[0])
            if eigmin < -PSD_TOL * max(scale, 1.0):
                raise StochasticModelError(f"covariance has negative eigenvalue {eigmin:.3e}")
        cov.setflags(write=False)
        mu.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "cov", cov)

    @property
    def n_sources(self) -> int:
        return len(self.sources)

    @property
    def n_participants(self) -> int:
        return len(self.participants)

    def mu_full(self, n: int) -> np.ndarray:
        out = np.zeros(n)
        out[list(self.sources)] = self.mu
        return out

    @cached_property
    def cov_factor(self) -> np.ndarray:
        """Symmetric PSD square root F with F @ F = cov.

        Eigendecomposition rather than a triangular factorization: data-driven
        covariances are often rank deficient and mild negative eigenvalues are
        clipped to zero (with a warning) instead of failing.
        """
        if self.n_sources == 0:
            return np.zeros((0, 0))
        w, v = np.linalg.eigh(self.cov)
        scale = max(float(w[-1]), 0.0)
        if np.any(w < -PSD_TOL * max(scale, 1.0)):
            raise StochasticModelError("covariance is not PSD")
        if np.any(w < 0):
            warnings.warn("clipping slightly negative covariance eigenvalues to 0")
        w = np.clip(w, 0.0, None)
        return (v * np.sqrt(w)) @ v.T

    def quad_form(self, row: np.ndarray) -> float:
        """row @ cov @ row, guarded against tiny negative roundoff."""
        return max(float(row @ self.cov @ row), 0.0)


@dataclass(frozen=True)
class PatternK:
    """Structure of the allowed participation matrices.

    policy "free" leaves entries unconstrained beyond the column sums;
    "global" forces each participant to respond identically to every source.
    Optional elementwise bounds (broadcastable to |R| x |S|) cover the
    nonnegative-response convention used by the worked examples.
    """

    participants: tuple[int, ...]
    sources: tuple[int, ...]
    policy: str = "free"
    lower: np.ndarray | float | None = None
    upper: np.ndarray | float | None = None

    def __post_init__(self):
        if self.policy not in ("free", "global"):
            raise StochasticModelError(f"unknown policy {self.policy!r}")
        object.__setattr__(self, "participants", tuple(int(p) for p in self.participants))
        object.__setattr__(self, "sources", tuple(int(s) for s in self.sources))

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.participants), len(self.sources)

    def bound_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.full(self.shape, -np.inf) if self.lower is None else \
            np.broadcast_to(np.asarray(self.lower, dtype=float), self.shape).copy()
        hi = np.full(self.shape, np.inf) if self.upper is None else \
            np.broadcast_to(np.asarray(self.upper, dtype=float), self.shape).copy()
        return lo, hi

    @staticmethod
    def for_model(stoch: StochasticModel, policy: str = "free",
                  lower=None, upper=None) -> "PatternK":
        return PatternK(stoch.participants, stoch.sources, policy, lower, upper)


@dataclass(frozen=True)
class ParticipationMatrix:
    """Dense |R| x |S| participation factors with their pattern."""

    entries: np.ndarray
    pattern: PatternK

    def __post_init__(self):
        entries = np.atleast_2d(np.asarray(self.entries, dtype=float))
        if entries.shape != self.pattern.shape:
            raise StochasticModelError(
                f"entries shape {entries.shape} does not match pattern {self.pattern.shape}")
        entries = entries.copy()
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)

    @property
    def participants(self) -> tuple[int, ...]:
        return self.pattern.participants

    @property
    def sources(self) -> tuple[int, ...]:
        return self.pattern.sources

    def row_for_bus(self, bus: int) -> np.ndarray:
        """Participation row of a bus; zero row if the bus does not participate."""
        try:
            r = self.pattern.participants.index(bus)
        except ValueError:
            return np.zeros(len(self.pattern.sources))
        return self.entries[r]

    def padded(self, n: int) -> np.ndarray:
        """Full n x n matrix, zero outside participants x sources."""
        out = np.zeros((n, n))
        out[np.ix_(list(self.participants), list(self.sources))] = self.entries
        return out

    def blend(self, other: "ParticipationMatrix", t: float) -> "ParticipationMatrix":
        """(1 - t) * self + t * other; patterns must match."""
        if other.pattern.participants != self.pattern.participants or \
                other.pattern.sources != self.pattern.sources:
            raise StochasticModelError("cannot blend participation matrices with different patterns")
        return ParticipationMatrix((1.0 - t) * self.entries + t * other.entries, self.pattern)


@dataclass
class ParticipationReport:
    ok: bool
    violations: list[tuple[str, str]] = field(default_factory=list)


def validate_participation(A: ParticipationMatrix,
                           tol: float = COLUMN_SUM_TOL) -> ParticipationReport:
    """Check column sums, bounds, and (if requested) the global policy."""
    violations: list[tuple[str, str]] = []
    col_sums = A.entries.sum(axis=0)
    for j, s in enumerate(col_sums):
        if abs(s - 1.0) > tol:
            violations.append(("column_sum",
                               f"source {A.sources[j]}: participation sums to {s!r}"))
    lo, hi = A.pattern.bound_arrays()
    if np.any(A.entries < lo - tol) or np.any(A.entries > hi + tol):
        violations.append(("bounds", "participation entry outside configured bounds"))
    if A.pattern.policy == "global" and A.entries.shape[1] > 1:
        spread = np.max(A.entries, axis=1) - np.min(A.entries, axis=1)
        for r, s in enumerate(spread):
            if s > tol:
                violations.append(("global_policy",
                                   f"participant {A.participants[r]}: responses differ by {s:.3e}"))
    return ParticipationReport(ok=not violations, violations=violations)


def gamma_matrix(sys: SusceptanceSystem,
                 A: ParticipationMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Response matrix D (n x |S|) and per-line gamma rows (m x |S|).

    D column k is the padded-inverse image of participation column k; the
    gamma entry for line ij and source k is the line factor at k corrected
    by the response difference D_ik - D_jk.
    """
    n, m = sys.n, sys.grid.n_lines
    ns = len(A.sources)
    D = np.zeros((n, ns))
    for r, p_bus in enumerate(A.participants):
        col = sys.breve_column(p_bus)
        D += np.outer(col, A.entries[r])
    gamma = np.zeros((m, ns))
    for li, ln in enumerate(sys.grid.lines):
        pi_src = np.array([sys.breve_column(k)[ln.from_bus] - sys.breve_column(k)[ln.to_bus]
                           for k in A.sources])
        gamma[li] = pi_src - D[ln.from_bus] + D[ln.to_bus]
    return D, gamma


def line_variances(sys: SusceptanceSystem, A: ParticipationMatrix,
                   omega_cov: np.ndarray, method: str = "gamma_form") -> np.ndarray:
    """Per-line flow variances under the affine balancing law.

    method "gamma_form" goes through D and gamma; "pi_form" evaluates
    b^2 pi^T (I - A) Omega (I - A^T) pi directly.  The two agree for any
    distribution with the given covariance.
    """
    omega_cov = np.atleast_2d(np.asarray(omega_cov, dtype=float))
    b = sys.grid.line_susceptances()
    if method == "gamma_form":
        _, gamma = gamma_matrix(sys, A)
        var = b ** 2 * np.einsum("lk,kj,lj->l", gamma, omega_cov, gamma)
    elif method == "pi_form":
        m = sys.grid.n_lines
        var = np.zeros(m)
        for li, ln in enumerate(sys.grid.lines):
            pi = breve_row(sys, ln.from_bus) - breve_row(sys, ln.to_bus)
            w = pi[list(A.sources)] - A.entries.T @ pi[list(A.participants)]
            var[li] = b[li] ** 2 * float(w @ omega_cov @ w)
    else:
        raise ValueError(f"unknown method {method!r}")
    scale = max(float(np.max(np.abs(var))), 1.0)
    if np.min(var) < -1e-9 * scale:
        raise ArithmeticError(f"negative line variance {np.min(var):.3e}")
    return np.clip(var, 0.0, None)


def generation_stats(A: ParticipationMatrix, omega_cov: np.ndarray,
                     gen: Generator, p_bar: float) -> tuple[float, float]:
    """Output variance and expected cost of one generator.

    Var(p_i) is the quadratic form of its participation row in the source
    covariance; the expected quadratic cost picks up that variance times the
    quadratic coefficient.
    """
    row = A.row_for_bus(gen.bus)
    omega_cov = np.atleast_2d(np.asarray(omega_cov, dtype=float))
    var = max(float(row @ omega_cov @ row), 0.0)
    cost = gen.cost_c0 * (p_bar ** 2 + var) + gen.cost_c1 * p_bar + gen.cost_c2
    return var, cost


def expected_total_cost(grid: Grid, A: ParticipationMatrix | None,
                        omega_cov: np.ndarray | None, p_bar: np.ndarray) -> float:
    total = 0.0
    for g in grid.generators:
        if A is None or omega_cov is None:
            total += g.cost(float(p_bar[g.bus]))
        else:
            total += generation_stats(A, omega_cov, g, float(p_bar[g.bus]))[1]
    return total


def nu_from_epsilon(epsilon: float) -> float:
    """Safety multiplier equivalent to a violation probability under Gaussian noise."""
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must be in (0, 1), got {epsilon}")
    return float(special.ndtri(1.0 - epsilon))


def load_stochastic_json(text: str, grid: Grid) -> StochasticModel:
    """Read the stochastic-model file (bus references use case-file labels).

    Schema: {"sources": [{"bus", "mean", "std"}], "correlation": matrix or
    "identity", "participants": [bus]}; the covariance is assembled as
    diag(std) @ corr @ diag(std).
    """
    data = json.loads(text)
    label_to_index = {b.label: b.index for b in grid.buses}

    def to_index(label):
        if label not in label_to_index:
            raise StochasticModelError(f"stochastic model references unknown bus {label}")
        return label_to_index[label]

    sources = [to_index(s["bus"]) for s in data["sources"]]
    mu = np.array([float(s["mean"]) for s in data["sources"]])
    std = np.array([float(s["std"]) for s in data["sources"]])
    corr = data.get("correlation", "identity")
    if isinstance(corr, str):
        if corr != "identity":
            raise StochasticModelError(f"unknown correlation spec {corr!r}")
        corr_m = np.eye(len(sources))
    else:
        corr_m = np.asarray(corr, dtype=float)
    cov = np.diag(std) @ corr_m @ np.diag(std)
    participants = [to_index(p) for p in data["participants"]]
    return StochasticModel(tuple(sources), mu, cov, tuple(participants))


def dump_stochastic_json(stoch: StochasticModel, grid: Grid) -> str:
    std = np.sqrt(np.clip(np.diag(stoch.cov), 0.0, None))
    with np.errstate(invalid="ignore", divide="ignore"):
        denom = np.outer(std, std)
        corr = np.where(denom > 0, stoch.cov / np.where(denom == 0, 1.0, denom), 0.0)
    np.fill_diagonal(corr, 1.0)
    is_identity = np.allclose(corr, np.eye(stoch.n_sources), atol=1e-12)
    data = {
        "sources": [
            {"bus": grid.buses[s].label, "mean": float(m), "std": float(sd)}
            for s, m, sd in zip(stoch.sources, stoch.mu, std)
        ],
        "correlation": "identity" if is_identity else corr.tolist(),
        "participants": [grid.buses[p].label for p in stoch.participants],
    }
    return json.dumps(data, indent=2)
