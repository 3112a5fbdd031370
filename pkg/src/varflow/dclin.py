"""Susceptance system, reduced-inverse rows, line factors, DC flows.

The bus susceptance matrix B is the graph Laplacian weighted by line
susceptances.  Removing the reduction (slack) row and column leaves a
positive-definite matrix whose sparse factorization is computed once and
reused for every padded-inverse row and every angle solve.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .grid import Grid, GridError, Line

__all__ = [
    "SusceptanceSystem",
    "LineFactor",
    "build_susceptance",
    "breve_row",
    "line_factor",
    "dc_flows",
    "SingularSystemError",
    "UnbalancedInjectionError",
]

CONSERVATION_TOL = 1e-8


class SingularSystemError(RuntimeError):
    """The reduced susceptance matrix could not be factorized (disconnected grid)."""


class UnbalancedInjectionError(ValueError):
    pass


@dataclass(frozen=True)
class LineFactor:
    line: int           # line index in the grid
    pi: np.ndarray      # n-vector mapping injections to angle difference


class SusceptanceSystem:
    """Factorized DC network ready for repeated solves.

    Read-only after construction; the row cache only ever grows, so
    concurrent reads from multiple threads are safe under CPython.
    """

    def __init__(self, grid: Grid, reduction_bus: int | None = None):
        self.grid = grid
        self.n = grid.n_buses
        self.reduction_bus = grid.slack_bus if reduction_bus is None else reduction_bus
        self.B = _assemble_laplacian(grid)
        self._keep = np.array([i for i in range(self.n) if i != self.reduction_bus])
        b_hat = self.B[np.ix_(self._keep, self._keep)]
        try:
            self._factor = splu(sparse.csc_matrix(b_hat))
        except RuntimeError as exc:
            raise SingularSystemError(str(exc)) from exc
        # splu does not always raise on singular input; a connected grid has
        # a well-conditioned reduced Laplacian, so probe with the all-ones rhs.
        probe = self._factor.solve(np.ones(self.n - 1))
        if not np.all(np.isfinite(probe)):
            raise SingularSystemError("reduced susceptance matrix is singular")
        self._breve_cache: dict[int, np.ndarray] = {}

    def solve_reduced(self, rhs: np.ndarray) -> np.ndarray:
        """Solve B_hat x = rhs (rhs given on non-reduction buses)."""
        return self._factor.solve(np.asarray(rhs, dtype=float))

    def reduce(self, vec: np.ndarray) -> np.ndarray:
        return np.asarray(vec, dtype=float)[self._keep]

    def pad(self, vec: np.ndarray) -> np.ndarray:
        out = np.zeros(self.n)
        out[self._keep] = vec
        return out

    def breve_column(self, k: int) -> np.ndarray:
        """Column k of the padded reduced inverse (equals row k by symmetry)."""
        cached = self._breve_cache.get(k)
        if cached is not None:
            return cached
        if k == self.reduction_bus:
            col = np.zeros(self.n)
        else:
            e = np.zeros(self.n - 1)
            e[np.searchsorted(self._keep, k)] = 1.0
            col = self.pad(self.solve_reduced(e))
        col.setflags(write=False)
        self._breve_cache[k] = col
        return col


def _assemble_laplacian(grid: Grid) -> np.ndarray:
    n = grid.n_buses
    rows, cols, vals = [], [], []
    for ln in grid.lines:
        i, j, b = ln.from_bus, ln.to_bus, ln.susceptance
        rows += [i, j, i, j]
        cols += [i, j, j, i]
        vals += [b, b, -b, -b]
    B = sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).toarray()
    return B


def build_susceptance(grid: Grid, reduction_bus: int | None = None) -> SusceptanceSystem:
    if not grid.is_connected():
        raise GridError("grid graph is disconnected; susceptance system would be singular")
    return SusceptanceSystem(grid, reduction_bus)


def breve_row(sys: SusceptanceSystem, i: int) -> np.ndarray:
    """Row i of the padded inverse of the reduced susceptance matrix."""
    return sys.breve_column(i)  # symmetric


def line_factor(sys: SusceptanceSystem, line: Line | int) -> LineFactor:
    """pi vector for a line: breve row of the from-bus minus the to-bus."""
    if isinstance(line, int):
        idx, ln = line, sys.grid.lines[line]
    else:
        idx, ln = sys.grid.lines.index(line), line
    pi = breve_row(sys, ln.from_bus) - breve_row(sys, ln.to_bus)
    return LineFactor(line=idx, pi=pi)


def dc_flows(sys: SusceptanceSystem, injections: np.ndarray,
             tol: float = CONSERVATION_TOL) -> np.ndarray:
    """Line flows for a balanced injection vector, via one angle solve.

    flow_ij = b_ij (theta_i - theta_j) with theta fixed to 0 at the
    reduction bus; identical to b_ij pi_ij^T injections.
    """
    injections = np.asarray(injections, dtype=float)
    if injections.shape != (sys.n,):
        raise UnbalancedInjectionError(f"injection vector has shape {injections.shape}")
    scale = np.sum(np.abs(injections))
    if abs(np.sum(injections)) > tol * max(scale, 1.0):
        raise UnbalancedInjectionError(
            f"injections sum to {np.sum(injections):.3e} (scale {scale:.3e})")
    theta = sys.pad(sys.solve_reduced(sys.reduce(injections)))
    return np.array([ln.susceptance * (theta[ln.from_bus] - theta[ln.to_bus])
                     for ln in sys.grid.lines])


def angles_for(sys: SusceptanceSystem, injections: np.ndarray) -> np.ndarray:
    """Bus angles with the reduction bus pinned to zero (no balance check)."""
    injections = np.asarray(injections, dtype=float)
    return sys.pad(sys.solve_reduced(sys.reduce(injections)))
