"""Command-line surface: solve, shift, validate, gen-fig1, stats.

Exit codes: 0 success, 1 infeasible problem or flagged violation,
2 input error, 3 solver failure.  JSON artifacts are the machine contract;
the printed tables are cosmetic.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass
from pathlib import Path

import click
import numpy as np

from . import conic, montecarlo
from .conic import SolveOptions
from .formulations import (InfeasibleDispatchError, build_safety_opf,
                           dispatch_from_json, dispatch_to_json, ensure_system,
                           formulation_stats, solve_dcopf, solve_safety_opf,
                           tight_set)
from .grid import GridError, make_figure1_case
from .matpower import MatpowerParseError, parse_matpower, serialize_matpower
from .metrics import MetricSpec, metric_eval
from .shift import run_procedure
from .stochastic import (PatternK, StochasticModelError, dump_stochastic_json,
                         load_stochastic_json)

EXIT_OK = 0
EXIT_INFEASIBLE = 1
EXIT_INPUT = 2
EXIT_SOLVER = 3


@dataclass
class RunConfig:
    case_path: Path
    stoch_path: Path | None
    out_dir: Path
    nu: float
    tau: float = 0.1
    iterations: int = 2
    seed: int = 0
    tol: float = 1e-9
    metric: MetricSpec | None = None

    def __post_init__(self):
        if not self.case_path.exists():
            raise FileNotFoundError(f"case file {self.case_path} does not exist")
        if self.stoch_path is not None and not self.stoch_path.exists():
            raise FileNotFoundError(f"stochastic model {self.stoch_path} does not exist")
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must be in (0, 1), got {self.tau}")
        if self.iterations < 0:
            raise ValueError("iteration count must be >= 0")
        self.out_dir.mkdir(parents=True, exist_ok=True)


def _load_inputs(config: RunConfig):
    grid = parse_matpower(config.case_path.read_text())
    grid = grid.with_safety_params(config.nu)
    stoch = None
    if config.stoch_path is not None:
        stoch = load_stochastic_json(config.stoch_path.read_text(), grid)
        grid = grid.with_participants(
            [b for b in stoch.participants if grid.generator_at(b) is not None])
        grid = grid.with_safety_params(config.nu)
    return grid, stoch


def parse_metric(text: str) -> MetricSpec:
    """Metric spec strings: I, II1:N=<n>, II2:N=<n>, III, composite:N=<n>."""
    head, _, rest = text.partition(":")
    n = 0
    if rest:
        key, _, val = rest.partition("=")
        if key != "N":
            raise ValueError(f"unknown metric argument {key!r}")
        n = int(val)
    names = {"I": "I", "II1": "II_top_flow", "II2": "II_top_variance",
             "III": "III_log_barrier", "composite": "composite"}
    if head not in names:
        raise ValueError(f"unknown metric {head!r}")
    return MetricSpec(model=names[head], N=n)


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


_INPUT_ERRORS = (MatpowerParseError, StochasticModelError, GridError,
                 FileNotFoundError, ValueError, KeyError, json.JSONDecodeError)


@click.group()
def main():
    """Safety-constrained DC-OPF with variance shifting."""


_case_opt = click.option("--case", "case_path", required=True, type=Path,
                         help="MATPOWER case file")
_stoch_opt = click.option("--stoch", "stoch_path", type=Path, default=None,
                          help="stochastic model JSON")
_out_opt = click.option("--out", "out_dir", type=Path, default=Path("."),
                        help="output directory")
_nu_opt = click.option("--nu", type=float, default=3.0, show_default=True,
                       help="safety multiplier applied to lines and participating generators")
_seed_opt = click.option("--seed", type=int, default=0, show_default=True)
_tol_opt = click.option("--tol", type=float, default=1e-9, show_default=True,
                        help="solver convergence tolerance")


@main.command()
@_case_opt
@_stoch_opt
@_out_opt
@_nu_opt
@_tol_opt
@click.option("--mode", type=click.Choice(["dcopf", "safety", "safety-cutting-plane"]),
              default="safety", show_default=True)
@click.option("--psi", type=click.Choice(["unit", "inverse-limit-squared"]),
              default="unit", show_default=True, help="weights of the reported metric")
@click.option("--nonneg/--no-nonneg", default=False, show_default=True,
              help="restrict participation factors to be nonnegative")
def solve(case_path, stoch_path, out_dir, nu, tol, mode, psi, nonneg):
    """Solve a dispatch problem and write solution.json."""
    try:
        config = RunConfig(case_path, stoch_path, out_dir, nu, tol=tol)
        grid, stoch = _load_inputs(config)
        if mode != "dcopf" and stoch is None:
            raise ValueError("--stoch is required for safety modes")
    except _INPUT_ERRORS as exc:
        _fail(EXIT_INPUT, str(exc))
    opts = SolveOptions(tol=tol)
    try:
        if mode == "dcopf":
            sol = solve_dcopf(grid, opts=opts)
        else:
            pattern = PatternK.for_model(stoch, lower=0.0 if nonneg else None)
            method = "direct" if mode == "safety" else "cutting_plane"
            sol = solve_safety_opf(grid, stoch, pattern, opts, method=method)
    except InfeasibleDispatchError as exc:
        code = EXIT_INFEASIBLE if exc.result is not None and \
            exc.result.status == conic.INFEASIBLE else EXIT_SOLVER
        _fail(code, str(exc))
    (config.out_dir / "solution.json").write_text(dispatch_to_json(sol, grid))
    metric = MetricSpec(weights="unit" if psi == "unit" else "inverse_limit_squared")
    metric = metric.resolve(grid)
    click.echo(f"expected cost      {sol.expected_cost:.6f}")
    click.echo(f"variance metric    {metric_eval(metric, sol.f_bar, sol.s2):.6f}")
    if stoch is not None and sol.A is not None:
        n_tight = len(tight_set(sol.f_bar, sol.A, grid, stoch, 0.1))
        click.echo(f"tight lines (10%)  {n_tight}")
    click.echo(f"solution written to {config.out_dir / 'solution.json'}")


@main.command()
@_case_opt
@_stoch_opt
@_out_opt
@_nu_opt
@_tol_opt
@click.option("--solution", "solution_path", type=Path, default=None,
              help="starting dispatch (default: solve the safety problem fresh)")
@click.option("--metric", "metric_text", default="I", show_default=True,
              help="I, II1:N=<n>, II2:N=<n>, III, composite:N=<n>")
@click.option("--psi", type=click.Choice(["unit", "inverse-limit-squared"]),
              default="unit", show_default=True)
@click.option("--tau", type=float, default=0.1, show_default=True)
@click.option("-K", "--iterations", type=int, default=2, show_default=True)
@click.option("--retry-after-stop", is_flag=True, default=False,
              help="halve tau and continue after a non-improving iteration")
@click.option("--nonneg/--no-nonneg", default=False, show_default=True)
def shift(case_path, stoch_path, out_dir, nu, tol, solution_path, metric_text,
          psi, tau, iterations, retry_after_stop, nonneg):
    """Run the variance-shifting procedure; write trace.jsonl and solution.json."""
    try:
        config = RunConfig(case_path, stoch_path, out_dir, nu, tau=tau,
                           iterations=iterations, tol=tol)
        grid, stoch = _load_inputs(config)
        if stoch is None:
            raise ValueError("--stoch is required")
        spec = parse_metric(metric_text)
        weights = "unit" if psi == "unit" else "inverse_limit_squared"
        spec = MetricSpec(model=spec.model, weights=weights, N=spec.N).resolve(grid)
        if solution_path is not None:
            start = dispatch_from_json(solution_path.read_text(), grid)
            if start.A is None:
                raise ValueError("starting solution has no participation factors")
        else:
            start = None
    except _INPUT_ERRORS as exc:
        _fail(EXIT_INPUT, str(exc))
    opts = SolveOptions(tol=tol)
    sys_ = ensure_system(grid)
    try:
        if start is None:
            pattern = PatternK.for_model(stoch, lower=0.0 if nonneg else None)
            start = solve_safety_opf(sys_, stoch, pattern, opts)
        trace = run_procedure(start, spec, tau, iterations, grid_or_sys=sys_,
                              stoch=stoch, opts=opts,
                              retry_after_stop=retry_after_stop)
    except InfeasibleDispatchError as exc:
        code = EXIT_INFEASIBLE if exc.result is not None and \
            exc.result.status == conic.INFEASIBLE else EXIT_SOLVER
        _fail(code, str(exc))
    (config.out_dir / "trace.jsonl").write_text(trace.to_jsonl())
    (config.out_dir / "solution.json").write_text(dispatch_to_json(trace.final, grid))
    click.echo(f"{'k':>3} {'cost':>16} {'metric':>16} {'lambda':>8} {'|T|':>5} {'tau':>7}")
    for r in trace.records:
        lam = f"{r.lam:.4f}" if r.lam is not None else "-"
        nt = str(r.tight_count) if r.tight_count is not None else "-"
        click.echo(f"{r.k:>3} {r.cost:>16.6f} {r.delta:>16.8g} {lam:>8} {nt:>5} {r.tau:>7.4f}")
    click.echo(f"stop reason: {trace.stop_reason}")


@main.command()
@_case_opt
@_stoch_opt
@_out_opt
@_nu_opt
@_seed_opt
@click.option("--solution", "solution_path", type=Path, required=True)
@click.option("--samples", "-N", type=int, default=100_000, show_default=True)
def validate(case_path, stoch_path, out_dir, nu, seed, solution_path, samples):
    """Monte-Carlo validation of a dispatch solution."""
    try:
        config = RunConfig(case_path, stoch_path, out_dir, nu, seed=seed)
        grid, stoch = _load_inputs(config)
        if stoch is None:
            raise ValueError("--stoch is required")
        if not solution_path.exists():
            raise FileNotFoundError(f"solution file {solution_path} does not exist")
        sol = dispatch_from_json(solution_path.read_text(), grid)
        if sol.A is None:
            raise ValueError("solution has no participation factors to simulate")
    except _INPUT_ERRORS as exc:
        _fail(EXIT_INPUT, str(exc))
    batch = montecarlo.sample_omega(stoch, samples, seed)
    stats = montecarlo.simulate(grid, stoch, sol, batch)
    report = montecarlo.violation_report(stats, grid, grid.line_safety_params())
    (config.out_dir / "stats.csv").write_text(stats.to_csv())
    (config.out_dir / "report.json").write_text(report.to_json())
    worst = max((e["rate"] - e["bound"] for e in report.entries), default=0.0)
    click.echo(f"samples            {samples}")
    click.echo(f"mean cost          {stats.mean_cost:.6f}")
    click.echo(f"flagged lines      {report.flagged}")
    click.echo(f"worst rate excess  {worst:.3e}")
    if not report.ok:
        sys.exit(EXIT_INFEASIBLE)


@main.command("gen-fig1")
@click.option("--k", type=int, default=10, show_default=True)
@click.option("--d", "depth", type=int, default=10, show_default=True)
@click.option("--load", "load_mw", type=float, default=800.0, show_default=True)
@click.option("--mu", type=float, default=200.0, show_default=True)
@click.option("--sigma", type=float, default=100.0, show_default=True)
@click.option("--variant", type=click.Choice(["unlimited", "limited"]),
              default="unlimited", show_default=True)
@_out_opt
def gen_fig1(k, depth, load_mw, mu, sigma, variant, out_dir):
    """Write the adversarial example family as case + stochastic model files."""
    try:
        grid, stoch = make_figure1_case(k, depth, load_mw, mu, sigma, variant=variant)
    except GridError as exc:
        _fail(EXIT_INPUT, str(exc))
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "fig1_case.m").write_text(serialize_matpower(grid, name="fig1"))
    (out_dir / "fig1_stoch.json").write_text(dump_stochastic_json(stoch, grid))
    click.echo(f"wrote {out_dir / 'fig1_case.m'} and {out_dir / 'fig1_stoch.json'}")


@main.command()
@_case_opt
@_stoch_opt
@_nu_opt
def stats(case_path, stoch_path, nu):
    """Print the sparse safety-formulation size accounting."""
    try:
        config = RunConfig(case_path, stoch_path, Path("."), nu)
        grid, stoch = _load_inputs(config)
        if stoch is None:
            raise ValueError("--stoch is required")
    except _INPUT_ERRORS as exc:
        _fail(EXIT_INPUT, str(exc))
    prog = build_safety_opf(grid, stoch)
    st = formulation_stats(prog)
    click.echo(json.dumps({
        "n_A_vars": st.n_A_vars, "n_D_vars": st.n_D_vars,
        "n_gamma_vars": st.n_gamma_vars, "n_other_vars": st.n_other_vars,
        "nnz_D_constraints": st.nnz_D_constraints,
        "nnz_conic_constraints": st.nnz_conic_constraints,
    }, indent=2))


if __name__ == "__main__":
    main()
