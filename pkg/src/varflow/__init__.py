"""Safety-constrained DC optimal power flow with variance shifting."""

from .grid import Bus, Generator, Grid, Line, ValidationReport, make_figure1_case, validate
from .matpower import parse_matpower, serialize_matpower
from .dclin import SusceptanceSystem, build_susceptance, breve_row, dc_flows, line_factor
from .stochastic import (ParticipationMatrix, PatternK, StochasticModel,
                         gamma_matrix, generation_stats, line_variances,
                         nu_from_epsilon, validate_participation)
from .conic import ConicProgram, SolveOptions, SolveResult, cutting_plane_solve, solve
from .metrics import MetricSpec, metric_eval, select_F
from .formulations import (DispatchSolution, FormulationStats, build_reroute,
                           build_safety_opf, build_vshift, check_compatible,
                           formulation_stats, solve_dcopf, solve_safety_opf,
                           tight_set)
from .shift import (ShiftTrace, brute_force_delta_star, certify_stop, max_step,
                    run_procedure)
from .montecarlo import EmpiricalStats, SampleBatch, sample_omega, simulate, violation_report

__version__ = "0.1.0"
