"""Value mirror descent for tabular discounted MDPs, deterministic and stochastic."""
from __future__ import annotations

from ._util import AuditError
from .garnet import GarnetSpec, generate_garnet
from .generative import EmpiricalKernel, GenerativeModel, sample_empirical_kernel, vr_assemble
from .mdp import (ConvergenceError, Reference, TabularMdp, bellman_optimal, bellman_policy, evaluate_policy_exact,
                  load_mdp, reference_solution, save_mdp, two_state_chain, validate_mdp, value_iteration)
from .prox import (EUCLIDEAN, KL, ZERO, ProxGeometry, Regularizer, d0_bound, divergence, kkt_residual, negentropy,
                   parse_geometry, parse_regularizer, prox_step, tsallis)
from .svmd import RunRecord, run_svmd, run_svmd_sc, sc_schedule, svmd_schedule
from .variance import (bernstein_bound, concentration_selftest, hoeffding_bound, one_step_variance,
                       policy_variance, solve_return_variance, total_variance_check)
from .vmd import VmdSchedule, VmdTrace, run_vmd, vmd_schedule

__version__ = "0.1.0"
