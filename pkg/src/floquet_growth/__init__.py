"""Growth rates of age-structured dividing populations under periodic forcing."""
from .discrete_limit import (compute_Ka, compute_Na, lambda_infinity, rate_bound, scan_E_tau,
                             simulate_jump_process, staircase, step_interval)
from .exact_models import (BirthPhaseKernel, TwoPhaseRates, constant_psi_lambda, counterexample_lambda,
                           counterexample_surface, expm2, renewal_lambda, renewal_rho)
from .generational import S_closed_form, S_tail, solve_generations, stochastic_order_check
from .model_core import (Constant, DensityField, DivisionKernel, Grid, One, ShiftedSquareWave, SquareWave,
                         Tabulated, check_monotonicity_condition, load_model)
from .pde_solver import adjoint_floquet, evolve, floquet_eigen, monodromy, step

__version__ = "0.1.0"
