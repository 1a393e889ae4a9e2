"""Nonequilibrium work identities: sampling, estimation and exact finite-state checks."""
__version__ = "0.1.0"

from ._accel import backend
from .errors import (AlignmentError, ConfigError, DomainError, EstimationError, EvaluationError,
                     IntegrabilityError, KernelRefusedError, NeqworkError, ObservableError, SizeError,
                     StatisticsError)
from .hamiltonian import (FiniteStateModel, HamiltonianModel, build_model, canonical_expectation,
                          energy_table, free_energy_difference, harmonic_center, harmonic_stiffness,
                          two_state)
from .protocol import Protocol, StepProtocol, step_approximation
from .kernel import (BrokenFiniteKernel, BrokenMetropolisKernel, FiniteMetropolisKernel, MetropolisKernel,
                     SamplerConfig, build_kernel, sample_trajectory)
from .work import batch_work, work_bochkov_kuzovlev, work_jarzynski
from .estimator import (EstimatorReport, bk_estimate, convergence_study, jarzynski_estimate,
                        weighted_observable_estimate)
from .oracle import (brute_force_path_enumeration, exact_bk_average, exact_exponential_work_average,
                     metropolis_matrix)
