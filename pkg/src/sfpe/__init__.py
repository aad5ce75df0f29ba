"""Monte-Carlo Picard iteration for stochastic fixed point equations

``u(t,x) = E[g(X_T) + int_t^T f(s, X_s, u(s, X_s)) ds]`` with ``X`` an Ito
diffusion, plus numerical checks of the Lyapunov, contraction and
SDE-stability properties that make the iteration well posed.
"""

__version__ = "0.1.0"

from .expr import EvalDomainError, ExprError, parse  # noqa: E402
from .grid import GridFunction, GridSpec  # noqa: E402
from .lyapunov import (LyapunovSpec, check_generator, from_expression, generator_value,  # noqa: E402
                       polynomial_lyapunov, supermartingale_test)
from .problem import Domain, ProblemSpec, TruncationSet, audit_lipschitz, build, membership  # noqa: E402
from .sde import BrownianDriver, PathBatch, simulate, simulate_coupled, stability_gap  # noqa: E402
from .solver import (McConfig, SolveReport, apply_phi, contraction_ratio, decay_diagnostic,  # noqa: E402
                     nested_estimate, picard_solve, weighted_norm)
from ._backend import available as available_backends  # noqa: E402

__all__ = [
    "__version__", "parse", "ExprError", "EvalDomainError", "GridSpec", "GridFunction",
    "LyapunovSpec", "polynomial_lyapunov", "from_expression", "generator_value", "check_generator",
    "supermartingale_test", "Domain", "ProblemSpec", "TruncationSet", "build", "membership",
    "audit_lipschitz", "BrownianDriver", "PathBatch", "simulate", "simulate_coupled", "stability_gap",
    "McConfig", "SolveReport", "apply_phi", "contraction_ratio", "picard_solve", "nested_estimate",
    "decay_diagnostic", "weighted_norm", "available_backends",
]
