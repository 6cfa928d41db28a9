"""Physics-informed networks trained with an auxiliary task.

Modules: ``autodiff`` (tape-based reverse mode), ``nets`` (single-task and
two-task architectures), ``pde`` (residuals and losses), ``sampling``,
``optim`` (Adam and the cosine-gated update), ``refsolve`` (reference
solvers and grid files) and ``harness`` (sweeps, metrics, reports).
"""

__version__ = "0.1.0"
