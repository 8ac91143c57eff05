"""massflow: mass-conserving recurrent cells over a reverse-mode tape.

The package is organized as one module per concern:

* ``engine``    -- float64 tensors, define-by-run tape, backward, primitives
* ``cells``     -- the conserving cell family, baselines, ablations, checkpoints
* ``tasks``     -- synthetic dataset generators and the columnar dataset file
* ``training``  -- Adam, losses, curriculum, sequence-to-one and rollout trainers
* ``verify``    -- conservation/boundedness checks, stochastic-matrix analysis,
                   gradient checking, runtime benchmarks
* ``cli``       -- ``massflow gen|train|eval|verify|bench``
"""

from . import cells, engine, tasks, training, verify
from .errors import (
    ContractError,
    ConvergenceError,
    DivergenceError,
    DomainError,
    MassflowError,
    ShapeError,
)

__version__ = "0.1.0"

__all__ = [
    "cells",
    "engine",
    "tasks",
    "training",
    "verify",
    "MassflowError",
    "ShapeError",
    "ContractError",
    "DomainError",
    "ConvergenceError",
    "DivergenceError",
    "__version__",
]
