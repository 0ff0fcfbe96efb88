"""Piecewise nonlinear inverse-law identification for explicit MPC.

The package learns an explicit controller q = F(z) from closed-loop
expert data: the regressor space is partitioned into hyperrectangles,
each carrying an invertible monotone Wiener submodel fitted by weighted
minimax linear programming, and regions are merged afterwards through a
joint LP whose multipliers say which regions can share parameters.
"""

from .basis import (
    BasisConfig,
    MonotoneSubmodel,
    OutputRange,
    alpha,
    basis_deriv,
    basis_eval,
    gamma_eval,
    gamma_inverse,
    verify_monotonicity,
)
from .data import (
    Dataset,
    Sample,
    WeightIndicator,
    gen_synthetic,
    load_dataset,
    save_dataset,
    tag_neighborhoods,
    weight_of,
)
from .fit import FitReport, fit_region, make_report, predict
from .lp import (
    LinearProgram,
    LpSolution,
    build_fit_lp,
    build_joint_lp,
    check_solution,
    solve_lp,
)
from .merge import MergeConfig, MergeOutcome, reduce_regions
from .model import (
    MimoModel,
    ModelFormatError,
    PwnlModel,
    assemble_model,
    eval_mimo,
    load,
    median_eval_latency,
    save,
)
from .partition import (
    Cell,
    FitInputs,
    Hyperrectangle,
    PartitionConfig,
    PartitionResult,
    partition,
)

__version__ = "0.1.0"
