"""DeepSITH: stacked scale-invariant temporal memory with learnable dense layers."""

from .filterbank import (
    FilterBank,
    FilterSpec,
    KSelectionReport,
    TauStarGrid,
    build_kernels,
    geometric_taus,
    phi,
    select_k,
    std_ratio_objective,
)
from .sith import sith_backward, sith_forward

__version__ = "0.1.0"
