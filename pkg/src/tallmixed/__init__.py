"""Random-intercept GLMMs for tall clustered data.

Four routes to the same model: a full adaptive-quadrature fit, an exact
weighted fit on collapsed data, per-cluster fits pooled by meta-analysis,
and sequential D-optimal subsampling.
"""

from .data import (ColumnSchema, CollapsedDataset, DataError, Dataset, DesignGrid, SchemaError,
                   assign_designs, bin_continuous, collapse, enumerate_designs, load_csv,
                   load_schema, observed_grid, parse_schema, partition_by_practice, standardize)
from .families import Family, parse_family
from .glm import GlmFit, RankDeficientError, glm_fit
from .glmm import GlmmFit, QuadratureError, fitted_values, glmm_fit, marginal_loglik
from .kernels import BACKEND
from .meta import (MetaResult, PracticeEstimate, aggregate_dispersion, fit_per_practice, mv_meta,
                   uni_meta, uni_meta_all)
from .model import GlmmSpec, GlmSpec, parse_formula
from .subsample import SubsampleMode, SubsampleState, run as subsample_run

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "CollapsedDataset", "ColumnSchema", "DataError", "Dataset", "DesignGrid", "Family",
    "GlmFit", "GlmSpec", "GlmmFit", "GlmmSpec", "MetaResult", "PracticeEstimate", "QuadratureError",
    "RankDeficientError", "SchemaError", "SubsampleMode", "SubsampleState", "aggregate_dispersion",
    "assign_designs", "bin_continuous", "collapse", "enumerate_designs", "fit_per_practice",
    "fitted_values", "glm_fit", "glmm_fit", "load_csv", "load_schema", "marginal_loglik", "mv_meta",
    "observed_grid", "parse_family", "parse_formula", "parse_schema", "partition_by_practice",
    "standardize", "subsample_run", "uni_meta", "uni_meta_all",
]
